//! Service request/response bodies for the Discovery, SecureChannel,
//! Session and Attribute subsets, plus the transport-level Hello /
//! Acknowledge / Error bodies.
//!
//! Every body encodes as a type node id (standard binary-encoding ids)
//! followed by its fields; Hello/Acknowledge/Error encode bare, without a
//! node id, as the transport layer mandates. Unrecognized but well-formed
//! type ids decode to [`ServiceBody::Unknown`] so intermediaries can
//! forward services they do not model.

use serde::{Deserialize, Serialize};

use super::builtin::{
    read_variant, write_byte_string, write_i32, write_string, write_u32, write_variant,
    LocalizedText, NodeId, Reader, UaByteString, UaString, Value,
};
use super::{write_localized_text, write_node_id, CodecError, MAX_ARRAY_LEN};
use crate::status::StatusCode;

/// Standard binary-encoding type ids for the supported services.
pub mod type_ids {
    pub const SERVICE_FAULT: u32 = 397;
    pub const FIND_SERVERS_REQUEST: u32 = 422;
    pub const FIND_SERVERS_RESPONSE: u32 = 425;
    pub const GET_ENDPOINTS_REQUEST: u32 = 428;
    pub const GET_ENDPOINTS_RESPONSE: u32 = 431;
    pub const OPEN_SECURE_CHANNEL_REQUEST: u32 = 446;
    pub const OPEN_SECURE_CHANNEL_RESPONSE: u32 = 449;
    pub const CLOSE_SECURE_CHANNEL_REQUEST: u32 = 452;
    pub const CREATE_SESSION_REQUEST: u32 = 461;
    pub const CREATE_SESSION_RESPONSE: u32 = 464;
    pub const ACTIVATE_SESSION_REQUEST: u32 = 467;
    pub const ACTIVATE_SESSION_RESPONSE: u32 = 470;
    pub const CLOSE_SESSION_REQUEST: u32 = 473;
    pub const CLOSE_SESSION_RESPONSE: u32 = 476;
    pub const READ_REQUEST: u32 = 631;
    pub const READ_RESPONSE: u32 = 634;
    pub const WRITE_REQUEST: u32 = 673;
    pub const WRITE_RESPONSE: u32 = 676;

    pub const ANONYMOUS_IDENTITY_TOKEN: u32 = 321;
    pub const USERNAME_IDENTITY_TOKEN: u32 = 324;
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum SecurityMode {
    None,
    Sign,
    SignAndEncrypt,
}

impl SecurityMode {
    pub fn wire(self) -> u32 {
        match self {
            SecurityMode::None => 1,
            SecurityMode::Sign => 2,
            SecurityMode::SignAndEncrypt => 3,
        }
    }

    pub fn from_wire(v: u32) -> Option<Self> {
        Some(match v {
            1 => SecurityMode::None,
            2 => SecurityMode::Sign,
            3 => SecurityMode::SignAndEncrypt,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum UserTokenType {
    Anonymous,
    UserName,
    Certificate,
}

impl UserTokenType {
    pub fn wire(self) -> u32 {
        match self {
            UserTokenType::Anonymous => 0,
            UserTokenType::UserName => 1,
            UserTokenType::Certificate => 2,
        }
    }

    pub fn from_wire(v: u32) -> Option<Self> {
        Some(match v {
            0 => UserTokenType::Anonymous,
            1 => UserTokenType::UserName,
            2 => UserTokenType::Certificate,
            _ => return None,
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct ApplicationDescription {
    pub application_uri: UaString,
    pub product_uri: UaString,
    pub application_name: LocalizedText,
    /// 0 = server, 1 = client, 2 = both (we only ever emit 0).
    pub application_type: u32,
    pub discovery_urls: Vec<UaString>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct UserTokenPolicy {
    pub policy_id: UaString,
    pub token_type: UserTokenType,
    /// Security policy protecting the token itself; null means "same as
    /// the channel".
    pub security_policy_uri: UaString,
}

/// One advertised server endpoint, as returned by GetEndpoints.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct EndpointDescription {
    pub endpoint_url: UaString,
    pub server: ApplicationDescription,
    pub server_certificate: UaByteString,
    pub security_mode: SecurityMode,
    pub security_policy_uri: UaString,
    pub user_identity_tokens: Vec<UserTokenPolicy>,
    pub security_level: u8,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum UserIdentityToken {
    Anonymous {
        policy_id: UaString,
    },
    UserName {
        policy_id: UaString,
        username: UaString,
        /// Either the RSA-OAEP token secret or the plaintext password,
        /// depending on `encryption_algorithm`.
        password: UaByteString,
        /// Empty string means the password travels in plaintext.
        encryption_algorithm: UaString,
    },
}

/// Request header carried by every service request.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct RequestHeader {
    /// Session authentication token; empty until a session is activated.
    pub auth_token: UaByteString,
    pub request_handle: u32,
}

/// Response header carried by every service response.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ResponseHeader {
    pub request_handle: u32,
    pub service_result: StatusCode,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub receive_buffer_size: u32,
    pub send_buffer_size: u32,
    pub max_message_size: u32,
    pub max_chunk_count: u32,
    pub endpoint_url: UaString,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Acknowledge {
    pub protocol_version: u32,
    pub receive_buffer_size: u32,
    pub send_buffer_size: u32,
    pub max_message_size: u32,
    pub max_chunk_count: u32,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub error: StatusCode,
    pub reason: UaString,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct FindServersRequest {
    pub header: RequestHeader,
    pub endpoint_url: UaString,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct FindServersResponse {
    pub header: ResponseHeader,
    pub servers: Vec<ApplicationDescription>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct GetEndpointsRequest {
    pub header: RequestHeader,
    pub endpoint_url: UaString,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct GetEndpointsResponse {
    pub header: ResponseHeader,
    pub endpoints: Vec<EndpointDescription>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct OpenSecureChannelRequest {
    pub header: RequestHeader,
    pub client_protocol_version: u32,
    /// 0 = issue; token renewal is out of scope but the field stays on
    /// the wire.
    pub request_type: u32,
    pub security_mode: SecurityMode,
    pub client_nonce: UaByteString,
    pub requested_lifetime_ms: u32,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct OpenSecureChannelResponse {
    pub header: ResponseHeader,
    pub server_protocol_version: u32,
    pub channel_id: u32,
    pub token_id: u32,
    pub token_lifetime_ms: u32,
    pub server_nonce: UaByteString,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub header: RequestHeader,
    pub endpoint_url: UaString,
    pub session_name: UaString,
    pub client_nonce: UaByteString,
    pub client_certificate: UaByteString,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub header: ResponseHeader,
    pub session_id: NodeId,
    pub auth_token: UaByteString,
    pub server_nonce: UaByteString,
    pub server_certificate: UaByteString,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ActivateSessionRequest {
    pub header: RequestHeader,
    pub user_identity_token: UserIdentityToken,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ActivateSessionResponse {
    pub header: ResponseHeader,
    pub server_nonce: UaByteString,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ReadRequest {
    pub header: RequestHeader,
    pub nodes: Vec<NodeId>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ReadResult {
    pub status: StatusCode,
    pub value: Option<Value>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ReadResponse {
    pub header: ResponseHeader,
    pub results: Vec<ReadResult>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct WriteValue {
    pub node: NodeId,
    pub value: Value,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct WriteRequest {
    pub header: RequestHeader,
    pub writes: Vec<WriteValue>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct WriteResponse {
    pub header: ResponseHeader,
    pub results: Vec<StatusCode>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CloseSessionRequest {
    pub header: RequestHeader,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CloseSessionResponse {
    pub header: ResponseHeader,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CloseSecureChannelRequest {
    pub header: RequestHeader,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ServiceFault {
    pub header: ResponseHeader,
}

/// Every message body this stack can carry.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ServiceBody {
    Hello(Hello),
    Acknowledge(Acknowledge),
    Error(ErrorMessage),
    FindServersRequest(FindServersRequest),
    FindServersResponse(FindServersResponse),
    GetEndpointsRequest(GetEndpointsRequest),
    GetEndpointsResponse(GetEndpointsResponse),
    OpenSecureChannelRequest(OpenSecureChannelRequest),
    OpenSecureChannelResponse(OpenSecureChannelResponse),
    CloseSecureChannelRequest(CloseSecureChannelRequest),
    CreateSessionRequest(CreateSessionRequest),
    CreateSessionResponse(CreateSessionResponse),
    ActivateSessionRequest(ActivateSessionRequest),
    ActivateSessionResponse(ActivateSessionResponse),
    ReadRequest(ReadRequest),
    ReadResponse(ReadResponse),
    WriteRequest(WriteRequest),
    WriteResponse(WriteResponse),
    CloseSessionRequest(CloseSessionRequest),
    CloseSessionResponse(CloseSessionResponse),
    ServiceFault(ServiceFault),
    /// A body whose type id we do not model: the node id plus the raw
    /// remainder, preserved verbatim for forwarding.
    Unknown { node_id: NodeId, raw: Vec<u8> },
}

impl ServiceBody {
    /// True for the transport-level bodies that encode without a node id.
    pub fn is_raw(&self) -> bool {
        matches!(
            self,
            ServiceBody::Hello(_) | ServiceBody::Acknowledge(_) | ServiceBody::Error(_)
        )
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ServiceBody::Hello(_) => "Hello",
            ServiceBody::Acknowledge(_) => "Acknowledge",
            ServiceBody::Error(_) => "Error",
            ServiceBody::FindServersRequest(_) => "FindServersRequest",
            ServiceBody::FindServersResponse(_) => "FindServersResponse",
            ServiceBody::GetEndpointsRequest(_) => "GetEndpointsRequest",
            ServiceBody::GetEndpointsResponse(_) => "GetEndpointsResponse",
            ServiceBody::OpenSecureChannelRequest(_) => "OpenSecureChannelRequest",
            ServiceBody::OpenSecureChannelResponse(_) => "OpenSecureChannelResponse",
            ServiceBody::CloseSecureChannelRequest(_) => "CloseSecureChannelRequest",
            ServiceBody::CreateSessionRequest(_) => "CreateSessionRequest",
            ServiceBody::CreateSessionResponse(_) => "CreateSessionResponse",
            ServiceBody::ActivateSessionRequest(_) => "ActivateSessionRequest",
            ServiceBody::ActivateSessionResponse(_) => "ActivateSessionResponse",
            ServiceBody::ReadRequest(_) => "ReadRequest",
            ServiceBody::ReadResponse(_) => "ReadResponse",
            ServiceBody::WriteRequest(_) => "WriteRequest",
            ServiceBody::WriteResponse(_) => "WriteResponse",
            ServiceBody::CloseSessionRequest(_) => "CloseSessionRequest",
            ServiceBody::CloseSessionResponse(_) => "CloseSessionResponse",
            ServiceBody::ServiceFault(_) => "ServiceFault",
            ServiceBody::Unknown { .. } => "Unknown",
        }
    }

    /// Encode the body, node id first for service bodies, bare for
    /// Hello/Acknowledge/Error.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            ServiceBody::Hello(b) => {
                write_u32(out, b.protocol_version);
                write_u32(out, b.receive_buffer_size);
                write_u32(out, b.send_buffer_size);
                write_u32(out, b.max_message_size);
                write_u32(out, b.max_chunk_count);
                write_string(out, &b.endpoint_url);
            }
            ServiceBody::Acknowledge(b) => {
                write_u32(out, b.protocol_version);
                write_u32(out, b.receive_buffer_size);
                write_u32(out, b.send_buffer_size);
                write_u32(out, b.max_message_size);
                write_u32(out, b.max_chunk_count);
            }
            ServiceBody::Error(b) => {
                write_u32(out, b.error.0);
                write_string(out, &b.reason);
            }
            ServiceBody::FindServersRequest(b) => {
                write_type_id(out, type_ids::FIND_SERVERS_REQUEST);
                write_request_header(out, &b.header);
                write_string(out, &b.endpoint_url);
            }
            ServiceBody::FindServersResponse(b) => {
                write_type_id(out, type_ids::FIND_SERVERS_RESPONSE);
                write_response_header(out, &b.header);
                write_i32(out, b.servers.len() as i32);
                for s in &b.servers {
                    write_application_description(out, s);
                }
            }
            ServiceBody::GetEndpointsRequest(b) => {
                write_type_id(out, type_ids::GET_ENDPOINTS_REQUEST);
                write_request_header(out, &b.header);
                write_string(out, &b.endpoint_url);
            }
            ServiceBody::GetEndpointsResponse(b) => {
                write_type_id(out, type_ids::GET_ENDPOINTS_RESPONSE);
                write_response_header(out, &b.header);
                write_i32(out, b.endpoints.len() as i32);
                for e in &b.endpoints {
                    write_endpoint_description(out, e);
                }
            }
            ServiceBody::OpenSecureChannelRequest(b) => {
                write_type_id(out, type_ids::OPEN_SECURE_CHANNEL_REQUEST);
                write_request_header(out, &b.header);
                write_u32(out, b.client_protocol_version);
                write_u32(out, b.request_type);
                write_u32(out, b.security_mode.wire());
                write_byte_string(out, &b.client_nonce);
                write_u32(out, b.requested_lifetime_ms);
            }
            ServiceBody::OpenSecureChannelResponse(b) => {
                write_type_id(out, type_ids::OPEN_SECURE_CHANNEL_RESPONSE);
                write_response_header(out, &b.header);
                write_u32(out, b.server_protocol_version);
                write_u32(out, b.channel_id);
                write_u32(out, b.token_id);
                write_u32(out, b.token_lifetime_ms);
                write_byte_string(out, &b.server_nonce);
            }
            ServiceBody::CloseSecureChannelRequest(b) => {
                write_type_id(out, type_ids::CLOSE_SECURE_CHANNEL_REQUEST);
                write_request_header(out, &b.header);
            }
            ServiceBody::CreateSessionRequest(b) => {
                write_type_id(out, type_ids::CREATE_SESSION_REQUEST);
                write_request_header(out, &b.header);
                write_string(out, &b.endpoint_url);
                write_string(out, &b.session_name);
                write_byte_string(out, &b.client_nonce);
                write_byte_string(out, &b.client_certificate);
            }
            ServiceBody::CreateSessionResponse(b) => {
                write_type_id(out, type_ids::CREATE_SESSION_RESPONSE);
                write_response_header(out, &b.header);
                write_node_id(out, &b.session_id);
                write_byte_string(out, &b.auth_token);
                write_byte_string(out, &b.server_nonce);
                write_byte_string(out, &b.server_certificate);
            }
            ServiceBody::ActivateSessionRequest(b) => {
                write_type_id(out, type_ids::ACTIVATE_SESSION_REQUEST);
                write_request_header(out, &b.header);
                write_user_identity_token(out, &b.user_identity_token);
            }
            ServiceBody::ActivateSessionResponse(b) => {
                write_type_id(out, type_ids::ACTIVATE_SESSION_RESPONSE);
                write_response_header(out, &b.header);
                write_byte_string(out, &b.server_nonce);
            }
            ServiceBody::ReadRequest(b) => {
                write_type_id(out, type_ids::READ_REQUEST);
                write_request_header(out, &b.header);
                write_i32(out, b.nodes.len() as i32);
                for n in &b.nodes {
                    write_node_id(out, n);
                }
            }
            ServiceBody::ReadResponse(b) => {
                write_type_id(out, type_ids::READ_RESPONSE);
                write_response_header(out, &b.header);
                write_i32(out, b.results.len() as i32);
                for r in &b.results {
                    write_u32(out, r.status.0);
                    match &r.value {
                        Some(v) => {
                            out.push(1);
                            write_variant(out, v);
                        }
                        None => out.push(0),
                    }
                }
            }
            ServiceBody::WriteRequest(b) => {
                write_type_id(out, type_ids::WRITE_REQUEST);
                write_request_header(out, &b.header);
                write_i32(out, b.writes.len() as i32);
                for w in &b.writes {
                    write_node_id(out, &w.node);
                    write_variant(out, &w.value);
                }
            }
            ServiceBody::WriteResponse(b) => {
                write_type_id(out, type_ids::WRITE_RESPONSE);
                write_response_header(out, &b.header);
                write_i32(out, b.results.len() as i32);
                for r in &b.results {
                    write_u32(out, r.0);
                }
            }
            ServiceBody::CloseSessionRequest(b) => {
                write_type_id(out, type_ids::CLOSE_SESSION_REQUEST);
                write_request_header(out, &b.header);
            }
            ServiceBody::CloseSessionResponse(b) => {
                write_type_id(out, type_ids::CLOSE_SESSION_RESPONSE);
                write_response_header(out, &b.header);
            }
            ServiceBody::ServiceFault(b) => {
                write_type_id(out, type_ids::SERVICE_FAULT);
                write_response_header(out, &b.header);
            }
            ServiceBody::Unknown { node_id, raw } => {
                write_node_id(out, node_id);
                out.extend_from_slice(raw);
            }
        }
    }

    /// Decode a service body (node id prefixed). Transport bodies are
    /// decoded by [`ServiceBody::decode_raw`] instead.
    pub fn decode(bytes: &[u8]) -> Result<ServiceBody, CodecError> {
        let mut reader = Reader::new(bytes);
        let body = Self::read_service(&mut reader)?;
        if !reader.is_empty() {
            return Err(CodecError::TrailingBytes { count: reader.remaining() });
        }
        Ok(body)
    }

    /// Decode a Hello, Acknowledge or Error body for the given message type.
    pub fn decode_raw(
        message_type: super::header::MessageType,
        bytes: &[u8],
    ) -> Result<ServiceBody, CodecError> {
        use super::header::MessageType;
        let mut r = Reader::new(bytes);
        let body = match message_type {
            MessageType::Hello => ServiceBody::Hello(Hello {
                protocol_version: r.u32()?,
                receive_buffer_size: r.u32()?,
                send_buffer_size: r.u32()?,
                max_message_size: r.u32()?,
                max_chunk_count: r.u32()?,
                endpoint_url: r.string()?,
            }),
            MessageType::Acknowledge => ServiceBody::Acknowledge(Acknowledge {
                protocol_version: r.u32()?,
                receive_buffer_size: r.u32()?,
                send_buffer_size: r.u32()?,
                max_message_size: r.u32()?,
                max_chunk_count: r.u32()?,
            }),
            MessageType::Error => ServiceBody::Error(ErrorMessage {
                error: StatusCode(r.u32()?),
                reason: r.string()?,
            }),
            other => {
                return Err(CodecError::Malformed {
                    what: "raw body",
                    detail: match other {
                        MessageType::OpenChannel | MessageType::Message
                        | MessageType::CloseChannel => "not a transport-level message type",
                        _ => "unexpected message type",
                    },
                })
            }
        };
        if !r.is_empty() {
            return Err(CodecError::TrailingBytes { count: r.remaining() });
        }
        Ok(body)
    }

    fn read_service(r: &mut Reader<'_>) -> Result<ServiceBody, CodecError> {
        let node_id = r.node_id()?;
        let Some(type_id) = node_id.as_ns0_numeric() else {
            return Ok(ServiceBody::Unknown { node_id, raw: r.rest().to_vec() });
        };
        Ok(match type_id {
            type_ids::FIND_SERVERS_REQUEST => ServiceBody::FindServersRequest(FindServersRequest {
                header: read_request_header(r)?,
                endpoint_url: r.string()?,
            }),
            type_ids::FIND_SERVERS_RESPONSE => {
                let header = read_response_header(r)?;
                let len = r.array_len("servers")?;
                let mut servers = Vec::with_capacity(len.min(64));
                for _ in 0..len {
                    servers.push(read_application_description(r)?);
                }
                ServiceBody::FindServersResponse(FindServersResponse { header, servers })
            }
            type_ids::GET_ENDPOINTS_REQUEST => ServiceBody::GetEndpointsRequest(
                GetEndpointsRequest { header: read_request_header(r)?, endpoint_url: r.string()? },
            ),
            type_ids::GET_ENDPOINTS_RESPONSE => {
                let header = read_response_header(r)?;
                let len = r.array_len("endpoints")?;
                let mut endpoints = Vec::with_capacity(len.min(64));
                for _ in 0..len {
                    endpoints.push(read_endpoint_description(r)?);
                }
                ServiceBody::GetEndpointsResponse(GetEndpointsResponse { header, endpoints })
            }
            type_ids::OPEN_SECURE_CHANNEL_REQUEST => {
                let header = read_request_header(r)?;
                let client_protocol_version = r.u32()?;
                let request_type = r.u32()?;
                let mode_wire = r.u32()?;
                let security_mode = SecurityMode::from_wire(mode_wire).ok_or(
                    CodecError::Malformed { what: "open request", detail: "bad security mode" },
                )?;
                ServiceBody::OpenSecureChannelRequest(OpenSecureChannelRequest {
                    header,
                    client_protocol_version,
                    request_type,
                    security_mode,
                    client_nonce: r.byte_string()?,
                    requested_lifetime_ms: r.u32()?,
                })
            }
            type_ids::OPEN_SECURE_CHANNEL_RESPONSE => {
                ServiceBody::OpenSecureChannelResponse(OpenSecureChannelResponse {
                    header: read_response_header(r)?,
                    server_protocol_version: r.u32()?,
                    channel_id: r.u32()?,
                    token_id: r.u32()?,
                    token_lifetime_ms: r.u32()?,
                    server_nonce: r.byte_string()?,
                })
            }
            type_ids::CLOSE_SECURE_CHANNEL_REQUEST => ServiceBody::CloseSecureChannelRequest(
                CloseSecureChannelRequest { header: read_request_header(r)? },
            ),
            type_ids::CREATE_SESSION_REQUEST => {
                ServiceBody::CreateSessionRequest(CreateSessionRequest {
                    header: read_request_header(r)?,
                    endpoint_url: r.string()?,
                    session_name: r.string()?,
                    client_nonce: r.byte_string()?,
                    client_certificate: r.byte_string()?,
                })
            }
            type_ids::CREATE_SESSION_RESPONSE => {
                ServiceBody::CreateSessionResponse(CreateSessionResponse {
                    header: read_response_header(r)?,
                    session_id: r.node_id()?,
                    auth_token: r.byte_string()?,
                    server_nonce: r.byte_string()?,
                    server_certificate: r.byte_string()?,
                })
            }
            type_ids::ACTIVATE_SESSION_REQUEST => {
                ServiceBody::ActivateSessionRequest(ActivateSessionRequest {
                    header: read_request_header(r)?,
                    user_identity_token: read_user_identity_token(r)?,
                })
            }
            type_ids::ACTIVATE_SESSION_RESPONSE => {
                ServiceBody::ActivateSessionResponse(ActivateSessionResponse {
                    header: read_response_header(r)?,
                    server_nonce: r.byte_string()?,
                })
            }
            type_ids::READ_REQUEST => {
                let header = read_request_header(r)?;
                let len = r.array_len("read nodes")?;
                let mut nodes = Vec::with_capacity(len.min(256));
                for _ in 0..len {
                    nodes.push(r.node_id()?);
                }
                ServiceBody::ReadRequest(ReadRequest { header, nodes })
            }
            type_ids::READ_RESPONSE => {
                let header = read_response_header(r)?;
                let len = r.array_len("read results")?;
                let mut results = Vec::with_capacity(len.min(256));
                for _ in 0..len {
                    let status = StatusCode(r.u32()?);
                    let value = match r.u8()? {
                        0 => None,
                        1 => Some(read_variant(r)?),
                        _ => {
                            return Err(CodecError::Malformed {
                                what: "read result",
                                detail: "bad value-present flag",
                            })
                        }
                    };
                    results.push(ReadResult { status, value });
                }
                ServiceBody::ReadResponse(ReadResponse { header, results })
            }
            type_ids::WRITE_REQUEST => {
                let header = read_request_header(r)?;
                let len = r.array_len("writes")?;
                let mut writes = Vec::with_capacity(len.min(256));
                for _ in 0..len {
                    writes.push(WriteValue { node: r.node_id()?, value: read_variant(r)? });
                }
                ServiceBody::WriteRequest(WriteRequest { header, writes })
            }
            type_ids::WRITE_RESPONSE => {
                let header = read_response_header(r)?;
                let len = r.array_len("write results")?;
                let mut results = Vec::with_capacity(len.min(256));
                for _ in 0..len {
                    results.push(StatusCode(r.u32()?));
                }
                ServiceBody::WriteResponse(WriteResponse { header, results })
            }
            type_ids::CLOSE_SESSION_REQUEST => ServiceBody::CloseSessionRequest(
                CloseSessionRequest { header: read_request_header(r)? },
            ),
            type_ids::CLOSE_SESSION_RESPONSE => ServiceBody::CloseSessionResponse(
                CloseSessionResponse { header: read_response_header(r)? },
            ),
            type_ids::SERVICE_FAULT => {
                ServiceBody::ServiceFault(ServiceFault { header: read_response_header(r)? })
            }
            _ => ServiceBody::Unknown { node_id, raw: r.rest().to_vec() },
        })
    }
}

fn write_type_id(out: &mut Vec<u8>, id: u32) {
    write_node_id(out, &NodeId::numeric(0, id));
}

fn write_request_header(out: &mut Vec<u8>, h: &RequestHeader) {
    write_byte_string(out, &h.auth_token);
    write_u32(out, h.request_handle);
}

fn read_request_header(r: &mut Reader<'_>) -> Result<RequestHeader, CodecError> {
    Ok(RequestHeader { auth_token: r.byte_string()?, request_handle: r.u32()? })
}

fn write_response_header(out: &mut Vec<u8>, h: &ResponseHeader) {
    write_u32(out, h.request_handle);
    write_u32(out, h.service_result.0);
}

fn read_response_header(r: &mut Reader<'_>) -> Result<ResponseHeader, CodecError> {
    Ok(ResponseHeader { request_handle: r.u32()?, service_result: StatusCode(r.u32()?) })
}

fn write_application_description(out: &mut Vec<u8>, d: &ApplicationDescription) {
    write_string(out, &d.application_uri);
    write_string(out, &d.product_uri);
    write_localized_text(out, &d.application_name);
    write_u32(out, d.application_type);
    write_i32(out, d.discovery_urls.len() as i32);
    for url in &d.discovery_urls {
        write_string(out, url);
    }
}

fn read_application_description(
    r: &mut Reader<'_>,
) -> Result<ApplicationDescription, CodecError> {
    let application_uri = r.string()?;
    let product_uri = r.string()?;
    let application_name = r.localized_text()?;
    let application_type = r.u32()?;
    let len = r.array_len("discovery urls")?;
    let mut discovery_urls = Vec::with_capacity(len.min(16));
    for _ in 0..len {
        discovery_urls.push(r.string()?);
    }
    Ok(ApplicationDescription {
        application_uri,
        product_uri,
        application_name,
        application_type,
        discovery_urls,
    })
}

fn write_endpoint_description(out: &mut Vec<u8>, e: &EndpointDescription) {
    write_string(out, &e.endpoint_url);
    write_application_description(out, &e.server);
    write_byte_string(out, &e.server_certificate);
    write_u32(out, e.security_mode.wire());
    write_string(out, &e.security_policy_uri);
    write_i32(out, e.user_identity_tokens.len() as i32);
    for t in &e.user_identity_tokens {
        write_string(out, &t.policy_id);
        write_u32(out, t.token_type.wire());
        write_string(out, &t.security_policy_uri);
    }
    out.push(e.security_level);
}

fn read_endpoint_description(r: &mut Reader<'_>) -> Result<EndpointDescription, CodecError> {
    let endpoint_url = r.string()?;
    let server = read_application_description(r)?;
    let server_certificate = r.byte_string()?;
    let security_mode = SecurityMode::from_wire(r.u32()?)
        .ok_or(CodecError::Malformed { what: "endpoint", detail: "bad security mode" })?;
    let security_policy_uri = r.string()?;
    let len = r.array_len("user token policies")?;
    let mut user_identity_tokens = Vec::with_capacity(len.min(8));
    for _ in 0..len {
        let policy_id = r.string()?;
        let token_type = UserTokenType::from_wire(r.u32()?)
            .ok_or(CodecError::Malformed { what: "token policy", detail: "bad token type" })?;
        let security_policy_uri = r.string()?;
        user_identity_tokens.push(UserTokenPolicy { policy_id, token_type, security_policy_uri });
    }
    let security_level = r.u8()?;
    Ok(EndpointDescription {
        endpoint_url,
        server,
        server_certificate,
        security_mode,
        security_policy_uri,
        user_identity_tokens,
        security_level,
    })
}

fn write_user_identity_token(out: &mut Vec<u8>, token: &UserIdentityToken) {
    match token {
        UserIdentityToken::Anonymous { policy_id } => {
            write_type_id(out, type_ids::ANONYMOUS_IDENTITY_TOKEN);
            write_string(out, policy_id);
        }
        UserIdentityToken::UserName { policy_id, username, password, encryption_algorithm } => {
            write_type_id(out, type_ids::USERNAME_IDENTITY_TOKEN);
            write_string(out, policy_id);
            write_string(out, username);
            write_byte_string(out, password);
            write_string(out, encryption_algorithm);
        }
    }
}

fn read_user_identity_token(r: &mut Reader<'_>) -> Result<UserIdentityToken, CodecError> {
    let node_id = r.node_id()?;
    match node_id.as_ns0_numeric() {
        Some(type_ids::ANONYMOUS_IDENTITY_TOKEN) => {
            Ok(UserIdentityToken::Anonymous { policy_id: r.string()? })
        }
        Some(type_ids::USERNAME_IDENTITY_TOKEN) => Ok(UserIdentityToken::UserName {
            policy_id: r.string()?,
            username: r.string()?,
            password: r.byte_string()?,
            encryption_algorithm: r.string()?,
        }),
        _ => Err(CodecError::Malformed {
            what: "user identity token",
            detail: "unsupported token type id",
        }),
    }
}

// Keep the array cap reachable from the reader helpers above.
const _: () = assert!(MAX_ARRAY_LEN == 1 << 16);

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_endpoint() -> EndpointDescription {
        EndpointDescription {
            endpoint_url: UaString::new("opc.tcp://127.0.0.1:4840"),
            server: ApplicationDescription {
                application_uri: UaString::new("urn:victim:server"),
                product_uri: UaString::new("urn:uasec"),
                application_name: LocalizedText::text_only("VictimServer"),
                application_type: 0,
                discovery_urls: vec![UaString::new("opc.tcp://127.0.0.1:4840")],
            },
            server_certificate: UaByteString::new(vec![1, 2, 3]),
            security_mode: SecurityMode::SignAndEncrypt,
            security_policy_uri: UaString::new(
                "http://opcfoundation.org/UA/SecurityPolicy#Basic256Sha256",
            ),
            user_identity_tokens: vec![UserTokenPolicy {
                policy_id: UaString::new("username"),
                token_type: UserTokenType::UserName,
                security_policy_uri: UaString::new(
                    "http://opcfoundation.org/UA/SecurityPolicy#Basic256Sha256",
                ),
            }],
            security_level: 3,
        }
    }

    #[test]
    fn get_endpoints_response_round_trips() {
        let body = ServiceBody::GetEndpointsResponse(GetEndpointsResponse {
            header: ResponseHeader { request_handle: 7, service_result: StatusCode::GOOD },
            endpoints: vec![sample_endpoint()],
        });
        let bytes = body.encode();
        assert_eq!(ServiceBody::decode(&bytes).unwrap(), body);
    }

    #[test]
    fn unknown_service_preserves_raw_bytes() {
        let mut bytes = Vec::new();
        write_node_id(&mut bytes, &NodeId::numeric(0, 9999));
        bytes.extend_from_slice(&[0xDE, 0xAD, 0xBE, 0xEF]);
        let body = ServiceBody::decode(&bytes).unwrap();
        assert!(matches!(&body, ServiceBody::Unknown { raw, .. } if raw == &[0xDE, 0xAD, 0xBE, 0xEF]));
        assert_eq!(body.encode(), bytes);
    }

    #[test]
    fn trailing_bytes_after_known_body_rejected() {
        let body = ServiceBody::CloseSessionRequest(CloseSessionRequest {
            header: RequestHeader::default(),
        });
        let mut bytes = body.encode();
        bytes.push(0xAA);
        let err = ServiceBody::decode(&bytes).unwrap_err();
        assert!(matches!(err, CodecError::TrailingBytes { .. }));
    }

    #[test]
    fn username_token_round_trips() {
        let body = ServiceBody::ActivateSessionRequest(ActivateSessionRequest {
            header: RequestHeader { auth_token: UaByteString::new(vec![9; 32]), request_handle: 3 },
            user_identity_token: UserIdentityToken::UserName {
                policy_id: UaString::new("username"),
                username: UaString::new("operator"),
                password: UaByteString::new(vec![0x17; 256]),
                encryption_algorithm: UaString::new("http://www.w3.org/2001/04/xmlenc#rsa-oaep"),
            },
        });
        let bytes = body.encode();
        assert_eq!(ServiceBody::decode(&bytes).unwrap(), body);
    }

    #[test]
    fn hello_decodes_only_as_raw() {
        let hello = ServiceBody::Hello(Hello {
            protocol_version: 0,
            receive_buffer_size: 65536,
            send_buffer_size: 65536,
            max_message_size: 1 << 20,
            max_chunk_count: 64,
            endpoint_url: UaString::new("opc.tcp://127.0.0.1:4840"),
        });
        let bytes = hello.encode();
        let decoded =
            ServiceBody::decode_raw(super::super::header::MessageType::Hello, &bytes).unwrap();
        assert_eq!(decoded, hello);
    }
}
