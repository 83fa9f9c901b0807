//! A minimal OPC UA client with the same pluggable trust policies as the
//! server, used both as the victim client in scenarios and as the
//! substrate for the rogue client.

use std::sync::{Arc, Mutex};

use rand::RngCore;
use thiserror::Error;

use crate::codec::service::{
    ActivateSessionRequest, ApplicationDescription, CloseSecureChannelRequest,
    CloseSessionRequest, CreateSessionRequest, EndpointDescription, FindServersRequest,
    GetEndpointsRequest, OpenSecureChannelRequest, ReadRequest, ReadResult, RequestHeader,
    UserIdentityToken, UserTokenPolicy, WriteRequest, WriteValue,
};
use crate::codec::{
    encode_chunks, parse_chunk, reassemble, ChunkFlag, CodecError, HeaderKind, NodeId,
    SecurityMode, SequenceHeader, ServiceBody, UaByteString, UaString, UserTokenType, Value,
};
use crate::pki::{
    validate_peer, AcceptanceRecord, CertificateRecord, Identity, TrustDecision, TrustPolicy,
    TrustStore,
};
use crate::secchan::{
    encrypt_password_token, protect_chunk, protect_open_secure_channel, unprotect_chunk,
    unprotect_open_secure_channel, SecChanError, SecureChannelState, SecurityPolicy,
};
use crate::status::StatusCode;
use crate::transcript::TranscriptWriter;
use crate::transport::{parse_opc_url, Conn, TransportError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connect failed: {0}")]
    ConnectFailed(std::io::Error),
    #[error(transparent)]
    Transport(TransportError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    SecChan(SecChanError),
    #[error("server certificate rejected: {0}")]
    TrustRejected(StatusCode),
    #[error("certificate presented in channel open differs from discovery")]
    CertificateChanged,
    #[error("authentication failed: {0}")]
    AuthFailed(StatusCode),
    #[error("service fault: {0}")]
    Fault(StatusCode),
    #[error("security policy not supported: {0}")]
    PolicyUnsupported(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("server closed the channel: {status}: {reason}")]
    ServerClosed { status: StatusCode, reason: String },
}

impl From<TransportError> for ClientError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::ConnectFailed(io) => ClientError::ConnectFailed(io),
            TransportError::PeerError { status, reason } => {
                ClientError::ServerClosed { status, reason }
            }
            other => ClientError::Transport(other),
        }
    }
}

impl From<SecChanError> for ClientError {
    fn from(e: SecChanError) -> Self {
        match e {
            SecChanError::PolicyUnsupported(uri) => ClientError::PolicyUnsupported(uri),
            other => ClientError::SecChan(other),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UserIdentity {
    Anonymous,
    UserName { username: String, password: String },
}

#[derive(Clone)]
pub struct ClientConfig {
    /// Needed for secure endpoints; mode-None sessions run without one.
    pub identity: Option<Identity>,
    pub trust_policy: TrustPolicy,
    pub trust_store: Arc<Mutex<TrustStore>>,
    pub user_identity: UserIdentity,
    /// Encrypt the password token even when the endpoint's token policy
    /// is None (the cautious library behavior).
    pub encrypt_token_under_none: bool,
    pub application_uri: String,
    pub session_name: String,
    pub transcript_path: Option<std::path::PathBuf>,
    /// Sink for the client's own trust decisions, so a harness can trace
    /// what this client accepted and why.
    pub accept_log: Option<Arc<Mutex<Vec<AcceptanceRecord>>>>,
}

impl ClientConfig {
    pub fn new() -> Self {
        ClientConfig {
            identity: None,
            trust_policy: TrustPolicy::Strict,
            trust_store: Arc::new(Mutex::new(TrustStore::new())),
            user_identity: UserIdentity::Anonymous,
            encrypt_token_under_none: true,
            application_uri: "urn:uasec:client".into(),
            session_name: "uasec-session".into(),
            transcript_path: None,
            accept_log: None,
        }
    }
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig::new()
    }
}

/// Fetch the advertised endpoints over the implicit discovery channel.
/// No OpenSecureChannel is involved and nothing the server says here is
/// authenticated, including the certificate bytes in the descriptors.
pub fn discover(url: &str) -> Result<Vec<EndpointDescription>, ClientError> {
    discover_with_transcript(url, None)
}

pub fn discover_with_transcript(
    url: &str,
    transcript: Option<TranscriptWriter>,
) -> Result<Vec<EndpointDescription>, ClientError> {
    let (host, port) = parse_opc_url(url)?;
    let mut conn = Conn::connect(&host, port, transcript)?;
    conn.client_handshake(url)?;
    let body = ServiceBody::GetEndpointsRequest(GetEndpointsRequest {
        header: RequestHeader { auth_token: UaByteString::NULL, request_handle: 1 },
        endpoint_url: UaString::new(url),
    });
    let response = discovery_call(&mut conn, &body)?;
    match response {
        ServiceBody::GetEndpointsResponse(r) => Ok(r.endpoints),
        ServiceBody::ServiceFault(f) => Err(ClientError::Fault(f.header.service_result)),
        other => Err(ClientError::ProtocolError(format!(
            "expected GetEndpointsResponse, got {}",
            other.type_name()
        ))),
    }
}

/// FindServers over the implicit discovery channel.
pub fn find_servers(url: &str) -> Result<Vec<ApplicationDescription>, ClientError> {
    let (host, port) = parse_opc_url(url)?;
    let mut conn = Conn::connect(&host, port, None)?;
    conn.client_handshake(url)?;
    let body = ServiceBody::FindServersRequest(FindServersRequest {
        header: RequestHeader { auth_token: UaByteString::NULL, request_handle: 1 },
        endpoint_url: UaString::new(url),
    });
    let response = discovery_call(&mut conn, &body)?;
    match response {
        ServiceBody::FindServersResponse(r) => Ok(r.servers),
        ServiceBody::ServiceFault(f) => Err(ClientError::Fault(f.header.service_result)),
        other => Err(ClientError::ProtocolError(format!(
            "expected FindServersResponse, got {}",
            other.type_name()
        ))),
    }
}

fn discovery_call(conn: &mut Conn, body: &ServiceBody) -> Result<ServiceBody, ClientError> {
    let mut state = SecureChannelState::plain(0, 0);
    let chunks = encode_chunks(
        body,
        HeaderKind::Symmetric,
        Some(&mut state.chunk_channel()),
        1,
        conn.limits.max_chunk_size,
    )?;
    for chunk in &chunks {
        conn.write_chunk(chunk)?;
    }
    let mut collected = Vec::new();
    loop {
        let chunk = conn.read_chunk()?;
        if let Some(err) = decode_err_chunk(&chunk)? {
            return Err(err);
        }
        let done = parse_chunk(&chunk)?.header.chunk_flag == ChunkFlag::Final;
        collected.push(chunk);
        if done {
            break;
        }
    }
    let (response, _) = reassemble(&collected)?;
    Ok(response)
}

fn decode_err_chunk(chunk: &[u8]) -> Result<Option<ClientError>, ClientError> {
    if chunk.get(..3) != Some(b"ERR") {
        return Ok(None);
    }
    let (body, _) = reassemble(std::slice::from_ref(&chunk.to_vec()))?;
    match body {
        ServiceBody::Error(e) => Ok(Some(ClientError::ServerClosed {
            status: e.error,
            reason: e.reason.as_text().into_owned(),
        })),
        _ => Ok(Some(ClientError::ProtocolError("malformed ERR chunk".into()))),
    }
}

/// Order endpoints by protection strength: SignAndEncrypt over Sign over
/// None, and within a mode the Basic256Sha256 policy over None. Ties keep
/// the server's list order.
pub fn select_most_secure(endpoints: &[EndpointDescription]) -> Option<&EndpointDescription> {
    fn mode_rank(mode: SecurityMode) -> u8 {
        match mode {
            SecurityMode::SignAndEncrypt => 2,
            SecurityMode::Sign => 1,
            SecurityMode::None => 0,
        }
    }
    fn policy_rank(endpoint: &EndpointDescription) -> u8 {
        match SecurityPolicy::from_uri(&endpoint.security_policy_uri.as_text()) {
            Ok(SecurityPolicy::Basic256Sha256) => 1,
            _ => 0,
        }
    }
    endpoints.iter().enumerate().fold(None, |best, (index, endpoint)| {
        let key = (mode_rank(endpoint.security_mode), policy_rank(endpoint));
        match best {
            Some((best_key, _, _)) if best_key >= key => best,
            _ => Some((key, index, endpoint)),
        }
    })
    .map(|(_, _, endpoint)| endpoint)
}

/// An activated session over an open channel.
pub struct Session {
    conn: Conn,
    state: SecureChannelState,
    auth_token: Vec<u8>,
    pub session_id: NodeId,
    pub endpoint: EndpointDescription,
    server_certificate: Option<CertificateRecord>,
    /// Server nonce issued at the most recent (Create|Activate)Session.
    pub session_server_nonce: Vec<u8>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("session_id", &self.session_id)
            .field("channel_id", &self.state.channel_id)
            .finish()
    }
}

impl Session {
    pub fn channel_id(&self) -> u32 {
        self.state.channel_id
    }

    /// Snapshot of the channel state, for offline transcript analysis.
    pub fn channel_state(&self) -> SecureChannelState {
        self.state.clone()
    }

    pub fn server_certificate(&self) -> Option<&CertificateRecord> {
        self.server_certificate.as_ref()
    }

    pub fn read_many(&mut self, nodes: &[NodeId]) -> Result<Vec<ReadResult>, ClientError> {
        let body = ServiceBody::ReadRequest(ReadRequest {
            header: self.request_header(),
            nodes: nodes.to_vec(),
        });
        match self.call(&body)? {
            ServiceBody::ReadResponse(r) => Ok(r.results),
            ServiceBody::ServiceFault(f) => Err(ClientError::Fault(f.header.service_result)),
            other => Err(unexpected("ReadResponse", &other)),
        }
    }

    pub fn read(&mut self, node: &NodeId) -> Result<Value, ClientError> {
        let mut results = self.read_many(std::slice::from_ref(node))?;
        let result = results
            .pop()
            .ok_or_else(|| ClientError::ProtocolError("empty read results".into()))?;
        if result.status.is_bad() {
            return Err(ClientError::Fault(result.status));
        }
        result.value.ok_or_else(|| ClientError::ProtocolError("good status without value".into()))
    }

    pub fn write(&mut self, node: &NodeId, value: Value) -> Result<StatusCode, ClientError> {
        let body = ServiceBody::WriteRequest(WriteRequest {
            header: self.request_header(),
            writes: vec![WriteValue { node: node.clone(), value }],
        });
        match self.call(&body)? {
            ServiceBody::WriteResponse(r) => r
                .results
                .first()
                .copied()
                .ok_or_else(|| ClientError::ProtocolError("empty write results".into())),
            ServiceBody::ServiceFault(f) => Err(ClientError::Fault(f.header.service_result)),
            other => Err(unexpected("WriteResponse", &other)),
        }
    }

    /// Forward an arbitrary service body and return the raw response.
    /// The request header inside `body` is used as-is.
    pub fn call_raw(&mut self, body: &ServiceBody) -> Result<ServiceBody, ClientError> {
        self.call(body)
    }

    pub fn request_header(&self) -> RequestHeader {
        RequestHeader {
            auth_token: UaByteString::new(self.auth_token.clone()),
            request_handle: 0,
        }
    }

    /// Graceful teardown: CloseSession, CloseSecureChannel, socket close.
    pub fn close(mut self) {
        let body = ServiceBody::CloseSessionRequest(CloseSessionRequest {
            header: self.request_header(),
        });
        let _ = self.call(&body);
        let close = ServiceBody::CloseSecureChannelRequest(CloseSecureChannelRequest {
            header: self.request_header(),
        });
        let _ = self.send_only(&close);
        self.conn.shutdown();
    }

    fn call(&mut self, body: &ServiceBody) -> Result<ServiceBody, ClientError> {
        let request_id = self.send_only(body)?;
        let mut collected = Vec::new();
        loop {
            let chunk = self.conn.read_chunk()?;
            if let Some(err) = decode_err_chunk(&chunk)? {
                return Err(err);
            }
            let plain = unprotect_chunk(&chunk, &mut self.state)?;
            let done = parse_chunk(&plain)?.header.chunk_flag == ChunkFlag::Final;
            collected.push(plain);
            if done {
                break;
            }
        }
        let (response, sequence) = reassemble(&collected)?;
        if sequence.request_id != request_id {
            return Err(ClientError::ProtocolError(format!(
                "response for request {} while waiting for {}",
                sequence.request_id, request_id
            )));
        }
        Ok(response)
    }

    fn send_only(&mut self, body: &ServiceBody) -> Result<u32, ClientError> {
        let request_id = self.state.allocate_request_id();
        let mut body = body.clone();
        stamp_request_handle(&mut body, request_id);
        let chunks = encode_chunks(
            &body,
            HeaderKind::Symmetric,
            Some(&mut self.state.chunk_channel()),
            request_id,
            self.conn.limits.max_chunk_size,
        )?;
        for chunk in &chunks {
            let protected = protect_chunk(chunk, &self.state)?;
            self.conn.write_chunk(&protected)?;
        }
        Ok(request_id)
    }
}

fn stamp_request_handle(body: &mut ServiceBody, handle: u32) {
    match body {
        ServiceBody::ReadRequest(r) => r.header.request_handle = handle,
        ServiceBody::WriteRequest(r) => r.header.request_handle = handle,
        ServiceBody::CreateSessionRequest(r) => r.header.request_handle = handle,
        ServiceBody::ActivateSessionRequest(r) => r.header.request_handle = handle,
        ServiceBody::CloseSessionRequest(r) => r.header.request_handle = handle,
        ServiceBody::CloseSecureChannelRequest(r) => r.header.request_handle = handle,
        ServiceBody::FindServersRequest(r) => r.header.request_handle = handle,
        ServiceBody::GetEndpointsRequest(r) => r.header.request_handle = handle,
        _ => {}
    }
}

fn unexpected(expected: &'static str, got: &ServiceBody) -> ClientError {
    ClientError::ProtocolError(format!("expected {expected}, got {}", got.type_name()))
}

/// Connect to one advertised endpoint: judge the server certificate
/// first, then HEL/ACK, OpenSecureChannel, CreateSession and
/// ActivateSession with the configured user identity.
///
/// Under a rejecting trust decision this returns before any byte is sent
/// to the server.
pub fn connect(
    endpoint: &EndpointDescription,
    config: &ClientConfig,
) -> Result<Session, ClientError> {
    let policy = SecurityPolicy::from_uri(&endpoint.security_policy_uri.as_text())?;
    let mode = endpoint.security_mode;
    if (mode == SecurityMode::None) != (policy == SecurityPolicy::None) {
        return Err(ClientError::ProtocolError("endpoint mode/policy mismatch".into()));
    }

    // Trust decision strictly before any traffic.
    let server_certificate = if endpoint.server_certificate.is_null() {
        None
    } else {
        Some(
            CertificateRecord::parse(endpoint.server_certificate.as_bytes())
                .map_err(|_| ClientError::TrustRejected(StatusCode::BAD_SECURITY_CHECKS_FAILED))?,
        )
    };
    if mode != SecurityMode::None {
        let record = server_certificate
            .as_ref()
            .ok_or_else(|| ClientError::ProtocolError("secure endpoint without certificate".into()))?;
        let mut store = config.trust_store.lock().expect("trust store poisoned");
        match validate_peer(record, config.trust_policy, &mut store) {
            TrustDecision::Accept(reason) => {
                if let Some(log) = &config.accept_log {
                    log.lock().expect("accept log poisoned").push(AcceptanceRecord {
                        thumbprint_hex: record.thumbprint_hex(),
                        reason,
                    });
                }
            }
            TrustDecision::Reject(status) => return Err(ClientError::TrustRejected(status)),
        }
    }

    let url = endpoint.endpoint_url.as_text().into_owned();
    let (host, port) = parse_opc_url(&url)?;
    let transcript = match &config.transcript_path {
        Some(path) => Some(
            TranscriptWriter::create(path)
                .map_err(|e| ClientError::ProtocolError(format!("transcript: {e}")))?,
        ),
        None => None,
    };
    let mut conn = Conn::connect(&host, port, transcript)?;
    conn.client_handshake(&url)?;

    // --- OpenSecureChannel -------------------------------------------------
    let suite = policy.suite();
    let client_nonce =
        if mode == SecurityMode::None { Vec::new() } else { suite.random_nonce() };
    let open_request = ServiceBody::OpenSecureChannelRequest(OpenSecureChannelRequest {
        header: RequestHeader { auth_token: UaByteString::NULL, request_handle: 1 },
        client_protocol_version: 0,
        request_type: 0,
        security_mode: mode,
        client_nonce: UaByteString::new(client_nonce.clone()),
        requested_lifetime_ms: 3_600_000,
    });

    let state = if mode == SecurityMode::None {
        let mut state = SecureChannelState::plain(0, 0);
        let chunks = encode_chunks(
            &open_request,
            HeaderKind::Asymmetric,
            Some(&mut state.chunk_channel()),
            1,
            conn.limits.max_chunk_size,
        )?;
        conn.write_chunk(&chunks[0])?;
        let reply = conn.read_chunk()?;
        if let Some(err) = decode_err_chunk(&reply)? {
            return Err(err);
        }
        let (body, sequence) = reassemble(std::slice::from_ref(&reply))?;
        let ServiceBody::OpenSecureChannelResponse(response) = body else {
            return Err(unexpected("OpenSecureChannelResponse", &body));
        };
        state.channel_id = response.channel_id;
        state.token_id = response.token_id;
        state.recv_sequence = sequence.sequence_number;
        state
    } else {
        let identity = config
            .identity
            .clone()
            .ok_or_else(|| ClientError::ProtocolError("secure endpoint requires an identity".into()))?;
        let record = server_certificate.clone().expect("checked above");

        let mut request_bytes = Vec::new();
        SequenceHeader { sequence_number: 1, request_id: 1 }.write(&mut request_bytes);
        request_bytes.extend_from_slice(&open_request.encode());
        let protected =
            protect_open_secure_channel(0, &request_bytes, &identity, &record, &suite)?;
        conn.write_chunk(&protected)?;

        let reply = conn.read_chunk()?;
        if let Some(err) = decode_err_chunk(&reply)? {
            return Err(err);
        }
        // The certificate inside OPN must byte-match the one discovery
        // showed us; a swap in between is a certificate change.
        let expected_der = record.der.clone();
        let opened = unprotect_open_secure_channel(&reply, &identity, |sender| {
            if sender.der == expected_der {
                Ok(())
            } else {
                Err(StatusCode::BAD_SECURITY_CHECKS_FAILED)
            }
        })
        .map_err(|e| match e {
            SecChanError::TrustRejected(_) => ClientError::CertificateChanged,
            other => ClientError::from(other),
        })?;

        let mut reader = crate::codec::Reader::new(&opened.request_bytes);
        let sequence = SequenceHeader::read(&mut reader)?;
        let body = ServiceBody::decode(&opened.request_bytes[8..])?;
        let ServiceBody::OpenSecureChannelResponse(response) = body else {
            return Err(unexpected("OpenSecureChannelResponse", &body));
        };
        let server_nonce = response.server_nonce.as_bytes().to_vec();
        if server_nonce.len() != suite.nonce_length {
            return Err(ClientError::ProtocolError("bad server nonce length".into()));
        }
        let mut state = SecureChannelState::established(
            response.channel_id,
            response.token_id,
            suite,
            mode,
            client_nonce,
            server_nonce,
            identity,
            record,
        )?;
        state.send_sequence = 1;
        state.recv_sequence = sequence.sequence_number;
        state.set_next_request_id(1);
        state
    };

    // --- CreateSession -------------------------------------------------
    let mut session_nonce = vec![0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut session_nonce);
    let create = ServiceBody::CreateSessionRequest(CreateSessionRequest {
        header: RequestHeader { auth_token: UaByteString::NULL, request_handle: 0 },
        endpoint_url: UaString::new(url.clone()),
        session_name: UaString::new(config.session_name.clone()),
        client_nonce: UaByteString::new(session_nonce),
        client_certificate: config
            .identity
            .as_ref()
            .map(|i| UaByteString::new(i.certificate.der.clone()))
            .unwrap_or(UaByteString::NULL),
    });

    let mut session = Session {
        conn,
        state,
        auth_token: Vec::new(),
        session_id: NodeId::numeric(0, 0),
        endpoint: endpoint.clone(),
        server_certificate,
        session_server_nonce: Vec::new(),
    };
    let response = session.call(&create)?;
    let ServiceBody::CreateSessionResponse(created) = response else {
        if let ServiceBody::ServiceFault(f) = response {
            return Err(ClientError::Fault(f.header.service_result));
        }
        return Err(unexpected("CreateSessionResponse", &response));
    };
    if let Some(record) = &session.server_certificate {
        if created.server_certificate.as_bytes() != record.der {
            return Err(ClientError::CertificateChanged);
        }
    }
    let session_server_nonce = created.server_nonce.as_bytes().to_vec();
    if session_server_nonce.len() != 32 {
        return Err(ClientError::ProtocolError("bad session server nonce".into()));
    }
    if !session.state.remote_nonce.is_empty()
        && session_server_nonce == session.state.remote_nonce
    {
        return Err(ClientError::ProtocolError("server session nonce not fresh".into()));
    }
    session.auth_token = created.auth_token.as_bytes().to_vec();
    session.session_id = created.session_id.clone();
    session.session_server_nonce = session_server_nonce;

    // --- ActivateSession -------------------------------------------------
    let token = build_identity_token(&config.user_identity, endpoint, &session, config)?;
    let activate = ServiceBody::ActivateSessionRequest(ActivateSessionRequest {
        header: RequestHeader {
            auth_token: UaByteString::new(session.auth_token.clone()),
            request_handle: 0,
        },
        user_identity_token: token,
    });
    match session.call(&activate)? {
        ServiceBody::ActivateSessionResponse(activated) => {
            session.session_server_nonce = activated.server_nonce.as_bytes().to_vec();
        }
        ServiceBody::ServiceFault(f) => {
            return Err(ClientError::AuthFailed(f.header.service_result))
        }
        other => return Err(unexpected("ActivateSessionResponse", &other)),
    }
    Ok(session)
}

fn build_identity_token(
    user: &UserIdentity,
    endpoint: &EndpointDescription,
    session: &Session,
    config: &ClientConfig,
) -> Result<UserIdentityToken, ClientError> {
    let find_policy = |token_type: UserTokenType| -> Option<&UserTokenPolicy> {
        endpoint.user_identity_tokens.iter().find(|t| t.token_type == token_type)
    };
    match user {
        UserIdentity::Anonymous => {
            let policy_id = find_policy(UserTokenType::Anonymous)
                .map(|p| p.policy_id.clone())
                .unwrap_or_else(|| UaString::new("anonymous"));
            Ok(UserIdentityToken::Anonymous { policy_id })
        }
        UserIdentity::UserName { username, password } => {
            if username.is_empty() {
                return Err(ClientError::ProtocolError("username must be non-empty".into()));
            }
            let policy = find_policy(UserTokenType::UserName).ok_or_else(|| {
                ClientError::ProtocolError("endpoint offers no username token".into())
            })?;
            let token_policy = SecurityPolicy::from_uri(&policy.security_policy_uri.as_text())
                .unwrap_or(SecurityPolicy::Basic256Sha256);

            let encrypt = match token_policy {
                SecurityPolicy::Basic256Sha256 => true,
                SecurityPolicy::None => {
                    config.encrypt_token_under_none && session.server_certificate.is_some()
                }
            };
            if encrypt {
                let record = session.server_certificate.as_ref().ok_or_else(|| {
                    ClientError::ProtocolError(
                        "password encryption requires a server certificate".into(),
                    )
                })?;
                let suite = SecurityPolicy::Basic256Sha256.suite();
                let token = encrypt_password_token(
                    password,
                    record,
                    &session.session_server_nonce,
                    &suite,
                )?;
                Ok(UserIdentityToken::UserName {
                    policy_id: policy.policy_id.clone(),
                    username: UaString::new(username.clone()),
                    password: UaByteString::new(token),
                    encryption_algorithm: UaString::new("http://www.w3.org/2001/04/xmlenc#rsa-oaep"),
                })
            } else {
                Ok(UserIdentityToken::UserName {
                    policy_id: policy.policy_id.clone(),
                    username: UaString::new(username.clone()),
                    password: UaByteString::new(password.as_bytes().to_vec()),
                    encryption_algorithm: UaString::new(""),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LocalizedText;

    fn endpoint(mode: SecurityMode, policy: SecurityPolicy, order: u32) -> EndpointDescription {
        EndpointDescription {
            endpoint_url: UaString::new(format!("opc.tcp://127.0.0.1:{order}")),
            server: ApplicationDescription {
                application_uri: UaString::new("urn:x"),
                product_uri: UaString::new("urn:x"),
                application_name: LocalizedText::text_only("x"),
                application_type: 0,
                discovery_urls: vec![],
            },
            server_certificate: UaByteString::NULL,
            security_mode: mode,
            security_policy_uri: UaString::new(policy.uri()),
            user_identity_tokens: vec![],
            security_level: 0,
        }
    }

    #[test]
    fn most_secure_ordering() {
        let endpoints = vec![
            endpoint(SecurityMode::None, SecurityPolicy::None, 0),
            endpoint(SecurityMode::Sign, SecurityPolicy::Basic256Sha256, 1),
            endpoint(SecurityMode::SignAndEncrypt, SecurityPolicy::Basic256Sha256, 2),
        ];
        let best = select_most_secure(&endpoints).unwrap();
        assert_eq!(best.security_mode, SecurityMode::SignAndEncrypt);
    }

    #[test]
    fn ties_broken_by_list_order() {
        let endpoints = vec![
            endpoint(SecurityMode::SignAndEncrypt, SecurityPolicy::Basic256Sha256, 0),
            endpoint(SecurityMode::SignAndEncrypt, SecurityPolicy::Basic256Sha256, 1),
        ];
        let best = select_most_secure(&endpoints).unwrap();
        assert_eq!(best.endpoint_url.as_text(), "opc.tcp://127.0.0.1:0");
    }

    #[test]
    fn empty_list_selects_nothing() {
        assert!(select_most_secure(&[]).is_none());
    }
}
