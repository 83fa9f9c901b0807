//! A minimal OPC UA server: advertises endpoints, enforces (or, per the
//! configured trust profile, fails to enforce) application authentication
//! at OpenSecureChannel, authenticates users at ActivateSession, and
//! serves a small writable node store standing in for process values.
//!
//! One handler thread per accepted connection; the node store and trust
//! store are shared across connections behind mutexes.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::RngCore;
use thiserror::Error;

use crate::codec::service::{
    ActivateSessionRequest, ActivateSessionResponse, ApplicationDescription,
    CreateSessionResponse, EndpointDescription, FindServersResponse, GetEndpointsResponse,
    ReadResponse, ReadResult, ResponseHeader, ServiceFault, UserIdentityToken, UserTokenPolicy,
    WriteResponse,
};
use crate::codec::{
    encode_chunks, parse_chunk, reassemble, ChunkFlag, CodecError, HeaderKind, LocalizedText,
    MessageType, NodeId, SecurityMode, SequenceHeader, ServiceBody, UaByteString, UaString,
    UserTokenType, Value,
};
use crate::pki::{
    validate_peer, AcceptReason, AcceptanceRecord, Identity, TrustDecision,
    TrustPolicy, TrustStore,
};
use crate::secchan::{
    decrypt_password_token, protect_chunk, protect_open_secure_channel, unprotect_chunk,
    unprotect_open_secure_channel, SecChanError, SecureChannelState, SecurityPolicy,
};
use crate::status::StatusCode;
use crate::transcript::TranscriptWriter;
use crate::transport::{Conn, TransportError};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("bind failed: {0}")]
    BindFailed(std::io::Error),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Channel token lifetime issued to every client; renewal is out of scope
/// for desk scenarios.
const TOKEN_LIFETIME_MS: u32 = 3_600_000;

// ---------------------------------------------------------------------------
// Node store
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct NodeEntry {
    pub value: Value,
    pub writable: bool,
    pub display_name: String,
}

/// The process-value stand-in: a flat map of node ids to values. Reads of
/// unknown ids yield a fault status, never a default.
#[derive(Clone, Debug, Default)]
pub struct NodeStore {
    nodes: BTreeMap<NodeId, NodeEntry>,
}

/// Node ids of the default demo store.
pub mod demo_nodes {
    use crate::codec::NodeId;

    pub fn sensor() -> NodeId {
        NodeId::numeric(1, 1001)
    }
    pub fn setpoint() -> NodeId {
        NodeId::numeric(1, 1002)
    }
    pub fn status() -> NodeId {
        NodeId::numeric(1, 1003)
    }

    pub const SENSOR_INITIAL: f64 = 21.5;
    pub const SETPOINT_INITIAL: f64 = 50.0;
    pub const STATUS_INITIAL: &str = "running";
}

impl NodeStore {
    pub fn new() -> Self {
        NodeStore::default()
    }

    /// Three nodes: a read-only "sensor" double, a writable "setpoint"
    /// double, and a read-only "status" string.
    pub fn demo() -> Self {
        let mut store = NodeStore::new();
        store.insert(
            demo_nodes::sensor(),
            NodeEntry {
                value: Value::Double(demo_nodes::SENSOR_INITIAL),
                writable: false,
                display_name: "sensor".into(),
            },
        );
        store.insert(
            demo_nodes::setpoint(),
            NodeEntry {
                value: Value::Double(demo_nodes::SETPOINT_INITIAL),
                writable: true,
                display_name: "setpoint".into(),
            },
        );
        store.insert(
            demo_nodes::status(),
            NodeEntry {
                value: Value::String(UaString::new(demo_nodes::STATUS_INITIAL)),
                writable: false,
                display_name: "status".into(),
            },
        );
        store
    }

    pub fn insert(&mut self, node: NodeId, entry: NodeEntry) {
        self.nodes.insert(node, entry);
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().cloned().collect()
    }

    pub fn read(&self, node: &NodeId) -> Result<Value, StatusCode> {
        self.nodes
            .get(node)
            .map(|entry| entry.value.clone())
            .ok_or(StatusCode::BAD_NODE_ID_UNKNOWN)
    }

    pub fn write(&mut self, node: &NodeId, value: Value) -> StatusCode {
        match self.nodes.get_mut(node) {
            None => StatusCode::BAD_NODE_ID_UNKNOWN,
            Some(entry) if !entry.writable => StatusCode::BAD_NOT_WRITABLE,
            Some(entry) => {
                entry.value = value;
                StatusCode::GOOD
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EndpointConfig {
    pub security_mode: SecurityMode,
    pub security_policy: SecurityPolicy,
    pub user_token_types: Vec<UserTokenType>,
}

impl EndpointConfig {
    pub fn none(user_token_types: Vec<UserTokenType>) -> Self {
        EndpointConfig {
            security_mode: SecurityMode::None,
            security_policy: SecurityPolicy::None,
            user_token_types,
        }
    }

    pub fn sign_and_encrypt(user_token_types: Vec<UserTokenType>) -> Self {
        EndpointConfig {
            security_mode: SecurityMode::SignAndEncrypt,
            security_policy: SecurityPolicy::Basic256Sha256,
            user_token_types,
        }
    }

    pub fn sign(user_token_types: Vec<UserTokenType>) -> Self {
        EndpointConfig {
            security_mode: SecurityMode::Sign,
            security_policy: SecurityPolicy::Basic256Sha256,
            user_token_types,
        }
    }
}

/// A username/password pair observed by the server role, before any
/// attack-level bookkeeping is attached.
#[derive(Clone, Debug)]
pub struct ObservedCredential {
    pub username: String,
    pub password: String,
    pub token_policy_uri: String,
    pub client_application_uri: Option<String>,
}

type CredentialCallback = dyn Fn(ObservedCredential) + Send + Sync;
type ReadOverride = dyn Fn(&NodeId) -> Option<Value> + Send + Sync;
type ServiceProxy = dyn Fn(&ServiceBody) -> Option<ServiceBody> + Send + Sync;

/// Behavior overrides that turn the plain victim server into an attack
/// tool. All default to off.
#[derive(Clone, Default)]
pub struct ServerHooks {
    /// Accept any username/password at ActivateSession.
    pub accept_any_user: bool,
    /// Called with every successfully decrypted UserName token.
    pub on_credential: Option<Arc<CredentialCallback>>,
    /// Consulted before the node store on every read.
    pub read_override: Option<Arc<ReadOverride>>,
    /// Full takeover of Read/Write/unknown service handling; used by the
    /// middleperson to relay traffic upstream.
    pub service_proxy: Option<Arc<ServiceProxy>>,
}

#[derive(Clone)]
pub struct ServerConfig {
    /// Application identity; may be absent only when every endpoint is
    /// mode None.
    pub identity: Option<Identity>,
    pub application_name: String,
    pub application_uri: String,
    pub product_uri: String,
    pub endpoints: Vec<EndpointConfig>,
    pub trust_policy: TrustPolicy,
    pub trust_store: Arc<Mutex<TrustStore>>,
    pub users: BTreeMap<String, String>,
    pub anonymous_allowed: bool,
    pub nodes: NodeStore,
    pub listen: SocketAddr,
    /// Advertise a plaintext (policy None) token policy for UserName
    /// tokens on mode-None endpoints instead of the encrypted default.
    pub plaintext_tokens_under_none: bool,
    /// Directory receiving one transcript file per accepted connection.
    pub transcript_dir: Option<PathBuf>,
    pub hooks: ServerHooks,
}

impl ServerConfig {
    pub fn new(identity: Identity) -> Self {
        ServerConfig {
            identity: Some(identity),
            application_name: "Server".into(),
            application_uri: "urn:uasec:server".into(),
            product_uri: "urn:uasec".into(),
            endpoints: vec![EndpointConfig::sign_and_encrypt(vec![
                UserTokenType::Anonymous,
                UserTokenType::UserName,
            ])],
            trust_policy: TrustPolicy::Strict,
            trust_store: Arc::new(Mutex::new(TrustStore::new())),
            users: BTreeMap::new(),
            anonymous_allowed: true,
            nodes: NodeStore::demo(),
            listen: "127.0.0.1:0".parse().expect("static addr"),
            plaintext_tokens_under_none: false,
            transcript_dir: None,
            hooks: ServerHooks::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Running server
// ---------------------------------------------------------------------------

struct ServerInner {
    config: ServerConfig,
    advertised_url: String,
    node_store: Mutex<NodeStore>,
    acceptances: Mutex<Vec<AcceptanceRecord>>,
    channel_counter: AtomicU32,
    session_counter: AtomicU32,
    connection_counter: AtomicU32,
    stop: AtomicBool,
}

/// Handle to a running server; dropping it stops the listener.
pub struct ServerHandle {
    inner: Arc<ServerInner>,
    local_addr: SocketAddr,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn url(&self) -> String {
        self.inner.advertised_url.clone()
    }

    /// Peer certificates accepted so far, with the acceptance reasons.
    pub fn acceptances(&self) -> Vec<AcceptanceRecord> {
        self.inner.acceptances.lock().expect("acceptance log poisoned").clone()
    }

    pub fn trust_store(&self) -> Arc<Mutex<TrustStore>> {
        Arc::clone(&self.inner.config.trust_store)
    }

    /// Read a node value straight out of the store, bypassing the wire.
    pub fn peek_node(&self, node: &NodeId) -> Result<Value, StatusCode> {
        self.inner.node_store.lock().expect("node store poisoned").read(node)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.inner.stop.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Bind and start serving. Returns once the listener is accepting.
pub fn serve(config: ServerConfig) -> Result<ServerHandle, ServerError> {
    let has_secure = config.endpoints.iter().any(|e| e.security_mode != SecurityMode::None);
    if has_secure && config.identity.is_none() {
        return Err(ServerError::InvalidConfig("secure endpoints require an identity"));
    }
    for endpoint in &config.endpoints {
        let mode_none = endpoint.security_mode == SecurityMode::None;
        let policy_none = endpoint.security_policy == SecurityPolicy::None;
        if mode_none != policy_none {
            return Err(ServerError::InvalidConfig("mode None iff policy None per endpoint"));
        }
    }

    let listener = TcpListener::bind(config.listen).map_err(ServerError::BindFailed)?;
    listener.set_nonblocking(true).map_err(ServerError::BindFailed)?;
    let local_addr = listener.local_addr().map_err(ServerError::BindFailed)?;
    let advertised_url = format!("opc.tcp://{local_addr}");

    let inner = Arc::new(ServerInner {
        node_store: Mutex::new(config.nodes.clone()),
        advertised_url,
        config,
        acceptances: Mutex::new(Vec::new()),
        channel_counter: AtomicU32::new(0),
        session_counter: AtomicU32::new(0),
        connection_counter: AtomicU32::new(0),
        stop: AtomicBool::new(false),
    });

    let acceptor_inner = Arc::clone(&inner);
    let join = std::thread::spawn(move || {
        let mut handlers = Vec::new();
        while !acceptor_inner.stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _peer)) => {
                    let conn_inner = Arc::clone(&acceptor_inner);
                    handlers.push(std::thread::spawn(move || {
                        let _ = handle_connection(conn_inner, stream);
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(_) => break,
            }
        }
        for handler in handlers {
            let _ = handler.join();
        }
    });

    Ok(ServerHandle { inner, local_addr, join: Some(join) })
}

// ---------------------------------------------------------------------------
// Connection handling
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct SessionState {
    session_id: NodeId,
    auth_token: Vec<u8>,
    server_nonce: Vec<u8>,
    activated: bool,
    #[allow(dead_code)]
    user: Option<String>,
}

struct Connection {
    inner: Arc<ServerInner>,
    conn: Conn,
    /// Implicit plain channel (id 0) for pre-OPN discovery traffic.
    discovery: SecureChannelState,
    channel: Option<SecureChannelState>,
    channel_mode: SecurityMode,
    sessions: Vec<SessionState>,
    pending: Vec<Vec<u8>>,
}

enum Step {
    Continue,
    Close,
}

fn handle_connection(inner: Arc<ServerInner>, stream: std::net::TcpStream) -> Result<(), TransportError> {
    let transcript = inner.config.transcript_dir.as_ref().and_then(|dir| {
        let index = inner.connection_counter.fetch_add(1, Ordering::SeqCst);
        TranscriptWriter::create(dir.join(format!("server-conn-{index:04}.uatx"))).ok()
    });
    let mut conn = Conn::new(stream, transcript)?;
    conn.server_handshake()?;

    let mut connection = Connection {
        inner,
        conn,
        discovery: SecureChannelState::plain(0, 0),
        channel: None,
        channel_mode: SecurityMode::None,
        sessions: Vec::new(),
        pending: Vec::new(),
    };
    loop {
        let chunk = match connection.conn.read_chunk() {
            Ok(chunk) => chunk,
            Err(TransportError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        };
        match connection.handle_chunk(&chunk) {
            Ok(Step::Continue) => {}
            Ok(Step::Close) => return Ok(()),
            Err(e) => {
                let _ = connection
                    .conn
                    .send_error(StatusCode::BAD_COMMUNICATION_ERROR, &e.to_string());
                return Ok(());
            }
        }
    }
}

impl Connection {
    fn handle_chunk(&mut self, chunk: &[u8]) -> Result<Step, TransportError> {
        let message_type = match chunk.get(..3) {
            Some(b"OPN") => MessageType::OpenChannel,
            Some(b"MSG") => MessageType::Message,
            Some(b"CLO") => MessageType::CloseChannel,
            Some(b"ERR") => return Ok(Step::Close),
            _ => {
                self.conn.send_error(
                    StatusCode::BAD_TCP_MESSAGE_TYPE_INVALID,
                    "unexpected message type",
                )?;
                return Ok(Step::Close);
            }
        };
        match message_type {
            MessageType::OpenChannel => self.handle_open(chunk),
            MessageType::Message | MessageType::CloseChannel => self.handle_message(chunk),
            _ => unreachable!(),
        }
    }

    // --- secure channel establishment -----------------------------------

    fn handle_open(&mut self, chunk: &[u8]) -> Result<Step, TransportError> {
        if self.channel.is_some() {
            self.conn.send_error(
                StatusCode::BAD_SECURE_CHANNEL_ID_INVALID,
                "channel already open on this connection",
            )?;
            return Ok(Step::Close);
        }
        let parsed = parse_chunk(chunk)?;
        let header = parsed
            .asymmetric
            .as_ref()
            .expect("OPN chunks carry an asymmetric header");
        let policy_uri = String::from_utf8_lossy(header.security_policy_uri.as_bytes()).into_owned();
        match SecurityPolicy::from_uri(&policy_uri) {
            Ok(SecurityPolicy::None) => self.open_plain(chunk),
            Ok(SecurityPolicy::Basic256Sha256) => self.open_secure(chunk),
            Err(_) => {
                self.conn.send_error(
                    StatusCode::BAD_SECURITY_POLICY_REJECTED,
                    &format!("security policy not supported: {policy_uri}"),
                )?;
                Ok(Step::Close)
            }
        }
    }

    fn open_plain(&mut self, chunk: &[u8]) -> Result<Step, TransportError> {
        let (body, sequence) = reassemble(std::slice::from_ref(&chunk.to_vec()))?;
        let ServiceBody::OpenSecureChannelRequest(request) = body else {
            self.conn
                .send_error(StatusCode::BAD_DECODING_ERROR, "OPN chunk without open request")?;
            return Ok(Step::Close);
        };
        if request.security_mode != SecurityMode::None {
            self.conn.send_error(
                StatusCode::BAD_SECURITY_MODE_REJECTED,
                "policy None supports only mode None",
            )?;
            return Ok(Step::Close);
        }
        if !self.endpoint_advertised(SecurityMode::None, SecurityPolicy::None) {
            self.conn.send_error(
                StatusCode::BAD_SECURITY_POLICY_REJECTED,
                "no mode-None endpoint offered",
            )?;
            return Ok(Step::Close);
        }

        let channel_id = self.inner.channel_counter.fetch_add(1, Ordering::SeqCst) + 1;
        let mut state = SecureChannelState::plain(channel_id, 1);
        state.recv_sequence = sequence.sequence_number;

        let response = ServiceBody::OpenSecureChannelResponse(
            crate::codec::service::OpenSecureChannelResponse {
                header: ResponseHeader {
                    request_handle: request.header.request_handle,
                    service_result: StatusCode::GOOD,
                },
                server_protocol_version: 0,
                channel_id,
                token_id: 1,
                token_lifetime_ms: TOKEN_LIFETIME_MS,
                server_nonce: UaByteString::new(Vec::new()),
            },
        );
        let chunks = encode_chunks(
            &response,
            HeaderKind::Asymmetric,
            Some(&mut state.chunk_channel()),
            sequence.request_id,
            self.conn.limits.max_chunk_size,
        )?;
        self.conn.write_chunk(&chunks[0])?;
        self.channel = Some(state);
        self.channel_mode = SecurityMode::None;
        Ok(Step::Continue)
    }

    fn open_secure(&mut self, chunk: &[u8]) -> Result<Step, TransportError> {
        let Some(identity) = self.inner.config.identity.clone() else {
            self.conn.send_error(
                StatusCode::BAD_SECURITY_POLICY_REJECTED,
                "server has no identity for secure channels",
            )?;
            return Ok(Step::Close);
        };
        let suite = SecurityPolicy::Basic256Sha256.suite();

        let policy = self.inner.config.trust_policy;
        let store = Arc::clone(&self.inner.config.trust_store);
        let opened = unprotect_open_secure_channel(chunk, &identity, |sender| {
            let mut store = store.lock().expect("trust store poisoned");
            match validate_peer(sender, policy, &mut store) {
                TrustDecision::Accept(_) => Ok(()),
                TrustDecision::Reject(status) => Err(status),
            }
        });
        let opened = match opened {
            Ok(opened) => opened,
            Err(SecChanError::TrustRejected(status)) => {
                // Rejection transport: ERR then close.
                self.conn.send_error(status, "certificate not trusted")?;
                return Ok(Step::Close);
            }
            Err(e) => {
                self.conn
                    .send_error(StatusCode::BAD_SECURITY_CHECKS_FAILED, &e.to_string())?;
                return Ok(Step::Close);
            }
        };

        // Re-run the (non-mutating) judgment to learn the acceptance
        // reason for the log.
        {
            let mut store = self.inner.config.trust_store.lock().expect("trust store poisoned");
            let reason = match validate_peer(&opened.sender, policy, &mut store) {
                TrustDecision::Accept(reason) => reason,
                // First call accepted; a disagreeing second call would be
                // a store race, count it as accept-all for the log.
                TrustDecision::Reject(_) => AcceptReason::PolicyAcceptAll,
            };
            self.inner
                .acceptances
                .lock()
                .expect("acceptance log poisoned")
                .push(AcceptanceRecord {
                    thumbprint_hex: opened.sender.thumbprint_hex(),
                    reason,
                });
        }

        let (body, sequence) = decode_open_request(&opened.request_bytes)?;
        let ServiceBody::OpenSecureChannelRequest(request) = body else {
            self.conn
                .send_error(StatusCode::BAD_DECODING_ERROR, "OPN chunk without open request")?;
            return Ok(Step::Close);
        };
        if request.security_mode == SecurityMode::None {
            self.conn.send_error(
                StatusCode::BAD_SECURITY_MODE_REJECTED,
                "secure policy requires Sign or SignAndEncrypt",
            )?;
            return Ok(Step::Close);
        }
        if !self.endpoint_advertised(request.security_mode, SecurityPolicy::Basic256Sha256) {
            self.conn.send_error(
                StatusCode::BAD_SECURITY_MODE_REJECTED,
                "requested mode/policy pair not offered",
            )?;
            return Ok(Step::Close);
        }
        let client_nonce = request.client_nonce.as_bytes().to_vec();
        if client_nonce.len() != suite.nonce_length {
            self.conn.send_error(StatusCode::BAD_NONCE_INVALID, "bad client nonce length")?;
            return Ok(Step::Close);
        }

        let channel_id = self.inner.channel_counter.fetch_add(1, Ordering::SeqCst) + 1;
        let server_nonce = suite.random_nonce();
        let mut state = SecureChannelState::established(
            channel_id,
            1,
            suite,
            request.security_mode,
            server_nonce.clone(),
            client_nonce,
            identity.clone(),
            opened.sender.clone(),
        )
        .map_err(|_| CodecError::Malformed {
            what: "channel state",
            detail: "could not derive keys",
        })?;
        state.recv_sequence = sequence.sequence_number;
        state.send_sequence = 1;

        let response = ServiceBody::OpenSecureChannelResponse(
            crate::codec::service::OpenSecureChannelResponse {
                header: ResponseHeader {
                    request_handle: request.header.request_handle,
                    service_result: StatusCode::GOOD,
                },
                server_protocol_version: 0,
                channel_id,
                token_id: 1,
                token_lifetime_ms: TOKEN_LIFETIME_MS,
                server_nonce: UaByteString::new(server_nonce),
            },
        );
        let mut response_bytes = Vec::new();
        SequenceHeader { sequence_number: 1, request_id: sequence.request_id }
            .write(&mut response_bytes);
        response_bytes.extend_from_slice(&response.encode());
        let protected = protect_open_secure_channel(
            channel_id,
            &response_bytes,
            &identity,
            &opened.sender,
            &suite,
        )
        .map_err(|e| {
            TransportError::PeerError {
                status: StatusCode::BAD_SECURITY_CHECKS_FAILED,
                reason: e.to_string(),
            }
        })?;
        self.conn.write_chunk(&protected)?;
        self.channel_mode = request.security_mode;
        self.channel = Some(state);
        Ok(Step::Continue)
    }

    fn endpoint_advertised(&self, mode: SecurityMode, policy: SecurityPolicy) -> bool {
        self.inner
            .config
            .endpoints
            .iter()
            .any(|e| e.security_mode == mode && e.security_policy == policy)
    }

    // --- established-channel traffic -------------------------------------

    fn handle_message(&mut self, chunk: &[u8]) -> Result<Step, TransportError> {
        let plain = match &mut self.channel {
            Some(state) => match unprotect_chunk(chunk, state) {
                Ok(plain) => plain,
                Err(e) => {
                    self.conn
                        .send_error(StatusCode::BAD_SECURITY_CHECKS_FAILED, &e.to_string())?;
                    return Ok(Step::Close);
                }
            },
            // Pre-OPN traffic runs on the implicit discovery channel 0.
            None => chunk.to_vec(),
        };

        let parsed = parse_chunk(&plain)?;
        let expected_channel =
            self.channel.as_ref().map(|c| c.channel_id).unwrap_or(0);
        let symmetric = parsed.symmetric.expect("MSG/CLO chunks carry symmetric header");
        if symmetric.channel_id != expected_channel {
            self.conn
                .send_error(StatusCode::BAD_SECURE_CHANNEL_ID_INVALID, "unknown channel id")?;
            return Ok(Step::Close);
        }
        let flag = parsed.header.chunk_flag;
        let is_close = parsed.header.message_type == MessageType::CloseChannel;
        self.pending.push(plain);
        match flag {
            ChunkFlag::Intermediate => return Ok(Step::Continue),
            ChunkFlag::Abort => {
                self.pending.clear();
                return Ok(Step::Continue);
            }
            ChunkFlag::Final => {}
        }

        let chunks = std::mem::take(&mut self.pending);
        let (body, sequence) = match reassemble(&chunks) {
            Ok(ok) => ok,
            Err(e) => {
                self.conn.send_error(StatusCode::BAD_DECODING_ERROR, &e.to_string())?;
                return Ok(Step::Close);
            }
        };

        if is_close {
            // CloseSecureChannel gets no response.
            return Ok(Step::Close);
        }

        let response = self.dispatch(body);
        match response {
            None => Ok(Step::Continue),
            Some(response) => {
                self.send_response(&response, sequence.request_id)?;
                Ok(Step::Continue)
            }
        }
    }

    fn send_response(&mut self, body: &ServiceBody, request_id: u32) -> Result<(), TransportError> {
        let max_chunk = self.conn.limits.max_chunk_size;
        let state = match &mut self.channel {
            Some(state) => state,
            None => &mut self.discovery,
        };
        let chunks =
            encode_chunks(body, HeaderKind::Symmetric, Some(&mut state.chunk_channel()), request_id, max_chunk)?;
        for chunk in &chunks {
            let protected = protect_chunk(chunk, state).map_err(|e| TransportError::PeerError {
                status: StatusCode::BAD_SECURITY_CHECKS_FAILED,
                reason: e.to_string(),
            })?;
            self.conn.write_chunk(&protected)?;
        }
        Ok(())
    }

    // --- service dispatch -------------------------------------------------

    fn dispatch(&mut self, body: ServiceBody) -> Option<ServiceBody> {
        let on_discovery_channel = self.channel.is_none();
        match &body {
            ServiceBody::FindServersRequest(_) | ServiceBody::GetEndpointsRequest(_) => {}
            _ if on_discovery_channel => {
                // Only the unauthenticated discovery primitives exist
                // before a channel is opened.
                return Some(fault(request_handle_of(&body), StatusCode::BAD_SECURE_CHANNEL_ID_INVALID));
            }
            _ => {}
        }

        // Middleperson-style takeover of data services.
        if matches!(
            body,
            ServiceBody::ReadRequest(_) | ServiceBody::WriteRequest(_) | ServiceBody::Unknown { .. }
        ) {
            if let Some(proxy) = self.inner.config.hooks.service_proxy.clone() {
                if let Some(mut response) = proxy(&body) {
                    set_response_handle(&mut response, request_handle_of(&body));
                    return Some(response);
                }
            }
        }

        match body {
            ServiceBody::FindServersRequest(request) => {
                Some(ServiceBody::FindServersResponse(FindServersResponse {
                    header: ResponseHeader {
                        request_handle: request.header.request_handle,
                        service_result: StatusCode::GOOD,
                    },
                    servers: vec![self.application_description()],
                }))
            }
            ServiceBody::GetEndpointsRequest(request) => {
                Some(ServiceBody::GetEndpointsResponse(GetEndpointsResponse {
                    header: ResponseHeader {
                        request_handle: request.header.request_handle,
                        service_result: StatusCode::GOOD,
                    },
                    endpoints: self.endpoint_descriptions(),
                }))
            }
            ServiceBody::CreateSessionRequest(request) => Some(self.create_session(request)),
            ServiceBody::ActivateSessionRequest(request) => Some(self.activate_session(request)),
            ServiceBody::ReadRequest(request) => Some(self.read(request)),
            ServiceBody::WriteRequest(request) => Some(self.write(request)),
            ServiceBody::CloseSessionRequest(request) => {
                let handle = request.header.request_handle;
                let token = request.header.auth_token.as_bytes().to_vec();
                self.sessions.retain(|s| s.auth_token != token);
                Some(ServiceBody::CloseSessionResponse(
                    crate::codec::service::CloseSessionResponse {
                        header: ResponseHeader {
                            request_handle: handle,
                            service_result: StatusCode::GOOD,
                        },
                    },
                ))
            }
            other => Some(fault(request_handle_of(&other), StatusCode::BAD_SERVICE_UNSUPPORTED)),
        }
    }

    fn application_description(&self) -> ApplicationDescription {
        ApplicationDescription {
            application_uri: UaString::new(self.inner.config.application_uri.clone()),
            product_uri: UaString::new(self.inner.config.product_uri.clone()),
            application_name: LocalizedText::text_only(self.inner.config.application_name.clone()),
            application_type: 0,
            discovery_urls: vec![UaString::new(self.inner.advertised_url.clone())],
        }
    }

    fn endpoint_descriptions(&self) -> Vec<EndpointDescription> {
        let config = &self.inner.config;
        let certificate = config
            .identity
            .as_ref()
            .map(|i| UaByteString::new(i.certificate.der.clone()))
            .unwrap_or(UaByteString::NULL);
        config
            .endpoints
            .iter()
            .map(|endpoint| {
                let user_identity_tokens = endpoint
                    .user_token_types
                    .iter()
                    .map(|&token_type| self.token_policy(endpoint, token_type))
                    .collect();
                EndpointDescription {
                    endpoint_url: UaString::new(self.inner.advertised_url.clone()),
                    server: self.application_description(),
                    server_certificate: certificate.clone(),
                    security_mode: endpoint.security_mode,
                    security_policy_uri: UaString::new(endpoint.security_policy.uri()),
                    user_identity_tokens,
                    security_level: match endpoint.security_mode {
                        SecurityMode::SignAndEncrypt => 3,
                        SecurityMode::Sign => 2,
                        SecurityMode::None => 0,
                    },
                }
            })
            .collect()
    }

    fn token_policy(&self, endpoint: &EndpointConfig, token_type: UserTokenType) -> UserTokenPolicy {
        match token_type {
            UserTokenType::Anonymous => UserTokenPolicy {
                policy_id: UaString::new("anonymous"),
                token_type,
                security_policy_uri: UaString::new(SecurityPolicy::None.uri()),
            },
            UserTokenType::UserName => {
                let uri = if endpoint.security_policy != SecurityPolicy::None {
                    endpoint.security_policy.uri()
                } else if self.inner.config.plaintext_tokens_under_none {
                    SecurityPolicy::None.uri()
                } else {
                    // Passwords stay encrypted even on mode-None endpoints.
                    SecurityPolicy::Basic256Sha256.uri()
                };
                UserTokenPolicy {
                    policy_id: UaString::new("username"),
                    token_type,
                    security_policy_uri: UaString::new(uri),
                }
            }
            UserTokenType::Certificate => UserTokenPolicy {
                policy_id: UaString::new("certificate"),
                token_type,
                security_policy_uri: UaString::new(SecurityPolicy::Basic256Sha256.uri()),
            },
        }
    }

    fn create_session(
        &mut self,
        request: crate::codec::service::CreateSessionRequest,
    ) -> ServiceBody {
        let session_index = self.inner.session_counter.fetch_add(1, Ordering::SeqCst) + 1;
        let mut auth_token = vec![0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut auth_token);
        let mut server_nonce = vec![0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut server_nonce);

        let session = SessionState {
            session_id: NodeId::numeric(1, 0x0100_0000 + session_index),
            auth_token: auth_token.clone(),
            server_nonce: server_nonce.clone(),
            activated: false,
            user: None,
        };
        let response = ServiceBody::CreateSessionResponse(CreateSessionResponse {
            header: ResponseHeader {
                request_handle: request.header.request_handle,
                service_result: StatusCode::GOOD,
            },
            session_id: session.session_id.clone(),
            auth_token: UaByteString::new(auth_token),
            server_nonce: UaByteString::new(server_nonce),
            server_certificate: self
                .inner
                .config
                .identity
                .as_ref()
                .map(|i| UaByteString::new(i.certificate.der.clone()))
                .unwrap_or(UaByteString::NULL),
        });
        self.sessions.push(session);
        response
    }

    fn activate_session(
        &mut self,
        request: ActivateSessionRequest,
    ) -> ServiceBody {
        let handle = request.header.request_handle;
        let token = request.header.auth_token.as_bytes().to_vec();
        let Some(index) = self.sessions.iter().position(|s| s.auth_token == token) else {
            return fault(handle, StatusCode::BAD_SESSION_ID_INVALID);
        };

        let endpoint = self.active_endpoint();
        let status = self.check_user_identity(&request.user_identity_token, &endpoint, index);
        match status {
            Ok(user) => {
                let mut server_nonce = vec![0u8; 32];
                rand::rngs::OsRng.fill_bytes(&mut server_nonce);
                let session = &mut self.sessions[index];
                session.activated = true;
                session.user = user;
                session.server_nonce = server_nonce.clone();
                ServiceBody::ActivateSessionResponse(ActivateSessionResponse {
                    header: ResponseHeader {
                        request_handle: handle,
                        service_result: StatusCode::GOOD,
                    },
                    server_nonce: UaByteString::new(server_nonce),
                })
            }
            Err(status) => fault(handle, status),
        }
    }

    /// The endpoint the current channel matches. Channels are only opened
    /// for advertised (mode, policy) pairs, so this always finds one.
    fn active_endpoint(&self) -> EndpointConfig {
        let mode = self.channel_mode;
        self.inner
            .config
            .endpoints
            .iter()
            .find(|e| e.security_mode == mode)
            .cloned()
            .unwrap_or_else(|| EndpointConfig::none(vec![UserTokenType::Anonymous]))
    }

    fn check_user_identity(
        &self,
        token: &UserIdentityToken,
        endpoint: &EndpointConfig,
        session_index: usize,
    ) -> Result<Option<String>, StatusCode> {
        let config = &self.inner.config;
        match token {
            UserIdentityToken::Anonymous { .. } => {
                if !endpoint.user_token_types.contains(&UserTokenType::Anonymous)
                    || !config.anonymous_allowed
                {
                    return Err(StatusCode::BAD_IDENTITY_TOKEN_REJECTED);
                }
                Ok(None)
            }
            UserIdentityToken::UserName { username, password, encryption_algorithm, .. } => {
                if !endpoint.user_token_types.contains(&UserTokenType::UserName) {
                    return Err(StatusCode::BAD_IDENTITY_TOKEN_REJECTED);
                }
                let username = username.as_text().into_owned();
                let session = &self.sessions[session_index];

                let password = if encryption_algorithm.is_null()
                    || encryption_algorithm.as_bytes().is_empty()
                {
                    // Plaintext token: only honored when we advertise a
                    // policy-None token policy for this endpoint.
                    let advertised_plain = endpoint.security_policy == SecurityPolicy::None
                        && config.plaintext_tokens_under_none;
                    if !advertised_plain {
                        return Err(StatusCode::BAD_IDENTITY_TOKEN_REJECTED);
                    }
                    String::from_utf8_lossy(password.as_bytes()).into_owned()
                } else {
                    let Some(identity) = &config.identity else {
                        return Err(StatusCode::BAD_IDENTITY_TOKEN_REJECTED);
                    };
                    let suite = SecurityPolicy::Basic256Sha256.suite();
                    match decrypt_password_token(
                        password.as_bytes(),
                        &identity.private_key,
                        &session.server_nonce,
                        &suite,
                    ) {
                        Ok(password) => password,
                        Err(SecChanError::NonceMismatch) => {
                            return Err(StatusCode::BAD_NONCE_INVALID)
                        }
                        Err(_) => return Err(StatusCode::BAD_IDENTITY_TOKEN_REJECTED),
                    }
                };

                if let Some(callback) = &config.hooks.on_credential {
                    callback(ObservedCredential {
                        username: username.clone(),
                        password: password.clone(),
                        token_policy_uri: if encryption_algorithm.as_bytes().is_empty() {
                            SecurityPolicy::None.uri().to_string()
                        } else {
                            SecurityPolicy::Basic256Sha256.uri().to_string()
                        },
                        client_application_uri: self
                            .channel
                            .as_ref()
                            .and_then(|c| c.remote_certificate.as_ref())
                            .map(|c| c.application_uri.clone()),
                    });
                }

                if config.hooks.accept_any_user {
                    return Ok(Some(username));
                }
                match config.users.get(&username) {
                    Some(expected) if *expected == password => Ok(Some(username)),
                    _ => Err(StatusCode::BAD_USER_ACCESS_DENIED),
                }
            }
        }
    }

    fn session_for(&self, auth_token: &[u8]) -> Result<&SessionState, StatusCode> {
        let session = self
            .sessions
            .iter()
            .find(|s| s.auth_token == auth_token)
            .ok_or(StatusCode::BAD_SESSION_ID_INVALID)?;
        if !session.activated {
            return Err(StatusCode::BAD_SESSION_NOT_ACTIVATED);
        }
        Ok(session)
    }

    fn read(&mut self, request: crate::codec::service::ReadRequest) -> ServiceBody {
        let handle = request.header.request_handle;
        if let Err(status) = self.session_for(request.header.auth_token.as_bytes()) {
            return fault(handle, status);
        }
        let store = self.inner.node_store.lock().expect("node store poisoned");
        let results = request
            .nodes
            .iter()
            .map(|node| {
                if let Some(over) = &self.inner.config.hooks.read_override {
                    if let Some(value) = over(node) {
                        return ReadResult { status: StatusCode::GOOD, value: Some(value) };
                    }
                }
                match store.read(node) {
                    Ok(value) => ReadResult { status: StatusCode::GOOD, value: Some(value) },
                    Err(status) => ReadResult { status, value: None },
                }
            })
            .collect();
        ServiceBody::ReadResponse(ReadResponse {
            header: ResponseHeader { request_handle: handle, service_result: StatusCode::GOOD },
            results,
        })
    }

    fn write(&mut self, request: crate::codec::service::WriteRequest) -> ServiceBody {
        let handle = request.header.request_handle;
        if let Err(status) = self.session_for(request.header.auth_token.as_bytes()) {
            return fault(handle, status);
        }
        let mut store = self.inner.node_store.lock().expect("node store poisoned");
        let results = request
            .writes
            .iter()
            .map(|w| store.write(&w.node, w.value.clone()))
            .collect();
        ServiceBody::WriteResponse(WriteResponse {
            header: ResponseHeader { request_handle: handle, service_result: StatusCode::GOOD },
            results,
        })
    }
}

fn decode_open_request(request_bytes: &[u8]) -> Result<(ServiceBody, SequenceHeader), CodecError> {
    if request_bytes.len() < 8 {
        return Err(CodecError::Truncated { need: 8, have: request_bytes.len() });
    }
    let mut reader = crate::codec::Reader::new(&request_bytes[..8]);
    let sequence = SequenceHeader::read(&mut reader)?;
    let body = ServiceBody::decode(&request_bytes[8..])?;
    Ok((body, sequence))
}

fn fault(request_handle: u32, status: StatusCode) -> ServiceBody {
    ServiceBody::ServiceFault(ServiceFault {
        header: ResponseHeader { request_handle, service_result: status },
    })
}

fn request_handle_of(body: &ServiceBody) -> u32 {
    match body {
        ServiceBody::FindServersRequest(r) => r.header.request_handle,
        ServiceBody::GetEndpointsRequest(r) => r.header.request_handle,
        ServiceBody::OpenSecureChannelRequest(r) => r.header.request_handle,
        ServiceBody::CloseSecureChannelRequest(r) => r.header.request_handle,
        ServiceBody::CreateSessionRequest(r) => r.header.request_handle,
        ServiceBody::ActivateSessionRequest(r) => r.header.request_handle,
        ServiceBody::ReadRequest(r) => r.header.request_handle,
        ServiceBody::WriteRequest(r) => r.header.request_handle,
        ServiceBody::CloseSessionRequest(r) => r.header.request_handle,
        _ => 0,
    }
}

fn set_response_handle(body: &mut ServiceBody, request_handle: u32) {
    let header = match body {
        ServiceBody::FindServersResponse(r) => &mut r.header,
        ServiceBody::GetEndpointsResponse(r) => &mut r.header,
        ServiceBody::OpenSecureChannelResponse(r) => &mut r.header,
        ServiceBody::CreateSessionResponse(r) => &mut r.header,
        ServiceBody::ActivateSessionResponse(r) => &mut r.header,
        ServiceBody::ReadResponse(r) => &mut r.header,
        ServiceBody::WriteResponse(r) => &mut r.header,
        ServiceBody::CloseSessionResponse(r) => &mut r.header,
        ServiceBody::ServiceFault(r) => &mut r.header,
        _ => return,
    };
    header.request_handle = request_handle;
}

