//! The three trust-management attack engines — rogue server, rogue
//! client, middleperson — plus the discovery scanner they start from.
//!
//! All three build on the ordinary client and server roles; what makes
//! them attacks is certificate cloning, indiscriminate trust, credential
//! capture and replay, not any protocol deviation.

mod middleperson;
mod rogue_client;
mod rogue_server;

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client;
use crate::codec::service::{ApplicationDescription, EndpointDescription};
use crate::codec::{SecurityMode, UserTokenType};
use crate::pki::{AcceptReason, CertificateRecord, PkiError};
use crate::secchan::SecurityPolicy;
use crate::server::{EndpointConfig, ServerError};

pub use middleperson::{middleperson, ManipulationHooks, MiddlepersonHandle, MiddlepersonOptions};
pub use rogue_client::{rogue_client, RogueClientOptions};
pub use rogue_server::{rogue_server, RogueServerHandle, RogueServerOptions, ValueFabricator};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error("target descriptor carries no usable endpoint")]
    NoUsableEndpoint,
}

/// Everything the unauthenticated discovery services reveal about one
/// server; the complete ingredient list for cloning it.
#[derive(Clone, Debug)]
pub struct TargetDescriptor {
    pub address: String,
    pub application: ApplicationDescription,
    pub endpoints: Vec<EndpointDescription>,
    pub server_certificate: Option<CertificateRecord>,
}

impl TargetDescriptor {
    pub fn url(&self) -> String {
        format!("opc.tcp://{}", self.address)
    }

    /// Endpoint configs mirroring the target's advertised endpoints,
    /// skipping any with a policy this stack does not implement.
    pub(crate) fn mirrored_endpoints(&self) -> Vec<EndpointConfig> {
        self.endpoints
            .iter()
            .filter_map(|endpoint| {
                let policy =
                    SecurityPolicy::from_uri(&endpoint.security_policy_uri.as_text()).ok()?;
                let user_token_types: Vec<UserTokenType> = endpoint
                    .user_identity_tokens
                    .iter()
                    .map(|t| t.token_type)
                    .collect();
                Some(EndpointConfig {
                    security_mode: endpoint.security_mode,
                    security_policy: policy,
                    user_token_types,
                })
            })
            .collect()
    }

    pub fn secure_endpoints(&self) -> impl Iterator<Item = &EndpointDescription> {
        self.endpoints.iter().filter(|e| e.security_mode != SecurityMode::None)
    }
}

/// A username and the recovered plaintext password, with capture
/// provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CapturedCredential {
    pub username: String,
    /// The decrypted plaintext, never ciphertext.
    pub password: String,
    pub token_policy_uri: String,
    pub captured_at_micros: u64,
    pub victim_client_uri: Option<String>,
}

pub(crate) fn now_micros() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AttackKind {
    RogueServer,
    RogueClient,
    Middleperson,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::RogueServer => "rogue-server",
            AttackKind::RogueClient => "rogue-client",
            AttackKind::Middleperson => "middleperson",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AttackResult {
    Vulnerable,
    Secure,
    Inconclusive,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum EvidenceKind {
    CredentialCaptured,
    UntrustedChannelAccepted,
    ValueRead,
    ValueWritten,
    SessionReplayed,
    ForwardedTraffic,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evidence {
    pub kind: EvidenceKind,
    pub detail: String,
    /// The victim-side acceptance reason behind this evidence, when the
    /// harness could recover one from the victim's logs.
    pub accept_reason: Option<AcceptReason>,
}

impl Evidence {
    pub fn new(kind: EvidenceKind, detail: impl Into<String>) -> Self {
        Evidence { kind, detail: detail.into(), accept_reason: None }
    }
}

/// Outcome of one attack run against one deployment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: AttackKind,
    pub result: AttackResult,
    pub evidence: Vec<Evidence>,
    /// Steps that did not produce evidence: rejections, failures, scope
    /// notes.
    pub notes: Vec<String>,
    pub transcript: Option<String>,
}

impl AttackOutcome {
    pub fn secure(attack: AttackKind) -> Self {
        AttackOutcome {
            attack,
            result: AttackResult::Secure,
            evidence: Vec::new(),
            notes: Vec::new(),
            transcript: None,
        }
    }

    pub fn has_evidence(&self, kind: EvidenceKind) -> bool {
        self.evidence.iter().any(|e| e.kind == kind)
    }
}

/// Outcome of a scan sweep: descriptors for responsive OPC UA servers and
/// notes for everything else. Per-target failures are recorded, never
/// raised.
#[derive(Clone, Debug, Default)]
pub struct ScanOutcome {
    pub targets: Vec<TargetDescriptor>,
    pub skipped: Vec<ScanNote>,
}

#[derive(Clone, Debug)]
pub struct ScanNote {
    pub address: String,
    pub reason: String,
}

/// Probe each `host:port` (port 4840 when absent) for an OPC UA server
/// and collect application descriptions and endpoints over mode-None
/// discovery channels.
pub fn scan(addresses: &[String]) -> ScanOutcome {
    let mut outcome = ScanOutcome::default();
    for entry in addresses {
        let address =
            if entry.contains(':') { entry.clone() } else { format!("{entry}:4840") };
        let url = format!("opc.tcp://{address}");
        match probe_target(&address, &url) {
            Ok(target) => outcome.targets.push(target),
            Err(reason) => outcome.skipped.push(ScanNote { address, reason }),
        }
    }
    outcome
}

fn probe_target(address: &str, url: &str) -> Result<TargetDescriptor, String> {
    let servers = match client::find_servers(url) {
        Ok(servers) => servers,
        Err(client::ClientError::ConnectFailed(e)) => return Err(format!("unreachable: {e}")),
        // Listener answered, but not with this protocol.
        Err(e) => return Err(format!("not an OPC UA endpoint: {e}")),
    };
    let application = servers.into_iter().next().ok_or("no application description")?;
    let endpoints = client::discover(url).map_err(|e| format!("discovery failed: {e}"))?;
    let server_certificate = endpoints
        .iter()
        .find(|e| !e.server_certificate.is_null())
        .and_then(|e| CertificateRecord::parse(e.server_certificate.as_bytes()).ok());
    Ok(TargetDescriptor {
        address: address.to_string(),
        application,
        endpoints,
        server_certificate,
    })
}
