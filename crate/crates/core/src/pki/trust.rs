//! Trust decision logic: the secure baseline (explicit trustlist) and the
//! three pitfall profiles, plus on-disk persistence of trusted and
//! rejected certificates.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::certificate::{unix_now, CertificateRecord};
use super::PkiError;
use crate::status::StatusCode;

/// How a peer certificate is judged.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum TrustPolicy {
    /// Accept only certificates on the explicit trustlist.
    Strict,
    /// No validation at all; every certificate is accepted.
    AcceptAll,
    /// A library-style acceptance flag. With `auto_accept` (the shipped
    /// default) every certificate passes; switched off, behaves exactly
    /// like [`TrustPolicy::Strict`].
    AcceptAllDefaultFlag { auto_accept: bool },
    /// Unknown certificates are rejected but parked on a rejected list
    /// from which an operator may later promote them.
    RejectedStore,
}

impl Default for TrustPolicy {
    fn default() -> Self {
        TrustPolicy::Strict
    }
}

impl TrustPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            TrustPolicy::Strict => "strict",
            TrustPolicy::AcceptAll => "accept-all",
            TrustPolicy::AcceptAllDefaultFlag { .. } => "accept-all-default-flag",
            TrustPolicy::RejectedStore => "rejected-store",
        }
    }
}

/// Why a certificate was accepted. Recorded so a later assessment can
/// trace an acceptance back to the trust-management pitfall behind it.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AcceptReason {
    /// Thumbprint found on the trustlist. `promoted` marks entries that
    /// arrived there via the rejected-list promotion workflow rather than
    /// out-of-band provisioning.
    Trustlisted { promoted: bool },
    /// Policy performs no validation.
    PolicyAcceptAll,
    /// The auto-accept default flag was on.
    AutoAcceptFlag,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TrustDecision {
    Accept(AcceptReason),
    Reject(StatusCode),
}

/// One accepted peer certificate and why it was accepted; victims keep a
/// log of these so an assessment can recover the pitfall that let an
/// attacker in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    pub thumbprint_hex: String,
    pub reason: AcceptReason,
}

impl TrustDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, TrustDecision::Accept(_))
    }
}

/// Certificates this application trusts, plus the rejected list some
/// profiles maintain. Mutation is serialized behind one `&mut` borrow;
/// wrap in a mutex when shared.
#[derive(Clone, Default)]
pub struct TrustStore {
    trusted: BTreeMap<[u8; 20], CertificateRecord>,
    rejected: Vec<CertificateRecord>,
    promoted: BTreeSet<[u8; 20]>,
    persistence_path: Option<PathBuf>,
}

impl TrustStore {
    pub fn new() -> Self {
        TrustStore::default()
    }

    /// Store persisting every change under `dir/trusted` and
    /// `dir/rejected` as `<hex-thumbprint>.der` files.
    pub fn with_persistence(dir: impl Into<PathBuf>) -> Result<Self, PkiError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("trusted"))?;
        fs::create_dir_all(dir.join("rejected"))?;
        Ok(TrustStore { persistence_path: Some(dir), ..TrustStore::default() })
    }

    /// Load a persisted store back from disk.
    pub fn load(dir: impl Into<PathBuf>) -> Result<Self, PkiError> {
        let dir = dir.into();
        let mut store = TrustStore::with_persistence(&dir)?;
        for entry in fs::read_dir(dir.join("trusted"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "der") {
                let record = CertificateRecord::parse(&fs::read(&path)?)?;
                store.trusted.insert(record.thumbprint, record);
            }
        }
        for entry in fs::read_dir(dir.join("rejected"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "der") {
                store.rejected.push(CertificateRecord::parse(&fs::read(&path)?)?);
            }
        }
        Ok(store)
    }

    pub fn trusted_count(&self) -> usize {
        self.trusted.len()
    }

    pub fn rejected(&self) -> &[CertificateRecord] {
        &self.rejected
    }

    pub fn is_trusted(&self, record: &CertificateRecord) -> bool {
        // Full DER equality as tiebreak: a colliding thumbprint with
        // different bytes is not a match.
        self.trusted.get(&record.thumbprint).is_some_and(|t| t.der == record.der)
    }

    /// Out-of-band provisioning: put a certificate straight on the
    /// trustlist.
    pub fn add_trusted(&mut self, record: CertificateRecord) -> Result<(), PkiError> {
        self.persist_file("trusted", &record)?;
        self.promoted.remove(&record.thumbprint);
        self.trusted.insert(record.thumbprint, record);
        Ok(())
    }

    fn record_rejected(&mut self, record: &CertificateRecord) -> Result<(), PkiError> {
        self.persist_file("rejected", record)?;
        self.rejected.push(record.clone());
        Ok(())
    }

    /// Move a certificate from the rejected list to the trustlist, the
    /// manual operator workflow. The entry keeps a `promoted` mark so the
    /// provenance of the trust remains visible.
    pub fn promote_rejected(&mut self, thumbprint: &[u8; 20]) -> Result<(), PkiError> {
        let position = self
            .rejected
            .iter()
            .position(|r| &r.thumbprint == thumbprint)
            .ok_or(PkiError::NotInRejectedList)?;
        let record = self.rejected.remove(position);
        self.rejected.retain(|r| &r.thumbprint != thumbprint);
        if let Some(dir) = &self.persistence_path {
            let _ = fs::remove_file(rejected_path(dir, thumbprint));
        }
        self.persist_file("trusted", &record)?;
        self.promoted.insert(record.thumbprint);
        self.trusted.insert(record.thumbprint, record);
        Ok(())
    }

    pub fn was_promoted(&self, thumbprint: &[u8; 20]) -> bool {
        self.promoted.contains(thumbprint)
    }

    fn persist_file(&self, kind: &str, record: &CertificateRecord) -> Result<(), PkiError> {
        if let Some(dir) = &self.persistence_path {
            let path = dir.join(kind).join(format!("{}.der", record.thumbprint_hex()));
            fs::write(path, &record.der)?;
        }
        Ok(())
    }
}

fn rejected_path(dir: &Path, thumbprint: &[u8; 20]) -> PathBuf {
    dir.join("rejected").join(format!("{}.der", hex::encode(thumbprint)))
}

/// Judge a peer certificate under the given policy.
///
/// Only `RejectedStore` mutates the store (it parks the rejected
/// certificate); all other policies leave it untouched.
pub fn validate_peer(
    peer: &CertificateRecord,
    policy: TrustPolicy,
    store: &mut TrustStore,
) -> TrustDecision {
    match policy {
        TrustPolicy::AcceptAll => TrustDecision::Accept(AcceptReason::PolicyAcceptAll),
        TrustPolicy::AcceptAllDefaultFlag { auto_accept: true } => {
            TrustDecision::Accept(AcceptReason::AutoAcceptFlag)
        }
        TrustPolicy::Strict | TrustPolicy::AcceptAllDefaultFlag { auto_accept: false } => {
            strict_decision(peer, store)
        }
        TrustPolicy::RejectedStore => {
            let decision = strict_decision(peer, store);
            if let TrustDecision::Reject(StatusCode::BAD_CERTIFICATE_UNTRUSTED) = decision {
                // Persist for later operator review; best effort on IO.
                let _ = store.record_rejected(peer);
            }
            decision
        }
    }
}

fn strict_decision(peer: &CertificateRecord, store: &TrustStore) -> TrustDecision {
    if !peer.valid_at(unix_now()) {
        return TrustDecision::Reject(StatusCode::BAD_CERTIFICATE_TIME_INVALID);
    }
    if store.is_trusted(peer) {
        TrustDecision::Accept(AcceptReason::Trustlisted {
            promoted: store.was_promoted(&peer.thumbprint),
        })
    } else {
        TrustDecision::Reject(StatusCode::BAD_CERTIFICATE_UNTRUSTED)
    }
}
