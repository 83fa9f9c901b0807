//! X.509 certificate generation, cloning, fingerprinting, on-disk key
//! storage, and the trust decision logic shared by the server and client
//! roles.

mod certificate;
mod trust;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey};
use rsa::RsaPrivateKey;
use thiserror::Error;

pub use certificate::{
    clone_certificate, generate_certificate_without_san, generate_identity, thumbprint, unix_now,
    CertificateRecord, Identity,
};
pub use trust::{validate_peer, AcceptReason, AcceptanceRecord, TrustDecision, TrustPolicy, TrustStore};

#[derive(Debug, Error)]
pub enum PkiError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("unparseable certificate: {0}")]
    UnparseableCertificate(String),
    #[error("thumbprint not in rejected list")]
    NotInRejectedList,
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
    #[error("certificate build failed: {0}")]
    CertificateBuild(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Identity {
    /// Write the certificate as `cert.der` and the key as PKCS#8
    /// `key.p8.der` into `dir`.
    pub fn save_to_dir(&self, dir: &Path) -> Result<(), PkiError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("cert.der"), &self.certificate.der)?;
        let key_der = self
            .private_key
            .to_pkcs8_der()
            .map_err(|e| PkiError::KeyGeneration(e.to_string()))?;
        fs::write(dir.join("key.p8.der"), key_der.as_bytes())?;
        Ok(())
    }

    pub fn load_from_dir(dir: &Path) -> Result<Identity, PkiError> {
        Identity::load_from_files(&dir.join("cert.der"), &dir.join("key.p8.der"))
    }

    pub fn load_from_files(cert: &Path, key: &Path) -> Result<Identity, PkiError> {
        let certificate = CertificateRecord::parse(&fs::read(cert)?)?;
        let private_key = RsaPrivateKey::from_pkcs8_der(&fs::read(key)?)
            .map_err(|e| PkiError::KeyGeneration(e.to_string()))?;
        Ok(Identity { certificate, private_key })
    }
}

/// Lazily generated, cached identities keyed by role name.
///
/// RSA key generation dominates scenario setup time; the pool lets a
/// harness reuse one key pair per role across repeated runs while tests
/// that assert key freshness call [`generate_identity`] directly.
#[derive(Clone, Default)]
pub struct IdentityPool {
    inner: Arc<Mutex<HashMap<String, Identity>>>,
}

impl IdentityPool {
    pub fn new() -> Self {
        IdentityPool::default()
    }

    /// Fetch the identity for `role`, generating it on first use with the
    /// given common name and application URI.
    pub fn get(&self, role: &str, common_name: &str, uri: &str) -> Result<Identity, PkiError> {
        let mut pool = self.inner.lock().expect("identity pool poisoned");
        if let Some(identity) = pool.get(role) {
            return Ok(identity.clone());
        }
        let identity = generate_identity(common_name, uri, 365, 2048)?;
        pool.insert(role.to_string(), identity.clone());
        Ok(identity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::status::StatusCode;

    fn test_identity() -> &'static Identity {
        use std::sync::OnceLock;
        static IDENTITY: OnceLock<Identity> = OnceLock::new();
        IDENTITY.get_or_init(|| {
            generate_identity("TestApp", "urn:test:app", 365, 2048).unwrap()
        })
    }

    #[test]
    fn generated_identity_has_recomputable_thumbprint_and_san() {
        let identity = generate_identity("VictimServer", "urn:victim:server", 365, 2048).unwrap();
        let record = &identity.certificate;
        assert_eq!(record.thumbprint, thumbprint(&record.der));
        assert_eq!(record.application_uri, "urn:victim:server");
        assert_eq!(record.subject_common_name, "VictimServer");
        assert!(record.valid_at(unix_now()));
        // Reparse from DER agrees with the record.
        let reparsed = CertificateRecord::parse(&record.der).unwrap();
        assert_eq!(&reparsed, record);
    }

    #[test]
    fn two_generations_yield_distinct_thumbprints() {
        let a = generate_identity("S", "urn:s", 30, 2048).unwrap();
        let b = generate_identity("S", "urn:s", 30, 2048).unwrap();
        assert_ne!(a.certificate.thumbprint, b.certificate.thumbprint);
    }

    #[test]
    fn small_key_rejected() {
        let err = generate_identity("S", "urn:s", 30, 1024).unwrap_err();
        assert!(matches!(err, PkiError::InvalidParameter(_)));
    }

    #[test]
    fn empty_names_rejected() {
        assert!(matches!(
            generate_identity("", "urn:s", 30, 2048).unwrap_err(),
            PkiError::InvalidParameter(_)
        ));
        assert!(matches!(
            generate_identity("S", "", 30, 2048).unwrap_err(),
            PkiError::InvalidParameter(_)
        ));
    }

    #[test]
    fn clone_copies_fields_but_not_key() {
        let original = &test_identity().certificate;
        let cloned = clone_certificate(original).unwrap();
        let record = &cloned.certificate;
        assert_eq!(record.subject_common_name, original.subject_common_name);
        assert_eq!(record.application_uri, original.application_uri);
        assert_eq!(record.not_before, original.not_before);
        assert_eq!(record.not_after, original.not_after);
        assert_ne!(record.thumbprint, original.thumbprint);
        assert_ne!(record.public_key, original.public_key);
    }

    #[test]
    fn clone_of_clone_copies_the_same_fields() {
        let original = &test_identity().certificate;
        let once = clone_certificate(original).unwrap();
        let twice = clone_certificate(&once.certificate).unwrap();
        assert_eq!(
            twice.certificate.subject_common_name,
            once.certificate.subject_common_name
        );
        assert_eq!(twice.certificate.application_uri, once.certificate.application_uri);
        assert_eq!(twice.certificate.not_before, once.certificate.not_before);
        assert_eq!(twice.certificate.not_after, once.certificate.not_after);
    }

    #[test]
    fn clone_without_san_fails() {
        let der = generate_certificate_without_san("NoSan").unwrap();
        let err = CertificateRecord::parse(&der).unwrap_err();
        assert!(matches!(err, PkiError::UnparseableCertificate(_)));
    }

    #[test]
    fn strict_with_empty_store_rejects_everyone() {
        let mut store = TrustStore::new();
        let decision =
            validate_peer(&test_identity().certificate, TrustPolicy::Strict, &mut store);
        assert_eq!(decision, TrustDecision::Reject(StatusCode::BAD_CERTIFICATE_UNTRUSTED));
    }

    #[test]
    fn accept_all_accepts_unknown_peer() {
        let mut store = TrustStore::new();
        let decision =
            validate_peer(&test_identity().certificate, TrustPolicy::AcceptAll, &mut store);
        assert_eq!(decision, TrustDecision::Accept(AcceptReason::PolicyAcceptAll));
    }

    #[test]
    fn default_flag_off_matches_strict() {
        let mut store = TrustStore::new();
        let peer = &test_identity().certificate;
        let strict = validate_peer(peer, TrustPolicy::Strict, &mut store);
        let flag_off = validate_peer(
            peer,
            TrustPolicy::AcceptAllDefaultFlag { auto_accept: false },
            &mut store,
        );
        assert_eq!(strict, flag_off);

        store.add_trusted(peer.clone()).unwrap();
        let strict = validate_peer(peer, TrustPolicy::Strict, &mut store);
        let flag_off = validate_peer(
            peer,
            TrustPolicy::AcceptAllDefaultFlag { auto_accept: false },
            &mut store,
        );
        assert_eq!(strict, flag_off);
    }

    #[test]
    fn rejected_store_parks_certificate_then_promotion_trusts_it() {
        let mut store = TrustStore::new();
        let peer = test_identity().certificate.clone();

        let decision = validate_peer(&peer, TrustPolicy::RejectedStore, &mut store);
        assert_eq!(decision, TrustDecision::Reject(StatusCode::BAD_CERTIFICATE_UNTRUSTED));
        assert_eq!(store.rejected().len(), 1);
        assert_eq!(store.rejected()[0].thumbprint, peer.thumbprint);

        store.promote_rejected(&peer.thumbprint.clone()).unwrap();
        let decision = validate_peer(&peer, TrustPolicy::RejectedStore, &mut store);
        assert_eq!(decision, TrustDecision::Accept(AcceptReason::Trustlisted { promoted: true }));
        // Also accepted under Strict once trusted.
        let decision = validate_peer(&peer, TrustPolicy::Strict, &mut store);
        assert!(decision.is_accept());
    }

    #[test]
    fn promote_unknown_thumbprint_fails() {
        let mut store = TrustStore::new();
        let err = store.promote_rejected(&[7u8; 20]).unwrap_err();
        assert!(matches!(err, PkiError::NotInRejectedList));
    }

    #[test]
    fn promote_twice_fails_second_time() {
        let mut store = TrustStore::new();
        let peer = test_identity().certificate.clone();
        validate_peer(&peer, TrustPolicy::RejectedStore, &mut store);
        store.promote_rejected(&peer.thumbprint.clone()).unwrap();
        let err = store.promote_rejected(&peer.thumbprint.clone()).unwrap_err();
        assert!(matches!(err, PkiError::NotInRejectedList));
    }

    #[test]
    fn each_rejection_appends_exactly_one_entry() {
        let mut store = TrustStore::new();
        let peer = test_identity().certificate.clone();
        for expected in 1..=3 {
            validate_peer(&peer, TrustPolicy::RejectedStore, &mut store);
            assert_eq!(store.rejected().len(), expected);
        }
        assert_eq!(store.trusted_count(), 0, "rejections must never silently trust");
    }

    #[test]
    fn clone_never_validates_as_original_under_strict() {
        let mut store = TrustStore::new();
        let original = test_identity().certificate.clone();
        store.add_trusted(original.clone()).unwrap();
        let cloned = clone_certificate(&original).unwrap();
        let decision = validate_peer(&cloned.certificate, TrustPolicy::Strict, &mut store);
        assert_eq!(decision, TrustDecision::Reject(StatusCode::BAD_CERTIFICATE_UNTRUSTED));
    }

    #[test]
    fn empty_input_thumbprint_is_the_published_sha1() {
        assert_eq!(hex::encode(thumbprint(&[])), "da39a3ee5e6b4b0d3255bfef95601890afd80709");
        assert_eq!(thumbprint(b"anything").len(), 20);
    }

    #[test]
    fn store_persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let peer = test_identity().certificate.clone();
        {
            let mut store = TrustStore::with_persistence(dir.path()).unwrap();
            validate_peer(&peer, TrustPolicy::RejectedStore, &mut store);
            assert!(dir
                .path()
                .join("rejected")
                .join(format!("{}.der", peer.thumbprint_hex()))
                .exists());
            store.promote_rejected(&peer.thumbprint.clone()).unwrap();
        }
        let store = TrustStore::load(dir.path()).unwrap();
        assert!(store.is_trusted(&peer));
        assert!(store.rejected().is_empty());
        assert!(dir
            .path()
            .join("trusted")
            .join(format!("{}.der", peer.thumbprint_hex()))
            .exists());
    }

    #[test]
    fn identity_saves_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        let identity = test_identity();
        identity.save_to_dir(dir.path()).unwrap();
        let loaded = Identity::load_from_dir(dir.path()).unwrap();
        assert_eq!(loaded.certificate, identity.certificate);
        assert_eq!(loaded.private_key, identity.private_key);
    }

    #[test]
    fn expired_certificate_rejected_with_time_status() {
        // 0-day validity window backdated by generate's 60s margin can't be
        // produced via the public API, so clone a record and edit the window.
        let mut record = test_identity().certificate.clone();
        record.not_after = record.not_before - 1;
        let mut store = TrustStore::new();
        store.add_trusted(record.clone()).unwrap();
        let decision = validate_peer(&record, TrustPolicy::Strict, &mut store);
        assert_eq!(decision, TrustDecision::Reject(StatusCode::BAD_CERTIFICATE_TIME_INVALID));
    }

    #[test]
    fn strict_acceptance_depends_only_on_membership() {
        // Trust monotonicity over randomized store contents.
        let certs: Vec<_> = (0..4)
            .map(|i| {
                generate_identity(&format!("App{i}"), &format!("urn:app:{i}"), 30, 2048)
                    .unwrap()
                    .certificate
            })
            .collect();
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..16 {
            let mut store = TrustStore::new();
            let mut shuffled = certs.clone();
            shuffled.shuffle(&mut rng);
            let trusted_set: Vec<_> =
                shuffled.iter().take(rand::Rng::gen_range(&mut rng, 0..=4)).cloned().collect();
            for c in &trusted_set {
                store.add_trusted(c.clone()).unwrap();
            }
            for cert in &certs {
                let expected = trusted_set.iter().any(|t| t.thumbprint == cert.thumbprint);
                let decision = validate_peer(cert, TrustPolicy::Strict, &mut store);
                assert_eq!(decision.is_accept(), expected);
            }
        }
    }
}
