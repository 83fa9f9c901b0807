//! Application instance certificates: self-signed generation, parsing,
//! cloning, and SHA-1 thumbprints.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use der::asn1::Ia5String;
use der::oid::ObjectIdentifier;
use der::{Decode, Encode};
use rsa::pkcs1v15::SigningKey;
use rsa::pkcs8::DecodePublicKey;
use rsa::traits::PublicKeyParts;
use rsa::{RsaPrivateKey, RsaPublicKey};
use sha1::{Digest, Sha1};
use sha2::Sha256;
use x509_cert::builder::{Builder, CertificateBuilder, Profile};
use x509_cert::ext::pkix::name::GeneralName;
use x509_cert::ext::pkix::{BasicConstraints, KeyUsage, KeyUsages, SubjectAltName};
use x509_cert::name::Name;
use x509_cert::serial_number::SerialNumber;
use x509_cert::spki::SubjectPublicKeyInfoOwned;
use x509_cert::time::Validity;
use x509_cert::Certificate;

use super::PkiError;

const OID_COMMON_NAME: ObjectIdentifier = ObjectIdentifier::new_unwrap("2.5.4.3");
const OID_SUBJECT_ALT_NAME: ObjectIdentifier = ObjectIdentifier::new_unwrap("2.5.29.17");

/// SHA-1 digest of a DER certificate, as used in receiver-thumbprint
/// fields and trust-store keys.
pub fn thumbprint(der: &[u8]) -> [u8; 20] {
    let digest = Sha1::digest(der);
    digest.into()
}

/// A parsed application instance certificate plus the fields the toolkit
/// cares about. Equality is DER equality.
#[derive(Clone)]
pub struct CertificateRecord {
    pub der: Vec<u8>,
    pub thumbprint: [u8; 20],
    pub subject_common_name: String,
    pub application_uri: String,
    /// Validity window as unix seconds.
    pub not_before: i64,
    pub not_after: i64,
    pub public_key: RsaPublicKey,
}

impl PartialEq for CertificateRecord {
    fn eq(&self, other: &Self) -> bool {
        self.der == other.der
    }
}
impl Eq for CertificateRecord {}

impl std::fmt::Debug for CertificateRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CertificateRecord")
            .field("cn", &self.subject_common_name)
            .field("uri", &self.application_uri)
            .field("thumbprint", &hex::encode(self.thumbprint))
            .finish()
    }
}

impl CertificateRecord {
    /// Parse a DER certificate. Fails if it carries no subject-alt-name
    /// URI (application instance certificates must) or a non-RSA key.
    pub fn parse(der: &[u8]) -> Result<CertificateRecord, PkiError> {
        let cert = Certificate::from_der(der)
            .map_err(|e| PkiError::UnparseableCertificate(e.to_string()))?;
        let tbs = &cert.tbs_certificate;

        let subject_common_name = extract_common_name(&tbs.subject).unwrap_or_default();
        let application_uri = extract_san_uri(&cert)?.ok_or_else(|| {
            PkiError::UnparseableCertificate("no subject-alt-name URI".into())
        })?;
        if application_uri.is_empty() {
            return Err(PkiError::UnparseableCertificate("empty subject-alt-name URI".into()));
        }

        let spki_der = tbs
            .subject_public_key_info
            .to_der()
            .map_err(|e| PkiError::UnparseableCertificate(e.to_string()))?;
        let public_key = RsaPublicKey::from_public_key_der(&spki_der)
            .map_err(|e| PkiError::UnparseableCertificate(format!("not an RSA key: {e}")))?;

        let not_before = tbs.validity.not_before.to_unix_duration().as_secs() as i64;
        let not_after = tbs.validity.not_after.to_unix_duration().as_secs() as i64;

        Ok(CertificateRecord {
            der: der.to_vec(),
            thumbprint: thumbprint(der),
            subject_common_name,
            application_uri,
            not_before,
            not_after,
            public_key,
        })
    }

    pub fn thumbprint_hex(&self) -> String {
        hex::encode(self.thumbprint)
    }

    /// RSA modulus size in bytes; equals both the signature length and the
    /// OAEP cipher-block length for this key.
    pub fn key_size_bytes(&self) -> usize {
        self.public_key.size()
    }

    pub fn valid_at(&self, unix_secs: i64) -> bool {
        unix_secs >= self.not_before && unix_secs <= self.not_after
    }
}

/// A certificate together with its private key.
#[derive(Clone)]
pub struct Identity {
    pub certificate: CertificateRecord,
    pub private_key: RsaPrivateKey,
}

impl Identity {
    pub fn signing_key(&self) -> SigningKey<Sha256> {
        SigningKey::<Sha256>::new(self.private_key.clone())
    }
}

impl std::fmt::Debug for Identity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Identity").field("certificate", &self.certificate).finish()
    }
}

/// Generate a fresh self-signed application identity.
///
/// The certificate carries the common name as subject, the application
/// URI as a subject-alt-name, and digital-signature / key-encipherment /
/// data-encipherment key usages.
pub fn generate_identity(
    common_name: &str,
    application_uri: &str,
    validity_days: u32,
    key_bits: usize,
) -> Result<Identity, PkiError> {
    if common_name.is_empty() {
        return Err(PkiError::InvalidParameter("common_name must be non-empty"));
    }
    if application_uri.is_empty() {
        return Err(PkiError::InvalidParameter("application_uri must be non-empty"));
    }
    if validity_days == 0 {
        return Err(PkiError::InvalidParameter("validity_days must be positive"));
    }
    if key_bits != 2048 && key_bits != 4096 {
        return Err(PkiError::InvalidParameter("key_bits must be 2048 or 4096"));
    }

    let now = SystemTime::now();
    // Backdate slightly so clocks a little behind ours still accept it.
    let not_before = now - Duration::from_secs(60);
    let not_after = now + Duration::from_secs(u64::from(validity_days) * 86_400);
    let validity = Validity {
        not_before: not_before.try_into().map_err(|_| PkiError::InvalidParameter("not_before"))?,
        not_after: not_after.try_into().map_err(|_| PkiError::InvalidParameter("not_after"))?,
    };

    let subject: Name = format!("CN={common_name}")
        .parse()
        .map_err(|_| PkiError::InvalidParameter("common_name not encodable"))?;

    let private_key = RsaPrivateKey::new(&mut rand::rngs::OsRng, key_bits)
        .map_err(|e| PkiError::KeyGeneration(e.to_string()))?;

    build_self_signed(subject, validity, application_uri, private_key)
}

/// Re-issue a certificate with the same subject, alt-name URI and validity
/// window as the target but a fresh key pair, self-signed with that key.
/// Only the fingerprint-bearing fields (key, signature, serial) change.
pub fn clone_certificate(target: &CertificateRecord) -> Result<Identity, PkiError> {
    let cert = Certificate::from_der(&target.der)
        .map_err(|e| PkiError::UnparseableCertificate(e.to_string()))?;
    let tbs = cert.tbs_certificate;

    let private_key = RsaPrivateKey::new(&mut rand::rngs::OsRng, 2048)
        .map_err(|e| PkiError::KeyGeneration(e.to_string()))?;

    build_self_signed(tbs.subject, tbs.validity, &target.application_uri, private_key)
}

fn build_self_signed(
    subject: Name,
    validity: Validity,
    application_uri: &str,
    private_key: RsaPrivateKey,
) -> Result<Identity, PkiError> {
    let signer = SigningKey::<Sha256>::new(private_key.clone());

    let spki_der = rsa::pkcs8::EncodePublicKey::to_public_key_der(&private_key.to_public_key())
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;
    let spki = SubjectPublicKeyInfoOwned::from_der(spki_der.as_bytes())
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;

    let mut serial = [0u8; 16];
    rand::RngCore::fill_bytes(&mut rand::rngs::OsRng, &mut serial);
    serial[0] &= 0x7F;
    serial[0] |= 0x01;

    let mut builder = CertificateBuilder::new(
        Profile::Manual { issuer: None },
        SerialNumber::new(&serial).map_err(|e| PkiError::CertificateBuild(e.to_string()))?,
        validity,
        subject,
        spki,
        &signer,
    )
    .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;

    builder
        .add_extension(&BasicConstraints { ca: false, path_len_constraint: None })
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;
    builder
        .add_extension(&KeyUsage(
            KeyUsages::DigitalSignature
                | KeyUsages::NonRepudiation
                | KeyUsages::KeyEncipherment
                | KeyUsages::DataEncipherment,
        ))
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;
    let uri = Ia5String::new(application_uri)
        .map_err(|_| PkiError::InvalidParameter("application_uri not IA5"))?;
    builder
        .add_extension(&SubjectAltName(vec![GeneralName::UniformResourceIdentifier(uri)]))
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;

    let certificate = builder
        .build::<rsa::pkcs1v15::Signature>()
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;
    let der = certificate.to_der().map_err(|e| PkiError::CertificateBuild(e.to_string()))?;

    Ok(Identity { certificate: CertificateRecord::parse(&der)?, private_key })
}

fn extract_common_name(name: &Name) -> Option<String> {
    for rdn in name.0.iter() {
        for atv in rdn.0.iter() {
            if atv.oid == OID_COMMON_NAME {
                if let Ok(s) = atv.value.decode_as::<der::asn1::Utf8StringRef<'_>>() {
                    return Some(s.as_str().to_string());
                }
                if let Ok(s) = atv.value.decode_as::<der::asn1::PrintableStringRef<'_>>() {
                    return Some(s.as_str().to_string());
                }
            }
        }
    }
    None
}

fn extract_san_uri(cert: &Certificate) -> Result<Option<String>, PkiError> {
    let Some(extensions) = &cert.tbs_certificate.extensions else {
        return Ok(None);
    };
    for ext in extensions {
        if ext.extn_id != OID_SUBJECT_ALT_NAME {
            continue;
        }
        let san = SubjectAltName::from_der(ext.extn_value.as_bytes())
            .map_err(|e| PkiError::UnparseableCertificate(e.to_string()))?;
        for general_name in san.0 {
            if let GeneralName::UniformResourceIdentifier(uri) = general_name {
                return Ok(Some(uri.to_string()));
            }
        }
    }
    Ok(None)
}

/// Certificate validity timestamps are unix seconds; this is "now" in the
/// same scale.
pub fn unix_now() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0)
}

/// Build a certificate without any subject-alt-name, for exercising the
/// rejection paths of [`CertificateRecord::parse`] and
/// [`clone_certificate`].
pub fn generate_certificate_without_san(common_name: &str) -> Result<Vec<u8>, PkiError> {
    let private_key = RsaPrivateKey::new(&mut rand::rngs::OsRng, 2048)
        .map_err(|e| PkiError::KeyGeneration(e.to_string()))?;
    let signer = SigningKey::<Sha256>::new(private_key.clone());
    let spki_der = rsa::pkcs8::EncodePublicKey::to_public_key_der(&private_key.to_public_key())
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;
    let spki = SubjectPublicKeyInfoOwned::from_der(spki_der.as_bytes())
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;
    let subject: Name = format!("CN={common_name}")
        .parse()
        .map_err(|_| PkiError::InvalidParameter("common_name not encodable"))?;
    let validity = Validity::from_now(Duration::from_secs(86_400))
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;
    let builder = CertificateBuilder::new(
        Profile::Manual { issuer: None },
        SerialNumber::from(1u32),
        validity,
        subject,
        spki,
        &signer,
    )
    .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;
    let cert = builder
        .build::<rsa::pkcs1v15::Signature>()
        .map_err(|e| PkiError::CertificateBuild(e.to_string()))?;
    cert.to_der().map_err(|e| PkiError::CertificateBuild(e.to_string()))
}
