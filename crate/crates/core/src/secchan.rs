//! Secure-channel cryptography: security policy suites, nonce-based
//! symmetric key derivation, asymmetric protection of OpenSecureChannel
//! chunks, per-chunk sign / sign-and-encrypt, and the RSA-encrypted
//! user-password token.
//!
//! A [`SecureChannelState`] is confined to one connection handler at a
//! time; operations on distinct states are freely concurrent and key
//! material is never shared across states.

use aes::cipher::block_padding::NoPadding;
use aes::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use rand::RngCore;
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::{Oaep, RsaPrivateKey};
use sha1::Sha1;
use sha2::Sha256;
use thiserror::Error;

use crate::codec::{
    AsymmetricSecurityHeader, ChunkChannel, CodecError, MessageHeader, MessageType, Reader,
    SecurityMode, SequenceHeader, UaByteString, MESSAGE_HEADER_SIZE, PROTECTION_RESERVE,
    SYMMETRIC_HEADER_SIZE,
};
use crate::pki::{thumbprint, CertificateRecord, Identity};
use crate::status::StatusCode;

type HmacSha256 = Hmac<Sha256>;
type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;

/// OAEP(SHA-1) overhead per cipher block: 2 * hash length + 2.
const OAEP_SHA1_OVERHEAD: usize = 42;
/// HMAC-SHA-256 output length.
const MAC_LEN: usize = 32;
const AES_BLOCK: usize = 16;

#[derive(Debug, Error)]
pub enum SecChanError {
    #[error("operation undefined for security policy None")]
    PolicyNone,
    #[error("security policy not supported: {0}")]
    PolicyUnsupported(String),
    #[error("nonce length mismatch: expected {expected}, got {got}")]
    NonceLengthMismatch { expected: usize, got: usize },
    #[error("plaintext spans {blocks} RSA blocks, limit is {max}")]
    PlaintextTooLarge { blocks: usize, max: usize },
    #[error("password of {len} bytes exceeds single-block capacity {max}")]
    PasswordTooLong { len: usize, max: usize },
    #[error("sender certificate rejected: {0}")]
    TrustRejected(StatusCode),
    #[error("asymmetric signature invalid")]
    SignatureInvalid,
    #[error("decryption failed")]
    DecryptFailed,
    #[error("receiver thumbprint does not match our certificate")]
    ThumbprintMismatch,
    #[error("message authentication code invalid")]
    MacInvalid,
    #[error("padding invalid")]
    PaddingInvalid,
    #[error("sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u32, got: u32 },
    #[error("token length field inconsistent")]
    LengthFieldInvalid,
    #[error("token nonce does not match the issued server nonce")]
    NonceMismatch,
    #[error("channel state incomplete: {0}")]
    StateIncomplete(&'static str),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// The two implemented security policies. Deprecated policy URIs are
/// recognized but refused.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SecurityPolicy {
    None,
    Basic256Sha256,
}

pub const POLICY_NONE_URI: &str = "http://opcfoundation.org/UA/SecurityPolicy#None";
pub const POLICY_BASIC256SHA256_URI: &str =
    "http://opcfoundation.org/UA/SecurityPolicy#Basic256Sha256";

/// Deprecated or unimplemented policies we recognize by URI and refuse.
const REFUSED_POLICY_URIS: &[&str] = &[
    "http://opcfoundation.org/UA/SecurityPolicy#Basic128Rsa15",
    "http://opcfoundation.org/UA/SecurityPolicy#Basic256",
    "http://opcfoundation.org/UA/SecurityPolicy#Aes128_Sha256_RsaOaep",
    "http://opcfoundation.org/UA/SecurityPolicy#Aes256_Sha256_RsaPss",
];

impl SecurityPolicy {
    pub fn uri(self) -> &'static str {
        match self {
            SecurityPolicy::None => POLICY_NONE_URI,
            SecurityPolicy::Basic256Sha256 => POLICY_BASIC256SHA256_URI,
        }
    }

    pub fn from_uri(uri: &str) -> Result<Self, SecChanError> {
        match uri {
            POLICY_NONE_URI => Ok(SecurityPolicy::None),
            POLICY_BASIC256SHA256_URI => Ok(SecurityPolicy::Basic256Sha256),
            other => Err(SecChanError::PolicyUnsupported(
                if REFUSED_POLICY_URIS.contains(&other) {
                    format!("{other} (recognized but refused)")
                } else {
                    other.to_string()
                },
            )),
        }
    }

    pub fn suite(self) -> SecurityPolicySuite {
        SecurityPolicySuite::for_policy(self)
    }
}

/// Cryptographic parameters of one security policy.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SecurityPolicySuite {
    pub policy: SecurityPolicy,
    pub nonce_length: usize,
    pub derived_signing_key_length: usize,
    pub derived_encryption_key_length: usize,
    pub iv_length: usize,
    /// Cap on RSA cipher blocks per asymmetric message.
    pub max_asymmetric_blocks: usize,
}

impl SecurityPolicySuite {
    pub fn for_policy(policy: SecurityPolicy) -> Self {
        match policy {
            SecurityPolicy::None => SecurityPolicySuite {
                policy,
                nonce_length: 0,
                derived_signing_key_length: 0,
                derived_encryption_key_length: 0,
                iv_length: 0,
                max_asymmetric_blocks: 0,
            },
            SecurityPolicy::Basic256Sha256 => SecurityPolicySuite {
                policy,
                nonce_length: 32,
                derived_signing_key_length: 32,
                derived_encryption_key_length: 32,
                iv_length: 16,
                max_asymmetric_blocks: 64,
            },
        }
    }

    pub fn is_none(&self) -> bool {
        self.policy == SecurityPolicy::None
    }

    fn key_block_length(&self) -> usize {
        self.derived_signing_key_length + self.derived_encryption_key_length + self.iv_length
    }

    /// Fresh random nonce of the suite's length.
    pub fn random_nonce(&self) -> Vec<u8> {
        let mut nonce = vec![0u8; self.nonce_length];
        rand::rngs::OsRng.fill_bytes(&mut nonce);
        nonce
    }
}

/// One direction's worth of derived key material.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DirectionKeys {
    pub signing: Vec<u8>,
    pub encryption: Vec<u8>,
    pub iv: Vec<u8>,
}

/// Symmetric keys for both directions of a channel. `local` protects what
/// we send; `remote` verifies and decrypts what the peer sends.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ChannelKeys {
    pub local: DirectionKeys,
    pub remote: DirectionKeys,
}

/// The TLS-1.2-style pseudo random function instantiated with SHA-256:
/// `P_SHA256(secret, seed)` expanded to `length` bytes.
pub fn p_sha256(secret: &[u8], seed: &[u8], length: usize) -> Vec<u8> {
    let mut output = Vec::with_capacity(length + MAC_LEN);
    // a(0) = seed; a(i) = HMAC(secret, a(i-1))
    let mut a = seed.to_vec();
    while output.len() < length {
        a = hmac_sha256(secret, &[&a]);
        output.extend_from_slice(&hmac_sha256(secret, &[&a, seed]));
    }
    output.truncate(length);
    output
}

fn hmac_sha256(key: &[u8], parts: &[&[u8]]) -> Vec<u8> {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    for part in parts {
        mac.update(part);
    }
    mac.finalize().into_bytes().to_vec()
}

/// Derive both directions' symmetric keys from the exchanged nonces.
///
/// Our sending keys expand `P_SHA256(local_nonce, remote_nonce)`; the
/// peer's sending keys expand `P_SHA256(remote_nonce, local_nonce)`, so
/// each side's local set equals the other side's remote set.
pub fn derive_keys(
    local_nonce: &[u8],
    remote_nonce: &[u8],
    suite: &SecurityPolicySuite,
) -> Result<ChannelKeys, SecChanError> {
    if suite.is_none() {
        return Err(SecChanError::PolicyNone);
    }
    for nonce in [local_nonce, remote_nonce] {
        if nonce.len() != suite.nonce_length {
            return Err(SecChanError::NonceLengthMismatch {
                expected: suite.nonce_length,
                got: nonce.len(),
            });
        }
    }
    let split = |block: Vec<u8>| {
        let (signing, rest) = block.split_at(suite.derived_signing_key_length);
        let (encryption, iv) = rest.split_at(suite.derived_encryption_key_length);
        DirectionKeys { signing: signing.to_vec(), encryption: encryption.to_vec(), iv: iv.to_vec() }
    };
    let total = suite.key_block_length();
    Ok(ChannelKeys {
        local: split(p_sha256(local_nonce, remote_nonce, total)),
        remote: split(p_sha256(remote_nonce, local_nonce, total)),
    })
}

/// Everything one end of an open secure channel knows.
#[derive(Clone)]
pub struct SecureChannelState {
    pub channel_id: u32,
    pub token_id: u32,
    pub suite: SecurityPolicySuite,
    pub mode: SecurityMode,
    pub local_nonce: Vec<u8>,
    pub remote_nonce: Vec<u8>,
    /// Present exactly when mode is not None.
    pub keys: Option<ChannelKeys>,
    pub send_sequence: u32,
    pub recv_sequence: u32,
    pub local_identity: Option<Identity>,
    pub remote_certificate: Option<CertificateRecord>,
    next_request_id: u32,
}

impl SecureChannelState {
    /// Channel with policy and mode None; nothing is protected.
    pub fn plain(channel_id: u32, token_id: u32) -> Self {
        SecureChannelState {
            channel_id,
            token_id,
            suite: SecurityPolicy::None.suite(),
            mode: SecurityMode::None,
            local_nonce: Vec::new(),
            remote_nonce: Vec::new(),
            keys: None,
            send_sequence: 0,
            recv_sequence: 0,
            local_identity: None,
            remote_certificate: None,
            next_request_id: 0,
        }
    }

    /// Secured channel with derived keys. Enforces the state invariant:
    /// a protecting mode requires keys and the remote certificate.
    #[allow(clippy::too_many_arguments)]
    pub fn established(
        channel_id: u32,
        token_id: u32,
        suite: SecurityPolicySuite,
        mode: SecurityMode,
        local_nonce: Vec<u8>,
        remote_nonce: Vec<u8>,
        local_identity: Identity,
        remote_certificate: CertificateRecord,
    ) -> Result<Self, SecChanError> {
        if mode == SecurityMode::None {
            return Err(SecChanError::StateIncomplete("mode None cannot carry keys"));
        }
        let keys = Some(derive_keys(&local_nonce, &remote_nonce, &suite)?);
        Ok(SecureChannelState {
            channel_id,
            token_id,
            suite,
            mode,
            local_nonce,
            remote_nonce,
            keys,
            send_sequence: 0,
            recv_sequence: 0,
            local_identity: Some(local_identity),
            remote_certificate: Some(remote_certificate),
            next_request_id: 0,
        })
    }

    pub fn allocate_request_id(&mut self) -> u32 {
        self.next_request_id += 1;
        self.next_request_id
    }

    pub fn set_next_request_id(&mut self, last_used: u32) {
        self.next_request_id = last_used;
    }

    /// The channel view chunk encoding works against.
    pub fn chunk_channel(&mut self) -> ChunkChannel<'_> {
        ChunkChannel {
            channel_id: self.channel_id,
            token_id: self.token_id,
            send_sequence: &mut self.send_sequence,
            asymmetric_header: AsymmetricSecurityHeader::none_policy(
                self.channel_id,
                self.suite.policy.uri(),
            ),
            protection_reserve: if self.mode == SecurityMode::None {
                0
            } else {
                PROTECTION_RESERVE
            },
        }
    }

    /// A state describing the same channel from the peer's perspective:
    /// key directions and nonces swapped, counters mirrored. Used by
    /// offline transcript analysis.
    pub fn mirrored(&self) -> SecureChannelState {
        let mut mirrored = self.clone();
        std::mem::swap(&mut mirrored.local_nonce, &mut mirrored.remote_nonce);
        if let Some(keys) = &self.keys {
            mirrored.keys = Some(ChannelKeys { local: keys.remote.clone(), remote: keys.local.clone() });
        }
        mirrored.send_sequence = self.recv_sequence;
        mirrored.recv_sequence = self.send_sequence;
        mirrored
    }

    fn keys(&self) -> Result<&ChannelKeys, SecChanError> {
        self.keys.as_ref().ok_or(SecChanError::StateIncomplete("keys not derived"))
    }
}

impl std::fmt::Debug for SecureChannelState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureChannelState")
            .field("channel_id", &self.channel_id)
            .field("token_id", &self.token_id)
            .field("policy", &self.suite.policy)
            .field("mode", &self.mode)
            .field("send_sequence", &self.send_sequence)
            .field("recv_sequence", &self.recv_sequence)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Asymmetric (OpenSecureChannel) protection
// ---------------------------------------------------------------------------

/// Result of unprotecting an OPN chunk.
#[derive(Debug)]
pub struct UnprotectedOpen {
    pub channel_id: u32,
    /// Sequence header plus body, exactly as the sender built them.
    pub request_bytes: Vec<u8>,
    pub sender: CertificateRecord,
}

/// Wrap `request_bytes` (sequence header + body) into a fully protected
/// OPN chunk: filled asymmetric header, sender signature over header and
/// plaintext, and OAEP encryption to the receiver's public key.
pub fn protect_open_secure_channel(
    channel_id: u32,
    request_bytes: &[u8],
    sender: &Identity,
    receiver_certificate: &CertificateRecord,
    suite: &SecurityPolicySuite,
) -> Result<Vec<u8>, SecChanError> {
    if suite.is_none() {
        return Err(SecChanError::PolicyNone);
    }
    let cipher_block = receiver_certificate.key_size_bytes();
    let plain_block = cipher_block - OAEP_SHA1_OVERHEAD;
    let signature_len = sender.certificate.key_size_bytes();

    let data_len = request_bytes.len();
    let pad_size = (plain_block - ((data_len + 1 + signature_len) % plain_block)) % plain_block;
    if pad_size > u8::MAX as usize {
        return Err(SecChanError::PaddingInvalid);
    }
    let plain_len = data_len + pad_size + 1 + signature_len;
    debug_assert_eq!(plain_len % plain_block, 0);
    let blocks = plain_len / plain_block;
    if blocks > suite.max_asymmetric_blocks {
        return Err(SecChanError::PlaintextTooLarge {
            blocks,
            max: suite.max_asymmetric_blocks,
        });
    }

    let security_header = AsymmetricSecurityHeader {
        channel_id,
        security_policy_uri: UaByteString::new(suite.policy.uri().as_bytes()),
        sender_certificate: UaByteString::new(sender.certificate.der.clone()),
        receiver_certificate_thumbprint: UaByteString::new(
            receiver_certificate.thumbprint.to_vec(),
        ),
    };
    let mut header_bytes = Vec::new();
    security_header.write(&mut header_bytes);

    let total_size = MESSAGE_HEADER_SIZE + header_bytes.len() + blocks * cipher_block;
    let message_header = MessageHeader {
        message_type: MessageType::OpenChannel,
        chunk_flag: crate::codec::ChunkFlag::Final,
        message_size: total_size as u32,
    };

    // Signature covers the headers (as they will appear on the wire) and
    // the plaintext including padding.
    let mut signed = Vec::with_capacity(total_size);
    signed.extend_from_slice(&message_header.encode());
    signed.extend_from_slice(&header_bytes);
    signed.extend_from_slice(request_bytes);
    signed.extend(std::iter::repeat(pad_size as u8).take(pad_size + 1));
    let signature = sender.signing_key().sign(&signed).to_vec();
    debug_assert_eq!(signature.len(), signature_len);

    let mut plaintext = Vec::with_capacity(plain_len);
    plaintext.extend_from_slice(request_bytes);
    plaintext.extend(std::iter::repeat(pad_size as u8).take(pad_size + 1));
    plaintext.extend_from_slice(&signature);

    let mut chunk = Vec::with_capacity(total_size);
    chunk.extend_from_slice(&message_header.encode());
    chunk.extend_from_slice(&header_bytes);
    let mut rng = rand::rngs::OsRng;
    for block in plaintext.chunks(plain_block) {
        let encrypted = receiver_certificate
            .public_key
            .encrypt(&mut rng, Oaep::new::<Sha1>(), block)
            .map_err(|_| SecChanError::DecryptFailed)?;
        chunk.extend_from_slice(&encrypted);
    }
    debug_assert_eq!(chunk.len(), total_size);
    Ok(chunk)
}

/// Open a protected OPN chunk addressed to `receiver`.
///
/// The sender certificate is extracted and judged by `trust_check`
/// *before* any decryption happens; a rejection aborts the operation
/// without touching the body. This ordering is the enforcement point the
/// trust-management attacks probe.
pub fn unprotect_open_secure_channel(
    chunk: &[u8],
    receiver: &Identity,
    trust_check: impl FnOnce(&CertificateRecord) -> Result<(), StatusCode>,
) -> Result<UnprotectedOpen, SecChanError> {
    let message_header = MessageHeader::decode_for_chunk(chunk)?;
    if message_header.message_type != MessageType::OpenChannel {
        return Err(CodecError::Malformed { what: "open chunk", detail: "not an OPN chunk" }.into());
    }
    let mut reader = Reader::new(&chunk[MESSAGE_HEADER_SIZE..]);
    let security_header = AsymmetricSecurityHeader::read(&mut reader)?;
    let header_len = MESSAGE_HEADER_SIZE + reader.consumed();

    let policy = SecurityPolicy::from_uri(
        &String::from_utf8_lossy(security_header.security_policy_uri.as_bytes()),
    )?;
    if policy == SecurityPolicy::None {
        return Err(SecChanError::PolicyNone);
    }

    if security_header.sender_certificate.is_null() {
        return Err(CodecError::Malformed {
            what: "open chunk",
            detail: "missing sender certificate",
        }
        .into());
    }
    let sender = CertificateRecord::parse(security_header.sender_certificate.as_bytes())
        .map_err(|_| SecChanError::TrustRejected(StatusCode::BAD_SECURITY_CHECKS_FAILED))?;

    // Trust decision first, before any cryptographic processing.
    trust_check(&sender).map_err(SecChanError::TrustRejected)?;

    if security_header.receiver_certificate_thumbprint.as_bytes()
        != thumbprint(&receiver.certificate.der)
    {
        return Err(SecChanError::ThumbprintMismatch);
    }

    let cipher_block = receiver.certificate.key_size_bytes();
    let ciphertext = &chunk[header_len..];
    if ciphertext.is_empty() || ciphertext.len() % cipher_block != 0 {
        return Err(SecChanError::DecryptFailed);
    }
    let mut plaintext = Vec::with_capacity(ciphertext.len());
    for block in ciphertext.chunks(cipher_block) {
        let decrypted = receiver
            .private_key
            .decrypt(Oaep::new::<Sha1>(), block)
            .map_err(|_| SecChanError::DecryptFailed)?;
        plaintext.extend_from_slice(&decrypted);
    }

    let signature_len = sender.key_size_bytes();
    if plaintext.len() < signature_len + 1 {
        return Err(SecChanError::SignatureInvalid);
    }
    let (content, signature) = plaintext.split_at(plaintext.len() - signature_len);

    let verifying_key = rsa::pkcs1v15::VerifyingKey::<Sha256>::new(sender.public_key.clone());
    let mut signed = Vec::with_capacity(header_len + content.len());
    signed.extend_from_slice(&chunk[..header_len]);
    signed.extend_from_slice(content);
    let signature = rsa::pkcs1v15::Signature::try_from(signature)
        .map_err(|_| SecChanError::SignatureInvalid)?;
    verifying_key.verify(&signed, &signature).map_err(|_| SecChanError::SignatureInvalid)?;

    let pad_size = *content.last().expect("content non-empty") as usize;
    if content.len() < pad_size + 1 {
        return Err(SecChanError::PaddingInvalid);
    }
    let (request_bytes, padding) = content.split_at(content.len() - pad_size - 1);
    if !padding.iter().all(|&b| b as usize == pad_size) {
        return Err(SecChanError::PaddingInvalid);
    }

    Ok(UnprotectedOpen {
        channel_id: security_header.channel_id,
        request_bytes: request_bytes.to_vec(),
        sender,
    })
}

// ---------------------------------------------------------------------------
// Symmetric per-chunk protection
// ---------------------------------------------------------------------------

/// Apply the channel mode to one plain MSG/CLO chunk: append an
/// HMAC-SHA-256 under Sign, additionally AES-256-CBC-encrypt body,
/// padding and MAC under SignAndEncrypt. Mode None passes bytes through
/// unchanged.
pub fn protect_chunk(chunk: &[u8], state: &SecureChannelState) -> Result<Vec<u8>, SecChanError> {
    if state.mode == SecurityMode::None {
        return Ok(chunk.to_vec());
    }
    let header = MessageHeader::decode_for_chunk(chunk)?;
    if header.message_type.is_raw() || header.message_type == MessageType::OpenChannel {
        return Err(CodecError::Malformed {
            what: "chunk",
            detail: "symmetric protection applies to MSG/CLO chunks",
        }
        .into());
    }
    if chunk.len() < SYMMETRIC_HEADER_SIZE + 8 {
        return Err(CodecError::Truncated { need: SYMMETRIC_HEADER_SIZE + 8, have: chunk.len() }
            .into());
    }
    let keys = state.keys()?;

    match state.mode {
        SecurityMode::None => unreachable!(),
        SecurityMode::Sign => {
            let mut out = chunk.to_vec();
            let new_size = (chunk.len() + MAC_LEN) as u32;
            out[4..8].copy_from_slice(&new_size.to_le_bytes());
            let mac = hmac_sha256(&keys.local.signing, &[&out]);
            out.extend_from_slice(&mac);
            Ok(out)
        }
        SecurityMode::SignAndEncrypt => {
            let content = &chunk[SYMMETRIC_HEADER_SIZE..];
            let pad_size = (AES_BLOCK - ((content.len() + 1 + MAC_LEN) % AES_BLOCK)) % AES_BLOCK;
            let mut padded = Vec::with_capacity(content.len() + pad_size + 1);
            padded.extend_from_slice(content);
            padded.extend(std::iter::repeat(pad_size as u8).take(pad_size + 1));

            let new_size = (SYMMETRIC_HEADER_SIZE + padded.len() + MAC_LEN) as u32;
            let mut head = chunk[..SYMMETRIC_HEADER_SIZE].to_vec();
            head[4..8].copy_from_slice(&new_size.to_le_bytes());

            let mac = hmac_sha256(&keys.local.signing, &[&head, &padded]);
            padded.extend_from_slice(&mac);
            debug_assert_eq!(padded.len() % AES_BLOCK, 0);

            let cipher =
                Aes256CbcEnc::new_from_slices(&keys.local.encryption, &keys.local.iv)
                    .map_err(|_| SecChanError::StateIncomplete("bad key or iv length"))?
                    .encrypt_padded_vec_mut::<NoPadding>(&padded);
            let mut out = head;
            out.extend_from_slice(&cipher);
            Ok(out)
        }
    }
}

/// Exact inverse of [`protect_chunk`]: verifies the MAC, strips padding,
/// restores the plain chunk, and enforces per-direction sequence
/// continuity.
pub fn unprotect_chunk(
    protected: &[u8],
    state: &mut SecureChannelState,
) -> Result<Vec<u8>, SecChanError> {
    if state.mode == SecurityMode::None {
        return Ok(protected.to_vec());
    }
    let header = MessageHeader::decode_for_chunk(protected)?;
    if header.message_type.is_raw() || header.message_type == MessageType::OpenChannel {
        return Err(CodecError::Malformed {
            what: "chunk",
            detail: "symmetric protection applies to MSG/CLO chunks",
        }
        .into());
    }
    let keys = state.keys()?.clone();

    let plain_chunk = match state.mode {
        SecurityMode::None => unreachable!(),
        SecurityMode::Sign => {
            if protected.len() < SYMMETRIC_HEADER_SIZE + 8 + MAC_LEN {
                return Err(SecChanError::MacInvalid);
            }
            let (content, mac) = protected.split_at(protected.len() - MAC_LEN);
            verify_hmac(&keys.remote.signing, &[content], mac)?;
            let mut out = content.to_vec();
            let new_size = out.len() as u32;
            out[4..8].copy_from_slice(&new_size.to_le_bytes());
            out
        }
        SecurityMode::SignAndEncrypt => {
            let ciphertext = &protected[SYMMETRIC_HEADER_SIZE..];
            if ciphertext.len() < 3 * AES_BLOCK || ciphertext.len() % AES_BLOCK != 0 {
                return Err(SecChanError::DecryptFailed);
            }
            let plaintext =
                Aes256CbcDec::new_from_slices(&keys.remote.encryption, &keys.remote.iv)
                    .map_err(|_| SecChanError::StateIncomplete("bad key or iv length"))?
                    .decrypt_padded_vec_mut::<NoPadding>(ciphertext)
                    .map_err(|_| SecChanError::DecryptFailed)?;

            let (padded, mac) = plaintext.split_at(plaintext.len() - MAC_LEN);
            verify_hmac(
                &keys.remote.signing,
                &[&protected[..SYMMETRIC_HEADER_SIZE], padded],
                mac,
            )?;

            let pad_size = *padded.last().ok_or(SecChanError::PaddingInvalid)? as usize;
            if padded.len() < pad_size + 1 + 8 {
                return Err(SecChanError::PaddingInvalid);
            }
            let (content, padding) = padded.split_at(padded.len() - pad_size - 1);
            if !padding.iter().all(|&b| b as usize == pad_size) {
                return Err(SecChanError::PaddingInvalid);
            }

            let mut out = protected[..SYMMETRIC_HEADER_SIZE].to_vec();
            let new_size = (SYMMETRIC_HEADER_SIZE + content.len()) as u32;
            out[4..8].copy_from_slice(&new_size.to_le_bytes());
            out.extend_from_slice(content);
            out
        }
    };

    // The sequence header sits right after the security headers.
    let sequence = SequenceHeader::read(&mut Reader::new(
        &plain_chunk[SYMMETRIC_HEADER_SIZE..SYMMETRIC_HEADER_SIZE + 8],
    ))?;
    let expected = state.recv_sequence + 1;
    if sequence.sequence_number != expected {
        return Err(SecChanError::SequenceGap { expected, got: sequence.sequence_number });
    }
    state.recv_sequence = expected;
    Ok(plain_chunk)
}

fn verify_hmac(key: &[u8], parts: &[&[u8]], mac: &[u8]) -> Result<(), SecChanError> {
    let mut hmac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    for part in parts {
        hmac.update(part);
    }
    hmac.verify_slice(mac).map_err(|_| SecChanError::MacInvalid)
}

// ---------------------------------------------------------------------------
// Password token
// ---------------------------------------------------------------------------

/// Legacy encrypted token secret: 4-byte little-endian length of
/// password-plus-nonce, the UTF-8 password, and the server nonce, all
/// RSA-OAEP(SHA-1)-encrypted to the server certificate in a single block.
/// Under policy None the password travels as plain UTF-8 bytes.
pub fn encrypt_password_token(
    password: &str,
    server_certificate: &CertificateRecord,
    server_nonce: &[u8],
    suite: &SecurityPolicySuite,
) -> Result<Vec<u8>, SecChanError> {
    if suite.is_none() {
        return Ok(password.as_bytes().to_vec());
    }
    if server_nonce.len() != suite.nonce_length {
        return Err(SecChanError::NonceLengthMismatch {
            expected: suite.nonce_length,
            got: server_nonce.len(),
        });
    }
    let capacity = server_certificate.key_size_bytes() - OAEP_SHA1_OVERHEAD;
    let secret_len = 4 + password.len() + server_nonce.len();
    if secret_len > capacity {
        return Err(SecChanError::PasswordTooLong {
            len: password.len(),
            max: capacity - 4 - server_nonce.len(),
        });
    }
    let mut secret = Vec::with_capacity(secret_len);
    secret.extend_from_slice(&((password.len() + server_nonce.len()) as u32).to_le_bytes());
    secret.extend_from_slice(password.as_bytes());
    secret.extend_from_slice(server_nonce);

    server_certificate
        .public_key
        .encrypt(&mut rand::rngs::OsRng, Oaep::new::<Sha1>(), &secret)
        .map_err(|_| SecChanError::DecryptFailed)
}

/// Recover the plaintext password from a token encrypted to our
/// certificate, verifying the embedded server nonce.
pub fn decrypt_password_token(
    token: &[u8],
    private_key: &RsaPrivateKey,
    expected_server_nonce: &[u8],
    suite: &SecurityPolicySuite,
) -> Result<String, SecChanError> {
    if suite.is_none() {
        return Ok(String::from_utf8_lossy(token).into_owned());
    }
    let plaintext =
        private_key.decrypt(Oaep::new::<Sha1>(), token).map_err(|_| SecChanError::DecryptFailed)?;
    if plaintext.len() < 4 {
        return Err(SecChanError::LengthFieldInvalid);
    }
    let (length_bytes, rest) = plaintext.split_at(4);
    let declared = u32::from_le_bytes(length_bytes.try_into().unwrap()) as usize;
    if declared != rest.len() {
        return Err(SecChanError::LengthFieldInvalid);
    }
    if rest.len() < expected_server_nonce.len() {
        return Err(SecChanError::LengthFieldInvalid);
    }
    let (password_bytes, nonce) = rest.split_at(rest.len() - expected_server_nonce.len());
    if nonce != expected_server_nonce {
        return Err(SecChanError::NonceMismatch);
    }
    Ok(String::from_utf8_lossy(password_bytes).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::generate_identity;
    use std::sync::OnceLock;

    fn identities() -> &'static (Identity, Identity, Identity) {
        static IDS: OnceLock<(Identity, Identity, Identity)> = OnceLock::new();
        IDS.get_or_init(|| {
            (
                generate_identity("ChanClient", "urn:chan:client", 365, 2048).unwrap(),
                generate_identity("ChanServer", "urn:chan:server", 365, 2048).unwrap(),
                generate_identity("Bystander", "urn:chan:other", 365, 2048).unwrap(),
            )
        })
    }

    fn linked_states(mode: SecurityMode) -> (SecureChannelState, SecureChannelState) {
        let (client, server, _) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let client_nonce = suite.random_nonce();
        let server_nonce = suite.random_nonce();
        let client_state = SecureChannelState::established(
            9,
            1,
            suite,
            mode,
            client_nonce.clone(),
            server_nonce.clone(),
            client.clone(),
            server.certificate.clone(),
        )
        .unwrap();
        let server_state = SecureChannelState::established(
            9,
            1,
            suite,
            mode,
            server_nonce,
            client_nonce,
            server.clone(),
            client.certificate.clone(),
        )
        .unwrap();
        (client_state, server_state)
    }

    fn plain_msg_chunk(seq: u32, body: &[u8]) -> Vec<u8> {
        let mut chunk = Vec::new();
        let size = (SYMMETRIC_HEADER_SIZE + 8 + body.len()) as u32;
        chunk.extend_from_slice(b"MSGF");
        chunk.extend_from_slice(&size.to_le_bytes());
        chunk.extend_from_slice(&9u32.to_le_bytes());
        chunk.extend_from_slice(&1u32.to_le_bytes());
        chunk.extend_from_slice(&seq.to_le_bytes());
        chunk.extend_from_slice(&77u32.to_le_bytes());
        chunk.extend_from_slice(body);
        chunk
    }

    #[test]
    fn p_sha256_matches_frozen_zero_nonce_vector() {
        // 80-byte expansion of all-zero 32-byte secret and seed, fixed by
        // the PRF definition.
        let out = p_sha256(&[0u8; 32], &[0u8; 32], 80);
        assert_eq!(
            hex::encode(&out),
            "9537234cc965521ccfbdb3f9307ea976068da8444c15c690adeb0f80fbc2c19e\
             ecd4619976c2e09a675858dbe44e857179283408079f479b94a8f61b996c706f\
             90237085f83bc3aa21e88ab2d26e5b9e"
        );
    }

    #[test]
    fn derived_keys_mirror_between_sides() {
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let a = suite.random_nonce();
        let b = suite.random_nonce();
        let ours = derive_keys(&a, &b, &suite).unwrap();
        let theirs = derive_keys(&b, &a, &suite).unwrap();
        assert_eq!(ours.local, theirs.remote);
        assert_eq!(ours.remote, theirs.local);
        assert_eq!(ours.local.signing.len(), 32);
        assert_eq!(ours.local.encryption.len(), 32);
        assert_eq!(ours.local.iv.len(), 16);
    }

    #[test]
    fn short_nonce_rejected() {
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let err = derive_keys(&[0u8; 16], &[0u8; 32], &suite).unwrap_err();
        assert!(matches!(err, SecChanError::NonceLengthMismatch { expected: 32, got: 16 }));
    }

    #[test]
    fn consecutive_nonces_differ() {
        let suite = SecurityPolicy::Basic256Sha256.suite();
        assert_ne!(suite.random_nonce(), suite.random_nonce());
    }

    #[test]
    fn open_channel_protect_round_trips() {
        let (client, server, _) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let request = b"\x01\x00\x00\x00\x05\x00\x00\x00open-secure-channel-request-bytes";
        let chunk =
            protect_open_secure_channel(0, request, client, &server.certificate, &suite).unwrap();
        assert_eq!(&chunk[..4], b"OPNF");
        let opened = unprotect_open_secure_channel(&chunk, server, |_| Ok(())).unwrap();
        assert_eq!(opened.request_bytes, request);
        assert_eq!(opened.sender, client.certificate);
        assert_eq!(opened.channel_id, 0);
    }

    #[test]
    fn open_channel_tamper_detected() {
        let (client, server, _) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let request = vec![0xA5u8; 100];
        let chunk =
            protect_open_secure_channel(3, &request, client, &server.certificate, &suite).unwrap();
        // Flip one ciphertext byte near the end.
        let mut tampered = chunk.clone();
        let n = tampered.len();
        tampered[n - 10] ^= 0xFF;
        let err = unprotect_open_secure_channel(&tampered, server, |_| Ok(())).unwrap_err();
        assert!(
            matches!(err, SecChanError::DecryptFailed | SecChanError::SignatureInvalid),
            "got {err:?}"
        );
    }

    #[test]
    fn open_channel_trust_check_runs_before_decryption() {
        let (client, server, _) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let chunk =
            protect_open_secure_channel(0, b"req", client, &server.certificate, &suite).unwrap();
        let err = unprotect_open_secure_channel(&chunk, server, |sender| {
            assert_eq!(sender.thumbprint, client.certificate.thumbprint);
            Err(StatusCode::BAD_CERTIFICATE_UNTRUSTED)
        })
        .unwrap_err();
        assert!(matches!(
            err,
            SecChanError::TrustRejected(StatusCode::BAD_CERTIFICATE_UNTRUSTED)
        ));
    }

    #[test]
    fn open_channel_wrong_receiver_thumbprint_rejected() {
        let (client, server, other) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        // Encrypt to the bystander but deliver to the server.
        let chunk =
            protect_open_secure_channel(0, b"req", client, &other.certificate, &suite).unwrap();
        let err = unprotect_open_secure_channel(&chunk, server, |_| Ok(())).unwrap_err();
        assert!(matches!(err, SecChanError::ThumbprintMismatch));
    }

    #[test]
    fn policy_none_refused_for_asymmetric_protection() {
        let (client, server, _) = identities();
        let suite = SecurityPolicy::None.suite();
        let err = protect_open_secure_channel(0, b"req", client, &server.certificate, &suite)
            .unwrap_err();
        assert!(matches!(err, SecChanError::PolicyNone));
    }

    #[test]
    fn oversized_open_plaintext_rejected() {
        let (client, server, _) = identities();
        let mut suite = SecurityPolicy::Basic256Sha256.suite();
        suite.max_asymmetric_blocks = 2;
        let request = vec![0u8; 1000];
        let err = protect_open_secure_channel(0, &request, client, &server.certificate, &suite)
            .unwrap_err();
        assert!(matches!(err, SecChanError::PlaintextTooLarge { .. }));
    }

    #[test]
    fn mode_none_is_identity() {
        let mut state = SecureChannelState::plain(1, 1);
        let chunk = plain_msg_chunk(1, b"payload");
        assert_eq!(protect_chunk(&chunk, &state).unwrap(), chunk);
        assert_eq!(unprotect_chunk(&chunk, &mut state).unwrap(), chunk);
    }

    #[test]
    fn sign_and_encrypt_round_trips_random_chunks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for mode in [SecurityMode::Sign, SecurityMode::SignAndEncrypt] {
            let (client_state, server_state) = linked_states(mode);
            let mut receiver = server_state;
            for seq in 1..=8u32 {
                let len = rng.gen_range(0..2000);
                let body: Vec<u8> = (&mut rng).sample_iter(rand::distributions::Standard).take(len).collect();
                let chunk = plain_msg_chunk(seq, &body);
                let protected = protect_chunk(&chunk, &client_state).unwrap();
                assert_ne!(protected, chunk);
                let opened = unprotect_chunk(&protected, &mut receiver).unwrap();
                assert_eq!(opened, chunk);
            }
        }
    }

    #[test]
    fn sign_and_encrypt_output_differs_from_sign() {
        let (client_sign, server_sign) = linked_states(SecurityMode::Sign);
        let chunk = plain_msg_chunk(1, b"same plaintext");
        let signed = protect_chunk(&chunk, &client_sign).unwrap();

        let mut enc_state = client_sign.clone();
        enc_state.mode = SecurityMode::SignAndEncrypt;
        let encrypted = protect_chunk(&chunk, &enc_state).unwrap();
        assert_ne!(signed, encrypted);

        // Both verify under their inverse.
        let mut sign_receiver = server_sign.clone();
        assert_eq!(unprotect_chunk(&signed, &mut sign_receiver).unwrap(), chunk);
        let mut enc_receiver = server_sign;
        enc_receiver.mode = SecurityMode::SignAndEncrypt;
        assert_eq!(unprotect_chunk(&encrypted, &mut enc_receiver).unwrap(), chunk);
    }

    #[test]
    fn truncated_mac_rejected() {
        let (client_state, server_state) = linked_states(SecurityMode::Sign);
        let chunk = plain_msg_chunk(1, b"hello");
        let mut protected = protect_chunk(&chunk, &client_state).unwrap();
        protected.pop();
        // Keep the declared size honest after truncation.
        let size = protected.len() as u32;
        protected[4..8].copy_from_slice(&size.to_le_bytes());
        let mut receiver = server_state;
        let err = unprotect_chunk(&protected, &mut receiver).unwrap_err();
        assert!(matches!(err, SecChanError::MacInvalid));
    }

    #[test]
    fn sequence_gap_detected_on_unprotect() {
        let (client_state, server_state) = linked_states(SecurityMode::SignAndEncrypt);
        let mut receiver = server_state;
        let first = protect_chunk(&plain_msg_chunk(1, b"a"), &client_state).unwrap();
        let third = protect_chunk(&plain_msg_chunk(3, b"c"), &client_state).unwrap();
        unprotect_chunk(&first, &mut receiver).unwrap();
        let err = unprotect_chunk(&third, &mut receiver).unwrap_err();
        assert!(matches!(err, SecChanError::SequenceGap { expected: 2, got: 3 }));
    }

    #[test]
    fn password_token_round_trips() {
        use rand::{Rng, SeedableRng};
        let (_, server, _) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..16 {
            let len = rng.gen_range(0..=64);
            let password: String =
                (0..len).map(|_| rng.gen_range(b' '..=b'~') as char).collect();
            let nonce = suite.random_nonce();
            let token =
                encrypt_password_token(&password, &server.certificate, &nonce, &suite).unwrap();
            assert_ne!(token.as_slice(), password.as_bytes());
            let recovered =
                decrypt_password_token(&token, &server.private_key, &nonce, &suite).unwrap();
            assert_eq!(recovered, password);
        }
    }

    #[test]
    fn empty_password_round_trips() {
        let (_, server, _) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let nonce = suite.random_nonce();
        let token = encrypt_password_token("", &server.certificate, &nonce, &suite).unwrap();
        let recovered =
            decrypt_password_token(&token, &server.private_key, &nonce, &suite).unwrap();
        assert_eq!(recovered, "");
    }

    #[test]
    fn long_password_rejected_at_oaep_capacity() {
        // 2048-bit key: capacity 256 - 42 = 214; 4 + 300 + 32 exceeds it.
        let (_, server, _) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let nonce = suite.random_nonce();
        let password = "x".repeat(300);
        let err = encrypt_password_token(&password, &server.certificate, &nonce, &suite)
            .unwrap_err();
        assert!(matches!(err, SecChanError::PasswordTooLong { max: 178, .. }));
    }

    #[test]
    fn token_for_other_key_fails() {
        let (_, server, other) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let nonce = suite.random_nonce();
        let token =
            encrypt_password_token("secret", &other.certificate, &nonce, &suite).unwrap();
        let err =
            decrypt_password_token(&token, &server.private_key, &nonce, &suite).unwrap_err();
        assert!(matches!(err, SecChanError::DecryptFailed));
    }

    #[test]
    fn stale_nonce_detected() {
        let (_, server, _) = identities();
        let suite = SecurityPolicy::Basic256Sha256.suite();
        let nonce = suite.random_nonce();
        let stale = suite.random_nonce();
        let token =
            encrypt_password_token("secret", &server.certificate, &nonce, &suite).unwrap();
        let err =
            decrypt_password_token(&token, &server.private_key, &stale, &suite).unwrap_err();
        assert!(matches!(err, SecChanError::NonceMismatch));
    }

    #[test]
    fn plaintext_token_under_policy_none() {
        let (_, server, _) = identities();
        let suite = SecurityPolicy::None.suite();
        let token = encrypt_password_token("pw", &server.certificate, &[], &suite).unwrap();
        assert_eq!(token, b"pw");
        assert_eq!(
            decrypt_password_token(&token, &server.private_key, &[], &suite).unwrap(),
            "pw"
        );
    }

    #[test]
    fn refused_policy_uris_are_named() {
        let err = SecurityPolicy::from_uri(
            "http://opcfoundation.org/UA/SecurityPolicy#Basic128Rsa15",
        )
        .unwrap_err();
        assert!(err.to_string().contains("refused"));
    }

    #[test]
    fn mirrored_state_inverts_directions() {
        let (client_state, _) = linked_states(SecurityMode::SignAndEncrypt);
        let mirrored = client_state.mirrored();
        let keys = client_state.keys.as_ref().unwrap();
        let mirrored_keys = mirrored.keys.as_ref().unwrap();
        assert_eq!(keys.local, mirrored_keys.remote);
        assert_eq!(keys.remote, mirrored_keys.local);
        let chunk = plain_msg_chunk(1, b"x");
        let protected = protect_chunk(&chunk, &client_state).unwrap();
        let mut receiver = mirrored;
        assert_eq!(unprotect_chunk(&protected, &mut receiver).unwrap(), chunk);
    }
}
