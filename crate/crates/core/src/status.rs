//! OPC UA status codes used on the wire and in fault reporting.
//!
//! Only the codes this toolkit actually emits or matches on are named here;
//! anything else round-trips as a raw `u32`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A 32-bit OPC UA status code. The top bits carry severity: `0x80......`
/// is Bad, `0x40......` is Uncertain, everything else is Good.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StatusCode(pub u32);

impl StatusCode {
    pub const GOOD: StatusCode = StatusCode(0x0000_0000);
    pub const BAD_UNEXPECTED_ERROR: StatusCode = StatusCode(0x8001_0000);
    pub const BAD_INTERNAL_ERROR: StatusCode = StatusCode(0x8002_0000);
    pub const BAD_COMMUNICATION_ERROR: StatusCode = StatusCode(0x8005_0000);
    pub const BAD_ENCODING_ERROR: StatusCode = StatusCode(0x8006_0000);
    pub const BAD_DECODING_ERROR: StatusCode = StatusCode(0x8007_0000);
    pub const BAD_TIMEOUT: StatusCode = StatusCode(0x800A_0000);
    pub const BAD_SERVICE_UNSUPPORTED: StatusCode = StatusCode(0x800B_0000);
    pub const BAD_SECURITY_CHECKS_FAILED: StatusCode = StatusCode(0x8013_0000);
    pub const BAD_CERTIFICATE_TIME_INVALID: StatusCode = StatusCode(0x8014_0000);
    pub const BAD_CERTIFICATE_URI_INVALID: StatusCode = StatusCode(0x8017_0000);
    pub const BAD_CERTIFICATE_UNTRUSTED: StatusCode = StatusCode(0x801A_0000);
    pub const BAD_USER_ACCESS_DENIED: StatusCode = StatusCode(0x801F_0000);
    pub const BAD_IDENTITY_TOKEN_INVALID: StatusCode = StatusCode(0x8020_0000);
    pub const BAD_IDENTITY_TOKEN_REJECTED: StatusCode = StatusCode(0x8021_0000);
    pub const BAD_SECURE_CHANNEL_ID_INVALID: StatusCode = StatusCode(0x8022_0000);
    pub const BAD_SESSION_ID_INVALID: StatusCode = StatusCode(0x8025_0000);
    pub const BAD_SESSION_NOT_ACTIVATED: StatusCode = StatusCode(0x8027_0000);
    pub const BAD_NODE_ID_UNKNOWN: StatusCode = StatusCode(0x8034_0000);
    pub const BAD_NOT_WRITABLE: StatusCode = StatusCode(0x803B_0000);
    pub const BAD_TCP_MESSAGE_TYPE_INVALID: StatusCode = StatusCode(0x807E_0000);
    pub const BAD_TCP_MESSAGE_TOO_LARGE: StatusCode = StatusCode(0x8080_0000);
    pub const BAD_NONCE_INVALID: StatusCode = StatusCode(0x80BE_0000);
    pub const BAD_SECURITY_MODE_REJECTED: StatusCode = StatusCode(0x80E6_0000);
    pub const BAD_SECURITY_POLICY_REJECTED: StatusCode = StatusCode(0x80E7_0000);

    pub fn is_good(self) -> bool {
        self.0 & 0x8000_0000 == 0
    }

    pub fn is_bad(self) -> bool {
        !self.is_good()
    }

    /// Symbolic name for known codes, `None` for anything unlisted.
    pub fn name(self) -> Option<&'static str> {
        Some(match self {
            StatusCode::GOOD => "Good",
            StatusCode::BAD_UNEXPECTED_ERROR => "BadUnexpectedError",
            StatusCode::BAD_INTERNAL_ERROR => "BadInternalError",
            StatusCode::BAD_COMMUNICATION_ERROR => "BadCommunicationError",
            StatusCode::BAD_ENCODING_ERROR => "BadEncodingError",
            StatusCode::BAD_DECODING_ERROR => "BadDecodingError",
            StatusCode::BAD_TIMEOUT => "BadTimeout",
            StatusCode::BAD_SERVICE_UNSUPPORTED => "BadServiceUnsupported",
            StatusCode::BAD_SECURITY_CHECKS_FAILED => "BadSecurityChecksFailed",
            StatusCode::BAD_CERTIFICATE_TIME_INVALID => "BadCertificateTimeInvalid",
            StatusCode::BAD_CERTIFICATE_URI_INVALID => "BadCertificateUriInvalid",
            StatusCode::BAD_CERTIFICATE_UNTRUSTED => "BadCertificateUntrusted",
            StatusCode::BAD_USER_ACCESS_DENIED => "BadUserAccessDenied",
            StatusCode::BAD_IDENTITY_TOKEN_INVALID => "BadIdentityTokenInvalid",
            StatusCode::BAD_IDENTITY_TOKEN_REJECTED => "BadIdentityTokenRejected",
            StatusCode::BAD_SECURE_CHANNEL_ID_INVALID => "BadSecureChannelIdInvalid",
            StatusCode::BAD_SESSION_ID_INVALID => "BadSessionIdInvalid",
            StatusCode::BAD_SESSION_NOT_ACTIVATED => "BadSessionNotActivated",
            StatusCode::BAD_NODE_ID_UNKNOWN => "BadNodeIdUnknown",
            StatusCode::BAD_NOT_WRITABLE => "BadNotWritable",
            StatusCode::BAD_TCP_MESSAGE_TYPE_INVALID => "BadTcpMessageTypeInvalid",
            StatusCode::BAD_TCP_MESSAGE_TOO_LARGE => "BadTcpMessageTooLarge",
            StatusCode::BAD_NONCE_INVALID => "BadNonceInvalid",
            StatusCode::BAD_SECURITY_MODE_REJECTED => "BadSecurityModeRejected",
            StatusCode::BAD_SECURITY_POLICY_REJECTED => "BadSecurityPolicyRejected",
            _ => return None,
        })
    }
}

impl fmt::Debug for StatusCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(name) => write!(f, "{name}"),
            None => write!(f, "StatusCode({:#010X})", self.0),
        }
    }
}

impl fmt::Display for StatusCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(name) => write!(f, "{name} ({:#010X})", self.0),
            None => write!(f, "{:#010X}", self.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrusted_code_matches_wire_value() {
        assert_eq!(StatusCode::BAD_CERTIFICATE_UNTRUSTED.0, 0x801A_0000);
        assert!(StatusCode::BAD_CERTIFICATE_UNTRUSTED.is_bad());
        assert!(StatusCode::GOOD.is_good());
    }
}
