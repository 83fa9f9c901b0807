//! UA-TCP chunk headers: the 8-byte message header, the asymmetric and
//! symmetric security headers, and the sequence header.

use serde::{Deserialize, Serialize};

use super::builtin::{Reader, UaByteString, write_byte_string, write_u32};
use super::CodecError;

/// Minimum size of any chunk: the message header alone.
pub const MESSAGE_HEADER_SIZE: usize = 8;

/// Symmetric security header plus message header, in bytes.
pub const SYMMETRIC_HEADER_SIZE: usize = MESSAGE_HEADER_SIZE + 8;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum MessageType {
    Hello,
    Acknowledge,
    Error,
    OpenChannel,
    Message,
    CloseChannel,
}

impl MessageType {
    pub fn tag(self) -> [u8; 3] {
        match self {
            MessageType::Hello => *b"HEL",
            MessageType::Acknowledge => *b"ACK",
            MessageType::Error => *b"ERR",
            MessageType::OpenChannel => *b"OPN",
            MessageType::Message => *b"MSG",
            MessageType::CloseChannel => *b"CLO",
        }
    }

    pub fn from_tag(tag: [u8; 3]) -> Option<Self> {
        Some(match &tag {
            b"HEL" => MessageType::Hello,
            b"ACK" => MessageType::Acknowledge,
            b"ERR" => MessageType::Error,
            b"OPN" => MessageType::OpenChannel,
            b"MSG" => MessageType::Message,
            b"CLO" => MessageType::CloseChannel,
            _ => return None,
        })
    }

    /// Hello, Acknowledge and Error chunks carry no security or sequence
    /// headers at all.
    pub fn is_raw(self) -> bool {
        matches!(self, MessageType::Hello | MessageType::Acknowledge | MessageType::Error)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ChunkFlag {
    /// Final chunk of a message.
    Final,
    /// More chunks follow.
    Intermediate,
    /// Sender aborted the message; discard accumulated chunks.
    Abort,
}

impl ChunkFlag {
    pub fn tag(self) -> u8 {
        match self {
            ChunkFlag::Final => b'F',
            ChunkFlag::Intermediate => b'C',
            ChunkFlag::Abort => b'A',
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            b'F' => ChunkFlag::Final,
            b'C' => ChunkFlag::Intermediate,
            b'A' => ChunkFlag::Abort,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct MessageHeader {
    pub message_type: MessageType,
    pub chunk_flag: ChunkFlag,
    /// Total byte length of the chunk, this header included.
    pub message_size: u32,
}

impl MessageHeader {
    pub fn encode(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[..3].copy_from_slice(&self.message_type.tag());
        out[3] = self.chunk_flag.tag();
        out[4..].copy_from_slice(&self.message_size.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < MESSAGE_HEADER_SIZE {
            return Err(CodecError::Truncated { need: MESSAGE_HEADER_SIZE, have: bytes.len() });
        }
        let message_type = MessageType::from_tag([bytes[0], bytes[1], bytes[2]])
            .ok_or(CodecError::UnknownMessageType([bytes[0], bytes[1], bytes[2]]))?;
        let chunk_flag = ChunkFlag::from_tag(bytes[3]).ok_or(CodecError::Malformed {
            what: "message header",
            detail: "unknown chunk flag",
        })?;
        let message_size = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if (message_size as usize) < MESSAGE_HEADER_SIZE {
            return Err(CodecError::Malformed {
                what: "message header",
                detail: "declared size smaller than header",
            });
        }
        Ok(MessageHeader { message_type, chunk_flag, message_size })
    }

    /// Decode and additionally require the declared size to match the
    /// actual chunk length. Used whenever a whole chunk is in hand.
    pub fn decode_for_chunk(chunk: &[u8]) -> Result<Self, CodecError> {
        let header = Self::decode(chunk)?;
        if header.message_size as usize != chunk.len() {
            return Err(CodecError::SizeMismatch {
                declared: header.message_size,
                actual: chunk.len(),
            });
        }
        Ok(header)
    }
}

/// Security header of OPN chunks. For policy None the certificate and
/// thumbprint fields are absent (-1 length).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AsymmetricSecurityHeader {
    pub channel_id: u32,
    pub security_policy_uri: UaByteString,
    pub sender_certificate: UaByteString,
    pub receiver_certificate_thumbprint: UaByteString,
}

impl AsymmetricSecurityHeader {
    pub fn none_policy(channel_id: u32, policy_uri: &str) -> Self {
        AsymmetricSecurityHeader {
            channel_id,
            security_policy_uri: UaByteString::new(policy_uri.as_bytes()),
            sender_certificate: UaByteString::NULL,
            receiver_certificate_thumbprint: UaByteString::NULL,
        }
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        write_u32(out, self.channel_id);
        write_byte_string(out, &self.security_policy_uri);
        write_byte_string(out, &self.sender_certificate);
        write_byte_string(out, &self.receiver_certificate_thumbprint);
    }

    pub(crate) fn read(reader: &mut Reader<'_>) -> Result<Self, CodecError> {
        let channel_id = reader.u32()?;
        let security_policy_uri = reader.byte_string()?;
        if security_policy_uri.is_null() {
            return Err(CodecError::Malformed {
                what: "asymmetric security header",
                detail: "missing security policy uri",
            });
        }
        let sender_certificate = reader.byte_string()?;
        let receiver_certificate_thumbprint = reader.byte_string()?;
        if !receiver_certificate_thumbprint.is_null()
            && receiver_certificate_thumbprint.len() != 20
        {
            return Err(CodecError::Malformed {
                what: "asymmetric security header",
                detail: "receiver thumbprint is not 20 bytes",
            });
        }
        Ok(AsymmetricSecurityHeader {
            channel_id,
            security_policy_uri,
            sender_certificate,
            receiver_certificate_thumbprint,
        })
    }
}

/// Security header of MSG and CLO chunks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SymmetricSecurityHeader {
    pub channel_id: u32,
    pub token_id: u32,
}

impl SymmetricSecurityHeader {
    pub fn write(&self, out: &mut Vec<u8>) {
        write_u32(out, self.channel_id);
        write_u32(out, self.token_id);
    }

    pub(crate) fn read(reader: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(SymmetricSecurityHeader { channel_id: reader.u32()?, token_id: reader.u32()? })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SequenceHeader {
    pub sequence_number: u32,
    pub request_id: u32,
}

impl SequenceHeader {
    pub fn write(&self, out: &mut Vec<u8>) {
        write_u32(out, self.sequence_number);
        write_u32(out, self.request_id);
    }

    pub(crate) fn read(reader: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(SequenceHeader { sequence_number: reader.u32()?, request_id: reader.u32()? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let header = MessageHeader {
            message_type: MessageType::OpenChannel,
            chunk_flag: ChunkFlag::Final,
            message_size: 1234,
        };
        let bytes = header.encode();
        assert_eq!(&bytes[..4], b"OPNF");
        assert_eq!(MessageHeader::decode(&bytes).unwrap(), header);
    }

    #[test]
    fn unknown_tag_rejected() {
        let err = MessageHeader::decode(b"XYZF\x08\x00\x00\x00").unwrap_err();
        assert!(matches!(err, CodecError::UnknownMessageType(_)));
    }

    #[test]
    fn size_below_header_rejected() {
        let err = MessageHeader::decode(b"MSGF\x07\x00\x00\x00").unwrap_err();
        assert!(matches!(err, CodecError::Malformed { .. }));
    }

    #[test]
    fn thumbprint_length_enforced() {
        let mut buf = Vec::new();
        AsymmetricSecurityHeader {
            channel_id: 1,
            security_policy_uri: UaByteString::new(&b"p"[..]),
            sender_certificate: UaByteString::NULL,
            receiver_certificate_thumbprint: UaByteString::new(vec![0u8; 19]),
        }
        .write(&mut buf);
        let err = AsymmetricSecurityHeader::read(&mut Reader::new(&buf)).unwrap_err();
        assert!(matches!(err, CodecError::Malformed { .. }));
    }
}
