//! Splitting service bodies into UA-TCP chunks and reassembling them.
//!
//! Chunks produced here are not yet cryptographically protected; symmetric
//! and asymmetric protection happens in the secure-channel layer on the
//! encoded chunk bytes.

use super::builtin::Reader;
use super::header::{
    AsymmetricSecurityHeader, ChunkFlag, MessageHeader, MessageType, SequenceHeader,
    SymmetricSecurityHeader, MESSAGE_HEADER_SIZE, SYMMETRIC_HEADER_SIZE,
};
use super::service::ServiceBody;
use super::CodecError;

/// Smallest max_chunk_size a peer may negotiate.
pub const MIN_CHUNK_SIZE: u32 = 8192;

/// Default chunk size before Hello/Acknowledge negotiation.
pub const DEFAULT_CHUNK_SIZE: u32 = 65536;

/// Hard cap on the number of chunks a single message may occupy.
pub const DEFAULT_MAX_CHUNK_COUNT: usize = 64;

/// Bytes reserved per chunk for symmetric protection overhead (padding,
/// padding-size byte and MAC) so protected chunks stay within the
/// negotiated size.
pub const PROTECTION_RESERVE: u32 = 64;

/// Which header family the chunks carry.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum HeaderKind {
    /// Hello/Acknowledge/Error: message header only, always one chunk.
    Raw,
    /// OpenSecureChannel: asymmetric security header, single chunk.
    Asymmetric,
    /// Everything else: symmetric security header, may span chunks.
    Symmetric,
}

/// The slice of channel state that chunk encoding needs: identifiers, the
/// outgoing sequence counter, and the asymmetric header template for OPN.
pub struct ChunkChannel<'a> {
    pub channel_id: u32,
    pub token_id: u32,
    pub send_sequence: &'a mut u32,
    /// Header used verbatim for asymmetric chunks.
    pub asymmetric_header: AsymmetricSecurityHeader,
    /// Extra per-chunk headroom when the channel will protect the chunks
    /// afterwards; zero for mode None.
    pub protection_reserve: u32,
}

impl<'a> ChunkChannel<'a> {
    /// Channel view for plain (policy None) traffic.
    pub fn plain(
        channel_id: u32,
        token_id: u32,
        send_sequence: &'a mut u32,
        policy_uri: &str,
    ) -> Self {
        ChunkChannel {
            channel_id,
            token_id,
            send_sequence,
            asymmetric_header: AsymmetricSecurityHeader::none_policy(channel_id, policy_uri),
            protection_reserve: 0,
        }
    }

    fn next_sequence(&mut self) -> u32 {
        *self.send_sequence += 1;
        *self.send_sequence
    }
}

/// Usable body bytes per symmetric chunk of the given size.
pub fn symmetric_chunk_capacity(max_chunk_size: u32, protection_reserve: u32) -> usize {
    (max_chunk_size as usize)
        .saturating_sub(SYMMETRIC_HEADER_SIZE + 8 + protection_reserve as usize)
}

/// Encode a service body into one or more unprotected chunks.
///
/// Raw bodies always produce exactly one chunk; asymmetric bodies must fit
/// one chunk; symmetric bodies split at the chunk capacity with
/// consecutive sequence numbers and chunk flags `C.., F`.
pub fn encode_chunks(
    body: &ServiceBody,
    kind: HeaderKind,
    channel: Option<&mut ChunkChannel<'_>>,
    request_id: u32,
    max_chunk_size: u32,
) -> Result<Vec<Vec<u8>>, CodecError> {
    encode_chunks_limit(body, kind, channel, request_id, max_chunk_size, DEFAULT_MAX_CHUNK_COUNT)
}

pub fn encode_chunks_limit(
    body: &ServiceBody,
    kind: HeaderKind,
    channel: Option<&mut ChunkChannel<'_>>,
    request_id: u32,
    max_chunk_size: u32,
    max_chunks: usize,
) -> Result<Vec<Vec<u8>>, CodecError> {
    if max_chunk_size < MIN_CHUNK_SIZE {
        return Err(CodecError::ChunkSizeTooSmall { size: max_chunk_size, min: MIN_CHUNK_SIZE });
    }
    match kind {
        HeaderKind::Raw => {
            if !body.is_raw() {
                return Err(CodecError::HeaderKindMismatch { body: body.type_name() });
            }
            let message_type = match body {
                ServiceBody::Hello(_) => MessageType::Hello,
                ServiceBody::Acknowledge(_) => MessageType::Acknowledge,
                _ => MessageType::Error,
            };
            let payload = body.encode();
            let total = MESSAGE_HEADER_SIZE + payload.len();
            if total > max_chunk_size as usize {
                return Err(CodecError::BodyTooLarge { chunks: 2, max: 1 });
            }
            let mut chunk = Vec::with_capacity(total);
            chunk.extend_from_slice(
                &MessageHeader {
                    message_type,
                    chunk_flag: ChunkFlag::Final,
                    message_size: total as u32,
                }
                .encode(),
            );
            chunk.extend_from_slice(&payload);
            Ok(vec![chunk])
        }
        HeaderKind::Asymmetric => {
            if !matches!(
                body,
                ServiceBody::OpenSecureChannelRequest(_) | ServiceBody::OpenSecureChannelResponse(_)
            ) {
                return Err(CodecError::HeaderKindMismatch { body: body.type_name() });
            }
            let channel = channel.ok_or(CodecError::ChannelRequired)?;
            let mut security = Vec::new();
            channel.asymmetric_header.write(&mut security);
            let mut payload = Vec::new();
            SequenceHeader { sequence_number: channel.next_sequence(), request_id }
                .write(&mut payload);
            payload.extend_from_slice(&body.encode());
            let total = MESSAGE_HEADER_SIZE + security.len() + payload.len();
            if total > max_chunk_size as usize {
                return Err(CodecError::BodyTooLarge { chunks: 2, max: 1 });
            }
            let mut chunk = Vec::with_capacity(total);
            chunk.extend_from_slice(
                &MessageHeader {
                    message_type: MessageType::OpenChannel,
                    chunk_flag: ChunkFlag::Final,
                    message_size: total as u32,
                }
                .encode(),
            );
            chunk.extend_from_slice(&security);
            chunk.extend_from_slice(&payload);
            Ok(vec![chunk])
        }
        HeaderKind::Symmetric => {
            if body.is_raw() || matches!(body, ServiceBody::OpenSecureChannelRequest(_)) {
                return Err(CodecError::HeaderKindMismatch { body: body.type_name() });
            }
            let channel = channel.ok_or(CodecError::ChannelRequired)?;
            let message_type = match body {
                ServiceBody::CloseSecureChannelRequest(_) => MessageType::CloseChannel,
                _ => MessageType::Message,
            };
            let encoded = body.encode();
            let capacity = symmetric_chunk_capacity(max_chunk_size, channel.protection_reserve);
            let chunk_count = encoded.len().div_ceil(capacity).max(1);
            if chunk_count > max_chunks {
                return Err(CodecError::BodyTooLarge { chunks: chunk_count, max: max_chunks });
            }
            let security =
                SymmetricSecurityHeader { channel_id: channel.channel_id, token_id: channel.token_id };
            let mut chunks = Vec::with_capacity(chunk_count);
            for (index, part) in split_parts(&encoded, capacity).enumerate() {
                let flag = if index + 1 == chunk_count {
                    ChunkFlag::Final
                } else {
                    ChunkFlag::Intermediate
                };
                let total = SYMMETRIC_HEADER_SIZE + 8 + part.len();
                let mut chunk = Vec::with_capacity(total);
                chunk.extend_from_slice(
                    &MessageHeader { message_type, chunk_flag: flag, message_size: total as u32 }
                        .encode(),
                );
                security.write(&mut chunk);
                SequenceHeader { sequence_number: channel.next_sequence(), request_id }
                    .write(&mut chunk);
                chunk.extend_from_slice(part);
                chunks.push(chunk);
            }
            Ok(chunks)
        }
    }
}

/// Like `[u8]::chunks` but yields exactly one empty part for empty input,
/// so zero-length bodies still produce a final chunk.
fn split_parts(bytes: &[u8], capacity: usize) -> impl Iterator<Item = &[u8]> {
    let count = bytes.len().div_ceil(capacity).max(1);
    (0..count).map(move |i| {
        let start = i * capacity;
        let end = ((i + 1) * capacity).min(bytes.len());
        &bytes[start..end]
    })
}

/// Everything parsed out of a single unprotected chunk.
pub struct ParsedChunk<'a> {
    pub header: MessageHeader,
    pub symmetric: Option<SymmetricSecurityHeader>,
    pub asymmetric: Option<AsymmetricSecurityHeader>,
    pub sequence: Option<SequenceHeader>,
    pub body: &'a [u8],
}

/// Parse one unprotected chunk into its headers and body slice.
pub fn parse_chunk(chunk: &[u8]) -> Result<ParsedChunk<'_>, CodecError> {
    let header = MessageHeader::decode_for_chunk(chunk)?;
    let mut reader = Reader::new(&chunk[MESSAGE_HEADER_SIZE..]);
    match header.message_type {
        MessageType::Hello | MessageType::Acknowledge | MessageType::Error => Ok(ParsedChunk {
            header,
            symmetric: None,
            asymmetric: None,
            sequence: None,
            body: reader.rest(),
        }),
        MessageType::OpenChannel => {
            let asymmetric = AsymmetricSecurityHeader::read(&mut reader)?;
            let sequence = SequenceHeader::read(&mut reader)?;
            Ok(ParsedChunk {
                header,
                symmetric: None,
                asymmetric: Some(asymmetric),
                sequence: Some(sequence),
                body: reader.rest(),
            })
        }
        MessageType::Message | MessageType::CloseChannel => {
            let symmetric = SymmetricSecurityHeader::read(&mut reader)?;
            let sequence = SequenceHeader::read(&mut reader)?;
            Ok(ParsedChunk {
                header,
                symmetric: Some(symmetric),
                asymmetric: None,
                sequence: Some(sequence),
                body: reader.rest(),
            })
        }
    }
}

/// Reassemble a complete chunk list back into its service body and the
/// sequence header of the first chunk. Raw transport messages report a
/// zeroed sequence header.
pub fn reassemble(chunks: &[Vec<u8>]) -> Result<(ServiceBody, SequenceHeader), CodecError> {
    let first = chunks.first().ok_or(CodecError::Malformed {
        what: "chunk list",
        detail: "empty",
    })?;
    let first_header = MessageHeader::decode_for_chunk(first)?;

    if first_header.message_type.is_raw() || first_header.message_type == MessageType::OpenChannel
    {
        if chunks.len() != 1 {
            return Err(CodecError::Malformed {
                what: "chunk list",
                detail: "multi-chunk transport or open message",
            });
        }
        let parsed = parse_chunk(first)?;
        if parsed.header.chunk_flag == ChunkFlag::Abort {
            return Err(CodecError::AbortReceived);
        }
        if parsed.header.chunk_flag != ChunkFlag::Final {
            return Err(CodecError::MissingFinalChunk);
        }
        let body = if first_header.message_type.is_raw() {
            ServiceBody::decode_raw(first_header.message_type, parsed.body)?
        } else {
            ServiceBody::decode(parsed.body)?
        };
        let sequence =
            parsed.sequence.unwrap_or(SequenceHeader { sequence_number: 0, request_id: 0 });
        return Ok((body, sequence));
    }

    let mut payload = Vec::new();
    let mut first_sequence = None;
    let mut expected_next = 0u32;
    let mut first_symmetric: Option<SymmetricSecurityHeader> = None;
    let mut finished = false;

    for chunk in chunks {
        if finished {
            return Err(CodecError::Malformed {
                what: "chunk list",
                detail: "data after final chunk",
            });
        }
        let parsed = parse_chunk(chunk)?;
        if parsed.header.message_type != first_header.message_type {
            return Err(CodecError::Malformed {
                what: "chunk list",
                detail: "mixed message types",
            });
        }
        if parsed.header.chunk_flag == ChunkFlag::Abort {
            return Err(CodecError::AbortReceived);
        }
        let sequence = parsed.sequence.expect("symmetric chunks always carry a sequence header");
        let symmetric = parsed.symmetric.expect("symmetric chunks carry a security header");
        match (&first_sequence, &first_symmetric) {
            (None, _) => {
                first_sequence = Some(sequence);
                first_symmetric = Some(symmetric);
                expected_next = sequence.sequence_number;
            }
            (Some(first_seq), Some(first_sym)) => {
                if sequence.request_id != first_seq.request_id {
                    return Err(CodecError::MixedRequestIds {
                        first: first_seq.request_id,
                        other: sequence.request_id,
                    });
                }
                if symmetric != *first_sym {
                    return Err(CodecError::Malformed {
                        what: "chunk list",
                        detail: "security header changed between chunks",
                    });
                }
                expected_next = expected_next.wrapping_add(1);
                if sequence.sequence_number != expected_next {
                    return Err(CodecError::SequenceGap {
                        expected: expected_next,
                        got: sequence.sequence_number,
                    });
                }
            }
            _ => unreachable!(),
        }
        payload.extend_from_slice(parsed.body);
        finished = parsed.header.chunk_flag == ChunkFlag::Final;
    }
    if !finished {
        return Err(CodecError::MissingFinalChunk);
    }
    let body = ServiceBody::decode(&payload)?;
    Ok((body, first_sequence.expect("at least one chunk")))
}

#[cfg(test)]
mod tests {
    use super::super::service::{GetEndpointsRequest, Hello, ReadRequest, RequestHeader};
    use super::super::{NodeId, UaString};
    use super::*;

    fn hello_body() -> ServiceBody {
        ServiceBody::Hello(Hello {
            protocol_version: 0,
            receive_buffer_size: 65536,
            send_buffer_size: 65536,
            max_message_size: 1 << 20,
            max_chunk_count: 64,
            endpoint_url: UaString::new("opc.tcp://127.0.0.1:4840"),
        })
    }

    #[test]
    fn hello_is_a_single_final_raw_chunk() {
        let chunks = encode_chunks(&hello_body(), HeaderKind::Raw, None, 0, 8192).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(&chunks[0][..4], b"HELF");
        let size = u32::from_le_bytes(chunks[0][4..8].try_into().unwrap());
        assert_eq!(size as usize, chunks[0].len());
    }

    #[test]
    fn one_byte_body_is_one_final_chunk() {
        let body = ServiceBody::Unknown { node_id: NodeId::numeric(0, 4242), raw: vec![0x42] };
        let mut seq = 0;
        let mut channel = ChunkChannel::plain(5, 6, &mut seq, "None");
        let chunks =
            encode_chunks(&body, HeaderKind::Symmetric, Some(&mut channel), 1, 8192).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0][3], b'F');
    }

    #[test]
    fn three_capacity_body_makes_three_chunks_c_c_f() {
        let capacity = symmetric_chunk_capacity(8192, 0);
        // Unknown body: node id takes 4 bytes of the first capacity slot.
        let raw_len = capacity * 3 - 4;
        let body =
            ServiceBody::Unknown { node_id: NodeId::numeric(0, 4242), raw: vec![7u8; raw_len] };
        let mut seq = 0;
        let mut channel = ChunkChannel::plain(5, 6, &mut seq, "None");
        let chunks =
            encode_chunks(&body, HeaderKind::Symmetric, Some(&mut channel), 9, 8192).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!([chunks[0][3], chunks[1][3], chunks[2][3]], [b'C', b'C', b'F']);
        // sequence numbers 1, 2, 3
        let seqs: Vec<u32> = chunks
            .iter()
            .map(|c| u32::from_le_bytes(c[16..20].try_into().unwrap()))
            .collect();
        assert_eq!(seqs, [1, 2, 3]);
        let (round, seq_header) = reassemble(&chunks).unwrap();
        assert_eq!(round, body);
        assert_eq!(seq_header.request_id, 9);
    }

    #[test]
    fn reassemble_round_trips_get_endpoints() {
        let body = ServiceBody::GetEndpointsRequest(GetEndpointsRequest {
            header: RequestHeader::default(),
            endpoint_url: UaString::new("opc.tcp://127.0.0.1:4840"),
        });
        let mut seq = 10;
        let mut channel = ChunkChannel::plain(1, 2, &mut seq, "None");
        let chunks =
            encode_chunks(&body, HeaderKind::Symmetric, Some(&mut channel), 77, 8192).unwrap();
        let (round, seq_header) = reassemble(&chunks).unwrap();
        assert_eq!(round, body);
        assert_eq!(seq_header, SequenceHeader { sequence_number: 11, request_id: 77 });
    }

    #[test]
    fn sequence_gap_detected() {
        let body = ServiceBody::ReadRequest(ReadRequest {
            header: RequestHeader::default(),
            nodes: (0..3000).map(|i| NodeId::numeric(1, 0x1_0000 + i)).collect(),
        });
        let mut seq = 4;
        let mut channel = ChunkChannel::plain(1, 2, &mut seq, "None");
        let mut chunks =
            encode_chunks(&body, HeaderKind::Symmetric, Some(&mut channel), 1, 8192).unwrap();
        assert!(chunks.len() >= 3, "need a multi-chunk message for this test");
        chunks.remove(1);
        let err = reassemble(&chunks).unwrap_err();
        assert!(matches!(err, CodecError::SequenceGap { expected: 6, got: 7 }));
    }

    #[test]
    fn mixed_request_ids_detected() {
        let body = ServiceBody::ReadRequest(ReadRequest {
            header: RequestHeader::default(),
            nodes: (0..3000).map(|i| NodeId::numeric(1, 0x1_0000 + i)).collect(),
        });
        let mut seq = 0;
        let mut channel = ChunkChannel::plain(1, 2, &mut seq, "None");
        let mut chunks =
            encode_chunks(&body, HeaderKind::Symmetric, Some(&mut channel), 5, 8192).unwrap();
        // Corrupt the request id of the second chunk (bytes 20..24).
        chunks[1][20] ^= 0xFF;
        let err = reassemble(&chunks).unwrap_err();
        assert!(matches!(err, CodecError::MixedRequestIds { .. }));
    }

    #[test]
    fn abort_flag_reported() {
        let body = ServiceBody::Unknown { node_id: NodeId::numeric(0, 4242), raw: vec![1; 16] };
        let mut seq = 0;
        let mut channel = ChunkChannel::plain(1, 2, &mut seq, "None");
        let mut chunks =
            encode_chunks(&body, HeaderKind::Symmetric, Some(&mut channel), 5, 8192).unwrap();
        chunks[0][3] = b'A';
        assert!(matches!(reassemble(&chunks).unwrap_err(), CodecError::AbortReceived));
    }

    #[test]
    fn oversized_body_rejected() {
        let capacity = symmetric_chunk_capacity(8192, 0);
        let body = ServiceBody::Unknown {
            node_id: NodeId::numeric(0, 4242),
            raw: vec![0u8; capacity * (DEFAULT_MAX_CHUNK_COUNT + 1)],
        };
        let mut seq = 0;
        let mut channel = ChunkChannel::plain(1, 2, &mut seq, "None");
        let err = encode_chunks(&body, HeaderKind::Symmetric, Some(&mut channel), 5, 8192)
            .unwrap_err();
        assert!(matches!(err, CodecError::BodyTooLarge { .. }));
    }

    #[test]
    fn tiny_chunk_size_refused() {
        let err = encode_chunks(&hello_body(), HeaderKind::Raw, None, 0, 100).unwrap_err();
        assert!(matches!(err, CodecError::ChunkSizeTooSmall { .. }));
    }
}
