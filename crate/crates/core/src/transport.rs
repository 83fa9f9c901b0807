//! Framed chunk IO over TCP plus the Hello/Acknowledge negotiation both
//! roles run before anything else.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use crate::codec::service::{Acknowledge, ErrorMessage, Hello};
use crate::codec::{
    encode_chunks, reassemble, CodecError, HeaderKind, MessageHeader, ServiceBody, UaString,
    DEFAULT_CHUNK_SIZE, DEFAULT_MAX_CHUNK_COUNT, MESSAGE_HEADER_SIZE, MIN_CHUNK_SIZE,
};
use crate::status::StatusCode;
use crate::transcript::{Direction, TranscriptWriter};

/// Absolute cap on a single chunk read off the wire, whatever was
/// negotiated; bounds hostile-input memory.
pub const HARD_CHUNK_CAP: u32 = 1 << 20;

pub const DEFAULT_READ_TIMEOUT: Duration = Duration::from_secs(15);
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(3);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connect failed: {0}")]
    ConnectFailed(std::io::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("peer closed the connection")]
    Closed,
    #[error("chunk of {size} bytes exceeds limit {limit}")]
    ChunkTooLarge { size: u32, limit: u32 },
    #[error("expected {expected} message, got {got}")]
    UnexpectedMessage { expected: &'static str, got: &'static str },
    #[error("peer reported error {status}: {reason}")]
    PeerError { status: StatusCode, reason: String },
    #[error("invalid opc.tcp url: {0}")]
    BadUrl(String),
}

/// Limits agreed during Hello/Acknowledge.
#[derive(Clone, Copy, Debug)]
pub struct TransportLimits {
    pub max_chunk_size: u32,
    pub max_message_size: u32,
    pub max_chunk_count: u32,
}

impl Default for TransportLimits {
    fn default() -> Self {
        TransportLimits {
            max_chunk_size: DEFAULT_CHUNK_SIZE,
            max_message_size: HARD_CHUNK_CAP,
            max_chunk_count: DEFAULT_MAX_CHUNK_COUNT as u32,
        }
    }
}

/// Split an `opc.tcp://host:port` url into host and port (default 4840).
pub fn parse_opc_url(url: &str) -> Result<(String, u16), TransportError> {
    let rest = url
        .strip_prefix("opc.tcp://")
        .ok_or_else(|| TransportError::BadUrl(format!("{url}: expected opc.tcp scheme")))?;
    let rest = rest.split('/').next().unwrap_or(rest);
    match rest.rsplit_once(':') {
        Some((host, port)) => {
            let port = port
                .parse::<u16>()
                .map_err(|_| TransportError::BadUrl(format!("{url}: bad port")))?;
            Ok((host.to_string(), port))
        }
        None => Ok((rest.to_string(), 4840)),
    }
}

/// A framed connection: reads and writes whole chunks, recording every
/// one to an optional transcript.
pub struct Conn {
    stream: TcpStream,
    pub limits: TransportLimits,
    transcript: Option<TranscriptWriter>,
}

impl Conn {
    pub fn new(stream: TcpStream, transcript: Option<TranscriptWriter>) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(DEFAULT_READ_TIMEOUT))?;
        Ok(Conn { stream, limits: TransportLimits::default(), transcript })
    }

    pub fn connect(
        host: &str,
        port: u16,
        transcript: Option<TranscriptWriter>,
    ) -> Result<Self, TransportError> {
        let mut last_err = None;
        for addr in (host, port)
            .to_socket_addrs()
            .map_err(TransportError::ConnectFailed)?
        {
            match TcpStream::connect_timeout(&addr, DEFAULT_CONNECT_TIMEOUT) {
                Ok(stream) => return Conn::new(stream, transcript),
                Err(e) => last_err = Some(e),
            }
        }
        Err(TransportError::ConnectFailed(last_err.unwrap_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::NotFound, "no addresses resolved")
        })))
    }

    pub fn peer_addr(&self) -> Option<SocketAddr> {
        self.stream.peer_addr().ok()
    }

    pub fn set_read_timeout(&self, timeout: Duration) -> Result<(), TransportError> {
        self.stream.set_read_timeout(Some(timeout))?;
        Ok(())
    }

    /// Read one whole chunk. The declared size is checked against the
    /// negotiated limit and the hard cap before any allocation.
    pub fn read_chunk(&mut self) -> Result<Vec<u8>, TransportError> {
        let mut header = [0u8; MESSAGE_HEADER_SIZE];
        match self.stream.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Err(TransportError::Closed)
            }
            Err(e) => return Err(e.into()),
        }
        let parsed = MessageHeader::decode(&header)?;
        let limit = self.limits.max_chunk_size.max(MIN_CHUNK_SIZE).min(HARD_CHUNK_CAP);
        if parsed.message_size > limit {
            return Err(TransportError::ChunkTooLarge { size: parsed.message_size, limit });
        }
        let mut chunk = vec![0u8; parsed.message_size as usize];
        chunk[..MESSAGE_HEADER_SIZE].copy_from_slice(&header);
        match self.stream.read_exact(&mut chunk[MESSAGE_HEADER_SIZE..]) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Err(TransportError::Closed)
            }
            Err(e) => return Err(e.into()),
        }
        if let Some(t) = &self.transcript {
            t.record(Direction::Received, &chunk);
        }
        Ok(chunk)
    }

    pub fn write_chunk(&mut self, chunk: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(chunk)?;
        self.stream.flush()?;
        if let Some(t) = &self.transcript {
            t.record(Direction::Sent, chunk);
        }
        Ok(())
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }

    /// Client side of the transport handshake: send Hello, apply the
    /// Acknowledge the server answers with.
    pub fn client_handshake(&mut self, endpoint_url: &str) -> Result<(), TransportError> {
        let hello = ServiceBody::Hello(Hello {
            protocol_version: 0,
            receive_buffer_size: DEFAULT_CHUNK_SIZE,
            send_buffer_size: DEFAULT_CHUNK_SIZE,
            max_message_size: HARD_CHUNK_CAP,
            max_chunk_count: DEFAULT_MAX_CHUNK_COUNT as u32,
            endpoint_url: UaString::new(endpoint_url),
        });
        let chunks = encode_chunks(&hello, HeaderKind::Raw, None, 0, DEFAULT_CHUNK_SIZE)?;
        self.write_chunk(&chunks[0])?;
        let reply = self.read_chunk()?;
        let (body, _) = reassemble(std::slice::from_ref(&reply))?;
        match body {
            ServiceBody::Acknowledge(ack) => {
                self.limits = TransportLimits {
                    max_chunk_size: ack
                        .receive_buffer_size
                        .clamp(MIN_CHUNK_SIZE, HARD_CHUNK_CAP),
                    max_message_size: ack.max_message_size.min(HARD_CHUNK_CAP),
                    max_chunk_count: ack.max_chunk_count.min(DEFAULT_MAX_CHUNK_COUNT as u32),
                };
                Ok(())
            }
            ServiceBody::Error(e) => Err(TransportError::PeerError {
                status: e.error,
                reason: e.reason.as_text().into_owned(),
            }),
            other => Err(TransportError::UnexpectedMessage {
                expected: "Acknowledge",
                got: other.type_name(),
            }),
        }
    }

    /// Server side of the transport handshake: expect Hello, answer with
    /// Acknowledge, clamp limits to the smaller of both sides.
    pub fn server_handshake(&mut self) -> Result<Hello, TransportError> {
        let chunk = self.read_chunk()?;
        let (body, _) = reassemble(std::slice::from_ref(&chunk))?;
        let hello = match body {
            ServiceBody::Hello(hello) => hello,
            other => {
                return Err(TransportError::UnexpectedMessage {
                    expected: "Hello",
                    got: other.type_name(),
                })
            }
        };
        self.limits = TransportLimits {
            max_chunk_size: hello
                .receive_buffer_size
                .min(DEFAULT_CHUNK_SIZE)
                .clamp(MIN_CHUNK_SIZE, HARD_CHUNK_CAP),
            max_message_size: hello.max_message_size.min(HARD_CHUNK_CAP),
            max_chunk_count: hello.max_chunk_count.min(DEFAULT_MAX_CHUNK_COUNT as u32),
        };
        let ack = ServiceBody::Acknowledge(Acknowledge {
            protocol_version: 0,
            receive_buffer_size: self.limits.max_chunk_size,
            send_buffer_size: self.limits.max_chunk_size,
            max_message_size: self.limits.max_message_size,
            max_chunk_count: self.limits.max_chunk_count,
        });
        let chunks = encode_chunks(&ack, HeaderKind::Raw, None, 0, DEFAULT_CHUNK_SIZE)?;
        self.write_chunk(&chunks[0])?;
        Ok(hello)
    }

    /// Send an ERR message; used on protocol violations and trust
    /// rejections right before closing.
    pub fn send_error(&mut self, status: StatusCode, reason: &str) -> Result<(), TransportError> {
        let body = ServiceBody::Error(ErrorMessage {
            error: status,
            reason: UaString::new(reason),
        });
        let chunks = encode_chunks(&body, HeaderKind::Raw, None, 0, DEFAULT_CHUNK_SIZE)?;
        self.write_chunk(&chunks[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_parsing() {
        assert_eq!(
            parse_opc_url("opc.tcp://127.0.0.1:4840").unwrap(),
            ("127.0.0.1".to_string(), 4840)
        );
        assert_eq!(parse_opc_url("opc.tcp://host").unwrap(), ("host".to_string(), 4840));
        assert_eq!(
            parse_opc_url("opc.tcp://host:1234/path").unwrap(),
            ("host".to_string(), 1234)
        );
        assert!(parse_opc_url("http://host").is_err());
        assert!(parse_opc_url("opc.tcp://host:notaport").is_err());
    }

    #[test]
    fn handshake_over_loopback() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut conn = Conn::new(stream, None).unwrap();
            let hello = conn.server_handshake().unwrap();
            assert_eq!(hello.endpoint_url.as_text(), format!("opc.tcp://{addr}"));
            conn.limits.max_chunk_size
        });
        let mut conn = Conn::connect(&addr.ip().to_string(), addr.port(), None).unwrap();
        conn.client_handshake(&format!("opc.tcp://{addr}")).unwrap();
        let server_chunk = server.join().unwrap();
        assert_eq!(conn.limits.max_chunk_size, server_chunk);
    }

    #[test]
    fn oversized_chunk_refused_before_allocation() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let writer = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut header = Vec::new();
            header.extend_from_slice(b"MSGF");
            header.extend_from_slice(&(HARD_CHUNK_CAP + 1).to_le_bytes());
            stream.write_all(&header).unwrap();
            // Keep the socket open long enough for the client to read.
            std::thread::sleep(Duration::from_millis(100));
        });
        let mut conn = Conn::connect(&addr.ip().to_string(), addr.port(), None).unwrap();
        conn.limits.max_chunk_size = HARD_CHUNK_CAP;
        let err = conn.read_chunk().unwrap_err();
        assert!(matches!(err, TransportError::ChunkTooLarge { .. }));
        writer.join().unwrap();
    }
}
