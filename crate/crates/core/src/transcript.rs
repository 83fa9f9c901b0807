//! Length-prefixed on-disk transcripts of raw chunk traffic, written by
//! both victim and attacker roles so evidence can be replayed and
//! inspected offline.
//!
//! File layout: a 5-byte magic `UATX\x01`, then per record one direction
//! byte (0 = sent, 1 = received), a little-endian u64 microsecond
//! timestamp, a little-endian u32 byte count, and the raw chunk bytes.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

const MAGIC: &[u8; 5] = b"UATX\x01";

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a transcript file (bad magic)")]
    BadMagic,
    #[error("truncated record")]
    Truncated,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    Sent,
    Received,
}

impl Direction {
    fn tag(self) -> u8 {
        match self {
            Direction::Sent => 0,
            Direction::Received => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Direction::Sent),
            1 => Some(Direction::Received),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TranscriptRecord {
    pub direction: Direction,
    pub timestamp_micros: u64,
    pub bytes: Vec<u8>,
}

/// Shared, append-only transcript sink. Cloning shares the underlying
/// file; records from concurrent writers are serialized whole.
#[derive(Clone)]
pub struct TranscriptWriter {
    path: PathBuf,
    file: Arc<Mutex<BufWriter<File>>>,
}

impl TranscriptWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self, TranscriptError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = BufWriter::new(File::create(&path)?);
        file.write_all(MAGIC)?;
        file.flush()?;
        Ok(TranscriptWriter { path, file: Arc::new(Mutex::new(file)) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&self, direction: Direction, bytes: &[u8]) {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0);
        let mut file = self.file.lock().expect("transcript writer poisoned");
        // Best effort: transcript IO must never take down the connection.
        let _ = file.write_all(&[direction.tag()]);
        let _ = file.write_all(&timestamp.to_le_bytes());
        let _ = file.write_all(&(bytes.len() as u32).to_le_bytes());
        let _ = file.write_all(bytes);
        let _ = file.flush();
    }
}

/// Read a whole transcript back.
pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, TranscriptError> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    if data.len() < MAGIC.len() || &data[..MAGIC.len()] != MAGIC {
        return Err(TranscriptError::BadMagic);
    }
    let mut records = Vec::new();
    let mut pos = MAGIC.len();
    while pos < data.len() {
        if data.len() - pos < 13 {
            return Err(TranscriptError::Truncated);
        }
        let direction =
            Direction::from_tag(data[pos]).ok_or(TranscriptError::Truncated)?;
        let timestamp_micros = u64::from_le_bytes(data[pos + 1..pos + 9].try_into().unwrap());
        let len = u32::from_le_bytes(data[pos + 9..pos + 13].try_into().unwrap()) as usize;
        pos += 13;
        if data.len() - pos < len {
            return Err(TranscriptError::Truncated);
        }
        records.push(TranscriptRecord {
            direction,
            timestamp_micros,
            bytes: data[pos..pos + len].to_vec(),
        });
        pos += len;
    }
    Ok(records)
}

/// Read every transcript in a directory, sorted by file name.
pub fn read_transcript_dir(dir: &Path) -> Result<Vec<(PathBuf, Vec<TranscriptRecord>)>, TranscriptError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "uatx"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let records = read_transcript(&path)?;
        out.push((path, records));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcript_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("session.uatx");
        let writer = TranscriptWriter::create(&path).unwrap();
        writer.record(Direction::Sent, b"HELF1234");
        writer.record(Direction::Received, b"");
        writer.record(Direction::Received, &[0xFF; 300]);
        let records = read_transcript(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].direction, Direction::Sent);
        assert_eq!(records[0].bytes, b"HELF1234");
        assert_eq!(records[1].bytes, b"");
        assert_eq!(records[2].bytes.len(), 300);
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not.uatx");
        std::fs::write(&path, b"GARBAGE").unwrap();
        assert!(matches!(read_transcript(&path), Err(TranscriptError::BadMagic)));
    }
}
