//! Built-in value encoding: little-endian fixed-width scalars, signed
//! 32-bit-length-prefixed strings and byte strings (-1 means absent),
//! node ids, localized text, and flat arrays of those.
//!
//! Decoding is strict: a value that decodes always re-encodes to the exact
//! input bytes, so non-minimal node-id forms, boolean bytes other than 0/1,
//! and reserved bits are rejected rather than normalized.

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CodecError, MAX_ARRAY_LEN};

/// A length-prefixed UTF-8 string as it appears on the wire.
///
/// The raw bytes are preserved even when they are not valid UTF-8 so that
/// re-encoding is byte-exact and attacker-facing display never fails;
/// [`UaString::as_text`] substitutes replacement characters where needed.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct UaString(pub Option<Vec<u8>>);

impl UaString {
    pub const NULL: UaString = UaString(None);

    pub fn new(s: impl Into<String>) -> Self {
        UaString(Some(s.into().into_bytes()))
    }

    pub fn is_null(&self) -> bool {
        self.0.is_none()
    }

    pub fn as_text(&self) -> Cow<'_, str> {
        match &self.0 {
            Some(bytes) => String::from_utf8_lossy(bytes),
            None => Cow::Borrowed(""),
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_deref().unwrap_or(&[])
    }
}

impl From<&str> for UaString {
    fn from(s: &str) -> Self {
        UaString::new(s)
    }
}

impl From<String> for UaString {
    fn from(s: String) -> Self {
        UaString(Some(s.into_bytes()))
    }
}

impl fmt::Debug for UaString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(_) => write!(f, "{:?}", self.as_text()),
            None => write!(f, "null"),
        }
    }
}

impl fmt::Display for UaString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_text())
    }
}

/// A byte string; `None` encodes as length -1.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct UaByteString(pub Option<Vec<u8>>);

impl UaByteString {
    pub const NULL: UaByteString = UaByteString(None);

    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        UaByteString(Some(bytes.into()))
    }

    pub fn is_null(&self) -> bool {
        self.0.is_none()
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.as_bytes().len()
    }

    pub fn is_empty(&self) -> bool {
        self.as_bytes().is_empty()
    }
}

impl From<&[u8]> for UaByteString {
    fn from(b: &[u8]) -> Self {
        UaByteString(Some(b.to_vec()))
    }
}

impl From<Vec<u8>> for UaByteString {
    fn from(b: Vec<u8>) -> Self {
        UaByteString(Some(b))
    }
}

impl fmt::Debug for UaByteString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(b) if b.len() <= 24 => write!(f, "0x{}", hex::encode(b)),
            Some(b) => write!(f, "0x{}..({} bytes)", hex::encode(&b[..16]), b.len()),
            None => write!(f, "null"),
        }
    }
}

/// Node identifier. Numeric ids always encode in the smallest of the
/// two-byte / four-byte / full numeric forms; decoding rejects oversized
/// encodings so the round trip is canonical.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Numeric { namespace: u16, id: u32 },
    String { namespace: u16, id: String },
}

impl NodeId {
    pub fn numeric(namespace: u16, id: u32) -> Self {
        NodeId::Numeric { namespace, id }
    }

    pub fn string(namespace: u16, id: impl Into<String>) -> Self {
        NodeId::String { namespace, id: id.into() }
    }

    /// Standard-namespace numeric id, or `None` for anything else.
    pub fn as_ns0_numeric(&self) -> Option<u32> {
        match self {
            NodeId::Numeric { namespace: 0, id } => Some(*id),
            _ => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Numeric { namespace, id } => write!(f, "ns={namespace};i={id}"),
            NodeId::String { namespace, id } => write!(f, "ns={namespace};s={id}"),
        }
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Human-readable text with an optional locale.
#[derive(Clone, PartialEq, Eq, Hash, Default, Debug, Serialize, Deserialize)]
pub struct LocalizedText {
    pub locale: Option<UaString>,
    pub text: Option<UaString>,
}

impl LocalizedText {
    pub fn text_only(text: impl Into<String>) -> Self {
        LocalizedText { locale: None, text: Some(UaString::new(text)) }
    }

    pub fn display(&self) -> Cow<'_, str> {
        match &self.text {
            Some(t) => t.as_text(),
            None => Cow::Borrowed(""),
        }
    }
}

/// Kind tags for [`Value`]. The numeric tags follow the standard built-in
/// type ids so variants in node values look like ordinary OPC UA traffic.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum ValueKind {
    Boolean,
    SByte,
    Byte,
    Int16,
    UInt16,
    Int32,
    UInt32,
    Int64,
    UInt64,
    Float,
    Double,
    String,
    ByteString,
    NodeId,
    LocalizedText,
}

impl ValueKind {
    pub fn tag(self) -> u8 {
        match self {
            ValueKind::Boolean => 1,
            ValueKind::SByte => 2,
            ValueKind::Byte => 3,
            ValueKind::Int16 => 4,
            ValueKind::UInt16 => 5,
            ValueKind::Int32 => 6,
            ValueKind::UInt32 => 7,
            ValueKind::Int64 => 8,
            ValueKind::UInt64 => 9,
            ValueKind::Float => 10,
            ValueKind::Double => 11,
            ValueKind::String => 12,
            ValueKind::ByteString => 15,
            ValueKind::NodeId => 17,
            ValueKind::LocalizedText => 21,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => ValueKind::Boolean,
            2 => ValueKind::SByte,
            3 => ValueKind::Byte,
            4 => ValueKind::Int16,
            5 => ValueKind::UInt16,
            6 => ValueKind::Int32,
            7 => ValueKind::UInt32,
            8 => ValueKind::Int64,
            9 => ValueKind::UInt64,
            10 => ValueKind::Float,
            11 => ValueKind::Double,
            12 => ValueKind::String,
            15 => ValueKind::ByteString,
            17 => ValueKind::NodeId,
            21 => ValueKind::LocalizedText,
            _ => return None,
        })
    }
}

/// Kind selector for [`decode_builtin`]: a scalar kind or a flat array of one.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DecodeKind {
    Scalar(ValueKind),
    Array(ValueKind),
}

/// A built-in value. Floats compare by bit pattern so round-trip
/// properties hold for NaN payloads too.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Value {
    Boolean(bool),
    SByte(i8),
    Byte(u8),
    Int16(i16),
    UInt16(u16),
    Int32(i32),
    UInt32(u32),
    Int64(i64),
    UInt64(u64),
    Float(f32),
    Double(f64),
    String(UaString),
    ByteString(UaByteString),
    NodeId(NodeId),
    LocalizedText(LocalizedText),
    /// Flat array of a single element kind; nesting is not supported.
    Array(ValueKind, Vec<Value>),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Boolean(a), Boolean(b)) => a == b,
            (SByte(a), SByte(b)) => a == b,
            (Byte(a), Byte(b)) => a == b,
            (Int16(a), Int16(b)) => a == b,
            (UInt16(a), UInt16(b)) => a == b,
            (Int32(a), Int32(b)) => a == b,
            (UInt32(a), UInt32(b)) => a == b,
            (Int64(a), Int64(b)) => a == b,
            (UInt64(a), UInt64(b)) => a == b,
            (Float(a), Float(b)) => a.to_bits() == b.to_bits(),
            (Double(a), Double(b)) => a.to_bits() == b.to_bits(),
            (String(a), String(b)) => a == b,
            (ByteString(a), ByteString(b)) => a == b,
            (NodeId(a), NodeId(b)) => a == b,
            (LocalizedText(a), LocalizedText(b)) => a == b,
            (Array(ka, va), Array(kb, vb)) => ka == kb && va == vb,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Value {
    pub fn kind(&self) -> DecodeKind {
        match self {
            Value::Boolean(_) => DecodeKind::Scalar(ValueKind::Boolean),
            Value::SByte(_) => DecodeKind::Scalar(ValueKind::SByte),
            Value::Byte(_) => DecodeKind::Scalar(ValueKind::Byte),
            Value::Int16(_) => DecodeKind::Scalar(ValueKind::Int16),
            Value::UInt16(_) => DecodeKind::Scalar(ValueKind::UInt16),
            Value::Int32(_) => DecodeKind::Scalar(ValueKind::Int32),
            Value::UInt32(_) => DecodeKind::Scalar(ValueKind::UInt32),
            Value::Int64(_) => DecodeKind::Scalar(ValueKind::Int64),
            Value::UInt64(_) => DecodeKind::Scalar(ValueKind::UInt64),
            Value::Float(_) => DecodeKind::Scalar(ValueKind::Float),
            Value::Double(_) => DecodeKind::Scalar(ValueKind::Double),
            Value::String(_) => DecodeKind::Scalar(ValueKind::String),
            Value::ByteString(_) => DecodeKind::Scalar(ValueKind::ByteString),
            Value::NodeId(_) => DecodeKind::Scalar(ValueKind::NodeId),
            Value::LocalizedText(_) => DecodeKind::Scalar(ValueKind::LocalizedText),
            Value::Array(k, _) => DecodeKind::Array(*k),
        }
    }

    pub fn as_double(&self) -> Option<f64> {
        match self {
            Value::Double(v) => Some(*v),
            Value::Float(v) => Some(f64::from(*v)),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Writer / reader
// ---------------------------------------------------------------------------

pub(crate) fn write_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn write_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn write_string(out: &mut Vec<u8>, s: &UaString) {
    write_opt_bytes(out, s.0.as_deref());
}

pub(crate) fn write_byte_string(out: &mut Vec<u8>, s: &UaByteString) {
    write_opt_bytes(out, s.0.as_deref());
}

fn write_opt_bytes(out: &mut Vec<u8>, bytes: Option<&[u8]>) {
    match bytes {
        Some(b) => {
            write_i32(out, b.len() as i32);
            out.extend_from_slice(b);
        }
        None => write_i32(out, -1),
    }
}

pub(crate) fn write_node_id(out: &mut Vec<u8>, node: &NodeId) {
    match node {
        NodeId::Numeric { namespace: 0, id } if *id <= 0xFF => {
            out.push(0x00);
            out.push(*id as u8);
        }
        NodeId::Numeric { namespace, id } if *namespace <= 0xFF && *id <= 0xFFFF => {
            out.push(0x01);
            out.push(*namespace as u8);
            write_u16(out, *id as u16);
        }
        NodeId::Numeric { namespace, id } => {
            out.push(0x02);
            write_u16(out, *namespace);
            write_u32(out, *id);
        }
        NodeId::String { namespace, id } => {
            out.push(0x03);
            write_u16(out, *namespace);
            write_string(out, &UaString::new(id.clone()));
        }
    }
}

pub(crate) fn write_localized_text(out: &mut Vec<u8>, lt: &LocalizedText) {
    let mut mask = 0u8;
    if lt.locale.is_some() {
        mask |= 0x01;
    }
    if lt.text.is_some() {
        mask |= 0x02;
    }
    out.push(mask);
    if let Some(locale) = &lt.locale {
        write_string(out, locale);
    }
    if let Some(text) = &lt.text {
        write_string(out, text);
    }
}

/// Sequential little-endian reader over a byte slice. All reads are bounds
/// checked; nothing past the slice end is ever touched.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated { need: n, have: self.remaining() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32, CodecError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn opt_bytes(&mut self, what: &'static str) -> Result<Option<Vec<u8>>, CodecError> {
        let len = self.i32()?;
        match len {
            -1 => Ok(None),
            n if n < -1 => Err(CodecError::Malformed { what, detail: "negative length" }),
            n => Ok(Some(self.take(n as usize)?.to_vec())),
        }
    }

    pub fn string(&mut self) -> Result<UaString, CodecError> {
        Ok(UaString(self.opt_bytes("string")?))
    }

    pub fn byte_string(&mut self) -> Result<UaByteString, CodecError> {
        Ok(UaByteString(self.opt_bytes("byte string")?))
    }

    pub fn node_id(&mut self) -> Result<NodeId, CodecError> {
        let form = self.u8()?;
        match form {
            0x00 => {
                let id = self.u8()? as u32;
                Ok(NodeId::Numeric { namespace: 0, id })
            }
            0x01 => {
                let namespace = self.u8()? as u16;
                let id = self.u16()? as u32;
                if namespace == 0 && id <= 0xFF {
                    return Err(CodecError::Malformed {
                        what: "node id",
                        detail: "non-minimal four-byte form",
                    });
                }
                Ok(NodeId::Numeric { namespace, id })
            }
            0x02 => {
                let namespace = self.u16()?;
                let id = self.u32()?;
                if namespace <= 0xFF && id <= 0xFFFF {
                    return Err(CodecError::Malformed {
                        what: "node id",
                        detail: "non-minimal numeric form",
                    });
                }
                Ok(NodeId::Numeric { namespace, id })
            }
            0x03 => {
                let namespace = self.u16()?;
                let id = self.string()?;
                match id.0 {
                    Some(bytes) => Ok(NodeId::String {
                        namespace,
                        id: String::from_utf8_lossy(&bytes).into_owned(),
                    }),
                    None => Err(CodecError::Malformed {
                        what: "node id",
                        detail: "null string identifier",
                    }),
                }
            }
            _ => Err(CodecError::Malformed { what: "node id", detail: "unsupported form" }),
        }
    }

    pub fn localized_text(&mut self) -> Result<LocalizedText, CodecError> {
        let mask = self.u8()?;
        if mask > 0x03 {
            return Err(CodecError::Malformed {
                what: "localized text",
                detail: "reserved mask bits set",
            });
        }
        let locale = if mask & 0x01 != 0 { Some(self.string()?) } else { None };
        let text = if mask & 0x02 != 0 { Some(self.string()?) } else { None };
        Ok(LocalizedText { locale, text })
    }

    pub fn array_len(&mut self, what: &'static str) -> Result<usize, CodecError> {
        let len = self.i32()?;
        if len < 0 {
            return Err(CodecError::Malformed { what, detail: "negative array length" });
        }
        let len = len as usize;
        if len > MAX_ARRAY_LEN {
            return Err(CodecError::ArrayTooLarge { len, max: MAX_ARRAY_LEN });
        }
        Ok(len)
    }
}

// ---------------------------------------------------------------------------
// Public built-in codec
// ---------------------------------------------------------------------------

/// Encode one built-in value to its little-endian wire form (no type tag).
pub fn encode_builtin(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_builtin(&mut out, value);
    out
}

pub(crate) fn write_builtin(out: &mut Vec<u8>, value: &Value) {
    match value {
        Value::Boolean(v) => out.push(u8::from(*v)),
        Value::SByte(v) => out.push(*v as u8),
        Value::Byte(v) => out.push(*v),
        Value::Int16(v) => out.extend_from_slice(&v.to_le_bytes()),
        Value::UInt16(v) => out.extend_from_slice(&v.to_le_bytes()),
        Value::Int32(v) => out.extend_from_slice(&v.to_le_bytes()),
        Value::UInt32(v) => out.extend_from_slice(&v.to_le_bytes()),
        Value::Int64(v) => out.extend_from_slice(&v.to_le_bytes()),
        Value::UInt64(v) => out.extend_from_slice(&v.to_le_bytes()),
        Value::Float(v) => out.extend_from_slice(&v.to_le_bytes()),
        Value::Double(v) => out.extend_from_slice(&v.to_le_bytes()),
        Value::String(v) => write_string(out, v),
        Value::ByteString(v) => write_byte_string(out, v),
        Value::NodeId(v) => write_node_id(out, v),
        Value::LocalizedText(v) => write_localized_text(out, v),
        Value::Array(_, items) => {
            write_i32(out, items.len() as i32);
            for item in items {
                write_builtin(out, item);
            }
        }
    }
}

/// Decode one built-in value of the given kind, returning it together with
/// the number of bytes consumed.
pub fn decode_builtin(bytes: &[u8], kind: DecodeKind) -> Result<(Value, usize), CodecError> {
    let mut reader = Reader::new(bytes);
    let value = read_builtin(&mut reader, kind)?;
    Ok((value, reader.consumed()))
}

pub(crate) fn read_builtin(reader: &mut Reader<'_>, kind: DecodeKind) -> Result<Value, CodecError> {
    match kind {
        DecodeKind::Scalar(k) => read_scalar(reader, k),
        DecodeKind::Array(k) => {
            let len = reader.array_len("builtin array")?;
            let mut items = Vec::with_capacity(len.min(1024));
            for _ in 0..len {
                items.push(read_scalar(reader, k)?);
            }
            Ok(Value::Array(k, items))
        }
    }
}

fn read_scalar(reader: &mut Reader<'_>, kind: ValueKind) -> Result<Value, CodecError> {
    Ok(match kind {
        ValueKind::Boolean => match reader.u8()? {
            0 => Value::Boolean(false),
            1 => Value::Boolean(true),
            _ => {
                return Err(CodecError::Malformed {
                    what: "boolean",
                    detail: "byte is neither 0 nor 1",
                })
            }
        },
        ValueKind::SByte => Value::SByte(reader.u8()? as i8),
        ValueKind::Byte => Value::Byte(reader.u8()?),
        ValueKind::Int16 => Value::Int16(reader.u16()? as i16),
        ValueKind::UInt16 => Value::UInt16(reader.u16()?),
        ValueKind::Int32 => Value::Int32(reader.i32()?),
        ValueKind::UInt32 => Value::UInt32(reader.u32()?),
        ValueKind::Int64 => Value::Int64(reader.u64()? as i64),
        ValueKind::UInt64 => Value::UInt64(reader.u64()?),
        ValueKind::Float => {
            Value::Float(f32::from_le_bytes(reader.take(4)?.try_into().unwrap()))
        }
        ValueKind::Double => Value::Double(reader.f64()?),
        ValueKind::String => Value::String(reader.string()?),
        ValueKind::ByteString => Value::ByteString(reader.byte_string()?),
        ValueKind::NodeId => Value::NodeId(reader.node_id()?),
        ValueKind::LocalizedText => Value::LocalizedText(reader.localized_text()?),
    })
}

/// Encode a value as a tagged variant (type tag byte, then the plain
/// built-in layout). Arrays set the high bit of the tag.
pub(crate) fn write_variant(out: &mut Vec<u8>, value: &Value) {
    match value {
        Value::Array(kind, _) => {
            out.push(kind.tag() | 0x80);
            write_builtin(out, value);
        }
        scalar => {
            let DecodeKind::Scalar(kind) = scalar.kind() else { unreachable!() };
            out.push(kind.tag());
            write_builtin(out, scalar);
        }
    }
}

pub(crate) fn read_variant(reader: &mut Reader<'_>) -> Result<Value, CodecError> {
    let tag = reader.u8()?;
    let kind =
        ValueKind::from_tag(tag & 0x7F).ok_or(CodecError::UnsupportedKind { tag: tag & 0x7F })?;
    let decode_kind =
        if tag & 0x80 != 0 { DecodeKind::Array(kind) } else { DecodeKind::Scalar(kind) };
    read_builtin(reader, decode_kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int32_zero_encodes_to_four_zero_bytes() {
        assert_eq!(encode_builtin(&Value::Int32(0)), [0x00, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn absent_string_encodes_to_minus_one_sentinel() {
        assert_eq!(encode_builtin(&Value::String(UaString::NULL)), [0xFF, 0xFF, 0xFF, 0xFF]);
    }

    #[test]
    fn url_string_is_length_prefixed() {
        let url = "opc.tcp://host:4840";
        let encoded = encode_builtin(&Value::String(UaString::new(url)));
        // 19 == 0x13 payload bytes, hand-computed from the length-prefix layout.
        assert_eq!(&encoded[..4], [0x13, 0x00, 0x00, 0x00]);
        assert_eq!(&encoded[4..], url.as_bytes());
        assert_eq!(encoded.len(), 4 + 19);
    }

    #[test]
    fn absent_string_decodes_back() {
        let (value, used) =
            decode_builtin(&[0xFF, 0xFF, 0xFF, 0xFF], DecodeKind::Scalar(ValueKind::String))
                .unwrap();
        assert_eq!(value, Value::String(UaString::NULL));
        assert_eq!(used, 4);
    }

    #[test]
    fn short_int32_is_truncated() {
        let err = decode_builtin(&[0x01, 0x02, 0x03], DecodeKind::Scalar(ValueKind::Int32))
            .unwrap_err();
        assert!(matches!(err, CodecError::Truncated { .. }));
    }

    #[test]
    fn boolean_rejects_non_canonical_byte() {
        let err = decode_builtin(&[0x02], DecodeKind::Scalar(ValueKind::Boolean)).unwrap_err();
        assert!(matches!(err, CodecError::Malformed { .. }));
    }

    #[test]
    fn node_id_non_minimal_forms_rejected() {
        // ns=0, id=5 in four-byte form: must have used the two-byte form.
        let bytes = [0x01, 0x00, 0x05, 0x00];
        let err = decode_builtin(&bytes, DecodeKind::Scalar(ValueKind::NodeId)).unwrap_err();
        assert!(matches!(err, CodecError::Malformed { .. }));
    }

    #[test]
    fn node_id_forms_round_trip() {
        for node in [
            NodeId::numeric(0, 0),
            NodeId::numeric(0, 255),
            NodeId::numeric(0, 256),
            NodeId::numeric(3, 7),
            NodeId::numeric(300, 7),
            NodeId::numeric(1, 0x1_0000),
            NodeId::string(2, "sensor"),
        ] {
            let encoded = encode_builtin(&Value::NodeId(node.clone()));
            let (value, used) =
                decode_builtin(&encoded, DecodeKind::Scalar(ValueKind::NodeId)).unwrap();
            assert_eq!(value, Value::NodeId(node));
            assert_eq!(used, encoded.len());
        }
    }

    #[test]
    fn invalid_utf8_string_round_trips_bytes_and_displays_lossy() {
        let raw = vec![0x03, 0x00, 0x00, 0x00, 0xE2, 0x28, 0xA1];
        let (value, _) = decode_builtin(&raw, DecodeKind::Scalar(ValueKind::String)).unwrap();
        assert_eq!(encode_builtin(&value), raw);
        let Value::String(s) = &value else { panic!() };
        assert!(s.as_text().contains('\u{FFFD}'));
    }

    #[test]
    fn array_length_is_capped() {
        let mut bytes = Vec::new();
        write_i32(&mut bytes, (MAX_ARRAY_LEN + 1) as i32);
        let err = decode_builtin(&bytes, DecodeKind::Array(ValueKind::Byte)).unwrap_err();
        assert!(matches!(err, CodecError::ArrayTooLarge { .. }));
    }
}
