//! Canonical binary encoding shared by every wire format in the system.
//!
//! Every field is written as a 4-byte big-endian length prefix followed by
//! the field bytes, fields in declaration order. Fixed-width integers are
//! encoded big-endian inside their field. The encoding has a single valid
//! form per value, so fingerprints and signatures over encoded bytes are
//! stable across implementations.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input: needed {needed} bytes, {remaining} remaining")]
    Truncated { needed: usize, remaining: usize },
    #[error("field length {len} exceeds limit {limit}")]
    FieldTooLarge { len: usize, limit: usize },
    #[error("fixed-width field has length {got}, expected {expected}")]
    BadWidth { got: usize, expected: usize },
    #[error("trailing {0} bytes after last field")]
    TrailingBytes(usize),
    #[error("invalid value for {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
}

/// Hard cap on a single field, to keep a corrupt length prefix from
/// triggering a huge allocation.
pub const MAX_FIELD_LEN: usize = 64 * 1024 * 1024;

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf
            .extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn u8_field(&mut self, v: u8) -> &mut Self {
        self.field(&[v])
    }

    pub fn u32_field(&mut self, v: u32) -> &mut Self {
        self.field(&v.to_be_bytes())
    }

    pub fn u64_field(&mut self, v: u64) -> &mut Self {
        self.field(&v.to_be_bytes())
    }

    pub fn str_field(&mut self, s: &str) -> &mut Self {
        self.field(s.as_bytes())
    }

    /// Encodes a list as a count field followed by one field per element.
    pub fn list_field(&mut self, items: &[Vec<u8>]) -> &mut Self {
        self.u32_field(items.len() as u32);
        for item in items {
            self.field(item);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

impl Default for Writer {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Reader<'a> {
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { rest: bytes }
    }

    pub fn field(&mut self) -> Result<&'a [u8], WireError> {
        if self.rest.len() < 4 {
            return Err(WireError::Truncated {
                needed: 4,
                remaining: self.rest.len(),
            });
        }
        let len = u32::from_be_bytes(self.rest[..4].try_into().unwrap()) as usize;
        if len > MAX_FIELD_LEN {
            return Err(WireError::FieldTooLarge {
                len,
                limit: MAX_FIELD_LEN,
            });
        }
        if self.rest.len() - 4 < len {
            return Err(WireError::Truncated {
                needed: len,
                remaining: self.rest.len() - 4,
            });
        }
        let (field, rest) = self.rest[4..].split_at(len);
        self.rest = rest;
        Ok(field)
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let f = self.field()?;
        f.try_into().map_err(|_| WireError::BadWidth {
            got: f.len(),
            expected: N,
        })
    }

    pub fn u8_field(&mut self) -> Result<u8, WireError> {
        Ok(self.fixed::<1>()?[0])
    }

    pub fn u32_field(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.fixed::<4>()?))
    }

    pub fn u64_field(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.fixed::<8>()?))
    }

    pub fn str_field(&mut self) -> Result<String, WireError> {
        let f = self.field()?;
        String::from_utf8(f.to_vec()).map_err(|_| WireError::Invalid {
            what: "string field",
            detail: "not valid UTF-8".into(),
        })
    }

    pub fn list_field(&mut self) -> Result<Vec<Vec<u8>>, WireError> {
        let count = self.u32_field()? as usize;
        let mut items = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            items.push(self.field()?.to_vec());
        }
        Ok(items)
    }

    /// Hands back whatever bytes remain, consuming them. For formats that
    /// append a raw (unframed) body after the framed fields.
    pub fn remainder(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.rest)
    }

    /// Fails unless every input byte was consumed. Canonical decoding
    /// rejects trailing garbage.
    pub fn done(&self) -> Result<(), WireError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(WireError::TrailingBytes(self.rest.len()))
        }
    }
}

/// Types with a canonical wire form.
pub trait Wire: Sized {
    fn encode(&self) -> Vec<u8>;
    fn decode(bytes: &[u8]) -> Result<Self, WireError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_mixed_fields() {
        let mut w = Writer::new();
        w.field(b"abc").u32_field(7).str_field("name").u64_field(1 << 40);
        let bytes = w.finish();

        let mut r = Reader::new(&bytes);
        assert_eq!(r.field().unwrap(), b"abc");
        assert_eq!(r.u32_field().unwrap(), 7);
        assert_eq!(r.str_field().unwrap(), "name");
        assert_eq!(r.u64_field().unwrap(), 1 << 40);
        r.done().unwrap();
    }

    #[test]
    fn truncated_input_rejected() {
        let mut w = Writer::new();
        w.field(b"abcdef");
        let bytes = w.finish();
        let mut r = Reader::new(&bytes[..bytes.len() - 1]);
        assert!(matches!(r.field(), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut w = Writer::new();
        w.field(b"x");
        let mut bytes = w.finish();
        bytes.push(0);
        let mut r = Reader::new(&bytes);
        r.field().unwrap();
        assert_eq!(r.done(), Err(WireError::TrailingBytes(1)));
    }

    #[test]
    fn oversized_length_prefix_rejected() {
        let mut bytes = (u32::MAX).to_be_bytes().to_vec();
        bytes.extend_from_slice(b"short");
        let mut r = Reader::new(&bytes);
        assert!(matches!(r.field(), Err(WireError::FieldTooLarge { .. })));
    }

    #[test]
    fn fixed_width_mismatch_rejected() {
        let mut w = Writer::new();
        w.field(b"abc");
        let bytes = w.finish();
        let mut r = Reader::new(&bytes);
        assert_eq!(
            r.fixed::<4>(),
            Err(WireError::BadWidth {
                got: 3,
                expected: 4
            })
        );
    }

    #[test]
    fn list_round_trip() {
        let items = vec![b"a".to_vec(), b"".to_vec(), b"ccc".to_vec()];
        let mut w = Writer::new();
        w.list_field(&items);
        let bytes = w.finish();
        let mut r = Reader::new(&bytes);
        assert_eq!(r.list_field().unwrap(), items);
        r.done().unwrap();
    }
}
