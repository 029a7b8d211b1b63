//! Canonical binary encoding for every protocol record.
//!
//! The layout is fixed field order with no self-description:
//!
//! * fixed-width integers are big-endian (`u8`, `u16`, `u32`, `u64`);
//! * `bool` is one byte, `0x00` or `0x01`;
//! * fixed-size byte arrays (keys, digests, signatures, nonces) are written as-is;
//! * variable byte strings and UTF-8 strings carry a `u32` length prefix;
//! * sequences carry a `u32` element count followed by each element;
//! * `Option<T>` is a `0x00` tag, or `0x01` followed by the value;
//! * enums start with a one-byte tag.
//!
//! Signatures and hashes are always computed over these bytes, so the
//! encoding must never change for an existing record type.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of input: needed {needed} bytes at offset {offset}")]
    UnexpectedEof { offset: usize, needed: usize },
    #[error("invalid tag {tag} for {what}")]
    InvalidTag { what: &'static str, tag: u8 },
    #[error("invalid value for {0}")]
    InvalidValue(&'static str),
    #[error("{0} trailing bytes after record")]
    TrailingBytes(usize),
    #[error("length {0} exceeds the remaining input")]
    LengthOverflow(u64),
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    /// Fixed-width bytes, no length prefix.
    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(len_u32(v.len()));
        self.raw(v)
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn value<T: Canonical>(&mut self, v: &T) -> &mut Self {
        v.encode_to(self);
        self
    }

    pub fn seq<T: Canonical>(&mut self, items: &[T]) -> &mut Self {
        self.u32(len_u32(items.len()));
        for item in items {
            item.encode_to(self);
        }
        self
    }

    pub fn option<T: Canonical>(&mut self, v: Option<&T>) -> &mut Self {
        match v {
            None => self.u8(0),
            Some(v) => {
                self.u8(1);
                v.encode_to(self);
                self
            }
        }
    }
}

fn len_u32(len: usize) -> u32 {
    u32::try_from(len).expect("canonical records never exceed 4 GiB")
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::UnexpectedEof {
                offset: self.pos,
                needed: n,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(CodecError::InvalidTag { what: "bool", tag }),
        }
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let len = self.u32()? as usize;
        if len > self.remaining() {
            return Err(CodecError::LengthOverflow(len as u64));
        }
        Ok(self.take(len)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        String::from_utf8(self.bytes()?).map_err(|_| CodecError::InvalidValue("utf-8 string"))
    }

    pub fn value<T: Canonical>(&mut self) -> Result<T, CodecError> {
        T::decode_from(self)
    }

    pub fn seq<T: Canonical>(&mut self) -> Result<Vec<T>, CodecError> {
        let count = self.u32()? as usize;
        // Every element takes at least one byte.
        if count > self.remaining() {
            return Err(CodecError::LengthOverflow(count as u64));
        }
        (0..count).map(|_| T::decode_from(self)).collect()
    }

    pub fn option<T: Canonical>(&mut self) -> Result<Option<T>, CodecError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(T::decode_from(self)?)),
            tag => Err(CodecError::InvalidTag { what: "option", tag }),
        }
    }
}

/// A record with a canonical byte encoding.
pub trait Canonical: Sized {
    fn encode_to(&self, enc: &mut Encoder);
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError>;

    fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_to(&mut enc);
        enc.into_bytes()
    }

    /// Decodes a complete record; trailing bytes are an error.
    fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let value = Self::decode_from(&mut dec)?;
        dec.finish()?;
        Ok(value)
    }
}

pub fn canonical_encode<T: Canonical>(value: &T) -> Vec<u8> {
    value.to_canonical_bytes()
}

pub fn canonical_decode<T: Canonical>(bytes: &[u8]) -> Result<T, CodecError> {
    T::from_canonical_bytes(bytes)
}

impl Canonical for u8 {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u8(*self);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.u8()
    }
}

impl Canonical for u32 {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u32(*self);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.u32()
    }
}

impl Canonical for u64 {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.u64(*self);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.u64()
    }
}

impl Canonical for bool {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.bool(*self);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.bool()
    }
}

impl Canonical for String {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.str(self);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.str()
    }
}

impl Canonical for Vec<u8> {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.bytes(self);
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.bytes()
    }
}

impl<const N: usize> Canonical for [bool; N] {
    fn encode_to(&self, enc: &mut Encoder) {
        for b in self {
            enc.bool(*b);
        }
    }
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let mut out = [false; N];
        for b in out.iter_mut() {
            *b = dec.bool()?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian() {
        let mut enc = Encoder::new();
        enc.u16(0x0102).u32(0x0304_0506).u64(7);
        assert_eq!(
            enc.into_bytes(),
            vec![1, 2, 3, 4, 5, 6, 0, 0, 0, 0, 0, 0, 0, 7]
        );
    }

    #[test]
    fn strings_are_length_prefixed() {
        let mut enc = Encoder::new();
        enc.str("ab");
        assert_eq!(enc.into_bytes(), vec![0, 0, 0, 2, b'a', b'b']);
    }

    #[test]
    fn truncated_input_is_an_error() {
        let bytes = "hello".to_string().to_canonical_bytes();
        let err = String::from_canonical_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, CodecError::LengthOverflow(5)));
        assert!(matches!(
            u64::from_canonical_bytes(&[0, 1]),
            Err(CodecError::UnexpectedEof { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        assert_eq!(
            u8::from_canonical_bytes(&[1, 2]),
            Err(CodecError::TrailingBytes(1))
        );
    }

    #[test]
    fn bad_bool_tag() {
        assert!(matches!(
            bool::from_canonical_bytes(&[2]),
            Err(CodecError::InvalidTag { what: "bool", tag: 2 })
        ));
    }

    #[test]
    fn huge_sequence_count_does_not_allocate() {
        let bytes = [0xff, 0xff, 0xff, 0xff];
        let mut dec = Decoder::new(&bytes);
        assert!(dec.seq::<u64>().is_err());
    }
}
