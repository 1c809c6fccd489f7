//! Minimal protobuf wire-format reader and writer.
//!
//! Only what the ONNX subset needs: varints, fixed 32/64-bit scalars and
//! length-delimited fields. Unknown fields are skipped.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WireType {
    Varint,
    Fixed64,
    Len,
    Fixed32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldValue<'a> {
    Varint(u64),
    Fixed64(u64),
    Fixed32(u32),
    Bytes(&'a [u8]),
}

impl<'a> FieldValue<'a> {
    pub fn as_bytes(&self) -> Result<&'a [u8]> {
        match *self {
            FieldValue::Bytes(b) => Ok(b),
            other => Err(Error::Framing(format!("expected length-delimited field, got {other:?}"))),
        }
    }

    pub fn as_str(&self) -> Result<&'a str> {
        std::str::from_utf8(self.as_bytes()?).map_err(|e| Error::Framing(format!("invalid utf-8: {e}")))
    }

    pub fn as_u64(&self) -> Result<u64> {
        match *self {
            FieldValue::Varint(v) | FieldValue::Fixed64(v) => Ok(v),
            FieldValue::Fixed32(v) => Ok(v as u64),
            FieldValue::Bytes(_) => Err(Error::Framing("expected scalar, got bytes".into())),
        }
    }

    pub fn as_i64(&self) -> Result<i64> {
        self.as_u64().map(|v| v as i64)
    }

    pub fn as_f32(&self) -> Result<f32> {
        match *self {
            FieldValue::Fixed32(v) => Ok(f32::from_bits(v)),
            other => Err(Error::Framing(format!("expected fixed32 float, got {other:?}"))),
        }
    }

    /// Repeated int64: either one packed blob or a single unpacked varint.
    pub fn ints(&self) -> Result<Vec<i64>> {
        match *self {
            FieldValue::Bytes(b) => {
                let mut r = Reader::new(b);
                let mut out = Vec::new();
                while !r.is_empty() {
                    out.push(r.varint()? as i64);
                }
                Ok(out)
            }
            _ => Ok(vec![self.as_i64()?]),
        }
    }

    /// Repeated float: either one packed blob or a single unpacked fixed32.
    pub fn floats(&self) -> Result<Vec<f32>> {
        match *self {
            FieldValue::Bytes(b) => {
                if b.len() % 4 != 0 {
                    return Err(Error::Framing("packed float length not a multiple of 4".into()));
                }
                Ok(b.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect())
            }
            _ => Ok(vec![self.as_f32()?]),
        }
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn varint(&mut self) -> Result<u64> {
        let mut value = 0u64;
        for shift in (0..64).step_by(7) {
            let Some(&byte) = self.buf.get(self.pos) else {
                return Err(Error::Framing(format!("truncated varint at byte {}", self.pos)));
            };
            self.pos += 1;
            value |= ((byte & 0x7f) as u64) << shift;
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::Framing(format!("varint longer than 10 bytes at byte {}", self.pos)))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Framing(format!(
                    "field of {n} bytes at byte {} overruns a {}-byte message",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    /// Next `(field number, value)`, or `None` at the end of the message.
    pub fn field(&mut self) -> Result<Option<(u32, FieldValue<'a>)>> {
        if self.is_empty() {
            return Ok(None);
        }
        let key = self.varint()?;
        let number = (key >> 3) as u32;
        if number == 0 {
            return Err(Error::Framing("field number 0".into()));
        }
        let value = match key & 7 {
            0 => FieldValue::Varint(self.varint()?),
            1 => {
                let b = self.take(8)?;
                FieldValue::Fixed64(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            }
            2 => {
                let len = self.varint()?;
                let len = usize::try_from(len).map_err(|_| Error::Framing("length overflow".into()))?;
                FieldValue::Bytes(self.take(len)?)
            }
            5 => {
                let b = self.take(4)?;
                FieldValue::Fixed32(u32::from_le_bytes(b.try_into().expect("4 bytes")))
            }
            w => return Err(Error::Framing(format!("unsupported wire type {w}"))),
        };
        Ok(Some((number, value)))
    }
}

/// Iterates over every field of a message, failing on framing errors.
pub fn for_each_field<'a>(buf: &'a [u8], mut f: impl FnMut(u32, FieldValue<'a>) -> Result<()>) -> Result<()> {
    let mut r = Reader::new(buf);
    while let Some((n, v)) = r.field()? {
        f(n, v)?;
    }
    Ok(())
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    fn raw_varint(&mut self, mut v: u64) {
        loop {
            let byte = (v & 0x7f) as u8;
            v >>= 7;
            if v == 0 {
                self.buf.push(byte);
                return;
            }
            self.buf.push(byte | 0x80);
        }
    }

    fn key(&mut self, field: u32, wire: WireType) {
        let w = match wire {
            WireType::Varint => 0,
            WireType::Fixed64 => 1,
            WireType::Len => 2,
            WireType::Fixed32 => 5,
        };
        self.raw_varint(((field as u64) << 3) | w);
    }

    pub fn varint(&mut self, field: u32, v: u64) -> &mut Self {
        self.key(field, WireType::Varint);
        self.raw_varint(v);
        self
    }

    pub fn int(&mut self, field: u32, v: i64) -> &mut Self {
        self.varint(field, v as u64)
    }

    pub fn float(&mut self, field: u32, v: f32) -> &mut Self {
        self.key(field, WireType::Fixed32);
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, field: u32, b: &[u8]) -> &mut Self {
        self.key(field, WireType::Len);
        self.raw_varint(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn string(&mut self, field: u32, s: &str) -> &mut Self {
        self.bytes(field, s.as_bytes())
    }

    pub fn message(&mut self, field: u32, m: Writer) -> &mut Self {
        self.bytes(field, &m.buf)
    }

    pub fn packed_ints(&mut self, field: u32, vs: &[i64]) -> &mut Self {
        let mut inner = Writer::new();
        for &v in vs {
            inner.raw_varint(v as u64);
        }
        self.bytes(field, &inner.buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_varint_is_a_framing_error() {
        let mut r = Reader::new(&[0x80, 0x80]);
        assert!(matches!(r.varint(), Err(Error::Framing(_))));
    }

    #[test]
    fn overlong_length_is_a_framing_error() {
        // field 1, wire type 2, length 10, only 2 bytes follow
        let mut r = Reader::new(&[0x0a, 10, 1, 2]);
        assert!(matches!(r.field(), Err(Error::Framing(_))));
    }

    proptest! {
        #[test]
        fn fields_survive_a_write_read_cycle(v in any::<u64>(), f in any::<f32>(), s in ".{0,20}", ints in proptest::collection::vec(any::<i64>(), 0..8)) {
            let mut w = Writer::new();
            w.varint(1, v).float(2, f).string(3, &s).packed_ints(4, &ints);
            let bytes = w.into_bytes();
            let mut seen = Vec::new();
            for_each_field(&bytes, |n, val| { seen.push((n, val)); Ok(()) }).unwrap();
            prop_assert_eq!(seen.len(), 4);
            prop_assert_eq!(seen[0].1.as_u64().unwrap(), v);
            prop_assert_eq!(seen[1].1.as_f32().unwrap().to_bits(), f.to_bits());
            prop_assert_eq!(seen[2].1.as_str().unwrap(), s.as_str());
            prop_assert_eq!(seen[3].1.ints().unwrap(), ints);
        }
    }
}
