//! Length-prefixed binary encoding shared by protocol messages and the
//! persistence file. Variable fields carry a big-endian `u32` length.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum CodecError {
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
    #[error("unsupported {what} version {got}")]
    Version { what: &'static str, got: u8 },
    #[error("invalid {0}")]
    Invalid(&'static str),
}

#[derive(Default, Debug)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
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

    /// Raw bytes with no length prefix.
    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.raw(v)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn raw(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CodecError> {
        Ok(self.raw(N, what)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, CodecError> {
        Ok(self.raw(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.array(what)?))
    }

    pub fn bytes(&mut self, what: &'static str) -> Result<&'a [u8], CodecError> {
        let len = self.u32(what)? as usize;
        self.raw(len, what)
    }

    pub fn finish(self) -> Result<(), CodecError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Trailing(self.buf.len()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read() {
        let mut w = Writer::new();
        w.u8(1).u32(0xDEADBEEF).bytes(b"abc").u64(7).raw(&[9, 9]);
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert_eq!(r.u8("v").unwrap(), 1);
        assert_eq!(r.u32("x").unwrap(), 0xDEADBEEF);
        assert_eq!(r.bytes("s").unwrap(), b"abc");
        assert_eq!(r.u64("n").unwrap(), 7);
        assert_eq!(r.array::<2>("t").unwrap(), [9, 9]);
        r.finish().unwrap();
    }

    #[test]
    fn truncation_and_trailing() {
        let mut r = Reader::new(&[0, 0, 0, 5, 1]);
        assert_eq!(r.bytes("blob"), Err(CodecError::Truncated("blob")));
        let mut r = Reader::new(&[1, 2]);
        r.u8("a").unwrap();
        assert_eq!(r.finish(), Err(CodecError::Trailing(1)));
    }
}
