//! Little-endian binary framing shared by the dataset, checkpoint and map files:
//! a four-byte magic, a `u16` version, then tagged sections
//! `[tag: 4 bytes][len: u32][payload: len bytes]`.

use crate::error::{Error, Result};

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u16(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// Writes `len: u32` followed by the bytes.
    pub fn len_prefixed(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }

    /// Appends a tagged section whose payload is produced by `f`.
    pub fn section(&mut self, tag: &[u8; 4], f: impl FnOnce(&mut Writer)) {
        let mut inner = Writer::default();
        f(&mut inner);
        self.bytes(tag);
        self.len_prefixed(&inner.buf);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, returning a reader positioned after them.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let found: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if &found != magic {
            return Err(Error::MagicMismatch {
                expected: *magic,
                found,
            });
        }
        let v = r.u16()?;
        if v != version {
            return Err(Error::VersionMismatch {
                expected: version,
                found: v,
            });
        }
        Ok(r)
    }

    pub fn raw(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array("u16")?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array("u32")?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array("u64")?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array("f32")?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array("f64")?))
    }

    pub fn len_prefixed(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n, what)
    }

    /// Reads the next section, requiring the given tag.
    pub fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let found = self.take(4, "section tag")?;
        if found != tag {
            return Err(Error::Format(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let payload = self.len_prefixed(std::str::from_utf8(tag).unwrap_or("section"))?;
        Ok(Reader::raw(payload))
    }

    pub fn expect_done(&self, what: &str) -> Result<()> {
        if !self.is_done() {
            return Err(Error::Format(format!("{} trailing bytes after {what}", self.remaining())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_round_trip() {
        let mut w = Writer::new(b"TEST", 3);
        w.section(b"ABCD", |s| {
            s.u32(7);
            s.f32(1.5);
        });
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TEST", 3).unwrap();
        let mut s = r.section(b"ABCD").unwrap();
        assert_eq!(s.u32().unwrap(), 7);
        assert_eq!(s.f32().unwrap(), 1.5);
        assert!(r.is_done());
    }

    #[test]
    fn distinct_errors() {
        let w = Writer::new(b"TEST", 3).finish();
        assert!(matches!(Reader::open(&w, b"NOPE", 3), Err(Error::MagicMismatch { .. })));
        assert!(matches!(Reader::open(&w, b"TEST", 4), Err(Error::VersionMismatch { .. })));
        assert!(matches!(Reader::open(&w[..5], b"TEST", 3), Err(Error::Truncated(_))));
    }
}
