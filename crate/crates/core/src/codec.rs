// SPDX-License-Identifier: Apache-2.0

//! Little-endian framing shared by the `BGDS`, `BGCK` and `BGBD` files.
//!
//! Every file is `magic (4 bytes) | version (u32) | body | crc32 (u32)`, the
//! CRC covering everything before it.

use crate::error::{Error, Result};

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// Length-prefixed UTF-8.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    body: &'a [u8],
    pos: usize,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, msg: msg.into() }
}

impl<'a> Decoder<'a> {
    /// Checks magic, CRC and version; the decoder then starts after the
    /// version field.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(format_err(bytes.len(), format!("truncated: {} bytes", bytes.len())));
        }
        if &bytes[..4] != magic {
            return Err(format_err(0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let split = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[split..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..split]);
        if stored != actual {
            return Err(format_err(split, format!("CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}")));
        }
        let mut d = Self { body: &bytes[..split], pos: 4 };
        let v = d.u32()?;
        if v != version {
            return Err(format_err(4, format!("unsupported version {v}, expected {version}")));
        }
        Ok(d)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.body.len());
        match end {
            Some(end) => {
                let s = &self.body[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(self.pos, format!("truncated: need {n} more bytes"))),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| format_err(at, "string is not UTF-8"))
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        format_err(self.pos, msg)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(format_err(self.pos, format!("{} trailing bytes before CRC", self.body.len() - self.pos)));
        }
        Ok(())
    }
}
