//! Little-endian record reading/writing shared by the checkpoint and cache
//! formats.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field} at byte {offset}: {reason}")]
pub struct FormatError {
    pub offset: usize,
    pub field: String,
    pub reason: String,
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error(&self, field: &str, reason: impl Into<String>) -> FormatError {
        FormatError {
            offset: self.pos,
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn bytes(&mut self, n: usize, field: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(
                field,
                format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 8]) -> Result<(), FormatError> {
        let got = self.bytes(8, "magic")?;
        if got != expected {
            self.pos -= 8;
            return Err(self.error("magic", format!("expected {:?}", String::from_utf8_lossy(expected))));
        }
        Ok(())
    }

    pub fn u32(&mut self, field: &str) -> Result<u32, FormatError> {
        let b = self.bytes(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>, FormatError> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| self.error(field, "length overflow"))?;
        let b = self.bytes(len, field)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(self.error("trailer", format!("{} unexpected trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vals: impl IntoIterator<Item = f32>) {
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}
