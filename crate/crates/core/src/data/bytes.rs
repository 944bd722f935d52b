//! Little-endian cursor over an in-memory buffer with typed truncation errors.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Length {
                needed: (self.pos as u64).saturating_add(n as u64),
                found: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// `count` little-endian f32 values; the byte count is checked first so
    /// hostile headers cannot trigger huge allocations.
    pub fn f32s(&mut self, count: u64) -> Result<Vec<f32>> {
        let bytes = self.take_counted(count, 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, count: u64) -> Result<Vec<f64>> {
        let bytes = self.take_counted(count, 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn take_counted(&mut self, count: u64, width: u64) -> Result<&'a [u8]> {
        let needed = count.checked_mul(width).ok_or(Error::Length {
            needed: u64::MAX,
            found: self.buf.len() as u64,
        })?;
        if needed > self.remaining() as u64 {
            return Err(Error::Length {
                needed: (self.pos as u64).saturating_add(needed),
                found: self.buf.len() as u64,
            });
        }
        self.take(needed as usize)
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.reserve(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}
