//! `KACT` v1 activation files.
//!
//! ```text
//! "KACT" | version u32 = 1 | N u64 | d u32 | flags u32
//! [flags bit0: n_days u32 | H u32 | W u32 | lat0 f64 | dlat f64 | lon0 f64 | dlon f64]
//! N·d f32, row-major
//! ```

use std::fs;
use std::path::Path;

use super::bytes::{put_f32s, Reader};
use super::{ActivationStore, GridMeta};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KACT";
pub const VERSION: u32 = 1;
const FLAG_GRID: u32 = 1;

pub fn encode_activations(store: &ActivationStore) -> Result<Vec<u8>> {
    if let Some(i) = store.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite activation at flat index {i}"
        )));
    }
    let d = u32::try_from(store.d())
        .map_err(|_| Error::Validation(format!("d = {} does not fit in u32", store.d())))?;
    let mut out = Vec::with_capacity(64 + store.values().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.n() as u64).to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    let flags = if store.meta().is_some() { FLAG_GRID } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    if let Some(m) = store.meta() {
        for v in [m.n_days, m.h, m.w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [m.lat0, m.dlat, m.lon0, m.dlon] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_f32s(&mut out, store.values());
    Ok(out)
}

pub fn decode_activations(buf: &[u8]) -> Result<ActivationStore> {
    let mut r = Reader::new(buf);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected KACT")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported KACT version {version}")));
    }
    let n = r.u64()?;
    let d = r.u32()?;
    let flags = r.u32()?;
    if flags & !FLAG_GRID != 0 {
        return Err(Error::Format(format!("unknown KACT flags {flags:#x}")));
    }
    let meta = if flags & FLAG_GRID != 0 {
        Some(GridMeta {
            n_days: r.u32()?,
            h: r.u32()?,
            w: r.u32()?,
            lat0: r.f64()?,
            dlat: r.f64()?,
            lon0: r.f64()?,
            dlon: r.f64()?,
        })
    } else {
        None
    };
    let count = n.checked_mul(u64::from(d)).ok_or(Error::Length {
        needed: u64::MAX,
        found: buf.len() as u64,
    })?;
    let values = r.f32s(count)?;
    if r.remaining() != 0 {
        return Err(Error::Consistency(format!(
            "{} trailing bytes after KACT payload",
            r.remaining()
        )));
    }
    if let Some(m) = &meta {
        if m.n_tokens() as u64 != n {
            return Err(Error::Consistency(format!(
                "grid {}x{}x{} does not match N = {n}",
                m.n_days, m.h, m.w
            )));
        }
    }
    ActivationStore::new(n as usize, d as usize, values, meta)
}

pub fn write_activations(store: &ActivationStore, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_activations(store)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_activations(path: impl AsRef<Path>) -> Result<ActivationStore> {
    decode_activations(&fs::read(path)?)
}
