//! `KSCK` v1 checkpoints.
//!
//! ```text
//! "KSCK" | version u32 = 1 | header_len u64 | header (UTF-8 JSON)
//! f64 blobs in the order listed by header.blocks:
//!   w_enc (M×d) | w_dec (d×M) | b_pre (d) | b_enc (M) | [coeffs (M×K)]
//!   [adam m: same blocks] [adam v: same blocks]
//! ```
//!
//! Knot vectors are stored as per-latent `[t_lo, t_hi]` spans and rebuilt
//! with [`build_knots`]; `K` and `p` sit in the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bytes::{put_f64s, Reader};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Grads, Mode, SaeParams};
use crate::optim::{AdamConfig, AdamState};
use crate::spline::{build_knots, SplineBank, DEFAULT_DEGREE, DEFAULT_N_BASIS};

pub const MAGIC: &[u8; 4] = b"KSCK";
pub const VERSION: u32 = 1;

/// Anything longer is treated as a corrupt length prefix.
const MAX_HEADER_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SaeParams,
    pub adam: Option<AdamState>,
    pub tau: Option<f64>,
    pub epochs_done: usize,
    pub train_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: SaeParams) -> Self {
        Self {
            params,
            adam: None,
            tau: None,
            epochs_done: 0,
            train_config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDesc {
    name: String,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    mode: Mode,
    d: usize,
    m: usize,
    k: usize,
    p: usize,
    tau: Option<f64>,
    epochs_done: usize,
    knot_spans: Vec<[f64; 2]>,
    adam: Option<AdamMeta>,
    train_config: Option<serde_json::Value>,
    blocks: Vec<BlockDesc>,
}

fn expected_blocks(mode: Mode, d: usize, m: usize, k: usize, adam: bool) -> Vec<BlockDesc> {
    let mut base = vec![
        ("w_enc", m.saturating_mul(d)),
        ("w_dec", d.saturating_mul(m)),
        ("b_pre", d),
        ("b_enc", m),
    ];
    if mode == Mode::Kan {
        base.push(("coeffs", m.saturating_mul(k)));
    }
    let mut out: Vec<BlockDesc> = base
        .iter()
        .map(|(n, l)| BlockDesc {
            name: (*n).to_string(),
            len: *l as u64,
        })
        .collect();
    if adam {
        for prefix in ["adam_m", "adam_v"] {
            out.extend(base.iter().map(|(n, l)| BlockDesc {
                name: format!("{prefix}.{n}"),
                len: *l as u64,
            }));
        }
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ck.params;
    let (k, deg, spans) = match &p.bank {
        Some(b) => (
            b.n_basis(),
            b.degree(),
            (0..b.len())
                .map(|j| [b.knots(j).lo(), b.knots(j).hi()])
                .collect(),
        ),
        None => (DEFAULT_N_BASIS, DEFAULT_DEGREE, Vec::new()),
    };
    for (name, block) in p.blocks() {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value in {name}")));
        }
    }
    let header = Header {
        mode: p.mode,
        d: p.d(),
        m: p.m(),
        k,
        p: deg,
        tau: ck.tau,
        epochs_done: ck.epochs_done,
        knot_spans: spans,
        adam: ck.adam.as_ref().map(|a| AdamMeta {
            t: a.t,
            lr: a.cfg.lr,
            beta1: a.cfg.beta1,
            beta2: a.cfg.beta2,
            eps: a.cfg.eps,
        }),
        train_config: ck.train_config.clone(),
        blocks: expected_blocks(p.mode, p.d(), p.m(), k, ck.adam.is_some()),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, b) in p.blocks() {
        put_f64s(&mut out, b);
    }
    if let Some(a) = &ck.adam {
        for (_, b) in a.m.blocks().into_iter().chain(a.v.blocks()) {
            put_f64s(&mut out, b);
        }
    }
    Ok(out)
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, data)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected KSCK")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported KSCK version {version}")));
    }
    let header_len = r.u64()?;
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::Format(format!(
            "implausible header length {header_len}"
        )));
    }
    let raw = r.take(header_len as usize)?;
    let text =
        std::str::from_utf8(raw).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let h: Header =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;

    if h.d == 0 || h.m == 0 {
        return Err(Error::Consistency("d and M must be positive".into()));
    }
    let expected = expected_blocks(h.mode, h.d, h.m, h.k, h.adam.is_some());
    if h.blocks != expected {
        return Err(Error::Consistency(
            "declared blocks do not match mode, d, M and K".into(),
        ));
    }
    match h.mode {
        Mode::Kan if h.knot_spans.len() != h.m => {
            return Err(Error::Consistency(format!(
                "{} knot spans for M = {}",
                h.knot_spans.len(),
                h.m
            )))
        }
        Mode::Relu if !h.knot_spans.is_empty() => {
            return Err(Error::Consistency(
                "relu checkpoint carries knot spans".into(),
            ))
        }
        _ => {}
    }
    let total: u64 = expected
        .iter()
        .try_fold(0u64, |acc, b| acc.checked_add(b.len.checked_mul(8)?))
        .ok_or_else(|| Error::Consistency("blob sizes overflow".into()))?;
    let remaining = r.remaining() as u64;
    if remaining < total {
        return Err(Error::Length {
            needed: buf.len() as u64 - remaining + total,
            found: buf.len() as u64,
        });
    }
    if remaining > total {
        return Err(Error::Consistency(format!(
            "{} bytes of blob data after the declared blocks",
            remaining - total
        )));
    }

    let (d, m, k) = (h.d, h.m, h.k);
    let read_set = |r: &mut Reader| -> Result<Grads> {
        let w_enc = matrix(m, d, r.f64s((m * d) as u64)?)?;
        let w_dec = matrix(d, m, r.f64s((d * m) as u64)?)?;
        let b_pre = r.f64s(d as u64)?;
        let b_enc = r.f64s(m as u64)?;
        let coeffs = match h.mode {
            Mode::Kan => Some(matrix(m, k, r.f64s((m * k) as u64)?)?),
            Mode::Relu => None,
        };
        Ok(Grads {
            w_enc,
            w_dec,
            b_pre,
            b_enc,
            coeffs,
        })
    };
    let main = read_set(&mut r)?;
    let bank = match main.coeffs {
        Some(c) => {
            let knots = h
                .knot_spans
                .iter()
                .map(|[lo, hi]| build_knots(*lo, *hi, k, h.p))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Consistency(format!("bad knot span: {e}")))?;
            Some(SplineBank::new(knots, c)?)
        }
        None => None,
    };
    let params = SaeParams {
        mode: h.mode,
        w_enc: main.w_enc,
        w_dec: main.w_dec,
        b_pre: main.b_pre,
        b_enc: main.b_enc,
        bank,
    };
    let adam = match &h.adam {
        Some(a) => Some(AdamState {
            t: a.t,
            m: read_set(&mut r)?,
            v: read_set(&mut r)?,
            cfg: AdamConfig {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            },
        }),
        None => None,
    };
    Ok(Checkpoint {
        params,
        adam,
        tau: h.tau,
        epochs_done: h.epochs_done,
        train_config: h.train_config,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Header JSON of an encoded checkpoint, for inspection.
pub fn read_header_json(buf: &[u8]) -> Result<serde_json::Value> {
    let mut r = Reader::new(buf);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected KSCK".into()));
    }
    let _version = r.u32()?;
    let len = r.u64()?;
    if len > MAX_HEADER_BYTES {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    Ok(serde_json::from_slice(r.take(len as usize)?)?)
}
