//! Synthetic superposition data with planted ground truth.
//!
//! Each token is `x = Σ_i α_i d_i + b + ε` over `n_true` unit directions
//! `d_i` in `R^d`. Feature `i` fires with probability `p_active`; a firing
//! draws a raw amplitude `a ~ Exp(1)` which the feature's gate maps to
//! `α = g(a)`:
//!
//! | gate        | `g(a)`                    |
//! |-------------|---------------------------|
//! | `none`      | `a`                       |
//! | `threshold` | `max(a - θ, 0)`           |
//! | `saturate`  | `min(a, s)`               |
//! | `both`      | `min(max(a - θ, 0), s)`   |
//!
//! Noise is isotropic `N(0, σ² I)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bytes::{put_f64s, Reader};
use super::{ActivationStore, GridMeta};
use crate::error::{Error, Result};
use crate::matrix::{axpy, norm2, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Gate {
    None,
    Threshold { theta: f64 },
    Saturate { s: f64 },
    Both { theta: f64, s: f64 },
}

impl Gate {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Gate::None => a,
            Gate::Threshold { theta } => (a - theta).max(0.0),
            Gate::Saturate { s } => a.min(s),
            Gate::Both { theta, s } => (a - theta).max(0.0).min(s),
        }
    }
}

/// Fractions of features assigned to each gate; the rest are ungated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateMix {
    pub threshold: f64,
    pub saturate: f64,
    pub both: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub h: u32,
    pub w: u32,
    pub lat0: f64,
    pub dlat: f64,
    pub lon0: f64,
    pub dlon: f64,
}

fn default_theta() -> f64 {
    0.5
}
fn default_saturation() -> f64 {
    1.5
}
fn default_bias_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_true: usize,
    pub d: usize,
    pub n_tokens: usize,
    pub p_active: f64,
    #[serde(default)]
    pub gates: GateMix,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_saturation")]
    pub saturation: f64,
    pub noise_sigma: f64,
    /// Norm of the offset vector `b`.
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl SynthConfig {
    /// Gated benchmark layout: half threshold, half saturate features.
    pub fn gated(n_true: usize, d: usize, n_tokens: usize, seed: u64) -> Self {
        Self {
            n_true,
            d,
            n_tokens,
            p_active: 0.03,
            gates: GateMix {
                threshold: 0.5,
                saturate: 0.5,
                both: 0.0,
            },
            theta: default_theta(),
            saturation: default_saturation(),
            noise_sigma: 0.01,
            bias_scale: default_bias_scale(),
            seed,
            grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_true < 1 {
            return bad("n_true must be >= 1".into());
        }
        if self.d < 2 {
            return bad("d must be >= 2".into());
        }
        if self.n_tokens < 1 {
            return bad("n_tokens must be >= 1".into());
        }
        if !(self.p_active > 0.0 && self.p_active <= 1.0) {
            return bad(format!("p_active must be in (0, 1], got {}", self.p_active));
        }
        let g = self.gates;
        let fracs = [g.threshold, g.saturate, g.both];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || fracs.iter().sum::<f64>() > 1.0 + 1e-12
        {
            return bad("gate fractions must lie in [0, 1] and sum to at most 1".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_scale >= 0.0) {
            return bad("noise_sigma and bias_scale must be >= 0".into());
        }
        if !(self.theta >= 0.0) || !(self.saturation > 0.0) {
            return bad("theta must be >= 0 and saturation > 0".into());
        }
        if let Some(gs) = &self.grid {
            let cells = gs.h as usize * gs.w as usize;
            if cells == 0 || !self.n_tokens.is_multiple_of(cells) {
                return bad(format!(
                    "n_tokens = {} is not a whole number of {}x{} grids",
                    self.n_tokens, gs.h, gs.w
                ));
            }
        }
        Ok(())
    }

    fn grid_meta(&self, n_tokens: usize) -> Option<GridMeta> {
        self.grid.map(|g| GridMeta {
            n_days: (n_tokens / (g.h as usize * g.w as usize)) as u32,
            h: g.h,
            w: g.w,
            lat0: g.lat0,
            dlat: g.dlat,
            lon0: g.lon0,
            dlon: g.dlon,
        })
    }
}

/// CSR list of firing events: feature index, raw amplitude, gated amplitude.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCodes {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<u64>,
    pub cols: Vec<u32>,
    pub raw: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl SparseCodes {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let (s, e) = (self.row_ptr[i] as usize, self.row_ptr[i + 1] as usize);
        (s..e).map(move |k| (self.cols[k] as usize, self.raw[k], self.alpha[k]))
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Dense `N × n_true` matrix of gated amplitudes.
    pub fn to_dense_alpha(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for (j, _, a) in self.row(i) {
                m.set(i, j, a);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthModel {
    pub cfg: SynthConfig,
    /// `n_true × d`, unit rows.
    pub dictionary: Matrix,
    pub bias: Vec<f64>,
    pub gates: Vec<Gate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthGroundTruth {
    pub dictionary: Matrix,
    pub bias: Vec<f64>,
    pub gates: Vec<Gate>,
    pub codes: SparseCodes,
    pub noise_sigma: f64,
    pub p_active: f64,
}

impl SynthModel {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, d) = (cfg.n_true, cfg.d);
        let mut r = rng::stream(cfg.seed, "synth/dictionary");
        let mut dictionary = Matrix::zeros(n, d);
        for i in 0..n {
            loop {
                let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                let nv = norm2(&v);
                if nv > 1e-12 {
                    dictionary
                        .row_mut(i)
                        .iter_mut()
                        .zip(&v)
                        .for_each(|(o, x)| *o = x / nv);
                    break;
                }
            }
        }
        let mut r = rng::stream(cfg.seed, "synth/bias");
        let b: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        let nb = norm2(&b).max(1e-12);
        let bias = b.iter().map(|v| v / nb * cfg.bias_scale).collect();

        let count = |f: f64| ((f * n as f64).round() as usize).min(n);
        let (c_thr, c_sat, c_both) = (
            count(cfg.gates.threshold),
            count(cfg.gates.saturate),
            count(cfg.gates.both),
        );
        let (theta, s) = (cfg.theta, cfg.saturation);
        let mut gates: Vec<Gate> = std::iter::repeat_n(Gate::Threshold { theta }, c_thr)
            .chain(std::iter::repeat_n(Gate::Saturate { s }, c_sat))
            .chain(std::iter::repeat_n(Gate::Both { theta, s }, c_both))
            .take(n)
            .collect();
        gates.resize(n, Gate::None);
        gates.shuffle(&mut rng::stream(cfg.seed, "synth/gates"));
        Ok(Self {
            cfg: cfg.clone(),
            dictionary,
            bias,
            gates,
        })
    }

    /// Draws `n` tokens from the named random stream.
    pub fn sample(&self, n: usize, stream: &str) -> (Matrix, SparseCodes) {
        let cfg = &self.cfg;
        let d = cfg.d;
        let mut r = rng::stream(cfg.seed, stream);
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        let mut x = Matrix::zeros(n, d);
        let mut codes = SparseCodes {
            n_rows: n,
            n_cols: cfg.n_true,
            row_ptr: Vec::with_capacity(n + 1),
            ..Default::default()
        };
        codes.row_ptr.push(0);
        for i in 0..n {
            let row = x.row_mut(i);
            row.copy_from_slice(&self.bias);
            for (j, gate) in self.gates.iter().enumerate() {
                if r.random::<f64>() < cfg.p_active {
                    let a: f64 = Exp1.sample(&mut r);
                    let alpha = gate.apply(a);
                    codes.cols.push(j as u32);
                    codes.raw.push(a);
                    codes.alpha.push(alpha);
                    if alpha != 0.0 {
                        axpy(alpha, self.dictionary.row(j), row);
                    }
                }
            }
            if cfg.noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += noise.sample(&mut r);
                }
            }
            codes.row_ptr.push(codes.cols.len() as u64);
        }
        (x, codes)
    }

    pub fn store(&self, n: usize, stream: &str) -> Result<(ActivationStore, SynthGroundTruth)> {
        let (x, codes) = self.sample(n, stream);
        let meta = self.cfg.grid_meta(n);
        let store = ActivationStore::from_matrix(&x, meta)?;
        Ok((
            store,
            SynthGroundTruth {
                dictionary: self.dictionary.clone(),
                bias: self.bias.clone(),
                gates: self.gates.clone(),
                codes,
                noise_sigma: self.cfg.noise_sigma,
                p_active: self.cfg.p_active,
            },
        ))
    }
}

/// Training tokens (`cfg.n_tokens`) with their ground truth.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(ActivationStore, SynthGroundTruth)> {
    SynthModel::new(cfg)?.store(cfg.n_tokens, "synth/tokens")
}

impl SynthGroundTruth {
    /// `Σ α_i d_i + b` for token `i`, without noise.
    pub fn clean_row(&self, i: usize) -> Vec<f64> {
        let mut x = self.bias.clone();
        for (j, _, a) in self.codes.row(i) {
            axpy(a, self.dictionary.row(j), &mut x);
        }
        x
    }

    /// Per-feature fraction of tokens on which the feature fired.
    pub fn activation_frequency(&self) -> Vec<f64> {
        let mut c = vec![0usize; self.codes.n_cols];
        for &j in &self.codes.cols {
            c[j as usize] += 1;
        }
        let n = self.codes.n_rows.max(1) as f64;
        c.into_iter().map(|v| v as f64 / n).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthJson {
    n_true: usize,
    d: usize,
    p_active: f64,
    noise_sigma: f64,
    gates: Vec<Gate>,
    bias: Vec<f64>,
    dictionary: Vec<Vec<f64>>,
}

pub const CODES_MAGIC: &[u8; 4] = b"KCOD";

/// `KCOD` v1: `"KCOD" | 1u32 | N u64 | n_true u32 | nnz u64 | row_ptr u64×(N+1)
/// | cols u32×nnz | raw f64×nnz | alpha f64×nnz`, little-endian.
pub fn encode_codes(c: &SparseCodes) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CODES_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(c.n_rows as u64).to_le_bytes());
    out.extend_from_slice(&(c.n_cols as u32).to_le_bytes());
    out.extend_from_slice(&(c.nnz() as u64).to_le_bytes());
    for p in &c.row_ptr {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for j in &c.cols {
        out.extend_from_slice(&j.to_le_bytes());
    }
    put_f64s(&mut out, &c.raw);
    put_f64s(&mut out, &c.alpha);
    out
}

pub fn decode_codes(buf: &[u8]) -> Result<SparseCodes> {
    let mut r = Reader::new(buf);
    if r.take(4)? != CODES_MAGIC {
        return Err(Error::Format("bad magic, expected KCOD".into()));
    }
    if r.u32()? != 1 {
        return Err(Error::Format("unsupported KCOD version".into()));
    }
    let n = r.u64()?;
    let n_cols = r.u32()?;
    let nnz = r.u64()?;
    let needed = n
        .checked_add(1)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(nnz.checked_mul(20)?))
        .unwrap_or(u64::MAX);
    if needed > r.remaining() as u64 {
        return Err(Error::Length {
            needed,
            found: r.remaining() as u64,
        });
    }
    let row_ptr = (0..=n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let cols = (0..nnz).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let raw = r.f64s(nnz)?;
    let alpha = r.f64s(nnz)?;
    let monotone = row_ptr.windows(2).all(|w| w[0] <= w[1]);
    if !monotone || row_ptr.last() != Some(&nnz) || cols.iter().any(|&c| c >= n_cols) {
        return Err(Error::Consistency(
            "KCOD index arrays are inconsistent".into(),
        ));
    }
    if r.remaining() != 0 {
        return Err(Error::Consistency(
            "trailing bytes after KCOD payload".into(),
        ));
    }
    Ok(SparseCodes {
        n_rows: n as usize,
        n_cols: n_cols as usize,
        row_ptr,
        cols,
        raw,
        alpha,
    })
}

/// Writes the ground-truth sidecar: JSON for dictionary/bias/gates and a
/// `KCOD` binary for the codes.
pub fn write_ground_truth(
    t: &SynthGroundTruth,
    json_path: impl AsRef<Path>,
    codes_path: impl AsRef<Path>,
) -> Result<()> {
    let j = TruthJson {
        n_true: t.dictionary.rows(),
        d: t.dictionary.cols(),
        p_active: t.p_active,
        noise_sigma: t.noise_sigma,
        gates: t.gates.clone(),
        bias: t.bias.clone(),
        dictionary: (0..t.dictionary.rows())
            .map(|i| t.dictionary.row(i).to_vec())
            .collect(),
    };
    fs::write(json_path, serde_json::to_vec_pretty(&j)?)?;
    fs::write(codes_path, encode_codes(&t.codes))?;
    Ok(())
}

pub fn read_ground_truth(
    json_path: impl AsRef<Path>,
    codes_path: impl AsRef<Path>,
) -> Result<SynthGroundTruth> {
    let j: TruthJson = serde_json::from_slice(&fs::read(json_path)?)?;
    let dictionary = Matrix::from_rows(&j.dictionary)?;
    if dictionary.rows() != j.n_true
        || dictionary.cols() != j.d
        || j.bias.len() != j.d
        || j.gates.len() != j.n_true
    {
        return Err(Error::Consistency(
            "ground-truth JSON shapes disagree".into(),
        ));
    }
    let codes = decode_codes(&fs::read(codes_path)?)?;
    if codes.n_cols != j.n_true {
        return Err(Error::Consistency("codes width differs from n_true".into()));
    }
    Ok(SynthGroundTruth {
        dictionary,
        bias: j.bias,
        gates: j.gates,
        codes,
        noise_sigma: j.noise_sigma,
        p_active: j.p_active,
    })
}
