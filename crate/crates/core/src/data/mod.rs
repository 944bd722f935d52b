//! Token matrices, on-disk formats and the synthetic generator.
//!
//! Both binary formats are little-endian regardless of host:
//!
//! - `KACT` v1 activations ([`kact`]): f32 token rows plus optional grid
//!   metadata.
//! - `KSCK` v1 checkpoints ([`ksck`]): JSON header followed by f64 blobs.

pub mod bytes;
pub mod kact;
pub mod ksck;
pub mod synth;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

pub use kact::{decode_activations, encode_activations, read_activations, write_activations};
pub use ksck::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use synth::{synth_generate, Gate, GateMix, SynthConfig, SynthGroundTruth, SynthModel};

pub const DEFAULT_CALIBRATION_TOKENS: usize = 50_000;

/// Regular lat/lon grid behind the token order `day, row, col`
/// (`index = day·H·W + row·W + col`). Cell centres sit at
/// `lat0 + row·dlat`, `lon0 + col·dlon` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub n_days: u32,
    pub h: u32,
    pub w: u32,
    pub lat0: f64,
    pub dlat: f64,
    pub lon0: f64,
    pub dlon: f64,
}

impl GridMeta {
    pub fn cells(&self) -> usize {
        self.h as usize * self.w as usize
    }

    pub fn n_tokens(&self) -> usize {
        self.n_days as usize * self.cells()
    }

    pub fn cell_lat(&self, row: usize) -> f64 {
        self.lat0 + row as f64 * self.dlat
    }

    pub fn cell_lon(&self, col: usize) -> f64 {
        self.lon0 + col as f64 * self.dlon
    }

    /// `(lat, lon)` of a flat cell index `row·W + col`.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let w = self.w as usize;
        (self.cell_lat(cell / w), self.cell_lon(cell % w))
    }
}

/// `N × d` activations, stored at on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    n: usize,
    d: usize,
    values: Vec<f32>,
    meta: Option<GridMeta>,
}

impl ActivationStore {
    pub fn new(n: usize, d: usize, values: Vec<f32>, meta: Option<GridMeta>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::Dimension {
                what: "activation buffer",
                expected: n * d,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite activation at row {}, column {}",
                i / d.max(1),
                i % d.max(1)
            )));
        }
        if let Some(m) = &meta {
            if m.n_tokens() != n {
                return Err(Error::Consistency(format!(
                    "grid describes {} tokens but store has {n}",
                    m.n_tokens()
                )));
            }
        }
        Ok(Self { n, d, values, meta })
    }

    /// Rounds a double-precision token matrix to storage precision.
    pub fn from_matrix(x: &Matrix, meta: Option<GridMeta>) -> Result<Self> {
        let values = x.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(x.rows(), x.cols(), values, meta)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn meta(&self) -> Option<&GridMeta> {
        self.meta.as_ref()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = self.values.iter().map(|&v| f64::from(v)).collect();
        Matrix::from_vec(self.n, self.d, data).expect("consistent store")
    }
}

/// `n` distinct rows drawn uniformly without replacement, in draw order.
pub fn sample_calibration(store: &ActivationStore, n: usize, seed: u64) -> Result<Matrix> {
    if n > store.n() {
        return Err(Error::Size {
            requested: n,
            available: store.n(),
        });
    }
    let mut r = rng::stream(seed, "calibration");
    let idx = index::sample(&mut r, store.n(), n).into_vec();
    let mut data = Vec::with_capacity(n * store.d());
    for i in idx {
        data.extend(store.row(i).iter().map(|&v| f64::from(v)));
    }
    Matrix::from_vec(n, store.d(), data)
}
