//! Decoder-direction steering and dose–response fits.
//!
//! `steer` injects `α · W_dec[:, j]` into a residual vector; `dose_response`
//! pushes a batch of steered tokens through a [`DownstreamMap`] and fits an
//! ordinary least-squares line to the mean response as a function of `α`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::GridMeta;
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};
use crate::metrics::RegionSpec;
use crate::model::SaeParams;
use crate::par;
use crate::rng;

pub const DEFAULT_ALPHAS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

/// Responses whose magnitude stays below this fraction of the baseline
/// output scale are reported as a zero response.
pub const ZERO_RESPONSE_TOL: f64 = 1e-12;

const TOKEN_SHARD: usize = 256;

/// A deterministic stand-in for the layers downstream of the probed
/// residual stream.
///
/// `cell` is the grid cell of the token when known; maps that do not vary
/// over space ignore it.
pub trait DownstreamMap: Sync {
    fn d(&self) -> usize;
    fn eval(&self, x: &[f64], cell: Option<usize>) -> f64;
}

/// `r · x + c`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReadout {
    pub r: Vec<f64>,
    pub c: f64,
}

impl LinearReadout {
    /// Readout with `r ~ N(0, 1/d)` drawn from the `"steer/readout"` stream.
    pub fn seeded(d: usize, seed: u64) -> Self {
        Self {
            r: gaussian_vector(d, seed, "steer/readout"),
            c: 0.0,
        }
    }
}

impl DownstreamMap for LinearReadout {
    fn d(&self) -> usize {
        self.r.len()
    }

    fn eval(&self, x: &[f64], _cell: Option<usize>) -> f64 {
        dot(&self.r, x) + self.c
    }
}

/// `(r · x)²`, a toy nonlinear readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticReadout {
    pub r: Vec<f64>,
}

impl QuadraticReadout {
    pub fn seeded(d: usize, seed: u64) -> Self {
        Self {
            r: gaussian_vector(d, seed, "steer/readout"),
        }
    }
}

impl DownstreamMap for QuadraticReadout {
    fn d(&self) -> usize {
        self.r.len()
    }

    fn eval(&self, x: &[f64], _cell: Option<usize>) -> f64 {
        let v = dot(&self.r, x);
        v * v
    }
}

/// A linear readout per grid cell. Without a cell the cell-averaged readout
/// is used.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReadout {
    cells: Vec<LinearReadout>,
    mean: LinearReadout,
}

impl CellReadout {
    pub fn new(cells: Vec<LinearReadout>) -> Result<Self> {
        let first = cells.first().ok_or(Error::EmptyInput("cell readouts"))?;
        let d = first.r.len();
        let mut mean = LinearReadout {
            r: vec![0.0; d],
            c: 0.0,
        };
        for cr in &cells {
            if cr.r.len() != d {
                return Err(Error::Dimension {
                    what: "cell readout",
                    expected: d,
                    got: cr.r.len(),
                });
            }
            axpy(1.0, &cr.r, &mut mean.r);
            mean.c += cr.c;
        }
        let k = cells.len() as f64;
        mean.r.iter_mut().for_each(|v| *v /= k);
        mean.c /= k;
        Ok(Self { cells, mean })
    }

    /// One seeded readout shared by every cell inside `region`; cells
    /// outside respond to nothing.
    pub fn regional(d: usize, meta: &GridMeta, region: &RegionSpec, seed: u64) -> Result<Self> {
        let inside = LinearReadout::seeded(d, seed);
        let outside = LinearReadout {
            r: vec![0.0; d],
            c: 0.0,
        };
        let mut any = false;
        let cells = (0..meta.cells())
            .map(|cell| {
                let (lat, lon) = meta.cell_center(cell);
                if region.contains(lat, lon) {
                    any = true;
                    inside.clone()
                } else {
                    outside.clone()
                }
            })
            .collect();
        if !any {
            return Err(Error::Region);
        }
        Self::new(cells)
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }
}

impl DownstreamMap for CellReadout {
    fn d(&self) -> usize {
        self.mean.r.len()
    }

    fn eval(&self, x: &[f64], cell: Option<usize>) -> f64 {
        match cell.and_then(|c| self.cells.get(c)) {
            Some(r) => r.eval(x, None),
            None => self.mean.eval(x, None),
        }
    }
}

fn gaussian_vector(d: usize, seed: u64, name: &str) -> Vec<f64> {
    let mut r = rng::stream(seed, name);
    let normal = Normal::new(0.0, (1.0 / d.max(1) as f64).sqrt()).expect("valid std");
    (0..d).map(|_| normal.sample(&mut r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponse {
    pub feature: usize,
    pub alphas: Vec<f64>,
    /// Mean change of the downstream output relative to `α = 0`.
    pub responses: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Set when every response is zero; `r_squared` is then reported as 1.
    pub zero_response: bool,
}

impl DoseResponse {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,response\n");
        for (a, r) in self.alphas.iter().zip(&self.responses) {
            s.push_str(&format!("{a},{r}\n"));
        }
        s
    }
}

fn check_feature(params: &SaeParams, j: usize) -> Result<()> {
    if j >= params.m() {
        return Err(Error::Index {
            index: j,
            len: params.m(),
        });
    }
    Ok(())
}

/// `x + α · W_dec[:, j]`
pub fn steer(x: &[f64], params: &SaeParams, j: usize, alpha: f64) -> Result<Vec<f64>> {
    check_feature(params, j)?;
    if x.len() != params.d() {
        return Err(Error::Dimension {
            what: "residual vector",
            expected: params.d(),
            got: x.len(),
        });
    }
    let mut out = x.to_vec();
    for (k, o) in out.iter_mut().enumerate() {
        *o += alpha * params.w_dec.get(k, j);
    }
    Ok(out)
}

fn check_inputs(down: &dyn DownstreamMap, params: &SaeParams, j: usize, x: &Matrix) -> Result<()> {
    check_feature(params, j)?;
    if x.rows() == 0 {
        return Err(Error::EmptyInput("base tokens"));
    }
    for (what, got) in [("base tokens", x.cols()), ("downstream map", down.d())] {
        if got != params.d() {
            return Err(Error::Dimension {
                what,
                expected: params.d(),
                got,
            });
        }
    }
    Ok(())
}

/// Sums of `down(steer(x, α_k)) - down(x)` over token shards, reduced in
/// shard order. `cell_of` maps a token index to its grid cell.
fn summed_deltas(
    down: &dyn DownstreamMap,
    direction: &[f64],
    alphas: &[f64],
    x: &Matrix,
    cell_of: impl Fn(usize) -> Option<usize> + Sync,
    sink: impl Fn(usize) -> usize + Sync,
    n_sinks: usize,
) -> Vec<Vec<f64>> {
    let parts = par::map_shards(x.rows(), TOKEN_SHARD, |rows| {
        let mut acc = vec![vec![0.0; n_sinks]; alphas.len()];
        let mut steered = vec![0.0; x.cols()];
        for i in rows {
            let xi = x.row(i);
            let cell = cell_of(i);
            let base = down.eval(xi, cell);
            for (a, &alpha) in alphas.iter().enumerate() {
                steered.copy_from_slice(xi);
                axpy(alpha, direction, &mut steered);
                acc[a][sink(i)] += down.eval(&steered, cell) - base;
            }
        }
        acc
    });
    let mut total = vec![vec![0.0; n_sinks]; alphas.len()];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            t.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
    }
    total
}

/// Mean downstream response to steering feature `j` at each `α`, with an
/// OLS fit of response against `α`.
pub fn dose_response(
    down: &dyn DownstreamMap,
    params: &SaeParams,
    j: usize,
    alphas: &[f64],
    x_base: &Matrix,
) -> Result<DoseResponse> {
    check_inputs(down, params, j, x_base)?;
    if alphas.len() < 3 {
        return Err(Error::Fit("need at least 3 steering coefficients"));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::Argument(
            "steering coefficients must be finite".into(),
        ));
    }
    if !alphas.contains(&0.0) {
        return Err(Error::Argument(
            "steering coefficients must include 0".into(),
        ));
    }
    let mut distinct = alphas.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Fit("need at least 3 distinct steering coefficients"));
    }

    let direction = params.w_dec.col(j);
    let n = x_base.rows() as f64;
    let sums = summed_deltas(down, &direction, alphas, x_base, |_| None, |_| 0, 1);
    let responses: Vec<f64> = alphas
        .iter()
        .zip(&sums)
        .map(|(&a, s)| if a == 0.0 { 0.0 } else { s[0] / n })
        .collect();

    let scale = (0..x_base.rows())
        .map(|i| down.eval(x_base.row(i), None).abs())
        .sum::<f64>()
        / n;
    let zero_response = responses
        .iter()
        .all(|r| r.abs() <= ZERO_RESPONSE_TOL * scale.max(1.0));

    let (slope, intercept, r_squared) = if zero_response {
        (0.0, 0.0, 1.0)
    } else {
        ols(alphas, &responses)?
    };
    Ok(DoseResponse {
        feature: j,
        alphas: alphas.to_vec(),
        responses,
        slope,
        intercept,
        r_squared,
        zero_response,
    })
}

/// Least-squares line `y ≈ slope·x + intercept` and its `r²`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Fit("need matched samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("steering coefficients have zero variance"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - (slope * a + intercept);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok((slope, intercept, r2))
}

/// `H × W` map of the per-cell mean steered-minus-baseline output.
pub fn regional_response_map(
    down: &dyn DownstreamMap,
    params: &SaeParams,
    j: usize,
    alpha: f64,
    x: &Matrix,
    meta: &GridMeta,
) -> Result<Matrix> {
    check_inputs(down, params, j, x)?;
    if x.rows() != meta.n_tokens() {
        return Err(Error::Consistency(format!(
            "{} tokens but the grid describes {}",
            x.rows(),
            meta.n_tokens()
        )));
    }
    let cells = meta.cells();
    let direction = params.w_dec.col(j);
    let sums = summed_deltas(
        down,
        &direction,
        &[alpha],
        x,
        |i| Some(i % cells),
        |i| i % cells,
        cells,
    );
    let days = meta.n_days as f64;
    let data = sums[0].iter().map(|s| s / days).collect();
    Matrix::from_vec(meta.h as usize, meta.w as usize, data)
}
