//! SAE parameters, forward pass, loss and reverse-mode gradients.
//!
//! ```text
//! h     = W_enc (x - b_pre) + b_enc
//! z_j   = φ_j(h_j)            (kan)   |  max(h_j, 0)   (relu)
//! x_hat = W_dec z + b_pre
//! L     = mean_batch ‖x - x_hat‖² + λ · mean_batch Σ_j |z_j|
//! ```
//!
//! Gradients are written out by hand. Batch rows are processed in fixed
//! shards of [`SHARD_ROWS`] whose partial gradients are summed in shard
//! order; see [`crate::par`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, norm2, Matrix};
use crate::par;
use crate::rng::{self, StreamRng};
use crate::spline::{build_knots, SplineBank, DEFAULT_DEGREE, DEFAULT_N_BASIS};

/// Rows per gradient shard. Fixed so the reduction tree does not depend on
/// the worker count.
pub const SHARD_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Kan,
    Relu,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Kan => "kan",
            Mode::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kan" => Ok(Mode::Kan),
            "relu" => Ok(Mode::Relu),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub mode: Mode,
    /// `M × d`
    pub w_enc: Matrix,
    /// `d × M`; every column has unit norm between optimizer steps.
    pub w_dec: Matrix,
    pub b_pre: Vec<f64>,
    pub b_enc: Vec<f64>,
    /// Present exactly in kan mode, with `M` rows.
    pub bank: Option<SplineBank>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub x_hat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub sparsity: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(recon: f64, sparsity: f64, lambda: f64) -> Self {
        Self {
            recon,
            sparsity,
            total: recon + lambda * sparsity,
            lambda,
        }
    }
}

/// Gradient (or Adam moment) buffers shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w_enc: Matrix,
    pub w_dec: Matrix,
    pub b_pre: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub coeffs: Option<Matrix>,
}

impl Grads {
    pub fn zeros_like(p: &SaeParams) -> Self {
        Self {
            w_enc: Matrix::zeros(p.m(), p.d()),
            w_dec: Matrix::zeros(p.d(), p.m()),
            b_pre: vec![0.0; p.d()],
            b_enc: vec![0.0; p.m()],
            coeffs: p.bank.as_ref().map(|b| Matrix::zeros(b.len(), b.n_basis())),
        }
    }

    /// Parameter blocks in canonical order: `W_enc, W_dec, b_pre, b_enc, c`.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut v: Vec<(&'static str, &[f64])> = vec![
            ("w_enc", self.w_enc.as_slice()),
            ("w_dec", self.w_dec.as_slice()),
            ("b_pre", &self.b_pre),
            ("b_enc", &self.b_enc),
        ];
        if let Some(c) = &self.coeffs {
            v.push(("coeffs", c.as_slice()));
        }
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v: Vec<(&'static str, &mut [f64])> = vec![
            ("w_enc", self.w_enc.as_mut_slice()),
            ("w_dec", self.w_dec.as_mut_slice()),
            ("b_pre", &mut self.b_pre),
            ("b_enc", &mut self.b_enc),
        ];
        if let Some(c) = &mut self.coeffs {
            v.push(("coeffs", c.as_mut_slice()));
        }
        v
    }

    fn add_assign(&mut self, other: &Grads) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, a) in self.blocks_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

/// One column of `W_dec` drawn as a unit-normalised `N(0, 1/d)` sample.
pub(crate) fn random_unit_column(d: usize, rng: &mut StreamRng) -> Vec<f64> {
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Fresh parameters: unit-norm decoder columns, `W_enc = W_decᵀ`,
/// `b_pre = x_mean`, zero encoder bias and zero control points.
///
/// The placeholder knot span is `[-1, 1]`; [`calibrate_knots`] replaces it.
pub fn init_params(d: usize, m: usize, mode: Mode, x_mean: &[f64], seed: u64) -> Result<SaeParams> {
    init_params_with(d, m, mode, x_mean, seed, DEFAULT_N_BASIS, DEFAULT_DEGREE)
}

pub fn init_params_with(
    d: usize,
    m: usize,
    mode: Mode,
    x_mean: &[f64],
    seed: u64,
    n_basis: usize,
    degree: usize,
) -> Result<SaeParams> {
    if d == 0 || m == 0 {
        return Err(Error::Precondition("d and M must be at least 1".into()));
    }
    if x_mean.len() != d {
        return Err(Error::Dimension {
            what: "x_mean",
            expected: d,
            got: x_mean.len(),
        });
    }
    let mut rng = rng::stream(seed, "init/w_dec");
    let mut w_dec = Matrix::zeros(d, m);
    for j in 0..m {
        for (i, v) in random_unit_column(d, &mut rng).into_iter().enumerate() {
            w_dec.set(i, j, v);
        }
    }
    let bank = match mode {
        Mode::Kan => Some(SplineBank::zeros(
            m,
            build_knots(-1.0, 1.0, n_basis, degree)?,
        )),
        Mode::Relu => None,
    };
    Ok(SaeParams {
        mode,
        w_enc: w_dec.transpose(),
        w_dec,
        b_pre: x_mean.to_vec(),
        b_enc: vec![0.0; m],
        bank,
    })
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of an unsorted slice.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Sets every latent's knot span to the `[p_lo, p_hi]` percentiles of its
/// pre-activations over `x_calib`. Returns the number of degenerate spans
/// that were widened to `[t - 1, t + 1]`.
pub fn calibrate_knots(
    params: &mut SaeParams,
    x_calib: &Matrix,
    p_lo: f64,
    p_hi: f64,
) -> Result<usize> {
    if params.mode != Mode::Kan {
        return Err(Error::Mode { expected: "kan" });
    }
    if x_calib.rows() == 0 {
        return Err(Error::EmptyInput("calibration sample"));
    }
    if x_calib.cols() != params.d() {
        return Err(Error::Dimension {
            what: "calibration tokens",
            expected: params.d(),
            got: x_calib.cols(),
        });
    }
    if !(0.0..=100.0).contains(&p_lo) || !(0.0..=100.0).contains(&p_hi) || p_lo >= p_hi {
        return Err(Error::Precondition(format!(
            "bad percentiles ({p_lo}, {p_hi})"
        )));
    }
    let m = params.m();
    let n = x_calib.rows();
    let mut pre = vec![vec![0.0; n]; m];
    let mut xc = vec![0.0; params.d()];
    for i in 0..n {
        params.center(x_calib.row(i), &mut xc);
        for (j, col) in pre.iter_mut().enumerate() {
            col[i] = dot(params.w_enc.row(j), &xc) + params.b_enc[j];
        }
    }
    let bank = params.bank.as_mut().expect("kan mode has a bank");
    let (k, p) = (bank.n_basis(), bank.degree());
    let mut widened = 0;
    for (j, col) in pre.iter_mut().enumerate() {
        let mut lo = percentile(col, p_lo);
        let mut hi = percentile(col, p_hi);
        if !(lo < hi) {
            lo -= 1.0;
            hi += 1.0;
            widened += 1;
        }
        bank.set_knots(j, build_knots(lo, hi, k, p)?)?;
    }
    Ok(widened)
}

impl SaeParams {
    pub fn d(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn m(&self) -> usize {
        self.w_enc.rows()
    }

    fn center(&self, x: &[f64], out: &mut [f64]) {
        for ((o, xi), bi) in out.iter_mut().zip(x).zip(&self.b_pre) {
            *o = xi - bi;
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d() {
            return Err(Error::Dimension {
                what: "input vector",
                expected: self.d(),
                got: x.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn activate(&self, j: usize, h: f64) -> f64 {
        match &self.bank {
            Some(bank) => bank.eval(j, h).0,
            None => h.max(0.0),
        }
    }

    /// `(h, z)` for one token.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let mut xc = vec![0.0; self.d()];
        self.center(x, &mut xc);
        let h: Vec<f64> = (0..self.m())
            .map(|j| dot(self.w_enc.row(j), &xc) + self.b_enc[j])
            .collect();
        let z = h
            .iter()
            .enumerate()
            .map(|(j, &hj)| self.activate(j, hj))
            .collect();
        Ok((h, z))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.m() {
            return Err(Error::Dimension {
                what: "latent vector",
                expected: self.m(),
                got: z.len(),
            });
        }
        Ok((0..self.d())
            .map(|i| dot(self.w_dec.row(i), z) + self.b_pre[i])
            .collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        let (h, z) = self.encode(x)?;
        let x_hat = self.decode(&z)?;
        Ok(ForwardTrace { h, z, x_hat })
    }

    /// Latent codes for every row of `x` (`N × M`).
    pub fn encode_all(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d() {
            return Err(Error::Dimension {
                what: "token matrix",
                expected: self.d(),
                got: x.cols(),
            });
        }
        let m = self.m();
        let parts = par::map_shards(x.rows(), 1024, |r| {
            let mut out = Vec::with_capacity(r.len() * m);
            let mut xc = vec![0.0; self.d()];
            for i in r {
                self.center(x.row(i), &mut xc);
                for j in 0..m {
                    let h = dot(self.w_enc.row(j), &xc) + self.b_enc[j];
                    out.push(self.activate(j, h));
                }
            }
            out
        });
        Matrix::from_vec(x.rows(), m, parts.concat())
    }

    /// Reconstructions for every row of `x`.
    pub fn reconstruct_all(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.encode_all(x)?;
        let d = self.d();
        let parts = par::map_shards(z.rows(), 1024, |r| {
            let mut out = Vec::with_capacity(r.len() * d);
            for i in r {
                let zi = z.row(i);
                out.extend((0..d).map(|k| dot(self.w_dec.row(k), zi) + self.b_pre[k]));
            }
            out
        });
        Matrix::from_vec(x.rows(), d, parts.concat())
    }

    /// Trainable blocks in the same order as [`Grads::blocks`].
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut v: Vec<(&'static str, &[f64])> = vec![
            ("w_enc", self.w_enc.as_slice()),
            ("w_dec", self.w_dec.as_slice()),
            ("b_pre", &self.b_pre),
            ("b_enc", &self.b_enc),
        ];
        if let Some(b) = &self.bank {
            v.push(("coeffs", b.coeffs().as_slice()));
        }
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v: Vec<(&'static str, &mut [f64])> = vec![
            ("w_enc", self.w_enc.as_mut_slice()),
            ("w_dec", self.w_dec.as_mut_slice()),
            ("b_pre", &mut self.b_pre),
            ("b_enc", &mut self.b_enc),
        ];
        if let Some(b) = &mut self.bank {
            v.push(("coeffs", b.coeffs_mut().as_mut_slice()));
        }
        v
    }

    pub fn decoder_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.m()];
        for i in 0..self.d() {
            for (s, w) in sq.iter_mut().zip(self.w_dec.row(i)) {
                *s += w * w;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Random finite parameters for tests and benchmarks: Gaussian weights,
    /// knot spans `[-s, s]` and Gaussian control points.
    pub fn random(d: usize, m: usize, mode: Mode, seed: u64) -> SaeParams {
        let mut rng = rng::stream(seed, "random-params");
        let g = Normal::new(0.0, 1.0).expect("unit normal");
        let x_mean: Vec<f64> = (0..d).map(|_| 0.1 * g.sample(&mut rng)).collect();
        let mut p = init_params(d, m, mode, &x_mean, seed).expect("valid dims");
        let scale = 1.0 / (d as f64).sqrt();
        for v in p.w_enc.as_mut_slice() {
            *v = scale * g.sample(&mut rng);
        }
        for v in p.b_enc.iter_mut() {
            *v = 0.2 * g.sample(&mut rng);
        }
        if let Some(bank) = &mut p.bank {
            let (k, deg) = (bank.n_basis(), bank.degree());
            for j in 0..m {
                let half = rng.random_range(0.8..1.6);
                bank.set_knots(j, build_knots(-half, half, k, deg).expect("valid span"))
                    .expect("same K");
            }
            for v in bank.coeffs_mut().as_mut_slice() {
                *v = g.sample(&mut rng);
            }
        }
        p
    }
}

fn check_batch(params: &SaeParams, batch: &Matrix, lambda: f64) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::EmptyInput("batch"));
    }
    if batch.cols() != params.d() {
        return Err(Error::Dimension {
            what: "batch columns",
            expected: params.d(),
            got: batch.cols(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::Precondition(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    Ok(())
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Summed (not averaged) recon and sparsity over `rows`, plus summed gradients
/// of `Σ_rows (‖x - x_hat‖² + λ Σ|z|)` when `grads` is given.
fn shard_pass(
    params: &SaeParams,
    batch: &Matrix,
    rows: std::ops::Range<usize>,
    lambda: f64,
    mut grads: Option<&mut Grads>,
) -> (f64, f64) {
    let (d, m) = (params.d(), params.m());
    let mut xc = vec![0.0; d];
    let mut h = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut dphi = vec![0.0; m];
    let mut local = Vec::with_capacity(if params.bank.is_some() { m } else { 0 });
    let mut resid = vec![0.0; d];
    let mut g_z = vec![0.0; m];
    let mut g_h = vec![0.0; m];
    let mut active = Vec::with_capacity(m);
    let (mut recon, mut sparsity) = (0.0, 0.0);

    for i in rows {
        let x = batch.row(i);
        params.center(x, &mut xc);
        for j in 0..m {
            h[j] = dot(params.w_enc.row(j), &xc) + params.b_enc[j];
        }
        match &params.bank {
            Some(bank) => {
                local.clear();
                for j in 0..m {
                    let (v, dv, lb) = bank.eval(j, h[j]);
                    z[j] = v;
                    dphi[j] = dv;
                    local.push(lb);
                }
            }
            None => {
                for j in 0..m {
                    z[j] = h[j].max(0.0);
                    dphi[j] = if h[j] > 0.0 { 1.0 } else { 0.0 };
                }
            }
        }
        // ReLU codes are mostly zero, so the decoder side only visits the
        // active latents there.
        let sparse = params.bank.is_none();
        if sparse {
            active.clear();
            active.extend((0..m).filter(|&j| z[j] != 0.0));
        }
        for k in 0..d {
            // x_hat - x = W_dec z + b_pre - x = W_dec z - xc
            let row = params.w_dec.row(k);
            let wz = if sparse {
                active.iter().map(|&j| row[j] * z[j]).sum()
            } else {
                dot(row, &z)
            };
            resid[k] = wz - xc[k];
        }
        recon += dot(&resid, &resid);
        sparsity += z.iter().map(|v| v.abs()).sum::<f64>();

        let Some(g) = grads.as_deref_mut() else {
            continue;
        };
        g_z.iter_mut()
            .zip(&z)
            .for_each(|(gz, zj)| *gz = lambda * sign0(*zj));
        for k in 0..d {
            let gx = 2.0 * resid[k];
            if gx == 0.0 {
                continue;
            }
            g.b_pre[k] += gx;
            let row = params.w_dec.row(k);
            let g_row = g.w_dec.row_mut(k);
            if sparse {
                // Inactive ReLU latents have zero output and zero slope, so
                // neither their decoder gradient nor g_z is needed.
                for &j in &active {
                    g_row[j] += gx * z[j];
                    g_z[j] += gx * row[j];
                }
            } else {
                axpy(gx, &z, g_row);
                axpy(gx, row, &mut g_z);
            }
        }
        if let Some(gc) = g.coeffs.as_mut() {
            for (j, lb) in local.iter().enumerate() {
                if g_z[j] == 0.0 {
                    continue;
                }
                let row = &mut gc.row_mut(j)[lb.first..=lb.span];
                for (r, c) in row.iter_mut().enumerate() {
                    *c += g_z[j] * lb.values[r];
                }
            }
        }
        for j in 0..m {
            g_h[j] = g_z[j] * dphi[j];
        }
        for j in 0..m {
            let gh = g_h[j];
            if gh == 0.0 {
                continue;
            }
            g.b_enc[j] += gh;
            axpy(gh, &xc, g.w_enc.row_mut(j));
        }
    }
    (recon, sparsity)
}

pub fn loss(params: &SaeParams, batch: &Matrix, lambda: f64) -> Result<LossBreakdown> {
    check_batch(params, batch, lambda)?;
    let parts = par::map_shards(batch.rows(), SHARD_ROWS, |r| {
        shard_pass(params, batch, r, lambda, None)
    });
    let n = batch.rows() as f64;
    let (r, s) = parts
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    Ok(LossBreakdown::new(r / n, s / n, lambda))
}

/// Batch-mean loss and its exact gradient w.r.t. every trainable block.
pub fn backward(params: &SaeParams, batch: &Matrix, lambda: f64) -> Result<(LossBreakdown, Grads)> {
    check_batch(params, batch, lambda)?;
    let parts = par::map_shards(batch.rows(), SHARD_ROWS, |r| {
        let mut g = Grads::zeros_like(params);
        let (rc, sp) = shard_pass(params, batch, r, lambda, Some(&mut g));
        (rc, sp, g)
    });
    let n = batch.rows() as f64;
    let mut iter = parts.into_iter();
    let (mut rc, mut sp, mut grads) = iter.next().expect("non-empty batch");
    for (r, s, g) in iter {
        rc += r;
        sp += s;
        grads.add_assign(&g);
    }
    // The encoder path into b_pre is -W_encᵀ g_h summed over rows, and the
    // row sum of g_h is already accumulated in the b_enc gradient.
    for j in 0..params.m() {
        axpy(-grads.b_enc[j], params.w_enc.row(j), &mut grads.b_pre);
    }
    grads.scale(1.0 / n);
    Ok((LossBreakdown::new(rc / n, sp / n, lambda), grads))
}

/// Piecewise regime of every (token, latent) pair: knot span or clamp side
/// and sign of `z` (kan), or sign of `h` and `z` (relu). Finite differences
/// are only trusted when both probes land in the same regime.
fn regime(params: &SaeParams, batch: &Matrix) -> Vec<u32> {
    let mut out = Vec::with_capacity(batch.rows() * params.m());
    for i in 0..batch.rows() {
        let (h, z) = params.encode(batch.row(i)).expect("checked dims");
        for j in 0..params.m() {
            let zs = (sign0(z[j]) + 1.0) as u32;
            let piece = match &params.bank {
                Some(bank) => {
                    let kv = bank.knots(j);
                    if h[j] < kv.lo() {
                        0
                    } else if h[j] > kv.hi() {
                        1
                    } else {
                        2 + kv.find_span(h[j]) as u32
                    }
                }
                None => u32::from(h[j] > 0.0),
            };
            out.push(piece * 4 + zs);
        }
    }
    out
}

/// Relative error below which gradient entries are compared absolutely.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Max relative error `|g - fd| / max(|g|, |fd|, floor)` between [`backward`]
/// and central finite differences over every parameter coordinate. Coordinates
/// whose ±`step` probes cross a kink (knot-span or clamp boundary, ReLU hinge,
/// sign change of `z`) are skipped.
///
/// `floor` is the larger of 1e-6 and `1e4 · ε · |L| / step`: rounding in the
/// two loss evaluations alone perturbs `fd` by about `ε · |L| / step`, so
/// entries smaller than ten thousand times that cannot be resolved to 1e-4.
pub fn grad_check(params: &SaeParams, batch: &Matrix, lambda: f64, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Precondition(format!(
            "grad_check step must be > 0, got {step}"
        )));
    }
    let (base, analytic) = backward(params, batch, lambda)?;
    let floor = GRAD_CHECK_FLOOR.max(1e4 * f64::EPSILON * base.total.abs() / step);
    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    let n_blocks = params.blocks().len();
    for b in 0..n_blocks {
        let len = params.blocks()[b].1.len();
        for idx in 0..len {
            let orig = params.blocks()[b].1[idx];
            probe.blocks_mut()[b].1[idx] = orig + step;
            let plus = loss(&probe, batch, lambda)?.total;
            let reg_plus = regime(&probe, batch);
            probe.blocks_mut()[b].1[idx] = orig - step;
            let minus = loss(&probe, batch, lambda)?.total;
            let reg_minus = regime(&probe, batch);
            probe.blocks_mut()[b].1[idx] = orig;
            if reg_plus != reg_minus {
                continue;
            }
            let fd = (plus - minus) / (2.0 * step);
            let g = analytic.blocks()[b].1[idx];
            let denom = g.abs().max(fd.abs()).max(floor);
            worst = worst.max((g - fd).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::build_knots;

    #[test]
    fn init_shapes_and_norms() {
        let p = init_params(384, 1024, Mode::Kan, &vec![0.0; 384], 3).unwrap();
        assert!((1024.0_f64 / 384.0 - 2.67).abs() < 0.01);
        for n in p.decoder_norms() {
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(p.w_enc, p.w_dec.transpose());
        let x: Vec<f64> = (0..384).map(|i| i as f64).collect();
        let (_, z) = p.encode(&x).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert_eq!(p.decode(&z).unwrap(), p.b_pre);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_params(8, 16, Mode::Relu, &[0.0; 8], 11).unwrap();
        let b = init_params(8, 16, Mode::Relu, &[0.0; 8], 11).unwrap();
        let c = init_params(8, 16, Mode::Relu, &[0.0; 8], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(init_params(0, 4, Mode::Relu, &[], 1).is_err());
    }

    #[test]
    fn relu_encode_decode_cases() {
        let mut p = init_params(2, 2, Mode::Relu, &[0.5, -0.5], 1).unwrap();
        let (h, z) = p.encode(&[0.5, -0.5]).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(z, vec![0.0, 0.0]);
        p.w_enc = Matrix::zeros(2, 2);
        p.b_enc = vec![-1.0, 2.0];
        let (_, z) = p.encode(&[0.0, 0.0]).unwrap();
        assert_eq!(z, vec![0.0, 2.0]);
        let xh = p.decode(&[0.0, 1.0]).unwrap();
        assert!((xh[0] - (p.w_dec.get(0, 1) + 0.5)).abs() < 1e-15);
        assert!(p.encode(&[1.0]).is_err());
        assert!(p.decode(&[1.0]).is_err());
    }

    #[test]
    fn kan_identity_splines_pass_through() {
        let mut p = init_params(3, 4, Mode::Kan, &[0.0; 3], 5).unwrap();
        let bank = p.bank.as_mut().unwrap();
        let kv = build_knots(-10.0, 10.0, 9, 3).unwrap();
        let g = kv.greville();
        for j in 0..4 {
            bank.set_knots(j, kv.clone()).unwrap();
            bank.coeffs_mut().row_mut(j).copy_from_slice(&g);
        }
        let (h, z) = p.encode(&[0.3, -1.2, 2.0]).unwrap();
        for (a, b) in h.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn calibrate_widens_constant_preactivation() {
        let mut p = init_params(2, 2, Mode::Kan, &[0.0, 0.0], 1).unwrap();
        p.w_enc = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        p.b_enc = vec![5.0, 0.0];
        let x = Matrix::from_fn(100, 2, |i, _| i as f64);
        let widened = calibrate_knots(&mut p, &x, 1.0, 99.0).unwrap();
        assert_eq!(widened, 1);
        let kv = p.bank.as_ref().unwrap().knots(0);
        assert_eq!((kv.lo(), kv.hi()), (4.0, 6.0));
        let kv1 = p.bank.as_ref().unwrap().knots(1);
        assert!((kv1.lo() - 0.99).abs() < 1e-12 && (kv1.hi() - 98.01).abs() < 1e-12);

        let mut r = init_params(2, 2, Mode::Relu, &[0.0, 0.0], 1).unwrap();
        assert!(matches!(
            calibrate_knots(&mut r, &x, 1.0, 99.0),
            Err(Error::Mode { .. })
        ));
    }

    #[test]
    fn loss_at_init_is_zero_on_mean_copies() {
        let mean = vec![0.3, -0.7, 1.1];
        let p = init_params(3, 5, Mode::Kan, &mean, 2).unwrap();
        let batch = Matrix::from_fn(7, 3, |_, j| mean[j]);
        let l = loss(&p, &batch, 0.1).unwrap();
        assert_eq!((l.recon, l.sparsity, l.total), (0.0, 0.0, 0.0));
        let empty = Matrix::zeros(0, 3);
        assert!(matches!(loss(&p, &empty, 0.1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn loss_hand_computed_2x2() {
        // Independent scalar arithmetic for a 2x2 relu model:
        // W_enc = [[1, 2], [-1, 0.5]], b_enc = [0.1, -0.2], b_pre = [0.5, 0]
        // W_dec = [[0.6, 0], [0.8, 1]], x = [1.5, 1]
        // xc = [1, 1]; h = [3.1, -0.7]; z = [3.1, 0]
        // x_hat = [0.6*3.1 + 0.5, 0.8*3.1] = [2.36, 2.48]
        // recon = (0.86)^2 + (1.48)^2 = 0.7396 + 2.1904 = 2.93
        // sparsity = 3.1; λ = 0.5 → total = 2.93 + 1.55 = 4.48
        let mut p = init_params(2, 2, Mode::Relu, &[0.5, 0.0], 1).unwrap();
        p.w_enc = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        p.b_enc = vec![0.1, -0.2];
        p.w_dec = Matrix::from_rows(&[vec![0.6, 0.0], vec![0.8, 1.0]]).unwrap();
        let batch = Matrix::from_rows(&[vec![1.5, 1.0]]).unwrap();
        let l = loss(&p, &batch, 0.5).unwrap();
        assert!((l.recon - 2.93).abs() < 1e-12);
        assert!((l.sparsity - 3.1).abs() < 1e-12);
        assert!((l.total - 4.48).abs() < 1e-12);
        assert_eq!(l.total, l.recon + 0.5 * l.sparsity);
        let l0 = loss(&p, &batch, 0.0).unwrap();
        assert_eq!(l0.total, l0.recon);
    }

    #[test]
    fn zero_spline_gradients() {
        let p = init_params(4, 6, Mode::Kan, &[0.0; 4], 9).unwrap();
        let batch = Matrix::from_fn(5, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin());
        let (_, g) = backward(&p, &batch, 0.01).unwrap();
        assert!(g.w_enc.as_slice().iter().all(|v| *v == 0.0));
        assert!(g
            .coeffs
            .as_ref()
            .unwrap()
            .as_slice()
            .iter()
            .any(|v| *v != 0.0));
        // d/d b_pre of mean ‖x - b_pre‖² = 2·mean(b_pre - x)
        let means = batch.column_means();
        for k in 0..4 {
            let expected = 2.0 * (p.b_pre[k] - means[k]);
            assert!((g.b_pre[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_small_models() {
        for (mode, seed) in [(Mode::Kan, 1), (Mode::Relu, 2), (Mode::Kan, 3)] {
            let p = SaeParams::random(8, 16, mode, seed);
            let batch =
                Matrix::from_fn(4, 8, |i, j| ((i * 8 + j) as f64 * 0.71 + seed as f64).sin());
            let err = grad_check(&p, &batch, 0.05, 1e-5).unwrap();
            assert!(err < 1e-4, "{mode:?} seed {seed}: {err}");
        }
    }

    #[test]
    fn grad_check_quadratic_only() {
        let p = init_params(4, 6, Mode::Kan, &[0.1; 4], 4).unwrap();
        let batch = Matrix::from_fn(3, 4, |i, j| (i + j) as f64 * 0.25);
        assert!(grad_check(&p, &batch, 0.0, 1e-5).unwrap() < 1e-6);
        assert!(matches!(
            grad_check(&p, &batch, 0.0, 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let p = SaeParams::random(6, 10, Mode::Kan, 8);
        let batch = Matrix::from_fn(300, 6, |i, j| ((i * 6 + j) as f64 * 0.13).cos());
        let (l1, g1) = backward(&p, &batch, 0.02).unwrap();
        par::set_sequential(true);
        let (l2, g2) = backward(&p, &batch, 0.02).unwrap();
        par::set_sequential(false);
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
