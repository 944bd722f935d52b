//! Clamped B-spline bases and per-latent spline activations.
//!
//! Each latent `j` owns a clamped uniform knot vector over `[t_lo, t_hi]` and
//! a row of `K` control points. Evaluation clamps the input to the knot span,
//! so the activation is constant (and its input-derivative zero) outside it.
//!
//! Basis values come from the triangular Cox-de Boor scheme, evaluating only
//! the `p + 1` functions that are nonzero on the containing span. First
//! derivatives reuse the degree `p - 1` row of the same triangle:
//!
//! ```text
//! B'_{i,p}(t) = p * ( B_{i,p-1}(t) / (ξ_{i+p} - ξ_i) - B_{i+1,p-1}(t) / (ξ_{i+p+1} - ξ_{i+1}) )
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest supported degree; bounds the stack buffers used during evaluation.
pub const MAX_DEGREE: usize = 7;

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_N_BASIS: usize = 9;
pub const DEFAULT_TAU: f64 = 1.4021;

/// Tolerance on the mean second difference below which a curve is called
/// near-linear.
pub const NEAR_LINEAR_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
    /// `spans / (t_hi - t_lo)` when the interior knots are uniform; enables
    /// constant-time span lookup.
    inv_step: Option<f64>,
    /// `inv_diff[j * len + a] = 1 / (ξ_{a+j} - ξ_a)`, or 0 for coincident
    /// knots, for `j` in `0..=degree`. Keeps divisions out of evaluation.
    inv_diff: Vec<f64>,
}

fn reciprocal_differences(degree: usize, knots: &[f64]) -> Vec<f64> {
    let len = knots.len();
    let mut out = vec![0.0; (degree + 1) * len];
    for j in 1..=degree {
        for a in 0..len - j {
            let gap = knots[a + j] - knots[a];
            out[j * len + a] = if gap > 0.0 { 1.0 / gap } else { 0.0 };
        }
    }
    out
}

/// The `degree + 1` basis functions that can be nonzero at one point.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    /// Index of the knot span; nonzero functions are `span - degree ..= span`.
    pub span: usize,
    pub first: usize,
    pub values: [f64; MAX_DEGREE + 1],
    pub derivs: [f64; MAX_DEGREE + 1],
    /// False when the input was clamped from outside `[t_lo, t_hi]`.
    pub inside: bool,
}

/// Clamped knot vector with `k - p` uniform spans over `[t_lo, t_hi]`.
pub fn build_knots(t_lo: f64, t_hi: f64, k: usize, p: usize) -> Result<KnotVector> {
    if !(t_lo < t_hi) || !t_lo.is_finite() || !t_hi.is_finite() {
        return Err(Error::InvalidDomain { lo: t_lo, hi: t_hi });
    }
    if p == 0 || p > MAX_DEGREE {
        return Err(Error::Precondition(format!(
            "spline degree must be in 1..={MAX_DEGREE}, got {p}"
        )));
    }
    if k < p + 1 {
        return Err(Error::Precondition(format!(
            "need at least {} basis functions for degree {p}, got {k}",
            p + 1
        )));
    }
    let spans = k - p;
    let width = t_hi - t_lo;
    let mut knots = Vec::with_capacity(k + p + 1);
    knots.extend(std::iter::repeat_n(t_lo, p + 1));
    for i in 1..spans {
        knots.push(t_lo + width * (i as f64) / (spans as f64));
    }
    knots.extend(std::iter::repeat_n(t_hi, p + 1));
    Ok(KnotVector {
        degree: p,
        inv_diff: reciprocal_differences(p, &knots),
        knots,
        inv_step: Some(spans as f64 / width),
    })
}

impl KnotVector {
    /// Wraps an explicit knot sequence after checking the clamped-vector
    /// invariants.
    pub fn from_knots(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if degree == 0 || degree > MAX_DEGREE || knots.len() < 2 * (degree + 1) {
            return Err(Error::Precondition(format!(
                "{} knots cannot form a clamped degree-{degree} vector",
                knots.len()
            )));
        }
        let n = knots.len();
        let (lo, hi) = (knots[0], knots[n - 1]);
        if !(lo < hi) {
            return Err(Error::InvalidDomain { lo, hi });
        }
        let clamped = knots[..=degree].iter().all(|&k| k == lo)
            && knots[n - degree - 1..].iter().all(|&k| k == hi);
        let interior = &knots[degree..n - degree];
        let increasing = interior.windows(2).all(|w| w[0] < w[1]);
        if !clamped || !increasing || knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Precondition(
                "knots must be clamped with strictly increasing interior".into(),
            ));
        }
        Ok(Self {
            degree,
            inv_diff: reciprocal_differences(degree, &knots),
            knots,
            inv_step: None,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn lo(&self) -> f64 {
        self.knots[self.degree]
    }

    pub fn hi(&self) -> f64 {
        self.knots[self.n_basis()]
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.lo(), self.hi())
    }

    /// Span index `i` in `degree..n_basis` with `ξ_i <= t < ξ_{i+1}`; the right
    /// endpoint belongs to the last span.
    pub fn find_span(&self, t: f64) -> usize {
        let n = self.n_basis();
        let t = self.clamp(t);
        if t >= self.hi() {
            return n - 1;
        }
        if let Some(inv) = self.inv_step {
            // Guess from the uniform grid, then correct for round-off so the
            // result always satisfies ξ_i <= t < ξ_{i+1}.
            let mut i = (self.degree + ((t - self.lo()) * inv) as usize).min(n - 1);
            while i > self.degree && self.knots[i] > t {
                i -= 1;
            }
            while i < n - 1 && self.knots[i + 1] <= t {
                i += 1;
            }
            return i;
        }
        let i = self.knots.partition_point(|&k| k <= t);
        (i.saturating_sub(1)).clamp(self.degree, n - 1)
    }

    /// Nonzero basis values and derivatives at `clamp(t)`.
    pub fn local(&self, t: f64) -> LocalBasis {
        let p = self.degree;
        let inside = t >= self.lo() && t <= self.hi();
        let t = self.clamp(t);
        let span = self.find_span(t);
        let xi = &self.knots;
        let len = xi.len();
        let inv = &self.inv_diff;

        let mut n = [0.0; MAX_DEGREE + 1];
        let mut lower = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=p {
            if j == p {
                lower = n;
            }
            left[j] = t - xi[span + 1 - j];
            right[j] = xi[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                // right[r+1] + left[j-r] = ξ_{span+r+1} - ξ_{span+r+1-j}
                let temp = n[r] * inv[j * len + span + r + 1 - j];
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }

        // `lower[r]` is B_{span-p+1+r, p-1}; indices outside 0..p are zero.
        let first = span - p;
        let mut derivs = [0.0; MAX_DEGREE + 1];
        if inside {
            let pf = p as f64;
            for (r, d) in derivs.iter_mut().enumerate().take(p + 1) {
                let i = first + r;
                let a = if r >= 1 { lower[r - 1] } else { 0.0 };
                let b = if r < p { lower[r] } else { 0.0 };
                let ta = a * inv[p * len + i];
                let tb = b * inv[p * len + i + 1];
                *d = pf * (ta - tb);
            }
        }
        LocalBasis {
            span,
            first,
            values: n,
            derivs,
            inside,
        }
    }

    /// Greville abscissae: control ordinates `a * g_k + b` reproduce `a*t + b`.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.n_basis())
            .map(|k| self.knots[k + 1..=k + p].iter().sum::<f64>() / p as f64)
            .collect()
    }
}

/// All `K` basis values at `clamp(t)`, together with the span index.
pub fn basis_eval(kv: &KnotVector, t: f64) -> (usize, Vec<f64>) {
    let lb = kv.local(t);
    let mut out = vec![0.0; kv.n_basis()];
    out[lb.first..=lb.span].copy_from_slice(&lb.values[..=kv.degree]);
    (lb.span, out)
}

/// All `K` basis derivatives at `t`; zero outside `[t_lo, t_hi]`.
pub fn basis_deriv(kv: &KnotVector, t: f64) -> Vec<f64> {
    let lb = kv.local(t);
    let mut out = vec![0.0; kv.n_basis()];
    out[lb.first..=lb.span].copy_from_slice(&lb.derivs[..=kv.degree]);
    out
}

/// Per-latent spline activations `φ_j(t) = Σ_k c_jk B_k(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBank {
    knots: Vec<KnotVector>,
    coeffs: Matrix,
}

impl SplineBank {
    pub fn new(knots: Vec<KnotVector>, coeffs: Matrix) -> Result<Self> {
        if knots.len() != coeffs.rows() {
            return Err(Error::Dimension {
                what: "spline bank rows",
                expected: coeffs.rows(),
                got: knots.len(),
            });
        }
        for kv in &knots {
            if kv.n_basis() != coeffs.cols() {
                return Err(Error::Dimension {
                    what: "control points per latent",
                    expected: kv.n_basis(),
                    got: coeffs.cols(),
                });
            }
        }
        Ok(Self { knots, coeffs })
    }

    /// `m` latents sharing one knot vector, with zero control points.
    pub fn zeros(m: usize, kv: KnotVector) -> Self {
        let k = kv.n_basis();
        Self {
            knots: vec![kv; m],
            coeffs: Matrix::zeros(m, k),
        }
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn n_basis(&self) -> usize {
        self.coeffs.cols()
    }

    pub fn degree(&self) -> usize {
        self.knots
            .first()
            .map_or(DEFAULT_DEGREE, KnotVector::degree)
    }

    pub fn knots(&self, j: usize) -> &KnotVector {
        &self.knots[j]
    }

    pub fn set_knots(&mut self, j: usize, kv: KnotVector) -> Result<()> {
        if kv.n_basis() != self.n_basis() {
            return Err(Error::Dimension {
                what: "control points per latent",
                expected: self.n_basis(),
                got: kv.n_basis(),
            });
        }
        self.knots[j] = kv;
        Ok(())
    }

    pub fn coeffs(&self) -> &Matrix {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Matrix {
        &mut self.coeffs
    }

    /// `φ_j(t)` and `φ_j'(t)` plus the local basis used to get them.
    #[inline]
    pub fn eval(&self, j: usize, t: f64) -> (f64, f64, LocalBasis) {
        let lb = self.knots[j].local(t);
        let c = &self.coeffs.row(j)[lb.first..=lb.span];
        let mut v = 0.0;
        let mut d = 0.0;
        for (r, cr) in c.iter().enumerate() {
            v += cr * lb.values[r];
            d += cr * lb.derivs[r];
        }
        (v, d, lb)
    }

    /// Row maxima `max_k |c_jk|`.
    pub fn row_maxima(&self) -> Vec<f64> {
        (0..self.coeffs.rows())
            .map(|j| {
                self.coeffs
                    .row(j)
                    .iter()
                    .fold(0.0_f64, |m, c| m.max(c.abs()))
            })
            .collect()
    }
}

pub fn spline_apply(bank: &SplineBank, j: usize, t: f64) -> Result<f64> {
    if j >= bank.len() {
        return Err(Error::Index {
            index: j,
            len: bank.len(),
        });
    }
    Ok(bank.eval(j, t).0)
}

/// Features whose largest control-point magnitude reaches `tau`.
pub fn alive_set(bank: &SplineBank, tau: f64) -> Vec<usize> {
    bank.row_maxima()
        .into_iter()
        .enumerate()
        .filter(|&(_, m)| m >= tau)
        .map(|(j, _)| j)
        .collect()
}

/// Two-class Otsu threshold over the row maxima: the midpoint of the split
/// between consecutive sorted values that minimises within-class variance.
pub fn fit_tau(row_maxima: &[f64]) -> Result<f64> {
    let mut v: Vec<f64> = row_maxima.to_vec();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            block: "row maxima",
            detail: "fit_tau input".into(),
        });
    }
    v.sort_by(f64::total_cmp);
    if v.len() < 2 || v[0] == v[v.len() - 1] {
        return Err(Error::Degenerate(
            "fit_tau needs at least two distinct values",
        ));
    }
    let n = v.len();
    let total: f64 = v.iter().sum();
    let total_sq: f64 = v.iter().map(|x| x * x).sum();
    let mut best = (f64::INFINITY, 0.0);
    let (mut s, mut sq) = (0.0, 0.0);
    for i in 0..n - 1 {
        s += v[i];
        sq += v[i] * v[i];
        if v[i] == v[i + 1] {
            continue;
        }
        let n0 = (i + 1) as f64;
        let n1 = (n - i - 1) as f64;
        // Within-class sum of squares; dividing by n is a constant factor.
        let w0 = sq - s * s / n0;
        let w1 = (total_sq - sq) - (total - s) * (total - s) / n1;
        let within = w0 + w1;
        if within < best.0 {
            best = (within, 0.5 * (v[i] + v[i + 1]));
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    Convex,
    Concave,
    NearLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeProfile {
    pub feature_id: usize,
    pub nonlinearity_score: f64,
    pub shape_class: ShapeClass,
}

/// `1 - R²` of the least-squares line through `(t, y)`; zero for constant
/// `y`.
pub fn nonlinearity_score(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let (mut stt, mut sty, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in t.iter().zip(y) {
        let (dt, dy) = (a - tm, b - ym);
        stt += dt * dt;
        sty += dt * dy;
        syy += dy * dy;
    }
    if syy == 0.0 || stt == 0.0 {
        return 0.0;
    }
    let r2 = sty * sty / (stt * syy);
    (1.0 - r2).clamp(0.0, 1.0)
}

/// Classifies `φ_j` sampled at `n_samples` uniform points across its knot span.
pub fn shape_profile(bank: &SplineBank, j: usize, n_samples: usize) -> Result<ShapeProfile> {
    if j >= bank.len() {
        return Err(Error::Index {
            index: j,
            len: bank.len(),
        });
    }
    if n_samples < 3 {
        return Err(Error::Precondition(
            "shape_profile needs n_samples >= 3".into(),
        ));
    }
    let kv = bank.knots(j);
    let (lo, hi) = (kv.lo(), kv.hi());
    let step = (hi - lo) / (n_samples - 1) as f64;
    let t: Vec<f64> = (0..n_samples).map(|i| lo + step * i as f64).collect();
    let y: Vec<f64> = t.iter().map(|&ti| bank.eval(j, ti).0).collect();
    let mean_second: f64 =
        y.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).sum::<f64>() / (n_samples - 2) as f64;
    let shape_class = if mean_second.abs() < NEAR_LINEAR_TOL {
        ShapeClass::NearLinear
    } else if mean_second > 0.0 {
        ShapeClass::Convex
    } else {
        ShapeClass::Concave
    };
    Ok(ShapeProfile {
        feature_id: j,
        nonlinearity_score: nonlinearity_score(&t, &y),
        shape_class,
    })
}
