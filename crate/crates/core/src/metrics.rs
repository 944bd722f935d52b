//! Evaluation metrics.
//!
//! Explained variance is `100 · (1 - ‖X - X̂‖²_F / ‖X - X̄‖²_F)` with `X̄` the
//! mean token broadcast over rows. Regional series use cos(latitude) weights
//! at cell centres. Redundancy is the distribution of absolute Pearson
//! correlations between per-feature series; the median is the headline and
//! the mean is reported alongside it.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::GridMeta;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm2, Matrix};
use crate::model::SaeParams;
use crate::par;
use crate::spline::{shape_profile, ShapeClass};

pub const DEFAULT_R_THRESHOLD: f64 = 0.3;
pub const DEFAULT_SHAPE_SAMPLES: usize = 101;

pub fn explained_variance(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.rows() != x_hat.rows() || x.cols() != x_hat.cols() {
        return Err(Error::Dimension {
            what: "reconstruction",
            expected: x.rows() * x.cols(),
            got: x_hat.rows() * x_hat.cols(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::Precondition(
            "explained variance needs N >= 2".into(),
        ));
    }
    let mean = x.column_means();
    let (mut resid, mut total) = (0.0, 0.0);
    for i in 0..x.rows() {
        for ((a, b), m) in x.row(i).iter().zip(x_hat.row(i)).zip(&mean) {
            resid += (a - b) * (a - b);
            total += (a - m) * (a - m);
        }
    }
    if total == 0.0 {
        return Err(Error::Undefined("explained variance of constant data"));
    }
    Ok(100.0 * (1.0 - resid / total))
}

/// `(utilisation %, dead %)`, summing to exactly 100.
pub fn utilization(alive: &[usize], m: usize) -> Result<(f64, f64)> {
    let set: BTreeSet<usize> = alive.iter().copied().collect();
    if let Some(&j) = set.iter().find(|&&j| j >= m) {
        return Err(Error::Index { index: j, len: m });
    }
    if m == 0 {
        return Err(Error::EmptyInput("dictionary"));
    }
    let util = 100.0 * set.len() as f64 / m as f64;
    Ok((util, 100.0 - util))
}

/// Mean over rows of `Σ_j |z_j|`.
pub fn mean_l1(params: &SaeParams, x: &Matrix) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("evaluation store"));
    }
    let z = params.encode_all(x)?;
    let parts = par::map_shards(z.rows(), 4096, |r| {
        r.map(|i| z.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .sum::<f64>()
    });
    Ok(parts.into_iter().sum::<f64>() / x.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl RegionSpec {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        if !(lat_min < lat_max) || lat_min < -90.0 || lat_max > 90.0 {
            return Err(Error::Argument(format!(
                "bad latitude range [{lat_min}, {lat_max}]"
            )));
        }
        Ok(Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        })
    }

    /// 36–72°N, 10°W–30°E.
    pub fn europe() -> Self {
        Self {
            lat_min: 36.0,
            lat_max: 72.0,
            lon_min: -10.0,
            lon_max: 30.0,
        }
    }

    pub fn global() -> Self {
        Self {
            lat_min: -90.0,
            lat_max: 90.0,
            lon_min: 0.0,
            lon_max: 360.0,
        }
    }

    /// Longitudes compare modulo 360, walking east from `lon_min`.
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        if lat < self.lat_min || lat > self.lat_max {
            return false;
        }
        let width = self.lon_max - self.lon_min;
        if width >= 360.0 {
            return true;
        }
        (lon - self.lon_min).rem_euclid(360.0) <= width.rem_euclid(360.0)
    }
}

/// Flat cell indices inside `region` with their cos(latitude) weights.
pub fn region_cells(meta: &GridMeta, region: &RegionSpec) -> Result<Vec<(usize, f64)>> {
    let cells: Vec<(usize, f64)> = (0..meta.cells())
        .filter_map(|c| {
            let (lat, lon) = meta.cell_center(c);
            region
                .contains(lat, lon)
                .then(|| (c, (lat / 180.0 * PI).cos().max(0.0)))
        })
        .collect();
    if cells.is_empty() || cells.iter().all(|(_, w)| *w == 0.0) {
        return Err(Error::Region);
    }
    Ok(cells)
}

/// Per-day area-weighted mean of `z` (one value per token) over `region`.
pub fn region_mean_series(meta: &GridMeta, z: &[f64], region: &RegionSpec) -> Result<Vec<f64>> {
    if z.len() != meta.n_tokens() {
        return Err(Error::Dimension {
            what: "feature series",
            expected: meta.n_tokens(),
            got: z.len(),
        });
    }
    let cells = region_cells(meta, region)?;
    let wsum: f64 = cells.iter().map(|(_, w)| w).sum();
    let per_day = meta.cells();
    Ok((0..meta.n_days as usize)
        .map(|day| {
            let base = day * per_day;
            cells.iter().map(|(c, w)| w * z[base + c]).sum::<f64>() / wsum
        })
        .collect())
}

fn centered_unit(s: &[f64]) -> Option<Vec<f64>> {
    let n = s.len() as f64;
    let m = s.iter().sum::<f64>() / n;
    let c: Vec<f64> = s.iter().map(|v| v - m).collect();
    let nn = norm2(&c);
    // Relative cutoff so round-off in the mean of a constant series is not
    // mistaken for variance.
    let scale = s.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    (nn > 1e-12 * scale.max(1e-300) * n.sqrt()).then(|| c.into_iter().map(|v| v / nn).collect())
}

pub fn cross_feature_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "correlation series",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 3 {
        return Err(Error::Precondition(
            "correlation needs at least 3 points".into(),
        ));
    }
    let ca = centered_unit(a).ok_or(Error::Undefined("correlation with a zero-variance series"))?;
    let cb = centered_unit(b).ok_or(Error::Undefined("correlation with a zero-variance series"))?;
    Ok(dot(&ca, &cb).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub median_abs_r: f64,
    pub mean_abs_r: f64,
    /// Percentage of pairs with `|r|` above the threshold.
    pub frac_abs_r_gt: f64,
    pub threshold: f64,
    pub n_pairs: usize,
    /// Positions (into the input list) of the series that were paired.
    pub kept: Vec<usize>,
    /// Zero-variance series left out of the pairing.
    pub excluded: usize,
    /// `|r|` between kept series, row-major `kept.len()²`.
    #[serde(skip)]
    pub abs_r: Matrix,
}

pub fn redundancy(series: &[Vec<f64>], threshold: f64) -> Result<RedundancyReport> {
    if series.len() < 2 {
        return Err(Error::Precondition(
            "redundancy needs at least 2 series".into(),
        ));
    }
    let t = series[0].len();
    if t < 3 || series.iter().any(|s| s.len() != t) {
        return Err(Error::Precondition(
            "redundancy needs equal-length series of at least 3 points".into(),
        ));
    }
    let normed: Vec<Option<Vec<f64>>> =
        par::map_indices(series.len(), |i| centered_unit(&series[i]));
    let kept: Vec<usize> = (0..series.len()).filter(|&i| normed[i].is_some()).collect();
    let excluded = series.len() - kept.len();
    if kept.len() < 2 {
        return Err(Error::Precondition(
            "fewer than 2 series with nonzero variance".into(),
        ));
    }
    let f = kept.len();
    let unit: Vec<&Vec<f64>> = kept
        .iter()
        .map(|&i| normed[i].as_ref().expect("kept"))
        .collect();
    let rows: Vec<Vec<f64>> = par::map_indices(f, |a| {
        (0..f)
            .map(|b| {
                if a == b {
                    1.0
                } else {
                    dot(unit[a], unit[b]).abs().min(1.0)
                }
            })
            .collect()
    });
    let abs_r = Matrix::from_rows(&rows)?;
    let mut pairs: Vec<f64> = Vec::with_capacity(f * (f - 1) / 2);
    for a in 0..f {
        for b in a + 1..f {
            pairs.push(abs_r.get(a, b));
        }
    }
    pairs.sort_by(f64::total_cmp);
    let np = pairs.len();
    let median = if np % 2 == 1 {
        pairs[np / 2]
    } else {
        0.5 * (pairs[np / 2 - 1] + pairs[np / 2])
    };
    let above = pairs.iter().filter(|&&r| r > threshold).count();
    Ok(RedundancyReport {
        median_abs_r: median,
        mean_abs_r: pairs.iter().sum::<f64>() / np as f64,
        frac_abs_r_gt: 100.0 * above as f64 / np as f64,
        threshold,
        n_pairs: np,
        kept,
        excluded,
        abs_r,
    })
}

/// Per-cell mean over `hot` days minus mean over `cold` days (`H × W`).
pub fn condition_difference_map(
    meta: &GridMeta,
    z: &[f64],
    hot: &[usize],
    cold: &[usize],
) -> Result<Matrix> {
    if z.len() != meta.n_tokens() {
        return Err(Error::Dimension {
            what: "feature series",
            expected: meta.n_tokens(),
            got: z.len(),
        });
    }
    if hot.is_empty() || cold.is_empty() {
        return Err(Error::Argument("day sets must be nonempty".into()));
    }
    let hs: BTreeSet<usize> = hot.iter().copied().collect();
    let cs: BTreeSet<usize> = cold.iter().copied().collect();
    if hs.intersection(&cs).next().is_some() {
        return Err(Error::Argument("hot and cold day sets overlap".into()));
    }
    let n_days = meta.n_days as usize;
    if let Some(&d) = hs.iter().chain(&cs).find(|&&d| d >= n_days) {
        return Err(Error::Index {
            index: d,
            len: n_days,
        });
    }
    let cells = meta.cells();
    let mean_over = |days: &BTreeSet<usize>| -> Vec<f64> {
        let mut acc = vec![0.0; cells];
        for &d in days {
            for (a, v) in acc.iter_mut().zip(&z[d * cells..(d + 1) * cells]) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= days.len() as f64);
        acc
    };
    let (mh, mc) = (mean_over(&hs), mean_over(&cs));
    let diff = mh.iter().zip(&mc).map(|(a, b)| a - b).collect();
    Matrix::from_vec(meta.h as usize, meta.w as usize, diff)
}

/// Great-circle distance in degrees (haversine).
pub fn great_circle_deg(a: (f64, f64), b: (f64, f64)) -> f64 {
    let rad = |d: f64| d / 180.0 * PI;
    let (p1, p2) = (rad(a.0), rad(b.0));
    let dp = p2 - p1;
    let dl = rad(b.1 - a.1);
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    let c = 2.0 * h.sqrt().atan2((1.0 - h).sqrt());
    c / PI * 180.0
}

/// Smallest flat index attaining the maximum, ignoring NaN.
pub fn argmax_cell(map: &Matrix) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in map.as_slice().iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
        .ok_or(Error::InvalidMap("map has no finite cells"))
}

/// Distance in degrees from the map's peak cell to `center = (lat, lon)`.
pub fn peak_distance(map: &Matrix, meta: &GridMeta, center: (f64, f64)) -> Result<f64> {
    if map.rows() != meta.h as usize || map.cols() != meta.w as usize {
        return Err(Error::Dimension {
            what: "activation map",
            expected: meta.cells(),
            got: map.rows() * map.cols(),
        });
    }
    let peak = argmax_cell(map)?;
    Ok(great_circle_deg(meta.cell_center(peak), center))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub mean_max_abs_cos: f64,
    /// Per true direction: best-matching decoder column and its `|cos|`.
    pub best: Vec<(usize, f64)>,
}

/// For each planted direction (row of `dictionary`), the best absolute cosine
/// against the decoder columns of `w_dec` (`d × M`).
pub fn recovery_score(w_dec: &Matrix, dictionary: &Matrix) -> Result<RecoveryScore> {
    if w_dec.rows() != dictionary.cols() {
        return Err(Error::Dimension {
            what: "dictionary width",
            expected: w_dec.rows(),
            got: dictionary.cols(),
        });
    }
    if w_dec.cols() == 0 || dictionary.rows() == 0 {
        return Err(Error::EmptyInput("recovery_score"));
    }
    let cols: Vec<Vec<f64>> = (0..w_dec.cols())
        .map(|j| {
            let c = w_dec.col(j);
            let n = norm2(&c);
            c.into_iter()
                .map(|v| if n > 0.0 { v / n } else { 0.0 })
                .collect()
        })
        .collect();
    let best: Vec<(usize, f64)> = par::map_indices(dictionary.rows(), |i| {
        let t = dictionary.row(i);
        let nt = norm2(t);
        let mut b = (0, f64::NEG_INFINITY);
        for (j, c) in cols.iter().enumerate() {
            let s = if nt > 0.0 {
                (dot(t, c) / nt).abs().min(1.0)
            } else {
                0.0
            };
            if s > b.1 {
                b = (j, s);
            }
        }
        b
    });
    let mean = best.iter().map(|(_, s)| s).sum::<f64>() / best.len() as f64;
    Ok(RecoveryScore {
        mean_max_abs_cos: mean,
        best,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeHistogram {
    pub convex: usize,
    pub concave: usize,
    pub near_linear: usize,
    pub median_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub m: usize,
    pub n_alive: usize,
    pub explained_variance: f64,
    pub feature_utilization: f64,
    pub dead_rate: f64,
    pub mean_l1: f64,
    pub median_abs_r: Option<f64>,
    pub mean_abs_r: Option<f64>,
    pub frac_abs_r_gt: Option<f64>,
    pub redundancy_pairs: Option<usize>,
    pub shapes: Option<ShapeHistogram>,
    pub recovery: Option<f64>,
}

impl MetricsReport {
    /// `(row label, value)` pairs in display order; absent values are `None`.
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        let sh = self.shapes.as_ref();
        vec![
            ("Explained Variance (%)", Some(self.explained_variance)),
            ("Feature Utilisation (%)", Some(self.feature_utilization)),
            ("Dead Feature Rate (%)", Some(self.dead_rate)),
            ("Mean l1 Norm", Some(self.mean_l1)),
            ("Median inter-feature |r|", self.median_abs_r),
            ("Mean inter-feature |r|", self.mean_abs_r),
            ("Pairs |r|>0.3 (%)", self.frac_abs_r_gt),
            ("Alive features", Some(self.n_alive as f64)),
            ("Convex shapes", sh.map(|s| s.convex as f64)),
            ("Concave shapes", sh.map(|s| s.concave as f64)),
            ("Near-linear shapes", sh.map(|s| s.near_linear as f64)),
            ("Median nonlinearity score", sh.map(|s| s.median_score)),
            ("Recovery score", self.recovery),
        ]
    }
}

/// Evaluation inputs beyond the model and its alive set.
#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub grid: Option<&'a GridMeta>,
    pub region: RegionSpec,
    pub r_threshold: f64,
    pub shape_samples: usize,
    pub truth: Option<&'a Matrix>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            grid: None,
            region: RegionSpec::europe(),
            r_threshold: DEFAULT_R_THRESHOLD,
            shape_samples: DEFAULT_SHAPE_SAMPLES,
            truth: None,
        }
    }
}

/// Region-mean day series for each listed feature.
pub fn feature_series(
    z: &Matrix,
    meta: &GridMeta,
    features: &[usize],
    region: &RegionSpec,
) -> Result<Vec<Vec<f64>>> {
    region_cells(meta, region)?;
    features
        .iter()
        .map(|&j| region_mean_series(meta, &z.col(j), region))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn shape_histogram(
    params: &SaeParams,
    features: &[usize],
    n_samples: usize,
) -> Result<Option<ShapeHistogram>> {
    let Some(bank) = &params.bank else {
        return Ok(None);
    };
    let mut h = ShapeHistogram::default();
    let mut scores = Vec::with_capacity(features.len());
    for &j in features {
        let p = shape_profile(bank, j, n_samples)?;
        scores.push(p.nonlinearity_score);
        match p.shape_class {
            ShapeClass::Convex => h.convex += 1,
            ShapeClass::Concave => h.concave += 1,
            ShapeClass::NearLinear => h.near_linear += 1,
        }
    }
    h.median_score = median(scores);
    Ok(Some(h))
}

/// Every feature-quality metric for one model on one evaluation set.
/// Redundancy needs grid metadata and at least two alive features with
/// nonzero variance; otherwise those fields are `None`.
pub fn evaluate(
    params: &SaeParams,
    alive: &[usize],
    x: &Matrix,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let z = params.encode_all(x)?;
    let d = params.d();
    let recon_parts = par::map_shards(z.rows(), 1024, |r| {
        let mut out = Vec::with_capacity(r.len() * d);
        for i in r {
            let zi = z.row(i);
            out.extend((0..d).map(|k| dot(params.w_dec.row(k), zi) + params.b_pre[k]));
        }
        out
    });
    let x_hat = Matrix::from_vec(x.rows(), d, recon_parts.concat())?;
    let ev = explained_variance(x, &x_hat)?;
    let (util, dead) = utilization(alive, params.m())?;
    let l1 = z.as_slice().iter().map(|v| v.abs()).sum::<f64>() / x.rows().max(1) as f64;

    let red = match opts.grid {
        Some(meta) if alive.len() >= 2 && meta.n_days >= 3 => {
            let series = feature_series(&z, meta, alive, &opts.region)?;
            redundancy(&series, opts.r_threshold).ok()
        }
        _ => None,
    };
    let recovery = match opts.truth {
        Some(t) => Some(recovery_score(&params.w_dec, t)?.mean_max_abs_cos),
        None => None,
    };
    Ok(MetricsReport {
        mode: params.mode.as_str().to_string(),
        m: params.m(),
        n_alive: alive.iter().collect::<BTreeSet<_>>().len(),
        explained_variance: ev,
        feature_utilization: util,
        dead_rate: dead,
        mean_l1: l1,
        median_abs_r: red.as_ref().map(|r| r.median_abs_r),
        mean_abs_r: red.as_ref().map(|r| r.mean_abs_r),
        frac_abs_r_gt: red.as_ref().map(|r| r.frac_abs_r_gt),
        redundancy_pairs: red.as_ref().map(|r| r.n_pairs),
        shapes: shape_histogram(params, alive, opts.shape_samples)?,
        recovery,
    })
}
