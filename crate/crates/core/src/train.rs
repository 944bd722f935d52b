//! The training loop.
//!
//! Per epoch `e`: anneal λ, draw a fresh seeded permutation, then for every
//! mini-batch run forward/backward, take one Adam step and renormalise the
//! decoder columns. Randomness for epoch `e` comes from streams indexed by
//! `e`, so resuming from a checkpoint after `e` epochs replays exactly the
//! same updates as an uninterrupted run.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_calibration, ActivationStore, Checkpoint};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{backward, calibrate_knots, init_params_with, Mode, SaeParams};
use crate::optim::{adam_step, anneal_lambda, renormalize_decoder, AdamConfig, AdamState};
use crate::par;
use crate::rng;
use crate::spline::{alive_set, fit_tau, DEFAULT_TAU};

/// Alive threshold: a fixed value or `"auto"` (Otsu split of row maxima).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSpec {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

impl Default for TauSpec {
    fn default() -> Self {
        TauSpec::Fixed(DEFAULT_TAU)
    }
}

impl TauSpec {
    pub const AUTO: TauSpec = TauSpec::Auto(AutoTag::Auto);

    /// Resolves against the bank's row maxima. `auto` falls back to the
    /// default threshold when all maxima coincide.
    pub fn resolve(self, row_maxima: &[f64]) -> f64 {
        match self {
            TauSpec::Fixed(t) => t,
            TauSpec::Auto(_) => fit_tau(row_maxima).unwrap_or(DEFAULT_TAU),
        }
    }
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $v:expr;)*) => {
        $(fn $name() -> $ty { $v })*
    };
}

defaults! {
    d_m: usize = 1024;
    d_epochs: usize = 100;
    d_batch: usize = 4096;
    d_lr: f64 = 1e-4;
    d_beta1: f64 = 0.9;
    d_beta2: f64 = 0.999;
    d_eps: f64 = 1e-8;
    d_lambda0: f64 = 5e-5;
    d_lambda_end: f64 = 1e-4;
    d_k: usize = 9;
    d_p: usize = 3;
    d_calib: usize = crate::data::DEFAULT_CALIBRATION_TOKENS;
    d_percentiles: (f64, f64) = (1.0, 99.0);
    d_alive_sample: usize = 16_384;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_lambda0")]
    pub lambda0: f64,
    #[serde(default = "d_lambda_end")]
    pub lambda_end: f64,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_p")]
    pub p: usize,
    #[serde(default = "d_calib")]
    pub calib_n: usize,
    #[serde(default = "d_percentiles")]
    pub percentiles: (f64, f64),
    #[serde(default)]
    pub tau: TauSpec,
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// ReLU aliveness: a latent is alive if some token gives `z_j > eps`.
    #[serde(default)]
    pub activation_eps: f64,
    /// Tokens used for the per-epoch relu alive count in the log.
    #[serde(default = "d_alive_sample")]
    pub alive_sample: usize,
}

impl TrainConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            m: d_m(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            adam_eps: d_eps(),
            lambda0: d_lambda0(),
            lambda_end: d_lambda_end(),
            k: d_k(),
            p: d_p(),
            calib_n: d_calib(),
            percentiles: d_percentiles(),
            tau: TauSpec::default(),
            seed: 0,
            checkpoint_every: 0,
            activation_eps: 0.0,
            alive_sample: d_alive_sample(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if self.m < 1 {
            return bad("M must be >= 1");
        }
        if !(self.lambda0 >= 0.0) || !(self.lambda_end >= 0.0) {
            return bad("lambda0 and lambda_end must be >= 0");
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("need lr > 0 and betas in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        let (lo, hi) = self.percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return bad("percentiles must satisfy 0 <= lo < hi <= 100");
        }
        if self.p < 1 || self.p > crate::spline::MAX_DEGREE || self.k < self.p + 1 {
            return bad("need 1 <= p <= 7 and K >= p + 1");
        }
        if let TauSpec::Fixed(t) = self.tau {
            if !(t >= 0.0) {
                return bad("tau must be >= 0");
            }
        }
        if self.calib_n < 1 {
            return bad("calib_n must be >= 1");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub recon: f64,
    pub sparsity: f64,
    pub total: f64,
    pub alive: usize,
    pub renorm_redraws: usize,
    /// Not serialised, so log files stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub calibration_widened: usize,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SaeParams,
    pub adam: AdamState,
    pub log: TrainLog,
    pub alive: Vec<usize>,
    /// Resolved threshold (kan mode only).
    pub tau: Option<f64>,
}

/// Latents with `z_j > eps` on at least one row of `x`.
pub fn alive_relu(params: &SaeParams, x: &Matrix, eps: f64) -> Result<Vec<usize>> {
    if params.mode != Mode::Relu {
        return Err(Error::Mode { expected: "relu" });
    }
    let m = params.m();
    let z = params.encode_all(x)?;
    let mut seen = vec![false; m];
    for i in 0..z.rows() {
        for (s, &v) in seen.iter_mut().zip(z.row(i)) {
            *s |= v > eps;
        }
    }
    Ok((0..m).filter(|&j| seen[j]).collect())
}

/// Alive set under the configured criterion: control-point threshold (kan)
/// or ever-activated on `x` (relu). Returns the resolved τ for kan.
pub fn alive_features(
    params: &SaeParams,
    tau: TauSpec,
    x: &Matrix,
    eps: f64,
) -> Result<(Vec<usize>, Option<f64>)> {
    match &params.bank {
        Some(bank) => {
            let t = tau.resolve(&bank.row_maxima());
            Ok((alive_set(bank, t), Some(t)))
        }
        None => Ok((alive_relu(params, x, eps)?, None)),
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    x: Matrix,
    params: SaeParams,
    adam: AdamState,
    epochs_done: usize,
    log: TrainLog,
}

impl Trainer {
    /// Initialises parameters (`b_pre` = token mean) and, in kan mode,
    /// calibrates knot spans on a seeded sample of at most `calib_n` tokens.
    pub fn new(cfg: TrainConfig, store: &ActivationStore) -> Result<Self> {
        cfg.validate()?;
        if store.n() == 0 {
            return Err(Error::EmptyInput("training store"));
        }
        let x = store.to_matrix();
        let mean = x.column_means();
        let mut params =
            init_params_with(store.d(), cfg.m, cfg.mode, &mean, cfg.seed, cfg.k, cfg.p)?;
        let mut log = TrainLog::default();
        if cfg.mode == Mode::Kan {
            let calib = sample_calibration(store, cfg.calib_n.min(store.n()), cfg.seed)?;
            let (lo, hi) = cfg.percentiles;
            log.calibration_widened = calibrate_knots(&mut params, &calib, lo, hi)?;
        }
        let adam = AdamState::new(&params, cfg.adam());
        Ok(Self {
            cfg,
            x,
            params,
            adam,
            epochs_done: 0,
            log,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, store: &ActivationStore, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let p = ck.params;
        if p.d() != store.d() {
            return Err(Error::Config(format!(
                "checkpoint d = {} but store d = {}",
                p.d(),
                store.d()
            )));
        }
        if p.mode != cfg.mode || p.m() != cfg.m {
            return Err(Error::Config("checkpoint mode/M differ from config".into()));
        }
        let adam = ck.adam.unwrap_or_else(|| AdamState::new(&p, cfg.adam()));
        Ok(Self {
            cfg,
            x: store.to_matrix(),
            params: p,
            adam,
            epochs_done: ck.epochs_done,
            log: TrainLog::default(),
        })
    }

    pub fn params(&self) -> &SaeParams {
        &self.params
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let tau = self
            .params
            .bank
            .as_ref()
            .map(|b| self.cfg.tau.resolve(&b.row_maxima()));
        Ok(Checkpoint {
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            tau,
            epochs_done: self.epochs_done,
            train_config: Some(serde_json::to_value(&self.cfg)?),
        })
    }

    fn alive_sample(&self) -> Matrix {
        let n = self.x.rows();
        let take = self.cfg.alive_sample.min(n).max(1);
        let idx: Vec<usize> = (0..take).map(|i| i * n / take).collect();
        self.x.select_rows(&idx)
    }

    /// Runs one epoch. On a non-finite loss or gradient the parameters and
    /// optimizer state are rolled back to the start of the epoch.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        self.run_epoch_with(|_| {})
    }

    /// [`Trainer::run_epoch`], calling `on_step` with the parameters after
    /// every optimizer step and decoder renormalisation.
    pub fn run_epoch_with(&mut self, mut on_step: impl FnMut(&SaeParams)) -> Result<&EpochRecord> {
        let start = Instant::now();
        let e = self.epochs_done + 1;
        let lambda = anneal_lambda(e, self.cfg.epochs, self.cfg.lambda0, self.cfg.lambda_end);
        let n = self.x.rows();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::indexed_stream(
            self.cfg.seed,
            "train/shuffle",
            e as u64,
        ));
        let mut renorm_rng = rng::indexed_stream(self.cfg.seed, "train/renorm", e as u64);

        let snapshot = (self.params.clone(), self.adam.clone());
        let (mut recon, mut sparsity, mut total) = (0.0, 0.0, 0.0);
        let mut redraws = 0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch = self.x.select_rows(chunk);
            let step = backward(&self.params, &batch, lambda).and_then(|(l, g)| {
                if !l.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: e, batch: b });
                }
                adam_step(&mut self.adam, &mut self.params, &g)?;
                Ok(l)
            });
            let l = match step {
                Ok(l) => l,
                Err(err) => {
                    (self.params, self.adam) = snapshot;
                    return Err(match err {
                        Error::NonFinite { .. } => Error::NonFiniteLoss { epoch: e, batch: b },
                        other => other,
                    });
                }
            };
            redraws += renormalize_decoder(&mut self.params, &mut renorm_rng);
            on_step(&self.params);
            let w = chunk.len() as f64;
            recon += l.recon * w;
            sparsity += l.sparsity * w;
            total += l.total * w;
        }
        let nf = n as f64;
        let sample = match self.cfg.mode {
            Mode::Relu => self.alive_sample(),
            Mode::Kan => Matrix::zeros(0, self.params.d()),
        };
        let (alive, _) =
            alive_features(&self.params, self.cfg.tau, &sample, self.cfg.activation_eps)?;
        self.epochs_done = e;
        self.log.records.push(EpochRecord {
            epoch: e,
            lambda,
            recon: recon / nf,
            sparsity: sparsity / nf,
            total: total / nf,
            alive: alive.len(),
            renorm_redraws: redraws,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        Ok(self.log.records.last().expect("just pushed"))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run_with(&mut self, mut on_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.epochs_done < self.cfg.epochs {
            self.run_epoch()?;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// Final alive set: control-point threshold (kan) or ever-activated over
    /// the whole training store (relu).
    pub fn finish(self) -> Result<TrainOutcome> {
        let (alive, tau) =
            alive_features(&self.params, self.cfg.tau, &self.x, self.cfg.activation_eps)?;
        Ok(TrainOutcome {
            params: self.params,
            adam: self.adam,
            log: self.log,
            alive,
            tau,
        })
    }
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, store: &ActivationStore) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone(), store)?;
    t.run_with(|_| Ok(()))?;
    t.finish()
}

/// Whether the shard reductions currently run on the rayon pool.
pub fn parallel_enabled() -> bool {
    par::is_parallel()
}
