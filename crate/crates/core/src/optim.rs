//! Adam, the linear λ schedule, and decoder-column renormalisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{random_unit_column, Grads, SaeParams};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Grads,
    pub v: Grads,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(params: &SaeParams, cfg: AdamConfig) -> Self {
        Self {
            t: 0,
            m: Grads::zeros_like(params),
            v: Grads::zeros_like(params),
            cfg,
        }
    }
}

/// One bias-corrected Adam update. Fails without touching anything when a
/// gradient entry is non-finite or the shapes disagree.
pub fn adam_step(state: &mut AdamState, params: &mut SaeParams, grads: &Grads) -> Result<()> {
    let gb = grads.blocks();
    let shapes_ok = gb.len() == state.m.blocks().len()
        && gb.len() == params.blocks().len()
        && gb
            .iter()
            .zip(params.blocks())
            .all(|((_, g), (_, p))| g.len() == p.len());
    if !shapes_ok {
        return Err(Error::Consistency(
            "gradient shapes do not match parameters".into(),
        ));
    }
    for (name, block) in &gb {
        if let Some(i) = block.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                block: name,
                detail: format!("gradient entry {i} = {}", block[i]),
            });
        }
    }

    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.cfg;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let mut m_blocks = state.m.blocks_mut();
    let mut v_blocks = state.v.blocks_mut();
    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .blocks_mut()
        .into_iter()
        .zip(gb)
        .zip(m_blocks.iter_mut().zip(v_blocks.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `λ_e = λ0 + (e - 1)/(E - 1) · (λE - λ0)` for epochs `e = 1..=E`.
pub fn anneal_lambda(epoch: usize, total: usize, lambda0: f64, lambda_end: f64) -> f64 {
    if total <= 1 {
        return lambda0;
    }
    let e = epoch.clamp(1, total);
    if e == total {
        return lambda_end;
    }
    lambda0 + (e - 1) as f64 / (total - 1) as f64 * (lambda_end - lambda0)
}

/// Columns whose norm falls below this are redrawn instead of rescaled.
pub const DEAD_COLUMN_NORM: f64 = 1e-12;

/// Rescales every decoder column to unit norm. Returns how many near-zero
/// columns were redrawn from the init distribution.
pub fn renormalize_decoder(params: &mut SaeParams, rng: &mut StreamRng) -> usize {
    let norms = params.decoder_norms();
    let d = params.d();
    let mut redrawn = 0;
    let mut fresh: Vec<Option<Vec<f64>>> = vec![None; norms.len()];
    for (j, &n) in norms.iter().enumerate() {
        if !(n >= DEAD_COLUMN_NORM) {
            fresh[j] = Some(random_unit_column(d, rng));
            redrawn += 1;
        }
    }
    for i in 0..d {
        let row = params.w_dec.row_mut(i);
        for (j, w) in row.iter_mut().enumerate() {
            match &fresh[j] {
                Some(col) => *w = col[i],
                None => *w /= norms[j],
            }
        }
    }
    redrawn
}
