//! KAN-SAE: sparse autoencoders whose encoder applies a learnable cubic
//! B-spline activation per latent, alongside the usual ReLU baseline.
//!
//! The crate covers the whole experiment loop:
//!
//! - [`spline`]: clamped B-spline bases, per-latent activation banks and the
//!   control-point aliveness criterion.
//! - [`model`]: parameters, forward pass, loss and analytic gradients.
//! - [`optim`]: Adam, the linear sparsity-weight schedule and decoder
//!   renormalisation.
//! - [`data`]: the `KACT` activation and `KSCK` checkpoint formats, plus a
//!   synthetic superposition generator with planted ground truth.
//! - [`train`]: the end-to-end training loop.
//! - [`metrics`]: reconstruction, utilisation, redundancy, spatial and
//!   dictionary-recovery metrics.
//! - [`steer`]: decoder-direction steering and dose-response fits.
//!
//! Batch reductions are split into fixed-size shards and summed in shard
//! order, so the `parallel` feature (rayon) and the sequential fallback
//! produce bit-identical results.

// NaN-rejecting `!(x >= 0.0)` checks and index loops over parallel slices
// are used throughout the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod rng;
pub mod spline;
pub mod steer;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{Mode, SaeParams};
