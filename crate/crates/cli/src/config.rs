//! Experiment configuration file.
//!
//! Relative paths inside the file are resolved against the directory that
//! contains it.

use std::path::{Path, PathBuf};

use kansae::data::SynthConfig;
use kansae::metrics::{RegionSpec, DEFAULT_R_THRESHOLD, DEFAULT_SHAPE_SAMPLES};
use kansae::steer::DEFAULT_ALPHAS;
use kansae::train::{TauSpec, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Overrides the generator and training seeds when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub compare: Option<CompareSection>,
    #[serde(default)]
    pub steer: Option<SteerSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub generator: SynthConfig,
    /// Size of an independent evaluation store drawn from the same model.
    #[serde(default)]
    pub heldout_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    #[serde(default)]
    pub eval: Option<PathBuf>,
    /// Ground-truth JSON; the codes sidecar sits next to it with a `.kcod`
    /// extension.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    /// Expected residual width; checked against every store read.
    #[serde(default)]
    pub d: Option<usize>,
}

fn default_r_threshold() -> f64 {
    DEFAULT_R_THRESHOLD
}
fn default_shape_samples() -> usize {
    DEFAULT_SHAPE_SAMPLES
}
fn default_region() -> RegionSpec {
    RegionSpec::global()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Evaluation store; defaults to `data.eval`, then `data.train`.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default = "default_region")]
    pub region: RegionSpec,
    #[serde(default = "default_r_threshold")]
    pub r_threshold: f64,
    #[serde(default = "default_shape_samples")]
    pub shape_samples: usize,
    /// Replaces the threshold stored in kan checkpoints.
    #[serde(default)]
    pub tau: Option<TauSpec>,
}

fn default_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerSection {
    pub checkpoint: PathBuf,
    pub feature: usize,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub downstream: DownstreamSpec,
    #[serde(default)]
    pub eval: Option<PathBuf>,
    /// Also write a per-cell anomaly map at this coefficient.
    #[serde(default)]
    pub anomaly_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DownstreamSpec {
    Linear {
        #[serde(default)]
        seed: u64,
    },
    Quadratic {
        #[serde(default)]
        seed: u64,
    },
    /// Linear readout inside `region`, zero elsewhere.
    Regional {
        #[serde(default)]
        seed: u64,
        region: RegionSpec,
    },
}

impl Default for DownstreamSpec {
    fn default() -> Self {
        DownstreamSpec::Linear { seed: 0 }
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Applies a seed override to every seeded section.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        let Some(seed) = seed.or(self.seed) else {
            return;
        };
        self.seed = Some(seed);
        if let Some(s) = &mut self.synth {
            s.generator.seed = seed;
        }
        if let Some(t) = &mut self.train {
            t.seed = seed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse(r#"{"sed": 1}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"train": {"mode": "kan", "epoch": 3}}"#).is_err());
        let c = ExperimentConfig::parse(r#"{"seed": 4, "train": {"mode": "relu"}}"#).unwrap();
        assert_eq!(c.train.unwrap().m, 1024);
    }

    #[test]
    fn seed_override_reaches_sections() {
        let mut c = ExperimentConfig::parse(r#"{"seed": 4, "train": {"mode": "relu", "seed": 1}}"#)
            .unwrap();
        c.apply_seed(None);
        assert_eq!(c.train.as_ref().unwrap().seed, 4);
        c.apply_seed(Some(9));
        assert_eq!(c.train.unwrap().seed, 9);
    }

    #[test]
    fn steer_defaults() {
        let c = ExperimentConfig::parse(r#"{"steer": {"checkpoint": "a.ksck", "feature": 3}}"#)
            .unwrap();
        let s = c.steer.unwrap();
        assert_eq!(s.alphas, vec![0.0, 0.5, 1.0, 2.0]);
        assert_eq!(s.downstream, DownstreamSpec::Linear { seed: 0 });
    }
}
