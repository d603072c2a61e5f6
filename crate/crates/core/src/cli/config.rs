use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnum::AdamConfig;
use crate::error::{Error, Result};
use crate::estimator::TrainConfig;
use crate::evalrej::{check_proportions, DEFAULT_PROPORTIONS};
use crate::synthgen::SynthConfig;

/// Flat experiment configuration read from JSON. Missing keys take the
/// defaults below; unknown keys are rejected.
///
/// | key | default | meaning |
/// |---|---|---|
/// | `n`, `d`, `c` | 1000, 16, 4 | nodes, feature width, clusters |
/// | `p_in`, `p_out` | 0.05, 0.005 | intra/inter-cluster edge probability |
/// | `k` | 1.0 | imbalance for `generate` |
/// | `sigma_y` | 1.0 | outcome noise std |
/// | `seed` | 0 | dataset, split and initialization seed (first seed of a sweep) |
/// | `depth`, `branch_depth`, `width` | 2, 2, 32 | encoder shape |
/// | `num_inducing` | 64 | inducing points per head |
/// | `learning_rate`, `beta1`, `beta2`, `adam_eps` | 1e-2, 0.9, 0.999, 1e-8 | Adam |
/// | `epochs`, `patience` | 500, 50 | budget and early stopping (`null` disables) |
/// | `spectral_norm` | true | normalize every encoder weight |
/// | `freeze_encoder` | false | train the GP heads only |
/// | `min_jitter` | 0.0 | first rung of the Cholesky jitter ladder |
/// | `checkpoint_every` | 0 | save resumable state every n epochs (0: at the end only) |
/// | `proportions` | 0, 0.05, ..., 0.3, 0.5, 0.7, 0.9 | rejection grid |
/// | `n_seeds` | 10 | replications per sweep setting |
/// | `k_grid` | 0.5, 1, 2 | sweep settings |
/// | `positivity_threshold` | 0.05 | propensity cut for the positivity diagnostic |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub k: f64,
    pub sigma_y: f64,
    pub seed: u64,
    pub depth: usize,
    pub branch_depth: usize,
    pub width: usize,
    pub num_inducing: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub patience: Option<usize>,
    pub spectral_norm: bool,
    pub freeze_encoder: bool,
    pub min_jitter: f64,
    pub checkpoint_every: usize,
    pub proportions: Vec<f64>,
    pub n_seeds: usize,
    pub k_grid: Vec<f64>,
    pub positivity_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            n: synth.n,
            d: synth.d,
            c: synth.c,
            p_in: synth.p_in,
            p_out: synth.p_out,
            k: synth.k,
            sigma_y: synth.sigma_y,
            seed: 0,
            depth: train.depth,
            branch_depth: train.branch_depth,
            width: train.width,
            num_inducing: train.num_inducing,
            learning_rate: train.adam.lr,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            epochs: train.epochs,
            patience: train.patience,
            spectral_norm: train.spectral_norm,
            freeze_encoder: train.freeze_encoder,
            min_jitter: train.min_jitter,
            checkpoint_every: 0,
            proportions: DEFAULT_PROPORTIONS.to_vec(),
            n_seeds: 10,
            k_grid: vec![0.5, 1.0, 2.0],
            positivity_threshold: 0.05,
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file. Unreadable or malformed files are
    /// configuration errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self, k: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n: self.n,
            d: self.d,
            c: self.c,
            p_in: self.p_in,
            p_out: self.p_out,
            k,
            sigma_y: self.sigma_y,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            adam: AdamConfig {
                lr: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            seed,
            spectral_norm: self.spectral_norm,
            depth: self.depth,
            branch_depth: self.branch_depth,
            width: self.width,
            num_inducing: self.num_inducing,
            patience: self.patience,
            freeze_encoder: self.freeze_encoder,
            min_jitter: self.min_jitter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config(self.k, self.seed).validate()?;
        for &k in &self.k_grid {
            self.synth_config(k, self.seed).validate()?;
        }
        if self.k_grid.is_empty() {
            return Err(Error::Config("k_grid is empty".into()));
        }
        self.train_config(self.seed).validate()?;
        check_proportions(&self.proportions).map_err(|e| Error::Config(e.to_string()))?;
        if self.proportions.is_empty() {
            return Err(Error::Config("proportions grid is empty".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be positive".into()));
        }
        if !(self.positivity_threshold > 0.0 && self.positivity_threshold < 0.5) {
            return Err(Error::Config(format!(
                "positivity_threshold {} outside (0, 0.5)",
                self.positivity_threshold
            )));
        }
        Ok(())
    }
}
