//! Training configuration: a flat, human-editable TOML document.
//!
//! Every key maps to one field below; unknown keys are rejected so typos
//! fail loudly instead of silently falling back to a default. Omitted keys
//! take the defaults listed on [`TrainConfig`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{Ablation, WNetConfig};
use crate::optim::AdamConfig;

/// Everything one training run needs, as flat key/value pairs.
///
/// Defaults follow the reference recipe: Adam with `lr = 1e-4`,
/// `beta = (0.90, 0.999)`, `eps = 1e-8`, batch size 4, and loss weights
/// `(1.0, 1.0, 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    // Architecture.
    pub hr_size: usize,
    pub scale: usize,
    pub channels: usize,
    pub heads: usize,
    pub scab_per_stage: usize,
    pub hourglass_depth: usize,
    pub ca_reduction: usize,
    pub sa_kernel: usize,
    pub use_lpf: bool,
    pub use_parsing_block: bool,
    pub use_scab: bool,

    // Loss weights.
    pub lambda_pixel: f64,
    pub lambda_par: f64,
    pub lambda_key: f64,

    // Optimizer.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,

    // Run shape.
    pub batch_size: usize,
    /// Number of optimization steps; 0 writes the initialization checkpoint
    /// and an empty log, used to snapshot untrained weights.
    pub steps: usize,
    pub dataset_dir: PathBuf,
    /// Extra checkpoint every N steps (0 = final checkpoint only).
    pub checkpoint_every: usize,
    /// Seeds parameter init, the loss feature extractor, and batch order.
    pub seed: u64,
    /// Where the checkpoint(s) and the CSV log are written.
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = WNetConfig::default();
        let l = LossWeights::default();
        let a = AdamConfig::default();
        TrainConfig {
            hr_size: w.hr_size,
            scale: w.scale,
            channels: w.channels,
            heads: w.heads,
            scab_per_stage: w.scab_per_stage,
            hourglass_depth: w.hourglass_depth,
            ca_reduction: w.ca_reduction,
            sa_kernel: w.sa_kernel,
            use_lpf: w.ablation.use_lpf,
            use_parsing_block: w.ablation.use_parsing_block,
            use_scab: w.ablation.use_scab,
            lambda_pixel: l.lambda_pixel,
            lambda_par: l.lambda_par,
            lambda_key: l.lambda_key,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps_adam: a.eps,
            batch_size: 4,
            steps: 0,
            dataset_dir: PathBuf::new(),
            checkpoint_every: 0,
            seed: 0,
            out_dir: PathBuf::from("train_out"),
        }
    }
}

impl TrainConfig {
    /// Parse and validate a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, parse, and validate a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Serialize back to TOML (used to record the exact config of a run).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("flat config serializes")
    }

    pub fn wnet(&self) -> WNetConfig {
        WNetConfig {
            hr_size: self.hr_size,
            scale: self.scale,
            channels: self.channels,
            heads: self.heads,
            scab_per_stage: self.scab_per_stage,
            hourglass_depth: self.hourglass_depth,
            ca_reduction: self.ca_reduction,
            sa_kernel: self.sa_kernel,
            ablation: Ablation {
                use_lpf: self.use_lpf,
                use_parsing_block: self.use_parsing_block,
                use_scab: self.use_scab,
            },
            seed: self.seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_pixel: self.lambda_pixel,
            lambda_par: self.lambda_par,
            lambda_key: self.lambda_key,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps_adam }
    }

    pub fn validate(&self) -> Result<()> {
        self.wnet().validate()?;
        self.weights().validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("train_config", "lr must be positive and finite"));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta.is_finite() && (0.0..1.0).contains(&beta)) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.eps_adam.is_finite() && self.eps_adam > 0.0) {
            return Err(Error::invalid("train_config", "eps_adam must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train_config", "batch_size must be positive"));
        }
        if self.dataset_dir.as_os_str().is_empty() {
            return Err(Error::Config("dataset_dir must be set".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must be set".into()));
        }
        Ok(())
    }
}
