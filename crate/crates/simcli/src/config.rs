//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional except where noted; unknown keys are
//! rejected. See `configs/` in the repository root for annotated examples.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use ebscfl_core::kdc::{Normalizer, ProtocolDims};

use crate::error::SimError;

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "EBS_OUT_DIR";

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dims: DimsConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub init: InitConfig,
    pub attack: AttackConfig,
    pub faults: FaultConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            dims: DimsConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            init: InitConfig::default(),
            attack: AttackConfig::default(),
            faults: FaultConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DimsConfig {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    /// Number of gradient segments.
    pub segments: usize,
    /// Group sizes per aggregation layer; empty means a single group of `n`.
    pub layers: Vec<usize>,
    pub normalizer: NormalizerKind,
}

impl Default for DimsConfig {
    fn default() -> Self {
        Self { n: 10, m: 2, l: 8, segments: 1, layers: Vec::new(), normalizer: NormalizerKind::PerCluster }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizerKind {
    PerCluster,
    Global,
}

impl From<NormalizerKind> for Normalizer {
    fn from(k: NormalizerKind) -> Self {
        match k {
            NormalizerKind::PerCluster => Normalizer::PerCluster,
            NormalizerKind::Global => Normalizer::Global,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_iters: usize,
    pub server_iters: usize,
    pub batch: usize,
    /// Client step size and server update rate.
    pub eta: f64,
    /// Step size of the server's reference training.
    pub eta_init: f64,
    /// Server update rate in round `t` is `eta / (1 + eta_decay * t)`.
    pub eta_decay: f64,
    pub loss: LossName,
    /// Recompute the server reference updates from the current models every
    /// round instead of once before the first round.
    pub refresh_server_update: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            local_iters: 5,
            server_iters: 5,
            batch: 16,
            eta: 0.1,
            eta_init: 0.1,
            eta_decay: 0.0,
            loss: LossName::Linear,
            refresh_server_update: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum LossName {
    Linear,
    Logistic,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples_per_client: usize,
    pub root_samples: usize,
    pub test_samples: usize,
    /// Dirichlet concentration of each client's cluster mix; `inf` gives an
    /// even mix.
    pub dirichlet_alpha: f64,
    /// Norm of each ground-truth model.
    pub separation: f64,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples_per_client: 64,
            root_samples: 128,
            test_samples: 256,
            dirichlet_alpha: 0.1,
            separation: 3.0,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub kind: InitKind,
    /// Standard deviation (`random`, and the start of `warm`) or distance
    /// to the truth (`ball`).
    pub scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { kind: InitKind::Warm, scale: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Independent Gaussian models.
    Random,
    /// Each model at distance `scale` from its ground truth.
    Ball,
    /// Gaussian start, then `server_iters` steps of size `eta_init` on the
    /// model's own consecutive shard of the root data.
    Warm,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub fraction: f64,
    /// Multiplier of the scaling attack.
    pub scale: f64,
    /// Target cosine of the cosine-guided attack.
    pub target_cosine: f64,
    /// Norm multiple of the cosine-guided attack relative to the benign mean.
    pub boost: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { kind: AttackKind::None, fraction: 0.0, scale: 1e6, target_cosine: 0.1, boost: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    LabelFlip,
    SignFlip,
    Scaling,
    CosineGuided,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "label-flip",
            AttackKind::SignFlip => "sign-flip",
            AttackKind::Scaling => "scaling",
            AttackKind::CosineGuided => "cosine-guided",
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FaultConfig {
    /// Clients that fail to submit in round `dropout_round`.
    pub dropout: Vec<usize>,
    pub dropout_round: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.train.rounds == 0 {
            return bad("train.rounds must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.attack.fraction) {
            return bad(format!("attack.fraction {} not in [0, 1)", self.attack.fraction));
        }
        if self.dims.n < self.dims.m {
            return bad(format!("need n >= m, got n={} m={}", self.dims.n, self.dims.m));
        }
        if !(self.data.dirichlet_alpha > 0.0) {
            return bad("data.dirichlet_alpha must be positive".into());
        }
        if self.train.batch == 0 || self.train.batch > self.data.samples_per_client {
            return bad(format!("train.batch {} not in 1..={}", self.train.batch, self.data.samples_per_client));
        }
        if self.data.root_samples < self.dims.m || self.data.test_samples == 0 {
            return bad("data.root_samples must cover every cluster and test_samples be positive".into());
        }
        if self.train.local_iters == 0 || self.train.server_iters == 0 {
            return bad("local and server iterations must be at least 1".into());
        }
        for v in [self.train.eta, self.train.eta_init, self.train.eta_decay, self.data.noise, self.data.separation, self.init.scale] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("rates, noise and scales must be finite and non-negative, got {v}"));
            }
        }
        if let Some(&c) = self.faults.dropout.iter().find(|&&c| c >= self.dims.n) {
            return bad(format!("faults.dropout names client {c} but n = {}", self.dims.n));
        }
        self.protocol_dims().map(|_| ())
    }

    pub fn protocol_dims(&self) -> Result<ProtocolDims, SimError> {
        let d = &self.dims;
        let dims = ProtocolDims::segmented(d.n, d.m, d.l, d.segments).map_err(|e| SimError::Config(e.to_string()))?;
        if d.layers.is_empty() {
            return Ok(dims);
        }
        dims.with_layers(d.layers.clone()).map_err(|e| SimError::Config(e.to_string()))
    }

    /// `EBS_OUT_DIR` wins over the configured directory.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }

    pub fn adversary_count(&self) -> usize {
        (self.attack.fraction * self.dims.n as f64).round() as usize
    }
}
