//! Model, training, sampling and run configuration with validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sa_rope::compute_base_patch;

/// Current on-disk config schema.
pub const SCHEMA_VERSION: u32 = 1;

/// What the network's raw output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Output is the velocity `x0 − ε`.
    VPred,
    /// Output is the clean image; velocity is recovered as `(out − z)/(1 − t)`.
    XPred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub large_patch: usize,
    pub small_patch: usize,
    /// Overrides the automatically derived base patch for unified positions.
    pub base_patch: Option<usize>,
    pub hidden: usize,
    pub heads: usize,
    pub depth: usize,
    pub connectors: usize,
    pub anchor_interval: usize,
    pub mlp_ratio: usize,
    pub registers: usize,
    pub anchors_include_registers: bool,
    pub connector_mlp: bool,
    pub num_classes: usize,
    pub timestep_freq_dim: usize,
    pub rope_theta: f64,
    /// Width of the external feature tokens the registers are aligned to; 0 disables the projector.
    pub align_dim: usize,
    pub align_hidden: usize,
    pub parameterization: Parameterization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::nano()
    }
}

impl ModelConfig {
    /// Small desk-scale model for 32×32 toy data.
    pub fn nano() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            large_patch: 8,
            small_patch: 4,
            base_patch: None,
            hidden: 128,
            heads: 4,
            depth: 4,
            connectors: 2,
            anchor_interval: 2,
            mlp_ratio: 4,
            registers: 16,
            anchors_include_registers: true,
            connector_mlp: true,
            num_classes: 4,
            timestep_freq_dim: 256,
            rope_theta: 10000.0,
            align_dim: 16,
            align_hidden: 256,
            parameterization: Parameterization::VPred,
        }
    }

    fn imagenet(depth: usize, hidden: usize) -> Self {
        Self {
            image_height: 256,
            image_width: 256,
            channels: 3,
            large_patch: 16,
            small_patch: 8,
            base_patch: None,
            hidden,
            heads: 16,
            depth,
            connectors: 4,
            anchor_interval: depth / 4,
            mlp_ratio: 4,
            registers: 256,
            anchors_include_registers: true,
            connector_mlp: true,
            num_classes: 1000,
            timestep_freq_dim: 256,
            rope_theta: 10000.0,
            align_dim: 768,
            align_hidden: 2048,
            parameterization: Parameterization::VPred,
        }
    }

    pub fn base() -> Self {
        Self::imagenet(8, 768)
    }

    pub fn xl() -> Self {
        Self::imagenet(24, 1152)
    }

    pub fn huge() -> Self {
        Self::imagenet(28, 1280)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "nano" => Ok(Self::nano()),
            "b" | "base" => Ok(Self::base()),
            "xl" => Ok(Self::xl()),
            "h" | "huge" => Ok(Self::huge()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected nano, b, xl, h)"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    pub fn large_patch_dim(&self) -> usize {
        self.large_patch * self.large_patch * self.channels
    }

    pub fn small_patch_dim(&self) -> usize {
        self.small_patch * self.small_patch * self.channels
    }

    pub fn large_tokens(&self) -> usize {
        (self.image_height / self.large_patch) * (self.image_width / self.large_patch)
    }

    pub fn small_tokens(&self) -> usize {
        (self.image_height / self.small_patch) * (self.image_width / self.small_patch)
    }

    /// Resolved base patch (override or derived).
    pub fn resolved_base_patch(&self) -> Result<usize> {
        match self.base_patch {
            Some(0) => Err(Error::Config("model.base_patch: must be positive".into())),
            Some(p) => Ok(p),
            None => compute_base_patch(self.image_height, self.image_width, self.small_patch, self.large_patch),
        }
    }

    /// Block indices (0-based) whose outputs become anchors.
    pub fn anchor_blocks(&self) -> Vec<usize> {
        (1..=self.connectors).map(|i| i * self.anchor_interval - 1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.channels == 0 {
            return bad("channels", "must be positive".into());
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image_height", "image dimensions must be positive".into());
        }
        for (field, p) in [("large_patch", self.large_patch), ("small_patch", self.small_patch)] {
            if p == 0 {
                return bad(field, "must be positive".into());
            }
            if self.image_height % p != 0 || self.image_width % p != 0 {
                return bad(field, format!("{p} does not divide the {}x{} image", self.image_height, self.image_width));
            }
        }
        if self.small_patch > self.large_patch {
            return bad("small_patch", format!("{} exceeds model.large_patch {}", self.small_patch, self.large_patch));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("heads", format!("{} must divide model.hidden {}", self.heads, self.hidden));
        }
        if self.head_dim() % 4 != 0 {
            return bad("hidden", format!("head dimension {} must be a multiple of 4", self.head_dim()));
        }
        if self.connectors == 0 {
            return bad("connectors", "must be at least 1".into());
        }
        if self.anchor_interval == 0 {
            return bad("anchor_interval", "must be at least 1".into());
        }
        if self.anchor_interval * self.connectors != self.depth {
            return bad(
                "anchor_interval",
                format!(
                    "model.anchor_interval ({}) x model.connectors ({}) must equal model.depth ({})",
                    self.anchor_interval, self.connectors, self.depth
                ),
            );
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive".into());
        }
        if self.timestep_freq_dim == 0 || self.timestep_freq_dim % 2 != 0 {
            return bad("timestep_freq_dim", "must be a positive even number".into());
        }
        if !(self.rope_theta > 1.0) {
            return bad("rope_theta", "must exceed 1".into());
        }
        if self.align_dim > 0 && self.align_hidden == 0 {
            return bad("align_hidden", "must be positive when model.align_dim > 0".into());
        }
        self.resolved_base_patch().map_err(|e| Error::Config(format!("model.base_patch: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeSampler {
    Uniform,
    /// `t = sigmoid(n)` with `n ~ N(mean, std²)`.
    LogitNormal {
        mean: f64,
        std: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FrequencyProfile {
    Uniform,
    /// Weight `1 + strength·r` with `r` the normalized radial frequency.
    HighPass {
        strength: f64,
    },
}

/// How register tokens are matched to external features when their counts differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPooling {
    Strict,
    /// Mean-pool the larger square grid onto the smaller one.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Explicit step budget; overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub label_dropout: f64,
    pub lambda_freq: f64,
    pub lambda_align: f64,
    pub freq_profile: FrequencyProfile,
    pub time_sampler: TimeSampler,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub align_pooling: AlignPooling,
    /// Clamp for `1 − t` under x-prediction.
    pub t_guard: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 256,
            epochs: 100,
            warmup_epochs: 5,
            max_steps: None,
            label_dropout: 0.1,
            lambda_freq: 1.0,
            lambda_align: 0.5,
            freq_profile: FrequencyProfile::Uniform,
            time_sampler: TimeSampler::LogitNormal { mean: 0.0, std: 1.0 },
            ema_decay: 0.9999,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            align_pooling: AlignPooling::Strict,
            t_guard: 1e-3,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults for the nano model.
    pub fn nano() -> Self {
        Self { lr: 5e-4, batch: 8, epochs: 10, warmup_epochs: 1, ema_decay: 0.998, log_every: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("train.{field}: {msg}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if self.batch == 0 {
            return bad("batch", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return bad("label_dropout", "must lie in [0, 1]");
        }
        if self.lambda_freq < 0.0 || self.lambda_align < 0.0 {
            return bad("lambda_freq", "loss weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip", "must be non-negative");
        }
        if !(self.t_guard > 0.0 && self.t_guard < 1.0) {
            return bad("t_guard", "must lie in (0, 1)");
        }
        if let TimeSampler::LogitNormal { std, .. } = self.time_sampler {
            if !(std > 0.0) {
                return bad("time_sampler.std", "must be positive");
            }
        }
        if let FrequencyProfile::HighPass { strength } = self.freq_profile {
            if strength < 0.0 {
                return bad("freq_profile.strength", "must be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    Euler,
    Heun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub method: SamplerMethod,
    /// Integration stops at `1 − t_guard` under x-prediction.
    pub t_guard: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, method: SamplerMethod::Heun, t_guard: 1e-3 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps: must be at least 1".into()));
        }
        if !(self.t_guard > 0.0 && self.t_guard < 1.0) {
            return Err(Error::Config("sampler.t_guard: must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Classifier-free guidance applied only while `t` lies in `[t_min, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfgPolicy {
    pub scale: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for CfgPolicy {
    fn default() -> Self {
        Self { scale: 1.0, t_min: 0.0, t_max: 1.0 }
    }
}

impl CfgPolicy {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn new(scale: f64, t_min: f64, t_max: f64) -> Result<Self> {
        let policy = Self { scale, t_min, t_max };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 1.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("cfg.scale: {} must be >= 1", self.scale)));
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::Config(format!(
                "cfg.t_min/cfg.t_max: need 0 <= t_min < t_max <= 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    /// Whether the unconditional pass is needed at time `t`.
    pub fn active_at(&self, t: f64) -> bool {
        self.scale != 1.0 && t >= self.t_min && t <= self.t_max
    }
}

/// Procedural toy dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub reference_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_size: 2048, reference_size: 512, seed: 7 }
    }
}

/// Settings for the mock feature extractor used for alignment and toy FID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub tokens: usize,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { tokens: 16, seed: 1234 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_samples: usize,
    pub sweep_scales: Vec<f64>,
    pub fid_tokens: usize,
    pub fid_dim: usize,
    pub fid_seed: u64,
    /// Noise seed for generated samples.
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_samples: 512,
            sweep_scales: vec![1.0, 1.5, 2.0, 3.0],
            fid_tokens: 16,
            fid_dim: 8,
            fid_seed: 99,
            sample_seed: 2024,
        }
    }
}

/// External inputs; unset entries fall back to procedural defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Alignment feature file; mock features are used when unset.
    pub features: Option<PathBuf>,
    /// Checkpoint read by sampling and evaluation; defaults to the run's latest.
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run needs, serialized alongside its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub cfg: CfgPolicy,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::nano(),
            train: TrainConfig::nano(),
            sampler: SamplerConfig::default(),
            cfg: CfgPolicy::default(),
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.cfg.validate()?;
        if self.train.lambda_align > 0.0 && (self.model.registers == 0 || self.model.align_dim == 0) {
            return Err(Error::Config(
                "train.lambda_align: alignment needs model.registers > 0 and model.align_dim > 0".into(),
            ));
        }
        if self.features.tokens == 0 {
            return Err(Error::Config("features.tokens: must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a `section.key=value` override; the value is parsed as a TOML literal,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let path = path.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut tree;
        let keys: Vec<&str> = path.split('.').collect();
        for (depth, key) in keys.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{path}`: `{key}` is not inside a table")))?;
            if depth + 1 == keys.len() {
                table.insert(key.to_string(), value.clone());
                break;
            }
            node = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: Self =
            tree.try_into().map_err(|e: toml::de::Error| Error::Config(format!("override `{path}`: {e}")))?;
        *self = updated;
        Ok(())
    }
}
