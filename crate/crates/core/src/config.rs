//! Run and model configuration.
//!
//! A run is fully determined by one TOML file with dotted section keys
//! (`lora.rank = 32`, `toggles.psg = true`, ...). CLI `--set key=value`
//! pairs override individual entries after the file is parsed.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraStrategy {
    Full,
    QkvOnly,
    Deep,
    Shallow,
    Sparse50,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsgVariant {
    AsymGate,
    AnchorSuppressed,
    None,
    Subtraction,
    Concatenation,
    CrossAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalProtocol {
    Intrinsic,
    NullPromptBaseline,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Embedding width C. Must be divisible by `heads` and by 4 (channel
    /// bottlenecks use C/2 and C/4).
    pub embed_dim: usize,
    pub image_size: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Sparse prompt slots per branch (K).
    pub sparse_slots: usize,
    /// Mask tokens (K_m).
    pub mask_tokens: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed_dim: 16,
            image_size: 64,
            num_blocks: 4,
            heads: 4,
            mlp_dim: 32,
            sparse_slots: 2,
            mask_tokens: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    /// Scale numerator; applied as `alpha / rank`. Defaults to `rank`
    /// (unit scale) when omitted.
    pub alpha: Option<f64>,
    pub strategy: LoraStrategy,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            enabled: true,
            rank: 4,
            alpha: None,
            strategy: LoraStrategy::Full,
        }
    }
}

impl LoraConfig {
    pub fn alpha_value(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub spg: bool,
    pub psg: bool,
    pub lateral: bool,
    pub refine: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            spg: true,
            psg: true,
            lateral: true,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_spg: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_spg: 1.0,
            lambda_c: 1.0,
            lambda_r: 1.0,
        }
    }
}

/// All architectural hyperparameters of one model instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub model: ModelDims,
    pub lora: LoraConfig,
    pub toggles: Toggles,
    pub psg_variant: PsgVariant,
    pub loss: LossWeights,
    /// Replace propagated output tokens with the decoder's own learnable
    /// mask tokens (token-substitution ablation).
    pub use_default_mask_tokens: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model: ModelDims::default(),
            lora: LoraConfig::default(),
            toggles: Toggles::default(),
            psg_variant: PsgVariant::AsymGate,
            loss: LossWeights::default(),
            use_default_mask_tokens: false,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Validate invariants and normalize (`lambda_r` is forced to zero
    /// when the refinement head is disabled).
    pub fn validated(mut self) -> Result<ModelConfig> {
        let d = &self.model;
        if d.embed_dim % d.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                d.embed_dim, d.heads
            )));
        }
        if d.embed_dim % 4 != 0 || d.embed_dim < 8 {
            return Err(Error::Config(format!(
                "embed_dim {} must be >= 8 and divisible by 4",
                d.embed_dim
            )));
        }
        if d.image_size % 16 != 0 || d.image_size == 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 16",
                d.image_size
            )));
        }
        if d.num_blocks == 0 || d.num_blocks % 2 != 0 {
            return Err(Error::Config(format!(
                "num_blocks {} must be positive and even (two stages)",
                d.num_blocks
            )));
        }
        if d.mask_tokens == 0 {
            return Err(Error::Config("mask_tokens must be >= 1".into()));
        }
        if self.lora.enabled && self.lora.rank == 0 {
            return Err(Error::Config("lora.rank must be >= 1 when enabled".into()));
        }
        if self.lora.alpha_value() <= 0.0 || !self.lora.alpha_value().is_finite() {
            return Err(Error::Config("lora.alpha must be finite and positive".into()));
        }
        if !self.toggles.refine {
            self.loss.lambda_r = 0.0;
        }
        for (name, v) in [
            ("lambda_spg", self.loss.lambda_spg),
            ("lambda_c", self.loss.lambda_c),
            ("lambda_r", self.loss.lambda_r),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(self)
    }

    /// Spatial side of the image embedding E (1/16 of the input).
    pub fn embed_hw(&self) -> usize {
        self.model.image_size / 16
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            name: "adamw".into(),
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Hard cap on optimizer steps; `0` means no cap.
    pub max_steps: usize,
    /// Deterministic per-epoch shuffling of the sample order.
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            batch_size: 1,
            max_steps: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Directory with `images/` and `masks/`. When absent, training falls
    /// back to the `[synth]` generator.
    pub train_dir: Option<String>,
    pub eval_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub delta: f64,
    pub coverage_min: f64,
    pub coverage_max: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_train: 8,
            n_eval: 0,
            delta: 0.4,
            coverage_min: 0.1,
            coverage_max: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub protocol: EvalProtocol,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            protocol: EvalProtocol::Intrinsic,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs/default".into() }
    }
}

/// One training/evaluation run, as parsed from a config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelDims,
    pub lora: LoraConfig,
    pub toggles: Toggles,
    pub psg: PsgSection,
    pub loss: LossWeights,
    pub use_default_mask_tokens: bool,
    pub optimizer: OptimConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PsgSection {
    pub variant: PsgVariant,
}

impl Default for PsgSection {
    fn default() -> Self {
        PsgSection {
            variant: PsgVariant::AsymGate,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig {
            model: self.model,
            lora: self.lora,
            toggles: self.toggles,
            psg_variant: self.psg.variant,
            loss: self.loss,
            use_default_mask_tokens: self.use_default_mask_tokens,
            seed: if self.seed == 0 { 7 } else { self.seed },
        }
        .validated()
    }

    pub fn validated(self) -> Result<RunConfig> {
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config("optimizer.lr must be positive".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        let s = &self.synth;
        if !(0.0 <= s.coverage_min && s.coverage_min <= s.coverage_max && s.coverage_max <= 0.5) {
            return Err(Error::Config(
                "synth coverage must satisfy 0 <= min <= max <= 0.5".into(),
            ));
        }
        if !(0.0..=1.0).contains(&s.delta) {
            return Err(Error::Config("synth.delta must lie in [0, 1]".into()));
        }
        self.model_config()?;
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validated()
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Apply `key=value` overrides (dotted paths) on top of this config.
    pub fn with_overrides(&self, sets: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = toml::Table::try_from(self.clone())
            .map_err(|e| Error::Config(format!("config serialize: {e}")))?;
        for set in sets {
            let (key, value) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{set}`")))?;
            let parsed: toml::Value = value
                .trim()
                .parse()
                .unwrap_or_else(|_| toml::Value::String(value.trim().to_string()));
            insert_path(&mut table, key.trim(), parsed)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e| Error::Config(format!("config after overrides: {e}")))?;
        cfg.validated()
    }
}

fn insert_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-table")))?;
    }
    Err(Error::Config(format!("empty override path `{path}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default().validated().unwrap();
        assert_eq!(cfg.model.embed_dim, 16);
        assert!(cfg.model_config().is_ok());
    }

    #[test]
    fn dotted_keys_parse() {
        let cfg = RunConfig::from_toml_str(
            "seed = 3\nlora.rank = 8\nlora.strategy = \"qkv_only\"\ntoggles.refine = false\n",
        )
        .unwrap();
        assert_eq!(cfg.lora.rank, 8);
        assert_eq!(cfg.lora.strategy, LoraStrategy::QkvOnly);
        // lambda_r forced to zero when refine is off
        assert_eq!(cfg.model_config().unwrap().loss.lambda_r, 0.0);
    }

    #[test]
    fn unknown_strategy_is_a_config_error() {
        let err = RunConfig::from_toml_str("lora.strategy = \"everything\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let base = RunConfig::default();
        let cfg = base
            .with_overrides(&["lora.rank=16".into(), "psg.variant=cross_attn".into()])
            .unwrap();
        assert_eq!(cfg.lora.rank, 16);
        assert_eq!(cfg.psg.variant, PsgVariant::CrossAttn);
        assert!(base
            .with_overrides(&["model.image_size=30".into()])
            .is_err());
    }

    #[test]
    fn indivisible_image_size_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.model.image_size = 100;
        assert!(matches!(cfg.validated(), Err(Error::Config(_))));
    }
}
