//! Experiment configuration. Layers, lowest precedence first: preset, config
//! file, `PSL__SECTION__KEY` environment variables, command-line `--set`
//! pairs and dedicated flags. Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use figment::providers::{Env, Format, Toml};
use figment::Figment;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use psl_core::engine::TrainMode;
use psl_core::tasks::TaskFamily;

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "PSL__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schema version; must equal 1.
    pub version: u32,
    pub run_id: String,
    /// Runs are written to `<output_dir>/<run_id>/`.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Zero wall-clock fields in the training log so reruns are byte-identical.
    #[serde(default = "yes")]
    pub deterministic: bool,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub backbone: BackboneSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// The binary CIFAR-10 release (`data_batch_*.bin`, `test_batch.bin`).
    Cifar10,
    /// The binary STL-10 release (`train_X.bin`, `train_y.bin`, ...).
    Stl10,
    /// `root/train/<class>/*` and `root/test/<class>/*` image folders.
    Folder,
    /// Generated shape images; needs no files.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetKind,
    /// Directory holding the dataset files; unused for `synthetic`.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Image side for the folder loader and the synthetic generator.
    #[serde(default = "default_side")]
    pub image_side: usize,
    /// Keep only the first N training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default = "default_synthetic_train")]
    pub synthetic_train: usize,
    #[serde(default = "default_synthetic_test")]
    pub synthetic_test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub stem_width: usize,
    /// Output channels of each block; every block after the first halves
    /// the resolution.
    pub widths: Vec<usize>,
    /// Residual units per block.
    pub units: usize,
    pub seed: u64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            stem_width: 16,
            widths: vec![16, 32, 64, 128, 256],
            units: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Jigsaw,
    Rotation,
    Contrastive,
}

impl From<FamilyName> for TaskFamily {
    fn from(f: FamilyName) -> Self {
        match f {
            FamilyName::Jigsaw => TaskFamily::Jigsaw,
            FamilyName::Rotation => TaskFamily::Rotation,
            FamilyName::Contrastive => TaskFamily::Contrastive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum ModeName {
    #[serde(rename = "PSL")]
    Psl,
    #[serde(rename = "SL")]
    Sl,
    #[serde(rename = "PSL_f")]
    PslF,
    #[serde(rename = "E2E")]
    E2e,
}

impl From<ModeName> for TrainMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Psl => TrainMode::Psl,
            ModeName::Sl => TrainMode::Sl,
            ModeName::PslF => TrainMode::PslF,
            ModeName::E2e => TrainMode::E2e,
        }
    }
}

impl From<TrainMode> for ModeName {
    fn from(m: TrainMode) -> Self {
        match m {
            TrainMode::Psl => ModeName::Psl,
            TrainMode::Sl => ModeName::Sl,
            TrainMode::PslF => ModeName::PslF,
            TrainMode::E2e => ModeName::E2e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub family: FamilyName,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    /// Blocks per stage window.
    #[serde(default = "default_stage_width")]
    pub stage_width: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Epochs per stage, split 1/3, 1/3, 1/6, 1/6 with a rate drop after each
    /// phase.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Explicit phase lengths; replaces `epochs` when set.
    #[serde(default)]
    pub phases: Option<Vec<usize>>,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "yes")]
    pub bias_decay_exempt: bool,
    /// Caps minibatches per epoch.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    /// Side of rotation inputs.
    #[serde(default = "default_side")]
    pub image_size: usize,
    #[serde(default)]
    pub jigsaw: JigsawSection,
    #[serde(default)]
    pub contrastive: ContrastiveSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct JigsawSection {
    /// Nested permutation-set sizes, easiest first.
    pub levels: Vec<usize>,
    pub permutation_seed: u64,
    pub min_hamming: usize,
    /// Load the largest set from a CSV written by `psl permset` instead of
    /// generating it.
    pub permutation_csv: Option<PathBuf>,
    pub window: usize,
    pub grid: usize,
    pub cell: usize,
    pub tile: usize,
    /// Shorter side images are resized to before the window crop.
    pub resize: usize,
    pub normalize_tiles: bool,
}

impl Default for JigsawSection {
    fn default() -> Self {
        JigsawSection {
            levels: vec![500, 1000, 2000],
            permutation_seed: 0,
            min_hamming: 3,
            permutation_csv: None,
            window: 96,
            grid: 3,
            cell: 32,
            tile: 24,
            resize: 110,
            normalize_tiles: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveSection {
    pub size: usize,
    pub crop_scale: (f32, f32),
    pub color_strength: f32,
    pub color_p: f32,
    pub grayscale_p: f32,
    pub blur_p: f32,
    pub blur_sigma: (f32, f32),
    pub sobel_p: f32,
    pub temperature: f64,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        ContrastiveSection {
            size: 32,
            crop_scale: (0.2, 1.0),
            color_strength: 0.5,
            color_p: 0.8,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            sobel_p: 0.1,
            temperature: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolName {
    FrozenLinear,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocol: ProtocolName,
    /// Blocks to probe; empty means all.
    pub blocks: Vec<String>,
    /// Also probe a randomly initialized backbone of the same shape.
    pub baseline: bool,
    pub probe: ProbeSection,
    pub finetune: FinetuneSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            protocol: ProtocolName::FrozenLinear,
            blocks: Vec::new(),
            baseline: true,
            probe: ProbeSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let s = psl_core::eval::ProbeSchedule::default();
        ProbeSection {
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// Labeled fractions, each drawn class-balanced from the training split.
    pub fractions: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub flip_p: f64,
    pub seed: u64,
    /// Repeat each finetune from a random initialization.
    pub random_init_baseline: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let s = psl_core::eval::FinetuneSchedule::default();
        FinetuneSection {
            fractions: vec![0.01, 0.1],
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            flip_p: s.flip_p,
            seed: s.seed,
            random_init_baseline: true,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn yes() -> bool {
    true
}
fn default_side() -> usize {
    32
}
fn default_synthetic_train() -> usize {
    1200
}
fn default_synthetic_test() -> usize {
    600
}
fn default_mode() -> ModeName {
    ModeName::Psl
}
fn default_stage_width() -> usize {
    3
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    15
}
fn default_lr() -> f64 {
    0.05
}
fn default_decay() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}

/// Parses a `--set` value as a TOML scalar or array, falling back to a bare
/// string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Where a configuration comes from.
#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
    /// Read `PSL__*` variables from the process environment.
    pub env: bool,
    /// `section.key` paths with values, applied last in order.
    pub overrides: Vec<(String, toml::Value)>,
}

impl Sources {
    pub fn set(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.overrides.push((key.to_string(), value.into()));
    }
}

pub fn resolve(sources: &Sources) -> anyhow::Result<ExperimentConfig> {
    if sources.preset.is_none() && sources.file.is_none() {
        bail!("no configuration given: pass --config FILE and/or --preset NAME");
    }
    let mut fig = Figment::new();
    if let Some(name) = &sources.preset {
        fig = fig.merge(Toml::string(crate::presets::get(name)?));
    }
    if let Some(path) = &sources.file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        fig = fig.merge(Toml::string(&text));
    }
    if sources.env {
        fig = fig.merge(Env::prefixed(ENV_PREFIX).split("__"));
    }
    for (key, value) in &sources.overrides {
        fig = fig.merge((key.as_str(), value));
    }
    let cfg: ExperimentConfig = fig.extract().map_err(|e| {
        let msgs: Vec<String> = e.into_iter().map(|e| e.to_string()).collect();
        anyhow::anyhow!("invalid configuration: {}", msgs.join("; "))
    })?;
    if cfg.version != CONFIG_VERSION {
        bail!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version);
    }
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing config")?;
        if cfg.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form with the run location blanked, so
    /// the same experiment hashes alike wherever it is written. Stamped on
    /// every run artifact.
    pub fn hash(&self) -> String {
        let mut located = self.clone();
        located.run_id.clear();
        located.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&located).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Root directory of the dataset, required for every loader but the
    /// synthetic one.
    pub fn dataset_root(&self) -> anyhow::Result<Option<&Path>> {
        match (self.dataset.name, &self.dataset.root) {
            (DatasetKind::Synthetic, _) => Ok(None),
            (_, None) => bail!("dataset.root is required for {:?}", self.dataset.name),
            (_, Some(root)) if !root.is_dir() => bail!("dataset root {} does not exist", root.display()),
            (_, Some(root)) => Ok(Some(root)),
        }
    }
}

pub fn json_schema() -> String {
    let schema = schemars::schema_for!(ExperimentConfig);
    let mut text = serde_json::to_string_pretty(&schema).expect("schema serializes");
    text.push('\n');
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_values_parse_as_toml() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(parse_value("PSL_f"), toml::Value::String("PSL_f".into()));
        assert_eq!(parse_value("[1, 2]").as_array().unwrap().len(), 2);
    }

    #[test]
    fn layers_apply_in_order_and_unknown_keys_fail() {
        let mut s = Sources {
            preset: Some("desk-rotation".into()),
            ..Sources::default()
        };
        let base = resolve(&s).unwrap();
        s.set("train.epochs", 4);
        s.set("train.mode", "SL");
        let cfg = resolve(&s).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.mode, ModeName::Sl);
        assert_ne!(cfg.hash(), base.hash());
        let mut moved = cfg.clone();
        moved.run_id = "elsewhere".into();
        moved.output_dir = "/tmp/x".into();
        assert_eq!(moved.hash(), cfg.hash());
        s.set("train.epochz", 1);
        assert!(resolve(&s).is_err());
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn version_is_checked() {
        let mut s = Sources {
            preset: Some("desk-jigsaw".into()),
            ..Sources::default()
        };
        s.set("version", 2);
        assert!(resolve(&s).unwrap_err().to_string().contains("version"));
    }
}
