use std::fmt;
use std::path::{Path, PathBuf};

use mmcap_core::corpus::{GAP_THRESHOLD_SECS, MAX_SEGMENT_WORDS};
use mmcap_core::decode::{DEFAULT_BEAM, DEFAULT_MAX_LEN};
use mmcap_core::model::{ModelConfig, ModelSize};
use mmcap_core::objectives::{LrConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_VOCAB_SIZE: usize = 8192;
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// A problem with the run configuration. Reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub segment: SegmentConfig,
    #[serde(default)]
    pub bpe: BpeConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Input and output locations. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Raw timed transcripts for `segment`.
    pub asr: Option<PathBuf>,
    /// Segment file for training or prediction.
    pub segments: Option<PathBuf>,
    /// Unpaired caption-style text (cap-text records).
    pub cap_text: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Text files for `train-bpe`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bpe_inputs: Vec<PathBuf>,
    /// Model used by `predict`.
    pub checkpoint: Option<PathBuf>,
    /// Weights that seed `finetune`.
    pub init_checkpoint: Option<PathBuf>,
    /// Checkpoint of an interrupted run of the same command.
    pub resume: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub tags: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub gap: f64,
    pub max_len: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            gap: GAP_THRESHOLD_SECS,
            max_len: MAX_SEGMENT_WORDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpeConfig {
    pub size: usize,
}

impl Default for BpeConfig {
    fn default() -> Self {
        Self { size: DEFAULT_VOCAB_SIZE }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub size: Option<ModelSize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub video_dim: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `standard`, `constant:<tag>` or `agreement`.
    pub mode: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mode: "standard".into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    Standard,
    Constant(String),
    Agreement,
}

impl EvalConfig {
    pub fn parse_mode(&self) -> anyhow::Result<EvalMode> {
        match self.mode.as_str() {
            "standard" => Ok(EvalMode::Standard),
            "agreement" => Ok(EvalMode::Agreement),
            m => match m.strip_prefix("constant:") {
                Some(tag) if !tag.trim().is_empty() => Ok(EvalMode::Constant(tag.to_string())),
                _ => Err(config_err(format!(
                    "eval.mode {m:?} is not one of standard, constant:<tag>, agreement"
                ))),
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.data.resolve_paths(&base);
        Ok(cfg)
    }

    /// Settings for a quick run on one CPU: two short epochs of a narrow
    /// model with a fast warmup.
    pub fn apply_desk(&mut self) {
        if let Some(train) = self.train.as_mut() {
            train.epochs = 2;
            train.iterations_per_epoch = 50;
            train.lr = LrConfig {
                lr_max: 1e-3,
                warmup: 100,
                ..train.lr
            };
        }
        self.model.d_model = Some(64);
        self.model.heads = Some(4);
        self.bpe.size = self.bpe.size.min(2000);
    }

    pub fn require_train(&self) -> anyhow::Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| config_err("missing [train] section"))
    }

    /// Model shape for a vocabulary of `vocab_size`, with every default
    /// written back so the echoed config is complete.
    pub fn resolve_model(&mut self, vocab_size: usize) -> anyhow::Result<ModelConfig> {
        let size = self.model.size.ok_or_else(|| config_err("model.size is required"))?;
        let preset = ModelConfig::preset(size, vocab_size);
        let (d, heads) = (self.model.d_model.unwrap_or(preset.d_model), self.model.heads.unwrap_or(preset.heads));
        let mut m = preset.with_width(d, heads);
        m.video_dim = self.model.video_dim.unwrap_or(m.video_dim);
        m.dropout = self.model.dropout.unwrap_or(m.dropout);
        self.model.d_model = Some(m.d_model);
        self.model.heads = Some(m.heads);
        self.model.video_dim = Some(m.video_dim);
        self.model.dropout = Some(m.dropout);
        m.validate().map_err(|e| config_err(format!("model: {e}")))?;
        Ok(m)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = base.join(p);
    std::path::absolute(&joined).unwrap_or(joined)
}

impl DataConfig {
    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.asr,
            &mut self.segments,
            &mut self.cap_text,
            &mut self.vocab,
            &mut self.checkpoint,
            &mut self.init_checkpoint,
            &mut self.resume,
            &mut self.predictions,
            &mut self.references,
            &mut self.tags,
        ]
        .into_iter()
        .flatten()
        {
            *p = absolute(base, p);
        }
        for p in &mut self.bpe_inputs {
            *p = absolute(base, p);
        }
    }

    /// Makes command-line paths absolute so the echo is location independent.
    pub fn absolutize(&mut self) {
        let cwd = std::env::current_dir().unwrap_or_default();
        self.resolve_paths(&cwd);
    }
}

pub fn require<'a>(p: &'a Option<PathBuf>, field: &str, command: &str) -> anyhow::Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| config_err(format!("data.{field} is required for {command}")))
}
