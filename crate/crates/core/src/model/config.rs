use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named architecture sizes: `E2` is a two-layer encoder, `Dn` an n-layer
/// decoder, and `vid` adds the video stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSize {
    E2D2,
    E2D6,
    E2vidD2,
    E2vidD6,
}

impl ModelSize {
    pub fn multimodal(self) -> bool {
        matches!(self, Self::E2vidD2 | Self::E2vidD6)
    }

    pub fn decoder_layers(self) -> usize {
        match self {
            Self::E2D2 | Self::E2vidD2 => 2,
            Self::E2D6 | Self::E2vidD6 => 6,
        }
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "E2D2" => Ok(Self::E2D2),
            "E2D6" => Ok(Self::E2D6),
            "E2vidD2" => Ok(Self::E2vidD2),
            "E2vidD6" => Ok(Self::E2vidD6),
            other => Err(Error::Config(format!(
                "model size {other:?} is not one of E2D2, E2D6, E2vidD2, E2vidD6"
            ))),
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub video_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_text_positions: usize,
    pub max_video_positions: usize,
    pub dropout: f64,
    pub video_dim: usize,
    pub multimodal: bool,
}

impl ModelConfig {
    pub fn preset(size: ModelSize, vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            heads: 8,
            text_layers: 2,
            video_layers: 2,
            decoder_layers: size.decoder_layers(),
            ff_dim: 512,
            vocab_size,
            max_text_positions: 241,
            max_video_positions: 40,
            dropout: 0.1,
            video_dim: 128,
            multimodal: size.multimodal(),
        }
    }

    /// Same preset at embedding width `d` with a `4d` feed-forward layer.
    pub fn with_width(mut self, d: usize, heads: usize) -> Self {
        self.d_model = d;
        self.heads = heads;
        self.ff_dim = 4 * d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.text_layers == 0 || self.decoder_layers == 0 || (self.multimodal && self.video_layers == 0) {
            return bad("layer counts must be at least 1".into());
        }
        if self.multimodal && self.video_layers != self.text_layers {
            return bad(format!(
                "co-attention needs equal encoder depths, got text {} and video {}",
                self.text_layers, self.video_layers
            ));
        }
        if self.vocab_size <= crate::tokenizer::UNK as usize {
            return bad(format!("vocab_size {} leaves no room for ordinary tokens", self.vocab_size));
        }
        if self.ff_dim == 0 || self.max_text_positions == 0 || self.video_dim == 0 || self.max_video_positions == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("d_model", self.d_model.to_string());
        put("heads", self.heads.to_string());
        put("text_layers", self.text_layers.to_string());
        put("video_layers", self.video_layers.to_string());
        put("decoder_layers", self.decoder_layers.to_string());
        put("ff_dim", self.ff_dim.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("max_text_positions", self.max_text_positions.to_string());
        put("max_video_positions", self.max_video_positions.to_string());
        put("dropout", self.dropout.to_string());
        put("video_dim", self.video_dim.to_string());
        put("multimodal", self.multimodal.to_string());
        m
    }

    pub fn from_pairs(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<V> {
            let raw = m.get(k).ok_or_else(|| Error::Checkpoint(format!("config is missing {k}")))?;
            raw.parse()
                .map_err(|_| Error::Checkpoint(format!("config value {k}={raw:?} does not parse")))
        }
        let c = Self {
            d_model: get(m, "d_model")?,
            heads: get(m, "heads")?,
            text_layers: get(m, "text_layers")?,
            video_layers: get(m, "video_layers")?,
            decoder_layers: get(m, "decoder_layers")?,
            ff_dim: get(m, "ff_dim")?,
            vocab_size: get(m, "vocab_size")?,
            max_text_positions: get(m, "max_text_positions")?,
            max_video_positions: get(m, "max_video_positions")?,
            dropout: get(m, "dropout")?,
            video_dim: get(m, "video_dim")?,
            multimodal: get(m, "multimodal")?,
        };
        c.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(c)
    }
}
