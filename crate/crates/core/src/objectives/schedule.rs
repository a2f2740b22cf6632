use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ITERATIONS_PER_EPOCH: usize = 3125;
pub const PRETRAIN_EPOCHS: usize = 200;
pub const FINETUNE_EPOCHS: usize = 30;

/// One kind of optimizer update: its encoder inputs and its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StepKind {
    CapToCap,
    AsrToAsr,
    /// Masked ASR reconstruction with video; `hide` enables per-example
    /// hiding of the text-encoder output from the decoder.
    AsrVideoToAsr { hide: bool },
    Align,
    Order,
    AsrToCap,
    CapToAsr,
    AsrVideoToCap,
    CapVideoToAsr,
}

impl StepKind {
    pub fn uses_video(self) -> bool {
        matches!(
            self,
            Self::AsrVideoToAsr { .. } | Self::Align | Self::Order | Self::AsrVideoToCap | Self::CapVideoToAsr
        )
    }

    pub fn is_mass(self) -> bool {
        matches!(self, Self::CapToCap | Self::AsrToAsr | Self::AsrVideoToAsr { .. })
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Self::Align | Self::Order)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::CapToCap => "CAP->CAP",
            Self::AsrToAsr => "ASR->ASR",
            Self::AsrVideoToAsr { hide: false } => "ASR+video->ASR",
            Self::AsrVideoToAsr { hide: true } => "ASR+video->ASR[drop]",
            Self::Align => "ALIGN",
            Self::Order => "ORDER",
            Self::AsrToCap => "ASR->CAP",
            Self::CapToAsr => "CAP->ASR",
            Self::AsrVideoToCap => "ASR+video->CAP",
            Self::CapVideoToAsr => "CAP+video->ASR",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "MASS")]
    Mass,
    #[serde(rename = "MASSvid")]
    MassVid,
    #[serde(rename = "MASSdrop")]
    MassDrop,
    #[serde(rename = "MASSalign")]
    MassAlign,
    UniD,
    BiD,
    BiDalt,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Self::Mass,
        Self::MassVid,
        Self::MassDrop,
        Self::MassAlign,
        Self::UniD,
        Self::BiD,
        Self::BiDalt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mass => "MASS",
            Self::MassVid => "MASSvid",
            Self::MassDrop => "MASSdrop",
            Self::MassAlign => "MASSalign",
            Self::UniD => "UniD",
            Self::BiD => "BiD",
            Self::BiDalt => "BiDalt",
        }
    }

    pub fn is_pretraining(self) -> bool {
        matches!(self, Self::Mass | Self::MassVid | Self::MassDrop | Self::MassAlign)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("strategy {s:?} is not one of MASS, MASSvid, MASSdrop, MASSalign, UniD, BiD, BiDalt")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub strategy: Strategy,
    /// Executed in order once per iteration, one optimizer update each.
    pub steps: Vec<StepKind>,
    pub iterations_per_epoch: usize,
    pub epochs: usize,
}

/// The per-iteration step list of a strategy. `multimodal` selects the
/// ASR+video variants of the finetuning objectives.
pub fn make_schedule(strategy: Strategy, multimodal: bool) -> Result<Schedule> {
    use StepKind::*;
    let needs_video = |s: Strategy| {
        Err(Error::Config(format!("strategy {s} needs a multimodal model (E2vidD2 or E2vidD6)")))
    };
    let steps = match strategy {
        Strategy::Mass => vec![CapToCap, AsrToAsr],
        Strategy::MassVid if multimodal => vec![CapToCap, AsrVideoToAsr { hide: false }],
        Strategy::MassDrop if multimodal => vec![CapToCap, AsrVideoToAsr { hide: true }],
        Strategy::MassAlign if multimodal => vec![CapToCap, AsrToAsr, Align, Order],
        Strategy::UniD if multimodal => vec![AsrVideoToCap],
        Strategy::UniD => vec![AsrToCap],
        Strategy::BiD if multimodal => vec![AsrVideoToCap, CapToAsr],
        Strategy::BiD => vec![AsrToCap, CapToAsr],
        Strategy::BiDalt if multimodal => vec![AsrVideoToCap, CapVideoToAsr],
        s => return needs_video(s),
    };
    Ok(Schedule {
        strategy,
        steps,
        iterations_per_epoch: ITERATIONS_PER_EPOCH,
        epochs: if strategy.is_pretraining() { PRETRAIN_EPOCHS } else { FINETUNE_EPOCHS },
    })
}
