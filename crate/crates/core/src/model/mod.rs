//! Separate-modality encoder-decoder: text and video encoders with
//! per-layer co-attention, a text decoder over both, and binary CLS heads.

mod checkpoint;
mod config;
mod graph;
mod init;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, ModelSize};
pub use graph::{ClsTask, DecoderInput, EncoderOutput, EncoderStates, Graph};
pub use init::{check_params, init_from, init_params, init_tensor, is_video_param, param_specs, Init, ParamSpec, INIT_STD};
