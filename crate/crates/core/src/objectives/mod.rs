//! Masked span reconstruction, the pretraining and finetuning schedules,
//! segment-pair sampling, single training steps and the epoch loop.

mod data;
mod eval;
mod mass;
mod pairs;
mod schedule;
mod step;
mod trainer;

pub use data::{truncate_caption, truncate_text, TrainSegment, TrainingData};
pub use eval::{batch_accuracy, batch_loss};
pub use mass::{build_mass_example, sample_mass_span, MassExample, MASK_RATIO};
pub use pairs::{ordering_label, sample_alignment_pair, sample_ordering_pair, Pair, MIN_GAP};
pub use schedule::{make_schedule, Schedule, StepKind, Strategy, FINETUNE_EPOCHS, ITERATIONS_PER_EPOCH, PRETRAIN_EPOCHS};
pub use step::{
    binary_batch, caption_batch, compute_gradients, mass_batch, run_training_step, step_loss, Sampler, SamplerConfig,
    StepBatch, StepResult, Target,
};
pub use trainer::{rng_stream, EpochSummary, LogRow, LrConfig, Stream, TrainConfig, TrainLog, Trainer, HIDE_FRACTION};
