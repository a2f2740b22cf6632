use mmcap_tensor::{ParamStore, Scalar, Tape};

use super::step::{step_loss, StepBatch, Target};
use crate::error::Result;
use crate::model::{Graph, ModelConfig};

/// `(correct, total)` on one batch in inference mode: teacher-forced argmax
/// tokens for sequence targets, thresholded probabilities for binary ones.
pub fn batch_accuracy<T: Scalar>(batch: &StepBatch, config: &ModelConfig, params: &ParamStore<T>) -> Result<(usize, usize)> {
    let tape = Tape::new();
    let mut graph = Graph::eval(&tape, params, config);
    let enc = graph.encode(&batch.encoder)?;
    match &batch.target {
        Target::Tokens {
            decoder,
            targets,
            loss_mask,
            text_visible,
        } => {
            let logits = graph.decode(decoder, &enc, text_visible)?.value();
            let vocab = config.vocab_size;
            let mut hits = 0;
            for (r, row) in logits.chunks(vocab).enumerate().filter(|(r, _)| loss_mask[*r]) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                    .0;
                hits += usize::from(best == targets[r]);
            }
            Ok((hits, loss_mask.iter().filter(|&&m| m).count()))
        }
        Target::Binary { task, labels } => {
            let logits = graph.cls_logits(*task, &enc)?.value();
            let hits = logits
                .iter()
                .zip(labels)
                .filter(|(&z, &l)| (z > T::zero()) == (l > 0.5))
                .count();
            Ok((hits, labels.len()))
        }
    }
}

/// Inference-mode loss of a batch.
pub fn batch_loss<T: Scalar>(batch: &StepBatch, config: &ModelConfig, params: &ParamStore<T>) -> Result<f64> {
    let tape = Tape::new();
    let mut graph = Graph::eval(&tape, params, config);
    Ok(step_loss(batch, &mut graph)?.item().as_f64())
}
