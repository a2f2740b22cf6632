use std::collections::BTreeMap;

use mmcap_tensor::{Gradients, OptimizerState, ParamStore, Scalar, Tape, Var};
use rand::{Rng, RngCore};

use super::data::{TrainSegment, TrainingData};
use super::mass::{build_mass_example, sample_mass_span};
use super::pairs::{sample_alignment_pair, sample_ordering_pair};
use super::schedule::StepKind;
use crate::corpus::{make_batch, Batch, Cycler, EncoderInput};
use crate::error::{Error, Result};
use crate::model::{ClsTask, DecoderInput, Graph, ModelConfig};
use crate::tokenizer::{Style, BOS, EOS};

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Teacher-forced token prediction; `targets[r]` is scored where `loss_mask[r]`.
    Tokens {
        decoder: DecoderInput,
        targets: Vec<usize>,
        loss_mask: Vec<bool>,
        text_visible: Vec<bool>,
    },
    Binary { task: ClsTask, labels: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub kind: StepKind,
    pub encoder: Batch,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub hide_fraction: f64,
}

fn text_input(tokens: &[u32], style: Style, frames: Option<&crate::corpus::FrameFeatures>) -> EncoderInput {
    EncoderInput {
        tokens: tokens.to_vec(),
        style,
        frames: frames.cloned(),
    }
}

/// Builds right-shifted decoder rows (`BOS` + row) and targets (row + `EOS`).
fn sequence_target(rows: &[&[u32]], style: Style, text_visible: Vec<bool>) -> Target {
    let inputs: Vec<Vec<u32>> = rows.iter().map(|r| std::iter::once(BOS).chain(r.iter().copied()).collect()).collect();
    let decoder = DecoderInput::from_rows(&inputs, style);
    let mut targets = vec![0; decoder.batch * decoder.len];
    for (b, r) in rows.iter().enumerate() {
        for (i, &t) in r.iter().chain(std::iter::once(&EOS)).enumerate() {
            targets[b * decoder.len + i] = t as usize;
        }
    }
    Target::Tokens {
        loss_mask: decoder.mask.clone(),
        decoder,
        targets,
        text_visible,
    }
}

/// Encoder/decoder batch for the finetuning kinds over captioned segments.
pub fn caption_batch(kind: StepKind, segments: &[&TrainSegment], video_dim: usize) -> Result<StepBatch> {
    let caption = |s: &TrainSegment| -> Result<Vec<u32>> {
        s.caption
            .clone()
            .ok_or_else(|| Error::Data(format!("segment {}#{} has no caption", s.video, s.index)))
    };
    let captions = segments.iter().map(|s| caption(s)).collect::<Result<Vec<_>>>()?;
    let frames = |s: &TrainSegment| if kind.uses_video() { s.frames.clone() } else { None };
    let (inputs, rows, style): (Vec<EncoderInput>, Vec<&[u32]>, Style) = match kind {
        StepKind::AsrToCap | StepKind::AsrVideoToCap => (
            segments
                .iter()
                .map(|s| EncoderInput { tokens: s.asr.clone(), style: Style::Asr, frames: frames(s) })
                .collect(),
            captions.iter().map(Vec::as_slice).collect(),
            Style::Cap,
        ),
        StepKind::CapToAsr | StepKind::CapVideoToAsr => (
            segments
                .iter()
                .zip(&captions)
                .map(|(s, c)| EncoderInput { tokens: c.clone(), style: Style::Cap, frames: frames(s) })
                .collect(),
            segments.iter().map(|s| &s.asr[..s.asr.len().min(crate::corpus::MAX_TEXT_TOKENS - 1)]).collect(),
            Style::Asr,
        ),
        other => return Err(Error::Contract(format!("{other} is not a captioning step"))),
    };
    Ok(StepBatch {
        kind,
        encoder: make_batch(&inputs, video_dim),
        target: sequence_target(&rows, style, vec![true; segments.len()]),
    })
}

/// Span-masked reconstruction batch. `hidden[b]` hides the text states of
/// example `b` from the decoder.
pub fn mass_batch<R: Rng + ?Sized>(
    kind: StepKind,
    texts: &[(&[u32], Style, Option<&crate::corpus::FrameFeatures>)],
    hidden: &[bool],
    mask_ratio: f64,
    video_dim: usize,
    rng: &mut R,
) -> Result<StepBatch> {
    let mut inputs = Vec::with_capacity(texts.len());
    let mut dec_rows = Vec::with_capacity(texts.len());
    let mut starts = Vec::with_capacity(texts.len());
    let mut styles = Vec::with_capacity(texts.len());
    let mut target_rows = Vec::with_capacity(texts.len());
    for &(ids, style, frames) in texts {
        let span = sample_mass_span(ids.len(), mask_ratio, rng)
            .ok_or_else(|| Error::Contract("masked reconstruction needs at least two tokens".into()))?;
        let ex = build_mass_example(ids, span);
        inputs.push(text_input(&ex.encoder, style, if kind.uses_video() { frames } else { None }));
        // Encoder position 0 holds CLS, so token k sits at position k + 1.
        starts.push(ex.start + 1);
        styles.push(style);
        dec_rows.push(ex.decoder_input);
        target_rows.push(ex.targets);
    }
    let decoder = DecoderInput::from_rows_at(&dec_rows, &starts, styles);
    let mut targets = vec![0; decoder.batch * decoder.len];
    for (b, row) in target_rows.iter().enumerate() {
        for (i, &t) in row.iter().enumerate() {
            targets[b * decoder.len + i] = t as usize;
        }
    }
    Ok(StepBatch {
        kind,
        encoder: make_batch(&inputs, video_dim),
        target: Target::Tokens {
            loss_mask: decoder.mask.clone(),
            decoder,
            targets,
            text_visible: hidden.iter().map(|h| !h).collect(),
        },
    })
}

/// Alignment or ordering batch from `(asr segment, frame segment, label)` triples.
pub fn binary_batch(kind: StepKind, segments: &[TrainSegment], pairs: &[(usize, usize, f32)], video_dim: usize) -> Result<StepBatch> {
    let task = match kind {
        StepKind::Align => ClsTask::Alignment,
        StepKind::Order => ClsTask::Ordering,
        other => return Err(Error::Contract(format!("{other} is not a classification step"))),
    };
    let inputs: Vec<EncoderInput> = pairs
        .iter()
        .map(|&(i, j, _)| text_input(&segments[i].asr, Style::Asr, segments[j].frames.as_ref()))
        .collect();
    Ok(StepBatch {
        kind,
        encoder: make_batch(&inputs, video_dim),
        target: Target::Binary {
            task,
            labels: pairs.iter().map(|p| p.2).collect(),
        },
    })
}

/// Per-kind pools of eligible items, each cycled in a shuffled order.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    video_dim: usize,
    pools: BTreeMap<StepKind, (Vec<usize>, Cycler)>,
    /// Videos with enough framed segments for distant pairs, as segment indices.
    videos: Vec<Vec<usize>>,
}

impl Sampler {
    pub fn new(data: &TrainingData, steps: &[StepKind], config: SamplerConfig, video_dim: usize) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let seg = &data.segments;
        let mut pools = BTreeMap::new();
        let mut videos = Vec::new();
        for &kind in steps {
            let items: Vec<usize> = match kind {
                StepKind::CapToCap => (0..data.cap_texts.len()).filter(|&i| data.cap_texts[i].len() >= 2).collect(),
                StepKind::AsrToAsr => (0..seg.len()).filter(|&i| seg[i].asr.len() >= 2).collect(),
                StepKind::AsrVideoToAsr { .. } => {
                    (0..seg.len()).filter(|&i| seg[i].asr.len() >= 2 && seg[i].has_frames()).collect()
                }
                StepKind::AsrToCap | StepKind::AsrVideoToCap | StepKind::CapToAsr | StepKind::CapVideoToAsr => (0
                    ..seg.len())
                    .filter(|&i| seg[i].caption.as_ref().is_some_and(|c| !c.is_empty()) && !seg[i].asr.is_empty())
                    .collect(),
                StepKind::Align | StepKind::Order => {
                    videos = data
                        .videos()
                        .into_iter()
                        .map(|v| v.into_iter().filter(|&i| seg[i].has_frames()).collect::<Vec<_>>())
                        .filter(|v| v.len() > super::pairs::MIN_GAP)
                        .collect();
                    (0..videos.len()).collect()
                }
            };
            if items.is_empty() {
                return Err(Error::Data(format!("no training items are eligible for the {kind} step")));
            }
            let n = items.len();
            pools.insert(kind, (items, Cycler::new(n)));
        }
        Ok(Self {
            config,
            video_dim,
            pools,
            videos,
        })
    }

    /// Restarts every pool; the next draw reshuffles.
    pub fn reset(&mut self) {
        self.pools.values_mut().for_each(|(_, c)| c.reset());
    }

    fn draw<R: Rng + ?Sized>(&mut self, kind: StepKind, n: usize, rng: &mut R) -> Vec<usize> {
        let (items, cycler) = self.pools.get_mut(&kind).expect("pool built for every scheduled kind");
        cycler.take(n, rng).into_iter().map(|k| items[k]).collect()
    }

    /// Next batch for `kind`. Item order comes from `sampling`; spans,
    /// text hiding and pair labels from `masking`.
    pub fn sample(
        &mut self,
        kind: StepKind,
        data: &TrainingData,
        sampling: &mut dyn RngCore,
        masking: &mut dyn RngCore,
    ) -> Result<StepBatch> {
        let n = self.config.batch_size;
        let picked = self.draw(kind, n, sampling);
        let seg = &data.segments;
        match kind {
            StepKind::CapToCap => {
                let texts: Vec<_> = picked.iter().map(|&i| (data.cap_texts[i].as_slice(), Style::Cap, None)).collect();
                mass_batch(kind, &texts, &vec![false; n], self.config.mask_ratio, self.video_dim, masking)
            }
            StepKind::AsrToAsr | StepKind::AsrVideoToAsr { .. } => {
                let texts: Vec<_> = picked.iter().map(|&i| (seg[i].asr.as_slice(), Style::Asr, seg[i].frames.as_ref())).collect();
                let hidden: Vec<bool> = match kind {
                    StepKind::AsrVideoToAsr { hide: true } => {
                        (0..n).map(|_| masking.gen_bool(self.config.hide_fraction)).collect()
                    }
                    _ => vec![false; n],
                };
                mass_batch(kind, &texts, &hidden, self.config.mask_ratio, self.video_dim, masking)
            }
            StepKind::AsrToCap | StepKind::AsrVideoToCap | StepKind::CapToAsr | StepKind::CapVideoToAsr => {
                let segs: Vec<&TrainSegment> = picked.iter().map(|&i| &seg[i]).collect();
                caption_batch(kind, &segs, self.video_dim)
            }
            StepKind::Align | StepKind::Order => {
                let mut pairs = Vec::with_capacity(n);
                for (b, &v) in picked.iter().enumerate() {
                    let video = &self.videos[v];
                    let positive = b % 2 == 0;
                    let (i, j, label) = match kind {
                        StepKind::Align => sample_alignment_pair(video.len(), masking, positive),
                        _ => sample_ordering_pair(video.len(), masking, positive),
                    }
                    .expect("videos are filtered to have enough segments");
                    pairs.push((video[i], video[j], label));
                }
                binary_batch(kind, seg, &pairs, self.video_dim)
            }
        }
    }
}

fn check_streams(batch: &StepBatch, config: &ModelConfig) -> Result<()> {
    let kind = batch.kind;
    if kind.uses_video() && !config.multimodal {
        return Err(Error::Contract(format!("{kind} needs a multimodal model")));
    }
    if !kind.uses_video() && batch.encoder.video_len > 0 {
        return Err(Error::Contract(format!("{kind} is text-only but the batch carries frames")));
    }
    if kind.is_binary() != matches!(batch.target, Target::Binary { .. }) {
        return Err(Error::Contract(format!("{kind} does not match the batch target")));
    }
    Ok(())
}

/// The scalar training loss of `batch` on `graph`.
pub fn step_loss<'t, T: Scalar>(batch: &StepBatch, graph: &mut Graph<'t, '_, '_, T>) -> Result<Var<'t, T>> {
    check_streams(batch, graph.config())?;
    let enc = graph.encode(&batch.encoder)?;
    match &batch.target {
        Target::Tokens {
            decoder,
            targets,
            loss_mask,
            text_visible,
        } => Ok(graph.decode(decoder, &enc, text_visible)?.masked_cross_entropy(targets, loss_mask)?),
        Target::Binary { task, labels } => {
            let labels: Vec<T> = labels.iter().map(|&l| T::from_f64(l as f64)).collect();
            Ok(graph.cls_logits(*task, &enc)?.bce_with_logits(&labels)?)
        }
    }
}

/// Loss and gradients of one batch in training mode (dropout on).
pub fn compute_gradients<T: Scalar>(
    batch: &StepBatch,
    config: &ModelConfig,
    params: &ParamStore<T>,
    dropout_rng: &mut dyn RngCore,
) -> Result<(f64, Gradients<T>)> {
    let tape = Tape::new();
    let mut graph = Graph::train(&tape, params, config, dropout_rng);
    let loss = step_loss(batch, &mut graph)?;
    let value = loss.item().as_f64();
    Ok((value, tape.backward(loss)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub loss: f64,
    pub lr: f64,
}

/// Forward, backward and one Adam update.
pub fn run_training_step<T: Scalar>(
    batch: &StepBatch,
    config: &ModelConfig,
    params: &mut ParamStore<T>,
    optimizer: &mut OptimizerState<T>,
    dropout_rng: &mut dyn RngCore,
) -> Result<StepResult> {
    let (loss, grads) = compute_gradients(batch, config, params, dropout_rng)?;
    if !loss.is_finite() {
        return Err(Error::Data(format!("{} step produced a non-finite loss", batch.kind)));
    }
    grads.write_into(params)?;
    let lr = optimizer.step(params)?;
    Ok(StepResult { loss, lr })
}
