//! Greedy and beam-search caption generation.

use std::cmp::Ordering;

use mmcap_tensor::{ParamStore, Tape};

use crate::corpus::{make_batch, EncoderInput, BATCH_SIZE};
use crate::error::{Error, Result};
use crate::model::{DecoderInput, EncoderStates, Graph, ModelConfig};
use crate::tokenizer::{Style, BOS, EOS};

pub const DEFAULT_BEAM: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 32;

/// A partial or finished caption. `tokens` never contains BOS or EOS.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, counting the closing EOS.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        self.log_prob / self.steps().max(1) as f64
    }
}

/// Source of next-token log-probabilities for one input.
pub trait StepScorer {
    /// One distribution per prefix; prefixes exclude BOS.
    fn next_log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy(scorer: &mut dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis::default();
    while !h.finished && h.steps() < max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&h.tokens))?.remove(0);
        let t = argmax(&lp);
        h.log_prob += lp[t];
        if t as u32 == EOS {
            h.finished = true;
        } else {
            h.tokens.push(t as u32);
        }
    }
    Ok(h)
}

fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Keeps the `beam` best expansions by cumulative log-probability (ties by
/// parent rank, then token id); hypotheses ending in EOS leave the beam.
/// The result is the best finished or length-capped hypothesis by
/// [`Hypothesis::score`].
pub fn beam_search(scorer: &mut dyn StepScorer, beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut alive = vec![Hypothesis::default()];
    let mut done = Vec::new();
    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|h| h.tokens.clone()).collect();
        let dists = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (p, lp) in dists.iter().enumerate() {
            cands.extend(lp.iter().enumerate().map(|(t, &l)| (alive[p].log_prob + l, p, t)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for &(log_prob, p, t) in cands.iter().take(beam) {
            let mut h = Hypothesis {
                tokens: alive[p].tokens.clone(),
                log_prob,
                finished: t as u32 == EOS,
            };
            if h.finished {
                done.push(h);
            } else {
                h.tokens.push(t as u32);
                next.push(h);
            }
        }
        alive = next;
    }
    done.extend(alive);
    Ok(done.into_iter().min_by(better).expect("at least one hypothesis"))
}

/// Scores continuations with the model for one encoded input.
pub struct ModelScorer<'a> {
    config: &'a ModelConfig,
    params: &'a ParamStore<f32>,
    states: EncoderStates<f32>,
}

impl<'a> ModelScorer<'a> {
    /// `states` holds a single example.
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore<f32>, states: EncoderStates<f32>) -> Self {
        Self { config, params, states }
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x as f64 - lse).collect()
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let rows: Vec<Vec<u32>> = prefixes.iter().map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect()).collect();
        let dec = DecoderInput::from_rows(&rows, Style::Cap);
        let tape = Tape::new();
        let enc = self.states.repeat(0, n).attach(&tape)?;
        let mut graph = Graph::eval(&tape, self.params, self.config);
        let logits = graph.decode(&dec, &enc, &vec![true; n])?.value();
        let v = self.config.vocab_size;
        Ok(rows
            .iter()
            .enumerate()
            .map(|(b, row)| {
                let r = b * dec.len + row.len() - 1;
                log_softmax(&logits[r * v..(r + 1) * v])
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeSettings {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Captions for every input, in order. The length cap is further limited by
/// the model's positional table.
pub fn generate_captions(
    config: &ModelConfig,
    params: &ParamStore<f32>,
    inputs: &[EncoderInput],
    settings: DecodeSettings,
) -> Result<Vec<Hypothesis>> {
    let max_len = settings.max_len.min(config.max_text_positions);
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(BATCH_SIZE) {
        let batch = make_batch(chunk, config.video_dim);
        let tape = Tape::new();
        let states = Graph::eval(&tape, params, config).encode(&batch)?.detach();
        for b in 0..chunk.len() {
            let mut scorer = ModelScorer::new(config, params, states.repeat(b, 1));
            out.push(if settings.beam == 1 {
                greedy(&mut scorer, max_len)?
            } else {
                beam_search(&mut scorer, settings.beam, max_len)?
            });
        }
    }
    Ok(out)
}
