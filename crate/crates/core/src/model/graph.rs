//! Forward pass of the two-stream encoder and the text decoder, recorded on a tape.

use std::collections::BTreeMap;

use mmcap_tensor::{AttentionGeometry, ParamStore, Scalar, Tape, TensorError, Var};
use rand::RngCore;

use super::config::ModelConfig;
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::tokenizer::{Style, CLS, PAD};

const LN_EPS: f64 = 1e-5;

/// Decoder-side token rows, right-padded. `positions` index the shared
/// text positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInput {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub styles: Vec<Style>,
    pub mask: Vec<bool>,
}

impl DecoderInput {
    /// Rows numbered from position 0, padded to the longest.
    pub fn from_rows(rows: &[Vec<u32>], style: Style) -> Self {
        let starts = vec![0; rows.len()];
        Self::from_rows_at(rows, &starts, vec![style; rows.len()])
    }

    /// Row `b` occupies positions `starts[b]..`.
    pub fn from_rows_at(rows: &[Vec<u32>], starts: &[usize], styles: Vec<Style>) -> Self {
        let batch = rows.len();
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; batch * len];
        let mut positions = vec![0; batch * len];
        let mut mask = vec![false; batch * len];
        for (b, row) in rows.iter().enumerate() {
            for i in 0..len {
                positions[b * len + i] = starts[b] + i;
            }
            ids[b * len..b * len + row.len()].copy_from_slice(row);
            mask[b * len..b * len + row.len()].iter_mut().for_each(|m| *m = true);
        }
        Self {
            batch,
            len,
            ids,
            positions,
            styles,
            mask,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTask {
    Alignment,
    Ordering,
}

impl ClsTask {
    fn prefix(self) -> &'static str {
        match self {
            Self::Alignment => "cls.align",
            Self::Ordering => "cls.order",
        }
    }
}

/// Final-layer states of both encoders with their key masks.
#[derive(Debug, Clone)]
pub struct EncoderOutput<'t, T: Scalar> {
    pub batch: usize,
    pub text_len: usize,
    pub video_len: usize,
    pub text: Option<Var<'t, T>>,
    pub video: Option<Var<'t, T>>,
    pub text_mask: Vec<bool>,
    pub video_mask: Vec<bool>,
    pub has_video: Vec<bool>,
    pub cls_first: bool,
}

impl<T: Scalar> EncoderOutput<'_, T> {
    /// Copies the state values out of the tape.
    pub fn detach(&self) -> EncoderStates<T> {
        EncoderStates {
            batch: self.batch,
            text_len: self.text_len,
            video_len: self.video_len,
            text: self.text.map(|v| v.value()),
            video: self.video.map(|v| v.value()),
            text_mask: self.text_mask.clone(),
            video_mask: self.video_mask.clone(),
            has_video: self.has_video.clone(),
            cls_first: self.cls_first,
        }
    }
}

/// Tape-free encoder states, reusable across many decoder graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates<T> {
    pub batch: usize,
    pub text_len: usize,
    pub video_len: usize,
    pub text: Option<Vec<T>>,
    pub video: Option<Vec<T>>,
    pub text_mask: Vec<bool>,
    pub video_mask: Vec<bool>,
    pub has_video: Vec<bool>,
    pub cls_first: bool,
}

impl<T: Scalar> EncoderStates<T> {
    fn width(&self) -> usize {
        let rows = self.batch * self.text_len;
        match &self.text {
            Some(t) if rows > 0 => t.len() / rows,
            _ => self.video.as_ref().map_or(0, |v| v.len() / (self.batch * self.video_len).max(1)),
        }
    }

    /// Example `b` repeated `k` times as a batch.
    pub fn repeat(&self, b: usize, k: usize) -> Self {
        let d = self.width();
        let rep = |src: &[T], len: usize| -> Vec<T> {
            let row = &src[b * len * d..(b + 1) * len * d];
            row.iter().copied().cycle().take(k * len * d).collect()
        };
        let rep_mask = |m: &[bool], len: usize| -> Vec<bool> {
            m[b * len..(b + 1) * len].iter().copied().cycle().take(k * len).collect()
        };
        Self {
            batch: k,
            text_len: self.text_len,
            video_len: self.video_len,
            text: self.text.as_deref().map(|t| rep(t, self.text_len)),
            video: self.video.as_deref().map(|v| rep(v, self.video_len)),
            text_mask: rep_mask(&self.text_mask, self.text_len),
            video_mask: rep_mask(&self.video_mask, self.video_len),
            has_video: vec![self.has_video[b]; k],
            cls_first: self.cls_first,
        }
    }

    /// Records the states as constants on `tape`.
    pub fn attach<'t>(&self, tape: &'t Tape<T>) -> Result<EncoderOutput<'t, T>> {
        let d = self.width();
        let text = match &self.text {
            Some(t) => Some(tape.constant([self.batch * self.text_len, d], t.clone())?),
            None => None,
        };
        let video = match &self.video {
            Some(v) => Some(tape.constant([self.batch * self.video_len, d], v.clone())?),
            None => None,
        };
        Ok(EncoderOutput {
            batch: self.batch,
            text_len: self.text_len,
            video_len: self.video_len,
            text,
            video,
            text_mask: self.text_mask.clone(),
            video_mask: self.video_mask.clone(),
            has_video: self.has_video.clone(),
            cls_first: self.cls_first,
        })
    }
}

fn row_gate<T: Scalar>(flags: &[bool], len: usize) -> Vec<T> {
    flags
        .iter()
        .flat_map(|&f| std::iter::repeat(if f { T::one() } else { T::zero() }).take(len))
        .collect()
}

/// One forward graph over a parameter store. Parameters are recorded on the
/// tape the first time they are used, so untouched tensors get no gradient.
pub struct Graph<'t, 'p, 'r, T: Scalar> {
    tape: &'t Tape<T>,
    params: &'p ParamStore<T>,
    config: &'p ModelConfig,
    bound: BTreeMap<String, Var<'t, T>>,
    dropout: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'t, 'p, 'r, T: Scalar> Graph<'t, 'p, 'r, T> {
    /// Inference graph: dropout disabled.
    pub fn eval(tape: &'t Tape<T>, params: &'p ParamStore<T>, config: &'p ModelConfig) -> Self {
        Self {
            tape,
            params,
            config,
            bound: BTreeMap::new(),
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training graph: dropout at the configured rate, masks drawn from `rng`.
    pub fn train(
        tape: &'t Tape<T>,
        params: &'p ParamStore<T>,
        config: &'p ModelConfig,
        rng: &'r mut dyn RngCore,
    ) -> Self {
        Self {
            tape,
            params,
            config,
            bound: BTreeMap::new(),
            dropout: config.dropout,
            rng: Some(rng),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn param(&mut self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not in the store")))?;
        let v = self.tape.param(name, tensor);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn drop(&mut self, x: Var<'t, T>) -> Var<'t, T> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => x.dropout(self.dropout, rng),
            _ => x,
        }
    }

    fn layer_norm(&mut self, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        Ok(x.layer_norm(&g, &b, T::from_f64(LN_EPS))?)
    }

    fn affine(&mut self, x: Var<'t, T>, prefix: &str, w: &str, b: &str) -> Result<Var<'t, T>> {
        let w = self.param(&format!("{prefix}.{w}"))?;
        let b = self.param(&format!("{prefix}.{b}"))?;
        Ok(x.linear(&w, &b)?)
    }

    fn feed_forward(&mut self, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let h = self.affine(x, prefix, "w1", "b1")?.gelu();
        let h = self.drop(h);
        self.affine(h, prefix, "w2", "b2")
    }

    fn attend(&mut self, prefix: &str, queries: Var<'t, T>, memory: Var<'t, T>, geom: AttentionGeometry) -> Result<Var<'t, T>> {
        let q = self.affine(queries, prefix, "wq", "bq")?;
        let k = self.affine(memory, prefix, "wk", "bk")?;
        let v = self.affine(memory, prefix, "wv", "bv")?;
        let p = self.dropout;
        let ctx = match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => q.attention(&k, &v, geom, Some((p, rng)))?,
            _ => q.attention(&k, &v, geom, None::<(f64, &mut dyn RngCore)>)?,
        };
        self.affine(ctx, prefix, "wo", "bo")
    }

    fn geometry(&self, batch: usize, q_len: usize, k_len: usize, key_mask: &[bool], causal: bool) -> AttentionGeometry {
        AttentionGeometry {
            batch,
            q_len,
            k_len,
            heads: self.config.heads,
            width: self.config.d_model,
            key_mask: key_mask.to_vec(),
            causal,
        }
    }

    /// Token + position + style embedding per position, then dropout.
    /// `styles` holds one entry per row of `row_len` positions.
    pub fn embed_text(&mut self, ids: &[u32], positions: &[usize], styles: &[Style], row_len: usize) -> Result<Var<'t, T>> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_text_positions) {
            return Err(Error::Contract(format!(
                "text position {p} exceeds the {} available",
                self.config.max_text_positions
            )));
        }
        if ids.len() != positions.len() || styles.len() * row_len != ids.len() {
            return Err(Error::Contract("embed_text: ids, positions and styles disagree".into()));
        }
        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let style_ids: Vec<usize> = styles.iter().flat_map(|s| std::iter::repeat(s.id()).take(row_len)).collect();
        let tok = self.param("embed.token")?.gather_rows(&tok_ids)?;
        let pos = self.param("embed.text_pos")?.gather_rows(positions)?;
        let sty = self.param("embed.style")?.gather_rows(&style_ids)?;
        let x = tok.add(&pos)?.add(&sty)?;
        Ok(self.drop(x))
    }

    /// Two-layer perceptron with layer norm per frame, plus the video
    /// positional embedding of each frame's index within its row.
    pub fn project_video(&mut self, frames: &[f32], rows: usize, row_len: usize) -> Result<Var<'t, T>> {
        let (fd, d) = (self.config.video_dim, self.config.d_model);
        let n = rows * row_len;
        if frames.len() != n * fd {
            return Err(TensorError::Shape {
                op: "project_video",
                detail: format!("{} values for {n} frames of dimension {fd}", frames.len()),
            }
            .into());
        }
        if row_len > self.config.max_video_positions {
            return Err(Error::Contract(format!(
                "{row_len} frames exceed the {} video positions",
                self.config.max_video_positions
            )));
        }
        if n == 0 {
            return Ok(self.tape.constant([0, d], Vec::new())?);
        }
        let x = self.tape.constant([n, fd], frames.iter().map(|&f| T::from_f64(f as f64)).collect())?;
        let h = self.affine(x, "video.proj1", "w", "b")?.gelu();
        let h = self.affine(h, "video.proj2", "w", "b")?;
        let h = self.layer_norm(h, "video.proj_ln")?;
        let pos_ids: Vec<usize> = (0..n).map(|i| i % row_len).collect();
        let pos = self.param("embed.video_pos")?.gather_rows(&pos_ids)?;
        let v = h.add(&pos)?;
        Ok(self.drop(v))
    }

    /// Runs both encoder streams with per-layer co-attention. The video
    /// stream is ignored by text-only configurations.
    pub fn encode(&mut self, batch: &Batch) -> Result<EncoderOutput<'t, T>> {
        let b = batch.size;
        let (lt, lv) = (batch.text_len, batch.video_len);
        let has_text = lt > 0;
        let has_video_rows = batch.has_video();
        let use_video = self.config.multimodal && lv > 0 && has_video_rows.iter().any(|&h| h);
        if !has_text && !use_video {
            return Err(Error::Contract("encode needs a text or a video stream".into()));
        }
        let mut x = if has_text {
            let pos: Vec<usize> = (0..b * lt).map(|i| i % lt).collect();
            Some(self.embed_text(&batch.text_ids, &pos, &batch.styles, lt)?)
        } else {
            None
        };
        let mut v = if use_video {
            Some(self.project_video(&batch.frames, b, lv)?)
        } else {
            None
        };
        let text_self = self.geometry(b, lt, lt, &batch.text_mask, false);
        let video_self = self.geometry(b, lv, lv, &batch.video_mask, false);
        let video_gate: Vec<T> = row_gate(&has_video_rows, lt);
        for l in 0..self.config.text_layers {
            if let Some(xs) = x {
                let h = self.layer_norm(xs, &format!("text_enc.{l}.self_ln"))?;
                let a = self.attend(&format!("text_enc.{l}.self"), h, h, text_self.clone())?;
                x = Some(xs.add(&self.drop(a))?);
            }
            if let Some(vs) = v {
                let h = self.layer_norm(vs, &format!("video_enc.{l}.self_ln"))?;
                let a = self.attend(&format!("video_enc.{l}.self"), h, h, video_self.clone())?;
                v = Some(vs.add(&self.drop(a))?);
            }
            if let (Some(xs), Some(vs)) = (x, v) {
                let xn = self.layer_norm(xs, &format!("text_enc.{l}.cross_ln"))?;
                let vn = self.layer_norm(vs, &format!("video_enc.{l}.cross_ln"))?;
                let g = self.geometry(b, lt, lv, &batch.video_mask, false);
                let cx = self.attend(&format!("text_enc.{l}.cross"), xn, vn, g)?.mul_rows(&video_gate)?;
                let g = self.geometry(b, lv, lt, &batch.text_mask, false);
                let cv = self.attend(&format!("video_enc.{l}.cross"), vn, xn, g)?;
                x = Some(xs.add(&self.drop(cx))?);
                v = Some(vs.add(&self.drop(cv))?);
            }
            for (stream, state) in [("text_enc", &mut x), ("video_enc", &mut v)] {
                if let Some(s) = *state {
                    let h = self.layer_norm(s, &format!("{stream}.{l}.ff_ln"))?;
                    let f = self.feed_forward(h, &format!("{stream}.{l}.ff"))?;
                    *state = Some(s.add(&self.drop(f))?);
                }
            }
        }
        let text = match x {
            Some(s) => Some(self.layer_norm(s, "text_enc.final_ln")?),
            None => None,
        };
        let video = match v {
            Some(s) => Some(self.layer_norm(s, "video_enc.final_ln")?),
            None => None,
        };
        let cls_first = has_text && (0..b).all(|i| batch.text_ids[i * lt] == CLS);
        Ok(EncoderOutput {
            batch: b,
            text_len: lt,
            video_len: if use_video { lv } else { 0 },
            text,
            video,
            text_mask: batch.text_mask.clone(),
            video_mask: if use_video { batch.video_mask.clone() } else { Vec::new() },
            has_video: if use_video { has_video_rows } else { vec![false; b] },
            cls_first,
        })
    }

    /// Next-token logits `[batch * len, vocab]`. Attention to the text states
    /// is zeroed for rows whose `text_visible` flag is false.
    pub fn decode(&mut self, dec: &DecoderInput, enc: &EncoderOutput<'t, T>, text_visible: &[bool]) -> Result<Var<'t, T>> {
        if dec.batch != enc.batch || text_visible.len() != dec.batch {
            return Err(Error::Contract(format!(
                "decoder batch {} vs encoder batch {} ({} visibility flags)",
                dec.batch,
                enc.batch,
                text_visible.len()
            )));
        }
        let (b, ld) = (dec.batch, dec.len);
        let mut y = self.embed_text(&dec.ids, &dec.positions, &dec.styles, ld)?;
        let self_geom = self.geometry(b, ld, ld, &dec.mask, true);
        let text_gate: Vec<T> = row_gate(text_visible, ld);
        let video_gate: Vec<T> = row_gate(&enc.has_video, ld);
        for l in 0..self.config.decoder_layers {
            let h = self.layer_norm(y, &format!("dec.{l}.self_ln"))?;
            let a = self.attend(&format!("dec.{l}.self"), h, h, self_geom.clone())?;
            y = y.add(&self.drop(a))?;
            if let Some(t) = enc.text {
                let h = self.layer_norm(y, &format!("dec.{l}.text_ln"))?;
                let g = self.geometry(b, ld, enc.text_len, &enc.text_mask, false);
                let a = self.attend(&format!("dec.{l}.text_attn"), h, t, g)?.mul_rows(&text_gate)?;
                y = y.add(&self.drop(a))?;
            }
            if let Some(v) = enc.video.filter(|_| self.config.multimodal) {
                let h = self.layer_norm(y, &format!("dec.{l}.video_ln"))?;
                let g = self.geometry(b, ld, enc.video_len, &enc.video_mask, false);
                let a = self.attend(&format!("dec.{l}.video_attn"), h, v, g)?.mul_rows(&video_gate)?;
                y = y.add(&self.drop(a))?;
            }
            let h = self.layer_norm(y, &format!("dec.{l}.ff_ln"))?;
            let f = self.feed_forward(h, &format!("dec.{l}.ff"))?;
            y = y.add(&self.drop(f))?;
        }
        let y = self.layer_norm(y, "dec.final_ln")?;
        let out = self.param("embed.token")?.transpose()?;
        Ok(y.matmul(&out)?)
    }

    /// Pre-sigmoid score `[batch, 1]` of a binary head over the CLS state.
    pub fn cls_logits(&mut self, task: ClsTask, enc: &EncoderOutput<'t, T>) -> Result<Var<'t, T>> {
        let text = match enc.text {
            Some(t) if enc.cls_first => t,
            _ => return Err(Error::Contract("classification needs CLS at text position 0".into())),
        };
        let rows: Vec<usize> = (0..enc.batch).map(|b| b * enc.text_len).collect();
        let cls = text.gather_rows(&rows)?;
        let prefix = task.prefix();
        let h = self.affine(cls, prefix, "w1", "b1")?.gelu();
        let h = self.drop(h);
        self.affine(h, prefix, "w2", "b2")
    }

    /// Head probabilities in (0, 1), one per example.
    pub fn cls_predict(&mut self, task: ClsTask, enc: &EncoderOutput<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.cls_logits(task, enc)?.sigmoid())
    }
}
