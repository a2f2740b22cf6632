use mmcap_tensor::{ParamStore, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), vec![d], Init::Ones);
        self.push(format!("{prefix}.b"), vec![d], Init::Zeros);
    }

    fn affine(&mut self, prefix: &str, w: &str, b: &str, rows: usize, cols: usize) {
        self.push(format!("{prefix}.{w}"), vec![rows, cols], Init::Normal);
        self.push(format!("{prefix}.{b}"), vec![cols], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            self.affine(prefix, w, b, d, d);
        }
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, ff: usize) {
        self.affine(prefix, "w1", "b1", d, ff);
        self.affine(prefix, "w2", "b2", ff, d);
    }

    fn encoder_stream(&mut self, stream: &str, layers: usize, c: &ModelConfig) {
        let d = c.d_model;
        for l in 0..layers {
            let p = format!("{stream}.{l}");
            self.layer_norm(&format!("{p}.self_ln"), d);
            self.attention(&format!("{p}.self"), d);
            if c.multimodal {
                self.layer_norm(&format!("{p}.cross_ln"), d);
                self.attention(&format!("{p}.cross"), d);
            }
            self.layer_norm(&format!("{p}.ff_ln"), d);
            self.feed_forward(&format!("{p}.ff"), d, c.ff_dim);
        }
        self.layer_norm(&format!("{stream}.final_ln"), d);
    }
}

/// Every parameter the configuration needs, in a fixed order.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.d_model;
    let mut s = Specs(Vec::new());
    s.push("embed.token".into(), vec![c.vocab_size, d], Init::Normal);
    s.push("embed.text_pos".into(), vec![c.max_text_positions, d], Init::Normal);
    s.push("embed.style".into(), vec![2, d], Init::Normal);
    s.encoder_stream("text_enc", c.text_layers, c);
    if c.multimodal {
        s.push("embed.video_pos".into(), vec![c.max_video_positions, d], Init::Normal);
        s.affine("video.proj1", "w", "b", c.video_dim, d);
        s.affine("video.proj2", "w", "b", d, d);
        s.layer_norm("video.proj_ln", d);
        s.encoder_stream("video_enc", c.video_layers, c);
    }
    for l in 0..c.decoder_layers {
        let p = format!("dec.{l}");
        s.layer_norm(&format!("{p}.self_ln"), d);
        s.attention(&format!("{p}.self"), d);
        s.layer_norm(&format!("{p}.text_ln"), d);
        s.attention(&format!("{p}.text_attn"), d);
        if c.multimodal {
            s.layer_norm(&format!("{p}.video_ln"), d);
            s.attention(&format!("{p}.video_attn"), d);
        }
        s.layer_norm(&format!("{p}.ff_ln"), d);
        s.feed_forward(&format!("{p}.ff"), d, c.ff_dim);
    }
    s.layer_norm("dec.final_ln", d);
    for head in ["cls.align", "cls.order"] {
        s.affine(head, "w1", "b1", d, d);
        s.affine(head, "w2", "b2", d, 1);
    }
    s.0
}

/// True for tensors that exist only in the multimodal configuration.
pub fn is_video_param(name: &str) -> bool {
    name.starts_with("video")
        || name == "embed.video_pos"
        || name.contains(".cross")
        || name.contains(".video_")
}

pub fn init_tensor<T: Scalar, R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> Tensor<T> {
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Normal => {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            (0..n).map(|_| T::from_f64(normal.sample(rng))).collect()
        }
    };
    Tensor::new(spec.shape.clone(), data).expect("spec shape matches data")
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    for spec in param_specs(config) {
        let t = init_tensor(&spec, rng);
        store.insert(spec.name, t);
    }
    Ok(store)
}

/// Checks that `store` holds exactly the tensors `config` needs, with the right shapes.
pub fn check_params<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let specs = param_specs(config);
    for spec in &specs {
        let t = store
            .get(&spec.name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} is missing", spec.name)))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, config expects {:?}",
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
    }
    if store.len() != specs.len() {
        let extra = store.names().find(|n| !specs.iter().any(|s| s.name == *n)).unwrap_or("?");
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// Fresh parameters for `config`, overwritten by every same-named tensor of
/// `source`. Tensors `source` lacks keep their fresh initialization. Returns
/// the names that were loaded.
pub fn init_from<T: Scalar, R: Rng + ?Sized>(
    config: &ModelConfig,
    source: &ParamStore<T>,
    rng: &mut R,
) -> Result<(ParamStore<T>, Vec<String>)> {
    let mut store = init_params(config, rng)?;
    let mut loaded = Vec::new();
    for (name, t) in source.iter() {
        let Some(dst) = store.get_mut(name) else { continue };
        if dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?} in the checkpoint but {:?} in the model",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
        loaded.push(name.to_string());
    }
    Ok((store, loaded))
}
