//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"MMCKPT1"`, `u32` header length, a UTF-8 header of
//! sorted `key=value` lines, `u32` tensor count, then per tensor
//! `u32` name length, name, `u32` rank, `u32` extents and `f32` payload.
//! Adam moments ride along as tensors named `adam.m:<param>` / `adam.v:<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use mmcap_tensor::{AdamConfig, Moments, OptimizerState, ParamStore, Tensor};

use super::config::ModelConfig;
use super::init::check_params;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m:";
const MOMENT_V: &str = "adam.v:";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form run metadata (epoch, seed, strategy, ...).
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(bad(format!("file ends inside {what}")));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &e in shape {
        put_u32(out, e);
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore<f32>) -> Self {
        Self {
            config,
            meta: BTreeMap::new(),
            params,
            optimizer: None,
        }
    }

    fn header(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("format_version".to_string(), CHECKPOINT_VERSION.to_string());
        for (k, v) in self.config.to_pairs() {
            kv.insert(format!("model.{k}"), v);
        }
        for (k, v) in &self.meta {
            kv.insert(format!("meta.{k}"), v.clone());
        }
        if let Some(o) = &self.optimizer {
            kv.insert("optim.step".into(), o.step.to_string());
            kv.insert("optim.lr_max".into(), o.config.lr_max.to_string());
            kv.insert("optim.warmup".into(), o.config.warmup.to_string());
            kv.insert("optim.beta1".into(), o.config.beta1.to_string());
            kv.insert("optim.beta2".into(), o.config.beta2.to_string());
            kv.insert("optim.eps".into(), o.config.eps.to_string());
        }
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let header = self.header();
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        let moments = self.optimizer.as_ref().map(|o| &o.moments);
        put_u32(&mut out, self.params.len() + moments.map_or(0, |m| 2 * m.len()));
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        for (name, mo) in moments.into_iter().flatten() {
            put_tensor(&mut out, &format!("{MOMENT_M}{name}"), &[mo.m.len()], &mo.m);
            put_tensor(&mut out, &format!("{MOMENT_V}{name}"), &[mo.v.len()], &mo.v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(CHECKPOINT_MAGIC.len(), "magic").ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let n = r.u32("header length")?;
        let header = std::str::from_utf8(r.take(n, "header")?).map_err(|_| bad("header is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("header line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let version = kv.get("format_version").map(String::as_str);
        if version != Some(&CHECKPOINT_VERSION.to_string()) {
            return Err(bad(format!(
                "checkpoint format version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let section = |prefix: &str| -> BTreeMap<String, String> {
            kv.iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
                .collect()
        };
        let config = ModelConfig::from_pairs(&section("model."))?;
        let meta = section("meta.");
        let optim = section("optim.");

        let count = r.u32("tensor count")?;
        let mut params = ParamStore::new();
        let mut m_raw = BTreeMap::new();
        let mut v_raw = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32("tensor name length")?;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("tensor rank")?;
            let shape = (0..rank).map(|_| r.u32("tensor extents")).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel * 4, &format!("tensor {name}"))?;
            let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if let Some(p) = name.strip_prefix(MOMENT_M) {
                m_raw.insert(p.to_string(), data);
            } else if let Some(p) = name.strip_prefix(MOMENT_V) {
                v_raw.insert(p.to_string(), data);
            } else {
                let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
                params.insert(name, t);
            }
        }
        if r.at != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.at)));
        }
        check_params(&config, &params)?;

        let optimizer = if optim.is_empty() {
            None
        } else {
            let get = |k: &str| optim.get(k).ok_or_else(|| bad(format!("optimizer header is missing {k}")));
            let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("optimizer {k}"))) };
            let int = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("optimizer {k}"))) };
            let mut moments = BTreeMap::new();
            for (name, m) in m_raw {
                let v = v_raw.remove(&name).ok_or_else(|| bad(format!("moment v for {name} is missing")))?;
                moments.insert(name, Moments { m, v });
            }
            if let Some(name) = v_raw.keys().next() {
                return Err(bad(format!("moment m for {name} is missing")));
            }
            Some(OptimizerState {
                config: AdamConfig {
                    lr_max: num("lr_max")?,
                    warmup: int("warmup")?,
                    beta1: num("beta1")?,
                    beta2: num("beta2")?,
                    eps: num("eps")?,
                },
                step: int("step")?,
                moments,
            })
        };
        Ok(Self {
            config,
            meta,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary sibling file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The stored parameters, checked against a caller-supplied configuration.
    pub fn params_for(&self, config: &ModelConfig) -> Result<&ParamStore<f32>> {
        check_params(config, &self.params)?;
        Ok(&self.params)
    }
}
