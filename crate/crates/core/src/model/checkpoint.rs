//! Checkpoint containers: a JSON document, or a little-endian binary file
//! with a JSON header followed by raw `f64` tensor data.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::Params;
use super::{Model, ModelConfig, TokenVocab};
use crate::error::{Error, Result};
use crate::tags::SlottedRule;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTXTAGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    tokens: Vec<String>,
    rules: Vec<String>,
    tensors: Vec<TensorMeta>,
}

impl Model {
    fn header(&self, with_data: bool) -> Header {
        Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tokens: self.tokens.tokens().to_vec(),
            rules: self.rules.iter().map(|r| r.to_string()).collect(),
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| TensorMeta {
                    name,
                    shape: t.shape().to_vec(),
                    data: with_data.then(|| t.iter().copied().collect()),
                })
                .collect(),
        }
    }

    fn from_header(h: Header, mut data: impl FnMut(&TensorMeta) -> Result<Vec<f64>>) -> Result<Self> {
        if h.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", h.version)));
        }
        h.config.validate()?;
        if h.tokens.len() != h.config.vocab_size {
            return Err(Error::Checkpoint("token table size disagrees with config".into()));
        }
        let tokens = TokenVocab::from_tokens(h.tokens, h.config.max_slots);
        let rules = h
            .rules
            .iter()
            .map(|r| SlottedRule::parse(r))
            .collect::<Result<Vec<_>>>()?;
        let mut params = Params::init(&h.config, &mut ChaCha8Rng::seed_from_u64(0));
        let mut slots = params.named_mut();
        if slots.len() != h.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                h.tensors.len()
            )));
        }
        for ((name, view), meta) in slots.iter_mut().zip(&h.tensors) {
            if *name != meta.name || view.shape() != meta.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    meta.name,
                    meta.shape,
                    name,
                    view.shape()
                )));
            }
            let values = data(meta)?;
            if values.len() != view.len() {
                return Err(Error::Checkpoint(format!("tensor {} has {} values", meta.name, values.len())));
            }
            for (dst, v) in view.iter_mut().zip(values) {
                *dst = v;
            }
        }
        drop(slots);
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(Self {
            config: h.config,
            tokens,
            rules,
            params,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.header(true))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let h: Header = serde_json::from_str(s)?;
        Self::from_header(h, |meta| {
            meta.data
                .clone()
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} has no data", meta.name)))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header(false))?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.named() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a binary checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        let header = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(header)?;
        let mut rest = &body[hlen..];
        let model = Self::from_header(h, |meta| {
            let count: usize = meta.shape.iter().product();
            let raw = rest
                .get(..count * 8)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for tensor {}", meta.name)))?;
            rest = &rest[count * 8..];
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        })?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(model)
    }

    /// Writes JSON for a `.json` extension, binary otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "json") {
            self.to_json()?.into_bytes()
        } else {
            self.to_bytes()?
        };
        Ok(fs::write(path, bytes)?)
    }

    /// Reads either format, detected by the magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(CHECKPOINT_MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            let s = String::from_utf8(bytes).map_err(|_| Error::Checkpoint("checkpoint is neither binary nor UTF-8 JSON".into()))?;
            Self::from_json(&s)
        }
    }
}
