//! Binary checkpoint container.
//!
//! Byte layout, all integers little-endian `u32`:
//!
//! ```text
//! magic      8 bytes  "DUALSCK\0"
//! version    u32
//! header     u32 length, then UTF-8 JSON {"config": ModelConfig, "meta": {...}}
//! vocabulary u32 count, then per token: u32 length, UTF-8 bytes
//! parameters u32 count, then per tensor:
//!              u32 name length, UTF-8 name,
//!              u32 ndim, ndim × u32 dims,
//!              product(dims) × f32 LE values
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParameterSet;
use super::transformer::Seq2Seq;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DUALSCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub val_loss: Option<f64>,
    pub seed: Option<u64>,
    pub optimizer: Option<OptimizerMeta>,
    /// Whether sources carry a task prefix token.
    #[serde(default = "yes")]
    pub prefix: bool,
}

fn yes() -> bool {
    true
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta { epoch: None, val_loss: None, seed: None, optimizer: None, prefix: true }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub vocab: Vocabulary,
    pub params: ParameterSet<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Seq2Seq<f32>, vocab: &Vocabulary, meta: CheckpointMeta) -> Self {
        Checkpoint { config: model.config().clone(), meta, vocab: vocab.clone(), params: model.params().clone() }
    }

    pub fn into_model(self) -> Result<(Seq2Seq<f32>, Vocabulary, CheckpointMeta)> {
        if self.vocab.len() != self.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens but the model expects {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        let model = Seq2Seq::from_parts(self.config, self.params)?;
        Ok((model, self.vocab, self.meta))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let header = serde_json::to_vec(&Header { config: self.config.clone(), meta: self.meta.clone() })?;
        put_bytes(&mut out, &header)?;
        put_u32(&mut out, len_u32(self.vocab.len())?);
        for t in self.vocab.tokens() {
            put_bytes(&mut out, t.as_bytes())?;
        }
        put_u32(&mut out, len_u32(self.params.len())?);
        for (name, t) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes())?;
            put_u32(&mut out, len_u32(t.shape().len())?);
            for &d in t.shape() {
                put_u32(&mut out, len_u32(d)?);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let header: Header = serde_json::from_slice(r.bytes_field()?)?;
        let n = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            tokens.push(r.string()?);
        }
        let vocab = Vocabulary::from_tokens(tokens)?;
        let n = r.u32()? as usize;
        let mut params = ParameterSet::new();
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("`{name}` shape overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config: header.config, meta: header.meta, vocab, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, len_u32(b.len())?);
    out.extend_from_slice(b);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let b = self.bytes_field()?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}
