//! Scaled dot-product attention and its normalized-query/key variants.
//!
//! Four scoring modes share one entry point:
//!
//! | mode             | logits                                    |
//! |------------------|-------------------------------------------|
//! | `post_ln`        | `Q Kᵀ / √d_k`                             |
//! | `pre_ln`         | `Q Kᵀ / √d_k`                             |
//! | `qk_norm`        | `g · (Q/‖Q‖)(K/‖K‖)ᵀ`                     |
//! | `adjust_qk_norm` | `g · Q̂ K̂ᵀ`, `Q̂ = (Q−Q̄)/‖Q−Q̄‖`, same for K |
//!
//! The two layer-norm modes differ only in where the surrounding block puts
//! its layer normalization, which is the model's concern.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Slices with a smaller (centered) L2 norm normalize to the zero vector.
pub const NORM_EPS: f64 = 1e-6;

/// Logit assigned to positions that may not be attended.
pub const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    PostLn,
    PreLn,
    QkNorm,
    AdjustQkNorm,
}

impl NormMode {
    pub const ALL: [NormMode; 4] = [NormMode::PostLn, NormMode::PreLn, NormMode::QkNorm, NormMode::AdjustQkNorm];

    /// Whether logits are cosine similarities scaled by a learnable `g`.
    pub fn uses_scale(self) -> bool {
        matches!(self, NormMode::QkNorm | NormMode::AdjustQkNorm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::PostLn => "post_ln",
            NormMode::PreLn => "pre_ln",
            NormMode::QkNorm => "qk_norm",
            NormMode::AdjustQkNorm => "adjust_qk_norm",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" | "post_ln" => Ok(NormMode::PostLn),
            "pre" | "pre_ln" => Ok(NormMode::PreLn),
            "qk" | "qk_norm" => Ok(NormMode::QkNorm),
            "adjust" | "adjust_qk_norm" => Ok(NormMode::AdjustQkNorm),
            other => Err(Error::Config(format!("unknown norm mode `{other}`"))),
        }
    }
}

/// How many learnable logit scales an attention block owns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSharing {
    /// One `g` per head.
    #[default]
    PerHead,
    /// One `g` for all heads of the block.
    Shared,
}

/// Learnable logit scale(s) of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScale<T: Real = f32> {
    pub g: Tensor<T>,
}

impl<T: Real> AttentionScale<T> {
    /// Initialised to `√head_dim`, the magnitude dot-product logits would have
    /// for unit-variance inputs.
    pub fn new(sharing: ScaleSharing, heads: usize, head_dim: usize) -> Self {
        let n = match sharing {
            ScaleSharing::PerHead => heads,
            ScaleSharing::Shared => 1,
        };
        AttentionScale { g: Tensor::full(&[n], T::lit((head_dim as f64).sqrt())) }
    }
}

/// Which key positions each query may attend, per batch element.
/// `true` marks an attendable position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    q_len: usize,
    k_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, q_len: usize, k_len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * q_len * k_len {
            return Err(Error::Shape(format!("mask of {} entries for [{batch} x {q_len} x {k_len}]", allowed.len())));
        }
        Ok(AttentionMask { batch, q_len, k_len, allowed })
    }

    /// Keys are attendable unless padding. `key_valid[b]` lists the validity
    /// of each key position of batch element `b`.
    pub fn padding(key_valid: &[Vec<bool>], q_len: usize) -> Result<Self> {
        let k_len = key_valid.first().map_or(0, Vec::len);
        if key_valid.iter().any(|v| v.len() != k_len) {
            return Err(Error::Shape("ragged key validity rows".into()));
        }
        let allowed = key_valid.iter().flat_map(|row| (0..q_len).flat_map(move |_| row.iter().copied())).collect();
        Self::new(key_valid.len(), q_len, k_len, allowed)
    }

    /// Causal self-attention: query `i` sees keys `0..=i` that are not padding.
    pub fn causal(key_valid: &[Vec<bool>]) -> Result<Self> {
        let len = key_valid.first().map_or(0, Vec::len);
        if key_valid.iter().any(|v| v.len() != len) {
            return Err(Error::Shape("ragged key validity rows".into()));
        }
        let allowed = key_valid
            .iter()
            .flat_map(|row| (0..len).flat_map(move |i| row.iter().enumerate().map(move |(j, &ok)| ok && j <= i)))
            .collect();
        Self::new(key_valid.len(), len, len, allowed)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.q_len, self.k_len)
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.q_len + i) * self.k_len + j]
    }
}

/// Zero-mean, unit-L2 normalization of every last-axis slice. Constant slices
/// become the zero vector.
pub fn zero_mean_unit_normalize<T: Real>(tape: &mut Tape<T>, x: Var, eps: f64) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap_or(&0);
    if d < 2 {
        return Err(Error::Shape(format!(
            "zero-mean normalization needs a last dimension of at least 2, got {:?}",
            tape.shape(x)
        )));
    }
    tape.normalize(x, true, eps)
}

/// Tensor-level convenience over [`zero_mean_unit_normalize`].
pub fn zero_mean_unit_normalized<T: Real>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = zero_mean_unit_normalize(&mut tape, v, eps)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[batch*heads, q, head_dim]`
    pub output: Var,
    /// `[batch*heads, q, k]`, rows sum to one.
    pub weights: Var,
    /// Pre-softmax logits after masking.
    pub logits: Var,
}

/// Attention over head-split tensors: `q` is `[batch*heads, q_len, d]`, `k`
/// and `v` are `[batch*heads, k_len, d]`. The mask covers `[batch, q_len,
/// k_len]` and is shared by the heads of a batch element.
pub fn attention<T: Real>(
    tape: &mut Tape<T>,
    mode: NormMode,
    q: Var,
    k: Var,
    v: Var,
    g: Option<Var>,
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 3
        || ks.len() != 3
        || vs.len() != 3
        || qs[0] != ks[0]
        || ks[0] != vs[0]
        || qs[2] != ks[2]
        || ks[1] != vs[1]
    {
        return Err(Error::Shape(format!("attention inputs q {qs:?}, k {ks:?}, v {vs:?}")));
    }
    let (batch, q_len, k_len) = mask.dims();
    if q_len != qs[1] || k_len != ks[1] || batch == 0 || qs[0] % batch != 0 {
        return Err(Error::Shape(format!("mask {:?} for queries {qs:?} and keys {ks:?}", mask.dims())));
    }
    let heads = qs[0] / batch;
    let head_dim = qs[2];

    let scores = if mode.uses_scale() {
        let g = g.ok_or_else(|| Error::Config(format!("attention mode {mode} needs a learnable scale g")))?;
        let glen = tape.shape(g)[0];
        if tape.shape(g).len() != 1 || (glen != 1 && glen != heads) {
            return Err(Error::Shape(format!("scale g {:?} for {heads} heads", tape.shape(g))));
        }
        let (qn, kn) = if mode == NormMode::AdjustQkNorm {
            (zero_mean_unit_normalize(tape, q, NORM_EPS)?, zero_mean_unit_normalize(tape, k, NORM_EPS)?)
        } else {
            (tape.normalize(q, false, NORM_EPS)?, tape.normalize(k, false, NORM_EPS)?)
        };
        let cos = tape.matmul_nt(qn, kn)?;
        tape.scale_blocks(cos, g, q_len * k_len)?
    } else {
        let raw = tape.matmul_nt(q, k)?;
        tape.scale(raw, T::lit(1.0 / (head_dim as f64).sqrt()))?
    };
    let logits = tape.masked_fill(scores, mask.allowed(), heads, T::lit(MASK_FILL))?;
    let weights = tape.softmax(logits)?;
    let output = tape.matmul(weights, v)?;
    Ok(AttentionOutput { output, weights, logits })
}
