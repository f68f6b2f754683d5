//! Transformer blocks with four ways of injecting the condition vector.
//!
//! Every block is pre-norm with residual connections:
//! self-attention, then the variant's condition pathway, then a SiLU
//! feed-forward of width `mlp_ratio * H`. Layer norms carry no affine
//! parameters.
//!
//! * `ICC`: the condition is prepended as an extra token before self-attention.
//! * `CA`: a cross-attention sublayer with queries from tokens and keys/values
//!   from the condition.
//! * `CAG`: CA whose residual is scaled by a per-dimension gate `alpha`,
//!   initialized to zero.
//! * `ALNZ`: the condition drives shift/scale/gate for both sublayers through a
//!   zero-initialized affine map.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{layer_norm, multi_head_attention, Init, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditioningKind {
    Icc,
    Ca,
    Cag,
    Alnz,
}

impl ConditioningKind {
    pub const ALL: [ConditioningKind; 4] = [ConditioningKind::Icc, ConditioningKind::Ca, ConditioningKind::Cag, ConditioningKind::Alnz];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::CorruptArchive(format!("unknown conditioning kind {code}")))
    }
}

impl fmt::Display for ConditioningKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditioningKind::Icc => "ICC",
            ConditioningKind::Ca => "CA",
            ConditioningKind::Cag => "CAG",
            ConditioningKind::Alnz => "ALNZ",
        })
    }
}

impl FromStr for ConditioningKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ICC" => Ok(ConditioningKind::Icc),
            "CA" => Ok(ConditioningKind::Ca),
            "CAG" => Ok(ConditioningKind::Cag),
            "ALNZ" => Ok(ConditioningKind::Alnz),
            other => Err(invalid(format!("unknown conditioning kind `{other}` (ICC, CA, CAG, ALNZ)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSpec {
    pub kind: ConditioningKind,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl ConditioningSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 {
            return Err(invalid("hidden size and head count must be positive"));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(invalid(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(invalid(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.hidden_size as f64).round() as usize
    }
}

/// Trainable parameters of a block without any condition pathway.
pub fn base_param_count(spec: &ConditioningSpec) -> usize {
    let h = spec.hidden_size;
    let f = spec.mlp_hidden();
    Linear::param_count(h, 3 * h) + Linear::param_count(h, h) + Linear::param_count(h, f) + Linear::param_count(f, h)
}

/// Extra trainable parameters per block relative to the unconditioned block.
pub fn extra_param_count(spec: &ConditioningSpec) -> usize {
    let h = spec.hidden_size;
    match spec.kind {
        ConditioningKind::Icc => 0,
        ConditioningKind::Ca => 4 * h * h + 4 * h,
        ConditioningKind::Cag => 4 * h * h + 5 * h,
        ConditioningKind::Alnz => 6 * h * h + 6 * h,
    }
}

#[derive(Debug, Clone)]
struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let qkv = self.qkv.forward(x)?;
        let h = qkv.dim(D::Minus1)? / 3;
        let q = qkv.narrow(D::Minus1, 0, h)?;
        let k = qkv.narrow(D::Minus1, h, h)?;
        let v = qkv.narrow(D::Minus1, 2 * h, h)?;
        self.proj.forward(&multi_head_attention(&q, &k, &v, self.heads)?)
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    /// `x: (N, L, H)`, `cond: (N, H)`.
    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let c = cond.unsqueeze(1)?;
        let q = self.q.forward(x)?;
        let k = self.k.forward(&c)?;
        let v = self.v.forward(&c)?;
        self.out.forward(&multi_head_attention(&q, &k, &v, self.heads)?)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

#[derive(Debug, Clone)]
enum Pathway {
    InContext,
    Cross(CrossAttention),
    GatedCross(CrossAttention, Tensor),
    Modulation(Linear),
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    spec: ConditioningSpec,
    attn: SelfAttention,
    mlp: FeedForward,
    pathway: Pathway,
}

pub fn make_block(spec: ConditioningSpec, store: &mut ParamStore, prefix: &str) -> Result<TransformerBlock> {
    spec.validate()?;
    let h = spec.hidden_size;
    let f = spec.mlp_hidden();
    let attn = SelfAttention {
        qkv: Linear::new(store, &format!("{prefix}.attn.qkv"), h, 3 * h, Init::Xavier)?,
        proj: Linear::new(store, &format!("{prefix}.attn.proj"), h, h, Init::Xavier)?,
        heads: spec.num_heads,
    };
    let mlp = FeedForward {
        fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), h, f, Init::Xavier)?,
        fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), f, h, Init::Xavier)?,
    };
    let cross = |store: &mut ParamStore| -> Result<CrossAttention> {
        Ok(CrossAttention {
            q: Linear::new(store, &format!("{prefix}.cross.q"), h, h, Init::Xavier)?,
            k: Linear::new(store, &format!("{prefix}.cross.k"), h, h, Init::Xavier)?,
            v: Linear::new(store, &format!("{prefix}.cross.v"), h, h, Init::Xavier)?,
            out: Linear::new(store, &format!("{prefix}.cross.out"), h, h, Init::Xavier)?,
            heads: spec.num_heads,
        })
    };
    let pathway = match spec.kind {
        ConditioningKind::Icc => Pathway::InContext,
        ConditioningKind::Ca => Pathway::Cross(cross(store)?),
        ConditioningKind::Cag => {
            let ca = cross(store)?;
            Pathway::GatedCross(ca, store.zeros(&format!("{prefix}.cross.alpha"), &[h])?)
        }
        ConditioningKind::Alnz => {
            Pathway::Modulation(Linear::new(store, &format!("{prefix}.modulation"), h, 6 * h, Init::Zeros)?)
        }
    };
    Ok(TransformerBlock { spec, attn, mlp, pathway })
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    // x: (N, L, H); shift/scale: (N, H)
    let scaled = x.broadcast_mul(&(scale.unsqueeze(1)? + 1.0)?)?;
    Ok(scaled.broadcast_add(&shift.unsqueeze(1)?)?)
}

impl TransformerBlock {
    pub fn spec(&self) -> &ConditioningSpec {
        &self.spec
    }

    /// `tokens: (N, L, H)`, `cond: (N, H)`. Returns `(N, L, H)`, or
    /// `(N, L + 1, H)` for ICC with the condition token first.
    pub fn forward(&self, tokens: &Tensor, cond: &Tensor) -> Result<Tensor> {
        match &self.pathway {
            Pathway::InContext => {
                let x = Tensor::cat(&[&cond.unsqueeze(1)?, tokens], 1)?;
                self.plain(&x)
            }
            Pathway::Cross(ca) => {
                let x = (tokens + self.attn.forward(&layer_norm(tokens)?)?)?;
                let x = (&x + ca.forward(&layer_norm(&x)?, cond)?)?;
                Ok((&x + self.mlp.forward(&layer_norm(&x)?)?)?)
            }
            Pathway::GatedCross(ca, alpha) => {
                let x = (tokens + self.attn.forward(&layer_norm(tokens)?)?)?;
                let gated = ca.forward(&layer_norm(&x)?, cond)?.broadcast_mul(alpha)?;
                let x = (&x + gated)?;
                Ok((&x + self.mlp.forward(&layer_norm(&x)?)?)?)
            }
            Pathway::Modulation(m) => {
                let params = m.forward(&cond.silu()?)?;
                let h = self.spec.hidden_size;
                let chunk = |i: usize| params.narrow(D::Minus1, i * h, h);
                let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
                let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);
                let a = self.attn.forward(&modulate(&layer_norm(tokens)?, &shift1, &scale1)?)?;
                let x = (tokens + a.broadcast_mul(&gate1.unsqueeze(1)?)?)?;
                let f = self.mlp.forward(&modulate(&layer_norm(&x)?, &shift2, &scale2)?)?;
                Ok((&x + f.broadcast_mul(&gate2.unsqueeze(1)?)?)?)
            }
        }
    }

    /// The block with its condition pathway removed: self-attention and
    /// feed-forward only.
    pub fn forward_unconditioned(&self, tokens: &Tensor) -> Result<Tensor> {
        self.plain(tokens)
    }

    fn plain(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&layer_norm(x)?)?)?;
        Ok((&x + self.mlp.forward(&layer_norm(&x)?)?)?)
    }
}
