//! Index-conditioned diffusion transformer predicting the clean latent.
//!
//! latent `(c, h, w)` → `p x p` patches → linear token embedding + fixed 2D
//! sin-cos positions → `B` conditioned blocks → layer norm → zero-initialized
//! linear head → unpatchify.
//!
//! The condition vector is `index_embedding(y) + time_embedding(t)`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::{base_param_count, extra_param_count, make_block, ConditioningKind, ConditioningSpec, TransformerBlock};
use crate::embedding::{make_embedder, param_count, Embedder, EmbeddingKind, EmbeddingSpec};
use crate::error::{invalid, Error, Result};
use crate::nn::{layer_norm, Init, Linear, ParamStore};

/// Seed offset separating the timestep embedder's frozen frequencies from the
/// index embedder's.
const TIME_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    /// `(channels, height, width)`.
    pub latent_shape: [usize; 3],
    pub embedding: EmbeddingKind,
    pub num_images: u64,
    pub embedding_seed: u64,
    pub conditioning: ConditioningKind,
    pub mlp_ratio: f64,
}

/// The divisor of `hidden` closest to `hidden / 12`.
pub fn default_heads(hidden: usize) -> usize {
    let target = (hidden as f64 / 12.0).max(1.0);
    (1..=hidden.max(1))
        .filter(|d| hidden % d == 0)
        .min_by(|a, b| {
            let da = (*a as f64 - target).abs();
            let db = (*b as f64 - target).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(1)
}

impl DenoiserConfig {
    pub fn embedding_spec(&self) -> EmbeddingSpec {
        EmbeddingSpec {
            kind: self.embedding,
            hidden_size: self.hidden_size,
            num_images: self.num_images,
            seed: self.embedding_seed,
        }
    }

    /// Timestep embedder: same kind as the index embedder for GRF/EDF, GRF otherwise.
    pub fn time_embedding_spec(&self) -> EmbeddingSpec {
        let kind = match self.embedding {
            EmbeddingKind::Edf => EmbeddingKind::Edf,
            _ => EmbeddingKind::Grf,
        };
        EmbeddingSpec {
            kind,
            hidden_size: self.hidden_size,
            num_images: 1,
            seed: self.embedding_seed ^ TIME_SEED_SALT,
        }
    }

    pub fn conditioning_spec(&self) -> ConditioningSpec {
        ConditioningSpec {
            kind: self.conditioning,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let [_, h, w] = self.latent_shape;
        (h / self.patch_size.max(1), w / self.patch_size.max(1))
    }

    pub fn num_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.latent_shape[0] * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let [c, h, w] = self.latent_shape;
        let p = self.patch_size;
        if self.depth == 0 {
            problems.push("depth must be >= 1".to_string());
        }
        if c == 0 || h == 0 || w == 0 {
            problems.push(format!("latent shape {:?} has an empty axis", self.latent_shape));
        }
        if p == 0 || h % p.max(1) != 0 || w % p.max(1) != 0 {
            problems.push(format!("patch size {p} must divide latent height {h} and width {w}"));
        }
        if let Err(e) = self.embedding_spec().validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.conditioning_spec().validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }
}

/// Closed-form trainable parameter count.
///
/// The position embedding is fixed and contributes nothing; an EDF timestep
/// embedder contributes its projection.
pub fn total_param_count(config: &DenoiserConfig) -> usize {
    let h = config.hidden_size;
    let pd = config.patch_dim();
    let cond = config.conditioning_spec();
    Linear::param_count(pd, h)
        + config.depth * (base_param_count(&cond) + extra_param_count(&cond))
        + param_count(&config.embedding_spec()).trainable
        + param_count(&config.time_embedding_spec()).trainable
        + Linear::param_count(h, pd)
}

/// Interleaved cos/sin encoding of `pos` into `dim` values.
fn sincos(pos: f64, dim: usize, out: &mut Vec<f64>) {
    for i in 0..dim {
        let omega = 10000f64.powf(-((2 * (i / 2)) as f64) / dim as f64);
        let a = pos * omega;
        out.push(if i % 2 == 0 { a.cos() } else { a.sin() });
    }
}

/// Fixed `(gh * gw, H)` position table: first half encodes the row, second the column.
pub fn position_table(gh: usize, gw: usize, hidden: usize) -> Vec<f64> {
    let rows = hidden / 2;
    let mut out = Vec::with_capacity(gh * gw * hidden);
    for r in 0..gh {
        for c in 0..gw {
            sincos(r as f64, rows, &mut out);
            sincos(c as f64, hidden - rows, &mut out);
        }
    }
    out
}

/// `(N, c, h, w)` → `(N, (h/p)(w/p), c p p)`, tokens in row-major grid order.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(invalid(format!("patch size {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(x
        .reshape(vec![n, c, gh, p, gw, p])?
        .permute(vec![0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((n, gh * gw, c * p * p))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, p: usize, shape: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = shape;
    let (n, l, d) = tokens.dims3()?;
    let (gh, gw) = (h / p, w / p);
    if l != gh * gw || d != c * p * p {
        return Err(Error::ShapeMismatch { expected: vec![n, gh * gw, c * p * p], actual: vec![n, l, d] });
    }
    Ok(tokens
        .reshape(vec![n, gh, gw, c, p, p])?
        .permute(vec![0, 3, 1, 4, 2, 5])?
        .contiguous()?
        .reshape((n, c, h, w))?)
}

pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    patch: Linear,
    positions: Tensor,
    index: Embedder,
    time: Embedder,
    blocks: Vec<TransformerBlock>,
    head: Linear,
}

/// Builds a freshly initialized model; identical `(config, seed, dtype)` give
/// bit-identical parameters.
pub fn build(config: DenoiserConfig, init_seed: u64, dtype: DType) -> Result<Denoiser> {
    config.validate()?;
    let h = config.hidden_size;
    let mut store = ParamStore::new(init_seed, dtype);
    let patch = Linear::new(&mut store, "patch", config.patch_dim(), h, Init::Xavier)?;
    let index = make_embedder(config.embedding_spec(), &mut store, "index")?;
    let time = make_embedder(config.time_embedding_spec(), &mut store, "time")?;
    let blocks = (0..config.depth)
        .map(|i| make_block(config.conditioning_spec(), &mut store, &format!("blocks.{i:03}")))
        .collect::<Result<Vec<_>>>()?;
    let head = Linear::new(&mut store, "head", h, config.patch_dim(), Init::Zeros)?;
    let (gh, gw) = config.grid();
    let positions = Tensor::from_vec(position_table(gh, gw, h), (1, gh * gw, h), store.device())?.to_dtype(dtype)?;
    Ok(Denoiser { config, store, patch, positions, index, time, blocks, head })
}

impl Denoiser {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Condition vectors `(N, H)` for paired timesteps and indices.
    pub fn condition(&self, ts: &[usize], ys: &[u64]) -> Result<Tensor> {
        let t: Vec<u64> = ts.iter().map(|&t| t as u64).collect();
        Ok((self.index.embed_batch(ys)? + self.time.embed_batch(&t)?)?)
    }

    /// Batched prediction. `x: (N, c, h, w)`, one timestep and index per sample.
    pub fn forward(&self, x: &Tensor, ts: &[usize], ys: &[u64]) -> Result<Tensor> {
        let dims = x.dims();
        let [c, h, w] = self.config.latent_shape;
        if dims.len() != 4 || dims[1..] != [c, h, w] {
            let mut expected = vec![dims.first().copied().unwrap_or(1)];
            expected.extend([c, h, w]);
            return Err(Error::ShapeMismatch { expected, actual: dims.to_vec() });
        }
        let n = dims[0];
        if ts.len() != n || ys.len() != n {
            return Err(invalid(format!("batch of {n} with {} timesteps and {} indices", ts.len(), ys.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0) {
            return Err(Error::TimestepOutOfRange { t, steps: usize::MAX });
        }
        let cond = self.condition(ts, ys)?;
        let p = self.config.patch_size;
        let mut tokens = self.patch.forward(&patchify(x, p)?)?.broadcast_add(&self.positions)?;
        let l = tokens.dim(1)?;
        for block in &self.blocks {
            tokens = block.forward(&tokens, &cond)?;
            if self.config.conditioning == ConditioningKind::Icc {
                tokens = tokens.narrow(1, 1, l)?;
            }
        }
        let out = self.head.forward(&layer_norm(&tokens)?)?;
        unpatchify(&out, p, self.config.latent_shape)
    }

    /// Single-sample prediction on an unbatched `(c, h, w)` latent.
    pub fn predict_x0(&self, x_t: &Tensor, t: usize, y: u64) -> Result<Tensor> {
        if x_t.dims() != self.config.latent_shape {
            return Err(Error::ShapeMismatch { expected: self.config.latent_shape.to_vec(), actual: x_t.dims().to_vec() });
        }
        Ok(self.forward(&x_t.unsqueeze(0)?, &[t], &[y])?.squeeze(0)?)
    }
}
