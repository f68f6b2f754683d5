//! Index embedders: map an integer index to a condition vector of width `H`.
//!
//! | kind | features                                     | trainable      | frozen |
//! |------|----------------------------------------------|----------------|--------|
//! | GRF  | `cos/sin(2π f_j y)`, `f_j ~ N(0, 1)` seeded  | 0              | H/2    |
//! | EDF  | `cos/sin(w_i y)`, `w_i = 10000^(-2i/H)`, then two H→H layers | 2H² + 2H | H/2 |
//! | LET  | row `y` of an `M x H` table                  | M·H            | 0      |
//! | MLP  | two layers on `y / M` (1→H→H)                | H² + 3H        | 0      |
//!
//! Features are interleaved: element `2j` is the cosine and `2j + 1` the sine.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Init, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbeddingKind {
    Grf,
    Edf,
    Let,
    Mlp,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 4] = [EmbeddingKind::Grf, EmbeddingKind::Edf, EmbeddingKind::Let, EmbeddingKind::Mlp];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::CorruptArchive(format!("unknown embedding kind {code}")))
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Grf => "GRF",
            EmbeddingKind::Edf => "EDF",
            EmbeddingKind::Let => "LET",
            EmbeddingKind::Mlp => "MLP",
        })
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GRF" => Ok(EmbeddingKind::Grf),
            "EDF" => Ok(EmbeddingKind::Edf),
            "LET" => Ok(EmbeddingKind::Let),
            "MLP" => Ok(EmbeddingKind::Mlp),
            other => Err(invalid(format!("unknown embedding kind `{other}` (GRF, EDF, LET, MLP)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    pub hidden_size: usize,
    pub num_images: u64,
    pub seed: u64,
}

impl EmbeddingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.hidden_size % 2 != 0 {
            return Err(invalid(format!("embedding width must be positive and even, got {}", self.hidden_size)));
        }
        if self.num_images == 0 {
            return Err(invalid("embedding needs the number of images (M >= 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub training_free: usize,
}

pub fn param_count(spec: &EmbeddingSpec) -> ParamCount {
    let h = spec.hidden_size;
    match spec.kind {
        EmbeddingKind::Grf => ParamCount { trainable: 0, training_free: h / 2 },
        EmbeddingKind::Edf => ParamCount { trainable: 2 * h * h + 2 * h, training_free: h / 2 },
        EmbeddingKind::Let => ParamCount { trainable: spec.num_images as usize * h, training_free: 0 },
        EmbeddingKind::Mlp => ParamCount { trainable: h * h + 3 * h, training_free: 0 },
    }
}

/// Seeded `N(0, 1)` frequencies for GRF.
pub fn gaussian_frequencies(seed: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.sample(StandardNormal)).collect()
}

/// `10000^(-2i/H)` for `i < H/2`.
pub fn decay_frequencies(hidden: usize) -> Vec<f64> {
    (0..hidden / 2)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / hidden as f64))
        .collect()
}

/// Interleaved `[cos(w_0 y), sin(w_0 y), cos(w_1 y), ...]` in f64.
fn sinusoid(angular: &[f64], y: f64) -> impl Iterator<Item = f64> + '_ {
    angular.iter().flat_map(move |w| {
        let (s, c) = (w * y).sin_cos();
        [c, s]
    })
}

#[derive(Debug, Clone)]
enum Trainable {
    None,
    Projection(Linear, Linear),
    Table(Tensor),
}

/// An index embedder. Frozen frequencies never change; trainable state lives
/// in the [`ParamStore`] the embedder was built from.
#[derive(Debug, Clone)]
pub struct Embedder {
    spec: EmbeddingSpec,
    /// Angular frequencies (GRF: `2π f_j`; EDF: the decay ladder).
    angular: Vec<f64>,
    raw_frequencies: Vec<f64>,
    trainable: Trainable,
    dtype: DType,
    device: Device,
}

/// Builds an embedder, registering trainable parameters under `prefix`.
pub fn make_embedder(spec: EmbeddingSpec, store: &mut ParamStore, prefix: &str) -> Result<Embedder> {
    spec.validate()?;
    let h = spec.hidden_size;
    let (raw, trainable) = match spec.kind {
        EmbeddingKind::Grf => (gaussian_frequencies(spec.seed, h / 2), Trainable::None),
        EmbeddingKind::Edf => (
            decay_frequencies(h),
            Trainable::Projection(
                Linear::new(store, &format!("{prefix}.fc1"), h, h, Init::Xavier)?,
                Linear::new(store, &format!("{prefix}.fc2"), h, h, Init::Xavier)?,
            ),
        ),
        EmbeddingKind::Let => (
            Vec::new(),
            Trainable::Table(store.normal(&format!("{prefix}.table"), &[spec.num_images as usize, h], 0.02)?),
        ),
        EmbeddingKind::Mlp => (
            Vec::new(),
            Trainable::Projection(
                Linear::new(store, &format!("{prefix}.fc1"), 1, h, Init::Xavier)?,
                Linear::new(store, &format!("{prefix}.fc2"), h, h, Init::Xavier)?,
            ),
        ),
    };
    let angular = match spec.kind {
        EmbeddingKind::Grf => raw.iter().map(|f| 2.0 * std::f64::consts::PI * f).collect(),
        _ => raw.clone(),
    };
    Ok(Embedder {
        spec,
        angular,
        raw_frequencies: raw,
        trainable,
        dtype: store.dtype(),
        device: store.device().clone(),
    })
}

impl Embedder {
    pub fn spec(&self) -> &EmbeddingSpec {
        &self.spec
    }

    /// The frozen (training-free) frequencies.
    pub fn frozen_frequencies(&self) -> &[f64] {
        &self.raw_frequencies
    }

    pub fn embed(&self, y: u64) -> Result<Tensor> {
        Ok(self.embed_batch(&[y])?.squeeze(0)?)
    }

    /// Embeds a batch of indices into `(N, H)`.
    pub fn embed_batch(&self, ys: &[u64]) -> Result<Tensor> {
        let h = self.spec.hidden_size;
        let n = ys.len();
        match (&self.spec.kind, &self.trainable) {
            (EmbeddingKind::Let, Trainable::Table(table)) => {
                let m = self.spec.num_images;
                let mut ids = Vec::with_capacity(n);
                for &y in ys {
                    if y >= m {
                        return Err(Error::IndexOutOfRange { index: y, count: m });
                    }
                    ids.push(y as u32);
                }
                let ids = Tensor::from_vec(ids, n, &self.device)?;
                Ok(table.index_select(&ids, 0)?)
            }
            (EmbeddingKind::Mlp, Trainable::Projection(fc1, fc2)) => {
                let m = self.spec.num_images as f64;
                let x: Vec<f64> = ys.iter().map(|&y| y as f64 / m).collect();
                let x = Tensor::from_vec(x, (n, 1), &self.device)?.to_dtype(self.dtype)?;
                Ok(fc2.forward(&fc1.forward(&x)?.silu()?)?)
            }
            (kind, trainable) => {
                let feats: Vec<f64> = ys.iter().flat_map(|&y| sinusoid(&self.angular, y as f64)).collect();
                let feats = Tensor::from_vec(feats, (n, h), &self.device)?.to_dtype(self.dtype)?;
                match (kind, trainable) {
                    (EmbeddingKind::Edf, Trainable::Projection(fc1, fc2)) => {
                        Ok(fc2.forward(&fc1.forward(&feats)?.silu()?)?)
                    }
                    _ => Ok(feats),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: EmbeddingKind, h: usize, m: u64, seed: u64) -> EmbeddingSpec {
        EmbeddingSpec { kind, hidden_size: h, num_images: m, seed }
    }

    fn build(s: EmbeddingSpec) -> (ParamStore, Embedder) {
        let mut store = ParamStore::new(1, DType::F64);
        let e = make_embedder(s, &mut store, "emb").unwrap();
        (store, e)
    }

    fn vec1(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn odd_width_rejected() {
        let mut store = ParamStore::new(0, DType::F32);
        assert!(make_embedder(spec(EmbeddingKind::Grf, 5, 1, 0), &mut store, "e").is_err());
    }

    #[test]
    fn grf_is_seeded_and_frozen() {
        let (s1, a) = build(spec(EmbeddingKind::Grf, 4, 10, 99));
        let (_, b) = build(spec(EmbeddingKind::Grf, 4, 10, 99));
        let (_, c) = build(spec(EmbeddingKind::Grf, 4, 10, 100));
        assert_eq!(a.frozen_frequencies().len(), 2);
        assert_eq!(a.frozen_frequencies(), b.frozen_frequencies());
        assert_ne!(a.frozen_frequencies(), c.frozen_frequencies());
        assert_eq!(s1.trainable_count(), 0);
    }

    #[test]
    fn grf_at_zero_and_range() {
        let (_, e) = build(spec(EmbeddingKind::Grf, 16, 10, 3));
        let v = vec1(&e.embed(0).unwrap());
        for j in 0..8 {
            assert_eq!(v[2 * j], 1.0);
            assert_eq!(v[2 * j + 1], 0.0);
        }
        for y in [1u64, 7, 12345, 1 << 40] {
            assert!(vec1(&e.embed(y).unwrap()).iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        // cos/sin of the same angle lie on the unit circle.
        let v = vec1(&e.embed(5).unwrap());
        let f = e.frozen_frequencies();
        for j in 0..8 {
            let angle = 2.0 * std::f64::consts::PI * f[j] * 5.0;
            assert!((v[2 * j] - angle.cos()).abs() < 1e-12);
            assert!((v[2 * j + 1] - angle.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn let_table_lookup() {
        let (store, e) = build(spec(EmbeddingKind::Let, 4, 10, 0));
        assert_eq!(store.trainable_count(), 40);
        let var = store.get("emb.table").unwrap();
        let mut rows = var.as_tensor().to_vec2::<f64>().unwrap();
        rows[3] = vec![1.0; 4];
        var.set(&Tensor::new(rows, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(vec1(&e.embed(3).unwrap()), vec![1.0; 4]);
        assert!(matches!(e.embed(10), Err(Error::IndexOutOfRange { index: 10, count: 10 })));
    }

    #[test]
    fn edf_ladder_and_projection() {
        let (store, e) = build(spec(EmbeddingKind::Edf, 4, 1, 0));
        assert_eq!(e.frozen_frequencies(), &[1.0, 0.01]);
        assert_eq!(store.trainable_count(), 2 * 16 + 2 * 4);
        assert_eq!(e.embed(3).unwrap().dims(), &[4]);
    }

    #[test]
    fn mlp_shape() {
        let (store, e) = build(spec(EmbeddingKind::Mlp, 6, 100, 0));
        assert_eq!(store.trainable_count(), 36 + 18);
        assert_eq!(e.embed_batch(&[0, 50, 99]).unwrap().dims(), &[3, 6]);
    }

    #[test]
    fn accounting_matches_instantiation() {
        for kind in EmbeddingKind::ALL {
            for h in [2usize, 8, 144] {
                let s = spec(kind, h, 37, 5);
                let (store, _) = build(s);
                assert_eq!(store.trainable_count(), param_count(&s).trainable, "{kind} H={h}");
            }
        }
    }

    #[test]
    fn accounting_examples() {
        assert_eq!(param_count(&spec(EmbeddingKind::Grf, 144, 1, 0)), ParamCount { trainable: 0, training_free: 72 });
        assert_eq!(param_count(&spec(EmbeddingKind::Let, 144, 4000, 0)).trainable, 576_000);
        assert_eq!(param_count(&spec(EmbeddingKind::Edf, 144, 1, 0)), ParamCount { trainable: 41_760, training_free: 72 });
    }

    #[test]
    fn growth_orders() {
        for h in (2..2000).step_by(2) {
            assert_eq!(param_count(&spec(EmbeddingKind::Grf, h, 1, 0)).trainable, 0);
        }
        let ratio = |h: usize| param_count(&spec(EmbeddingKind::Edf, h, 1, 0)).trainable as f64 / (h * h) as f64;
        assert!((ratio(10_000) - 2.0).abs() < 1e-3);
        assert!((ratio(100) - 2.0).abs() > (ratio(1000) - 2.0).abs());
        let let_at = |m: u64| param_count(&spec(EmbeddingKind::Let, 32, m, 0)).trainable;
        assert_eq!(let_at(200) - let_at(100), let_at(300) - let_at(200));
    }

    #[test]
    fn grf_distinguishes_many_indices() {
        let (_, e) = build(spec(EmbeddingKind::Grf, 32, 10_000, 2024));
        let t = e.embed_batch(&(0..10_000).collect::<Vec<_>>()).unwrap();
        let rows = t.to_vec2::<f64>().unwrap();
        let mut keys: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 10_000);
    }

    #[test]
    fn embeddings_are_deterministic() {
        for kind in EmbeddingKind::ALL {
            let s = spec(kind, 8, 20, 17);
            let (_, a) = build(s);
            let (_, b) = build(s);
            for y in [0u64, 5, 19] {
                let (x, z) = (vec1(&a.embed(y).unwrap()), vec1(&b.embed(y).unwrap()));
                assert_eq!(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), z.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}
