//! Training loop: Adam with a step-halving learning rate on the x0 loss.

use std::io::Write;
use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{training_loss_batch, NoiseSchedule};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub halve_every: usize,
    pub batch_size: usize,
    /// Passes over the dataset per epoch. Small toy sets need several to give
    /// the optimizer enough steps.
    pub repeats_per_epoch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 50, lr: 2e-4, halve_every: 10, batch_size: 16, repeats_per_epoch: 1, seed: 0 }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.halve_every == 0 || self.batch_size == 0 || self.repeats_per_epoch == 0 {
            return Err(invalid("epochs, halve_every, batch_size and repeats_per_epoch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// `lr * 2^(-floor(epoch / halve_every))`.
pub fn lr_at_epoch(lr: f64, halve_every: usize, epoch: usize) -> f64 {
    lr * 0.5f64.powi((epoch / halve_every.max(1)) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Fits `model` to `(latents[i], indices[i])` pairs. `latents` is `(M, c, h, w)`,
/// already normalized. Calls `on_epoch` after every epoch.
pub fn train(
    model: &Denoiser,
    latents: &Tensor,
    indices: &[u64],
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    opts.validate()?;
    let m = latents.dim(0)?;
    if m != indices.len() || m == 0 {
        return Err(invalid(format!("{m} latents for {} indices", indices.len())));
    }
    let latents = latents.to_dtype(model.dtype())?;
    let params = ParamsAdamW { lr: opts.lr, weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(model.params().vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<u32> = (0..m as u32).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    let mut step = 0;
    for epoch in 0..opts.epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(opts.lr, opts.halve_every, epoch);
        opt.set_learning_rate(lr);
        let (mut total, mut steps) = (0.0, 0);
        for _ in 0..opts.repeats_per_epoch {
            order.shuffle(&mut rng);
            for chunk in order.chunks(opts.batch_size) {
                let ids = Tensor::from_slice(chunk, chunk.len(), latents.device())?;
                let x0 = latents.index_select(&ids, 0)?;
                let ys: Vec<u64> = chunk.iter().map(|&i| indices[i as usize]).collect();
                let loss = training_loss_batch(|xt, ts| model.forward(xt, ts, &ys), &x0, schedule, &mut rng)?;
                let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: value });
                }
                opt.backward_step(&loss)?;
                total += value;
                steps += 1;
                step += 1;
            }
        }
        let entry = EpochLog { epoch, lr, steps, mean_loss: total / steps as f64, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Per-epoch loss CSV. Wall-clock seconds are left out so reruns compare equal.
pub fn write_loss_csv<W: Write>(log: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "lr", "steps", "mean_loss"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.lr.to_string(), e.steps.to_string(), format!("{:.9e}", e.mean_loss)])?;
    }
    w.flush().map_err(|e| Error::io("loss csv", e))?;
    Ok(())
}
