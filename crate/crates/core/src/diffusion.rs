//! Noise schedule, forward process, x0-prediction loss and reverse samplers.
//!
//! Timesteps are 1-based: `t` in `1..=T`, with `alpha_bar(0) = 1`.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{gaussian, mse};

pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// `beta` interpolated linearly from `beta_start` to `beta_end` over `steps`.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta_start, beta_end, beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    /// The 1000-step DDPM range (1e-4 .. 0.02) rescaled to `steps`, so that
    /// `alpha_bar(T)` is close to zero for short schedules too.
    pub fn default_for(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps.max(1) as f64;
        linear_schedule(steps, 1e-4 * scale, (0.02 * scale).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance `beta_t (1 - alpha_bar(t-1)) / (1 - alpha_bar(t))`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch { expected: a.dims().to_vec(), actual: b.dims().to_vec() });
    }
    Ok(())
}

/// `sqrt(alpha_bar(t)) x0 + sqrt(1 - alpha_bar(t)) eps`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    same_shape(x0, eps)?;
    let ab = schedule.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Per-sample coefficients shaped `(N, 1, ..., 1)` to broadcast against `like`.
fn per_sample(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1usize; like.rank()];
    shape[0] = values.len();
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}

/// Batched forward process with one timestep per leading-axis sample.
pub fn forward_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps)?;
    if x0.dim(0)? != ts.len() {
        return Err(invalid(format!("{} timesteps for a batch of {}", ts.len(), x0.dim(0)?)));
    }
    for &t in ts {
        schedule.check(t)?;
    }
    let signal = per_sample(ts.iter().map(|&t| schedule.alpha_bar(t).sqrt()).collect(), x0)?;
    let noise = per_sample(ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt()).collect(), x0)?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// x0-prediction MSE at a uniformly drawn timestep and fresh Gaussian noise.
pub fn training_loss<F>(mut predict_x0: F, x0: &Tensor, schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let t = rng.random_range(1..=schedule.steps());
    let eps = gaussian(rng, x0.dims(), x0.dtype(), x0.device())?;
    let xt = forward_sample(x0, t, &eps, schedule)?;
    mse(&predict_x0(&xt, t)?, x0)
}

/// Batched [`training_loss`]: one timestep per sample, mean over all elements.
pub fn training_loss_batch<F>(
    mut predict_x0: F,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
{
    let n = x0.dim(0)?;
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = gaussian(rng, x0.dims(), x0.dtype(), x0.device())?;
    let xt = forward_sample_batch(x0, &ts, &eps, schedule)?;
    mse(&predict_x0(&xt, &ts)?, x0)
}

/// Ancestral step from the posterior `q(x_{t-1} | x_t, x0_hat)`.
/// At `t = 1` the noise term vanishes and the result is `x0_hat`.
pub fn ddpm_step(x_t: &Tensor, x0_hat: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    same_shape(x_t, x0_hat)?;
    if t == 1 {
        return Ok(x0_hat.clone());
    }
    same_shape(x_t, noise)?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = schedule.posterior_variance(t).sqrt();
    Ok(((x0_hat * c0)? + (x_t * ct)? + (noise * sigma)?)?)
}

/// Noise implied by an x0 estimate: `(x_t - sqrt(ab) x0_hat) / sqrt(1 - ab)`.
pub fn implied_noise(x_t: &Tensor, x0_hat: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(((x_t - (x0_hat * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
}

/// DDIM update; `eta = 0` is deterministic.
pub fn ddim_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.check(t)?;
    same_shape(x_t, x0_hat)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid(format!("eta must be in [0, 1], got {eta}")));
    }
    if t == 1 {
        return Ok(x0_hat.clone());
    }
    let ab_prev = schedule.alpha_bar(t - 1);
    let eps_hat = implied_noise(x_t, x0_hat, t, schedule)?;
    let sigma = eta * schedule.posterior_variance(t).sqrt();
    let direction = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = ((x0_hat * ab_prev.sqrt())? + (eps_hat * direction)?)?;
    if sigma > 0.0 {
        same_shape(x_t, noise)?;
        out = (out + (noise * sigma)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    Ddpm,
    Ddim { eta: f64 },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Ddim { eta: 0.0 }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::Ddpm => f.write_str("ddpm"),
            Sampler::Ddim { eta } => write!(f, "ddim:{eta}"),
        }
    }
}

impl FromStr for Sampler {
    type Err = Error;

    /// `ddpm`, `ddim` (eta 0) or `ddim:<eta>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.split_once(':') {
            None if s == "ddpm" => Ok(Sampler::Ddpm),
            None if s == "ddim" => Ok(Sampler::Ddim { eta: 0.0 }),
            Some(("ddim", eta)) => {
                let eta: f64 = eta.parse().map_err(|_| invalid(format!("bad eta `{eta}`")))?;
                if !(0.0..=1.0).contains(&eta) {
                    return Err(invalid(format!("eta must be in [0, 1], got {eta}")));
                }
                Ok(Sampler::Ddim { eta })
            }
            _ => Err(invalid(format!("unknown sampler `{s}` (ddpm, ddim, ddim:<eta>)"))),
        }
    }
}

/// Runs the reverse process from `initial_noise` at `t = T` down to `t = 1`.
///
/// Stochastic steps draw from a ChaCha8 stream seeded with `seed` (stream 1).
pub fn sample<F>(
    mut predict_x0: F,
    initial_noise: &Tensor,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    seed: u64,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut x = initial_noise.clone();
    for t in (1..=schedule.steps()).rev() {
        let x0_hat = predict_x0(&x, t)?;
        let needs_noise = t > 1 && !matches!(sampler, Sampler::Ddim { eta } if eta == 0.0);
        let noise = if needs_noise {
            gaussian(&mut rng, x.dims(), x.dtype(), x.device())?
        } else {
            x.zeros_like()?
        };
        x = match sampler {
            Sampler::Ddpm => ddpm_step(&x, &x0_hat, t, schedule, &noise)?,
            Sampler::Ddim { eta } => ddim_step(&x, &x0_hat, t, schedule, eta, &noise)?,
        };
    }
    Ok(x)
}

/// Per-sample mean over all non-batch axes.
pub fn per_sample_mse(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let n = a.dim(0)?;
    let d = (a - b)?.sqr()?.reshape((n, ()))?.mean(D::Minus1)?;
    Ok(d.to_dtype(candle_core::DType::F64)?.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use candle_core::{DType, Device, Var};

    fn scalar(x: f64) -> Tensor {
        Tensor::new(&[x], &Device::Cpu).unwrap()
    }

    fn v(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = linear_schedule(1, 0.2, 0.2).unwrap();
        assert_eq!(s.beta, vec![0.2]);
        assert_relative_eq!(s.alpha_bar(1), 0.8);

        let s = linear_schedule(2, 0.1, 0.3).unwrap();
        assert_relative_eq!(s.beta(1), 0.1);
        assert_relative_eq!(s.beta(2), 0.3);
        assert_relative_eq!(s.alpha_bar(1), 0.9);
        assert_relative_eq!(s.alpha_bar(2), 0.63, max_relative = 1e-12);

        let s = linear_schedule(50, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(50) < 0.61);
    }

    #[test]
    fn schedule_bounds() {
        assert!(linear_schedule(0, 0.1, 0.2).is_err());
        assert!(linear_schedule(10, 0.0, 0.2).is_err());
        assert!(linear_schedule(10, 0.3, 0.2).is_err());
        assert!(linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_invariants() {
        for s in [NoiseSchedule::default_for(50).unwrap(), linear_schedule(50, 1e-4, 0.02).unwrap(), NoiseSchedule::default_for(7).unwrap()] {
            let mut prod = 1.0;
            for t in 1..=s.steps() {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                prod *= 1.0 - s.beta(t);
                assert_relative_eq!(s.alpha_bar(t), prod, max_relative = 1e-6);
                if t >= 2 {
                    let var = s.posterior_variance(t);
                    assert!(var > 0.0 && var <= s.beta(t));
                }
            }
        }
        assert!(NoiseSchedule::default_for(50).unwrap().alpha_bar(50) < 1e-3);
    }

    #[test]
    fn forward_sample_branches() {
        let s = linear_schedule(10, 0.01, 0.2).unwrap();
        let x0 = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let zero = x0.zeros_like().unwrap();
        let out = forward_sample(&x0, 4, &zero, &s).unwrap();
        for (a, b) in v(&out).iter().zip(v(&x0)) {
            assert_relative_eq!(*a, b * s.alpha_bar(4).sqrt());
        }
        let out = forward_sample(&zero, 4, &x0, &s).unwrap();
        for (a, b) in v(&out).iter().zip(v(&x0)) {
            assert_relative_eq!(*a, b * (1.0 - s.alpha_bar(4)).sqrt());
        }
        assert!(matches!(forward_sample(&x0, 0, &zero, &s), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(forward_sample(&x0, 11, &zero, &s), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn loss_examples() {
        let s = NoiseSchedule::default_for(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::new(&[0.3f64, -0.7, 1.2, 0.0], &Device::Cpu).unwrap();
        let l = training_loss(|_, _| Ok(x0.clone()), &x0, &s, &mut rng).unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), 0.0);
        let l = training_loss(|_, _| Ok((&x0 + 0.25).unwrap()), &x0, &s, &mut rng).unwrap();
        assert_relative_eq!(l.to_scalar::<f64>().unwrap(), 0.0625, max_relative = 1e-12);
        // Zero predictor against a unit mean-square target: loss is exactly mean(x0^2).
        let unit = Tensor::new(&[1.0f64, -1.0, 1.0, -1.0], &Device::Cpu).unwrap();
        let mut total = 0.0;
        for _ in 0..100 {
            total += training_loss(|x, _| x.zeros_like().map_err(Into::into), &unit, &s, &mut rng)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
        }
        assert_relative_eq!(total / 100.0, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn ddpm_examples() {
        let s = linear_schedule(2, 0.1, 0.3).unwrap();
        let xt = scalar(1.0);
        let x0 = scalar(0.5);
        let zero = scalar(0.0);
        assert_eq!(v(&ddpm_step(&xt, &x0, 1, &s, &scalar(3.0)).unwrap()), vec![0.5]);
        assert_eq!(v(&ddpm_step(&zero, &zero, 2, &s, &zero).unwrap()), vec![0.0]);
        // sqrt(0.9)*0.3/0.37 * 0.5 + sqrt(0.7)*0.1/0.37 * 1, at 40 digits.
        let out = v(&ddpm_step(&xt, &x0, 2, &s, &zero).unwrap())[0];
        assert_relative_eq!(out, 0.61072566854320168848, max_relative = 1e-14);
        assert_relative_eq!(s.posterior_variance(2), 0.081081081081081081, max_relative = 1e-14);
        assert!(ddpm_step(&xt, &x0, 3, &s, &zero).is_err());
    }

    #[test]
    fn ddim_inverts_forward_marginal() {
        let s = NoiseSchedule::default_for(50).unwrap();
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = gaussian(&mut rng, &[2, 3, 4], DType::F64, &dev).unwrap();
        let eps = gaussian(&mut rng, &[2, 3, 4], DType::F64, &dev).unwrap();
        for t in 1..=50 {
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let eps_hat = implied_noise(&xt, &x0, t, &s).unwrap();
            for (a, b) in v(&eps_hat).iter().zip(v(&eps)) {
                assert!((a - b).abs() < 1e-9, "t={t}");
            }
            // One deterministic step lands on the marginal at t-1 with the same noise.
            let prev = ddim_step(&xt, &x0, t, &s, 0.0, &eps).unwrap();
            let expect = if t == 1 { x0.clone() } else { forward_sample(&x0, t - 1, &eps, &s).unwrap() };
            for (a, b) in v(&prev).iter().zip(v(&expect)) {
                assert!((a - b).abs() < 1e-9, "t={t}");
            }
        }
        let xt = forward_sample(&x0, 1, &eps, &s).unwrap();
        assert_eq!(v(&ddim_step(&xt, &x0, 1, &s, 0.0, &eps).unwrap()), v(&x0));
    }

    #[test]
    fn oracle_sampling_recovers_x0() {
        let s = NoiseSchedule::default_for(50).unwrap();
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = gaussian(&mut rng, &[3, 8, 8], DType::F32, &dev).unwrap();
        for seed in 0..3 {
            let noise = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), &[3, 8, 8], DType::F32, &dev).unwrap();
            for sampler in [Sampler::Ddim { eta: 0.0 }, Sampler::Ddpm, Sampler::Ddim { eta: 0.5 }] {
                let out = sample(|_, _| Ok(x0.clone()), &noise, &s, sampler, seed).unwrap();
                let err = (out - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
                assert!(err <= 1e-5, "{sampler}: {err}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = NoiseSchedule::default_for(20).unwrap();
        let dev = Device::Cpu;
        let noise = gaussian(&mut ChaCha8Rng::seed_from_u64(1), &[4, 4], DType::F32, &dev).unwrap();
        let pred = |x: &Tensor, _t: usize| -> Result<Tensor> { Ok((x * 0.5)?.tanh()?) };
        for sampler in [Sampler::Ddpm, Sampler::Ddim { eta: 0.0 }] {
            let a = sample(pred, &noise, &s, sampler, 42).unwrap();
            let b = sample(pred, &noise, &s, sampler, 42).unwrap();
            assert_eq!(v(&a), v(&b));
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = linear_schedule(1, 0.5, 0.5).unwrap();
        let noise = scalar(2.0);
        let mut seen = Vec::new();
        let out = sample(
            |x, t| {
                seen.push(t);
                Ok((x * 3.0)?)
            },
            &noise,
            &s,
            Sampler::Ddpm,
            0,
        )
        .unwrap();
        assert_eq!(seen, vec![1]);
        assert_eq!(v(&out), vec![6.0]);
    }

    #[test]
    fn sampler_parsing() {
        assert_eq!("ddpm".parse::<Sampler>().unwrap(), Sampler::Ddpm);
        assert_eq!("DDIM".parse::<Sampler>().unwrap(), Sampler::Ddim { eta: 0.0 });
        assert_eq!("ddim:0.3".parse::<Sampler>().unwrap(), Sampler::Ddim { eta: 0.3 });
        assert!("ddim:2".parse::<Sampler>().is_err());
        assert!("euler".parse::<Sampler>().is_err());
    }

    /// Loss of `x0_hat = a * x_t + b` with a fixed rng seed, as a plain f64.
    fn toy_loss(a: f64, b: f64, x0: &Tensor, s: &NoiseSchedule) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        training_loss(|x, _| Ok(((x * a)? + b)?), x0, s, &mut rng).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = NoiseSchedule::default_for(50).unwrap();
        let dev = Device::Cpu;
        let x0 = gaussian(&mut ChaCha8Rng::seed_from_u64(5), &[16], DType::F64, &dev).unwrap();
        let (a0, b0) = (0.7, -0.2);
        let a = Var::new(&[a0], &dev).unwrap();
        let b = Var::new(&[b0], &dev).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let loss = training_loss(
            |x, _| Ok(x.broadcast_mul(a.as_tensor())?.broadcast_add(b.as_tensor())?),
            &x0,
            &s,
            &mut rng,
        )
        .unwrap();
        let grads = loss.backward().unwrap();
        let ga = grads.get(&a).unwrap().to_vec1::<f64>().unwrap()[0];
        let gb = grads.get(&b).unwrap().to_vec1::<f64>().unwrap()[0];
        let h = 1e-5;
        let fa = (toy_loss(a0 + h, b0, &x0, &s) - toy_loss(a0 - h, b0, &x0, &s)) / (2.0 * h);
        let fb = (toy_loss(a0, b0 + h, &x0, &s) - toy_loss(a0, b0 - h, &x0, &s)) / (2.0 * h);
        assert_relative_eq!(ga, fa, max_relative = 1e-4);
        assert_relative_eq!(gb, fb, max_relative = 1e-4);
    }
}
