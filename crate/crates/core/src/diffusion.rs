//! Noise schedule, closed-form forward diffusion, the noise-prediction
//! objective and the accelerated deterministic reverse sampler.
//!
//! Step indices follow the 1-based convention `k ∈ {1, …, K}`; step 0 is the
//! clean signal with `ᾱ_0 = 1`.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ensure_finite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Per-step variance tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(Error::Config(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.betas[self.check(k)?])
    }

    pub fn alpha(&self, k: usize) -> Result<f64> {
        Ok(self.alphas[self.check(k)?])
    }

    /// Cumulative product `ᾱ_k`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(k)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Builds `K` linearly spaced variances from `beta_start` to `beta_end`.
pub fn build_schedule(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

/// `x_k = √ᾱ_k x_0 + √(1 − ᾱ_k) ε`.
pub fn forward_diffuse(x0: &Tensor, k: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(schedule.check(k)? + 1)?;
    Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

fn per_row(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_slice(values, shape.as_slice(), like.device())?.to_dtype(like.dtype())?)
}

/// Forward diffusion with an individual step per leading-axis row.
pub fn forward_diffuse_batch(x0: &Tensor, steps: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims()[0] != steps.len() {
        return Err(Error::Shape(format!(
            "{} diffusion steps for a batch of {}",
            steps.len(),
            x0.dims()[0]
        )));
    }
    let mut signal = Vec::with_capacity(steps.len());
    let mut noise = Vec::with_capacity(steps.len());
    for &k in steps {
        let ab = schedule.alpha_bar(schedule.check(k)? + 1)?;
        signal.push(ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let a = x0.broadcast_mul(&per_row(&signal, x0)?)?;
    let b = eps.broadcast_mul(&per_row(&noise, eps)?)?;
    Ok((a + b)?)
}

/// `x̂_0 = (x_k − √(1 − ᾱ_k) ε̂) / √ᾱ_k`.
pub fn estimate_x0(x_k: &Tensor, k: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(schedule.check(k)? + 1)?;
    let inv = 1.0 / ab.sqrt();
    Ok((x_k - eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?.affine(inv, 0.0)?)
}

/// Deterministic jump from step `k` to `k − stride`:
/// `x_{k−s} = √ᾱ_{k−s} x̂_0 + √(1 − ᾱ_{k−s}) ε̂`.
pub fn ddim_step(
    x_k: &Tensor,
    k: usize,
    stride: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if stride == 0 || stride > k {
        return Err(Error::Config(format!("cannot step {stride} back from step {k}")));
    }
    let x0 = estimate_x0(x_k, k, eps_hat, schedule)?;
    let ab_prev = schedule.alpha_bar(k - stride)?;
    if ab_prev == 1.0 {
        return Ok(x0);
    }
    Ok((x0.affine(ab_prev.sqrt(), 0.0)? + eps_hat.affine((1.0 - ab_prev).sqrt(), 0.0)?)?)
}

/// The conditional noise-prediction network `ε_θ(x_k, k | c)`.
pub trait NoisePredictor {
    /// `x_k` is `(batch, H, 2)`, `steps` holds one diffusion step per row and
    /// `condition` is `(batch, 3, d)`. Returns predicted noise shaped like `x_k`.
    fn predict_noise(&self, x_k: &Tensor, steps: &[usize], condition: &Tensor) -> Result<Tensor>;
}

impl<T: NoisePredictor + ?Sized> NoisePredictor for &T {
    fn predict_noise(&self, x_k: &Tensor, steps: &[usize], condition: &Tensor) -> Result<Tensor> {
        (**self).predict_noise(x_k, steps, condition)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of diffusion steps skipped per reverse iteration.
    pub stride: usize,
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.stride == 0 || schedule.steps() % self.stride != 0 {
            return Err(Error::Config(format!(
                "sampling stride {} must divide the {} diffusion steps",
                self.stride,
                schedule.steps()
            )));
        }
        Ok(())
    }

    /// Steps visited by the reverse loop, `K, K − s, …, s`.
    pub fn reverse_steps(&self, schedule: &NoiseSchedule) -> Vec<usize> {
        (1..=schedule.steps() / self.stride)
            .rev()
            .map(|i| i * self.stride)
            .collect()
    }
}

/// One retained reverse-process state.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub k: usize,
    /// `(batch·n, H, 2)`, same layout as [`SampleOutput::samples`].
    pub x: Tensor,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// `(batch·n, H, 2)`: row `b·n + i` is sample `i` of condition `b`.
    pub samples: Tensor,
    /// States at `k = K, K − s, …, 0` when tracing was requested.
    pub trace: Vec<TraceStep>,
    pub denoiser_calls: usize,
}

/// Draws `count` standard-normal values.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::from_vec(standard_normal(rng, n), shape, device)?.to_dtype(dtype)?)
}

/// Uniform draw from `{1, …, K}`.
pub fn sample_step<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.random_range(1..=steps)
}

/// Runs the reverse process for `n_samples` independent starts per condition
/// row. The condition is computed once by the caller and reused at every
/// step.
pub fn sample<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    condition: &Tensor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    n_samples: usize,
    horizon: usize,
    rng: &mut R,
    keep_trace: bool,
) -> Result<SampleOutput> {
    config.validate(schedule)?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let batch = condition.dims()[0];
    let rows = batch * n_samples;
    let repeated: Vec<u32> = (0..batch as u32)
        .flat_map(|b| std::iter::repeat_n(b, n_samples))
        .collect();
    let index = Tensor::new(repeated.as_slice(), condition.device())?;
    let cond = condition.index_select(&index, 0)?;

    let mut x = normal_tensor(rng, &[rows, horizon, 2], condition.dtype(), condition.device())?;
    let mut trace = Vec::new();
    if keep_trace {
        trace.push(TraceStep {
            k: schedule.steps(),
            x: x.clone(),
        });
    }
    let mut calls = 0;
    for k in config.reverse_steps(schedule) {
        let steps = vec![k; rows];
        let eps_hat = predictor.predict_noise(&x, &steps, &cond)?;
        calls += 1;
        x = ddim_step(&x, k, config.stride, &eps_hat, schedule)?;
        ensure_finite(&x, &format!("reverse diffusion state after step {k}"))?;
        if keep_trace {
            trace.push(TraceStep {
                k: k - config.stride,
                x: x.clone(),
            });
        }
    }
    Ok(SampleOutput {
        samples: x,
        trace,
        denoiser_calls: calls,
    })
}

/// Mean squared error between the injected noise and the predictor's
/// estimate on the diffused targets.
pub fn training_target<P: NoisePredictor + ?Sized>(
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    condition: &Tensor,
    predictor: &P,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let x_k = forward_diffuse_batch(x0, steps, eps, schedule)?;
    let eps_hat = predictor.predict_noise(&x_k, steps, condition)?;
    Ok((eps - eps_hat)?.sqr()?.mean_all()?)
}
