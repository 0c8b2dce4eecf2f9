//! Conditional noise-prediction network: time embedding, feature-wise
//! affine conditioning, a transformer over future timestamps and a
//! projection back to trajectory space.

use candle_core::Tensor;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, sigmoid, sinusoidal_positions, Linear, ParamStore, TransformerLayer};

/// `[β_k, sin β_k, cos β_k]`.
pub fn embed_time(k: usize, schedule: &NoiseSchedule) -> Result<[f64; 3]> {
    let beta = schedule.beta(k)?;
    Ok([beta, beta.sin(), beta.cos()])
}

/// Time embeddings for one step per batch row, `(batch, 3)`.
pub fn embed_steps(steps: &[usize], schedule: &NoiseSchedule, like: &Tensor) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(steps.len() * 3);
    for &k in steps {
        flat.extend(embed_time(k, schedule)?);
    }
    Ok(Tensor::from_vec(flat, (steps.len(), 3), like.device())?.to_dtype(like.dtype())?)
}

/// Gate-and-shift modulation `e₂ = sigmoid(FC₁(c)) ⊙ FC₃(e₁) + FC₂(c)`,
/// broadcast over timestamps.
#[derive(Debug, Clone)]
pub struct Film {
    gate: Linear,
    shift: Linear,
    value: Linear,
}

impl Film {
    pub fn new(store: &mut ParamStore, name: &str, cond_width: usize, width: usize) -> Result<Self> {
        Ok(Self {
            gate: Linear::new(store, &format!("{name}.gate"), cond_width, width)?,
            shift: Linear::new(store, &format!("{name}.shift"), cond_width, width)?,
            value: Linear::new(store, &format!("{name}.value"), width, width)?,
        })
    }

    /// `e1` is `(batch, H, D)` and `c_k` is `(batch, 4d)`.
    pub fn forward(&self, e1: &Tensor, c_k: &Tensor) -> Result<Tensor> {
        let w = sigmoid(&self.gate.forward(c_k)?)?.unsqueeze(1)?;
        let b = self.shift.forward(c_k)?.unsqueeze(1)?;
        Ok(self.value.forward(e1)?.broadcast_mul(&w)?.broadcast_add(&b)?)
    }

    pub fn gate(&self, c_k: &Tensor) -> Result<Tensor> {
        sigmoid(&self.gate.forward(c_k)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserDims {
    pub horizon: usize,
    pub cond_width: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    time: Linear,
    input: Linear,
    film_in: Film,
    positions: Tensor,
    layers: Vec<TransformerLayer>,
    film_out: Film,
    output: Linear,
    dims: DenoiserDims,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, dims: DenoiserDims) -> Result<Self> {
        let cond = 4 * dims.cond_width;
        let layers = (0..dims.layers)
            .map(|i| TransformerLayer::new(store, &format!("denoiser.layer{i}"), dims.width, dims.heads, dims.ffn))
            .collect::<Result<_>>()?;
        Ok(Self {
            time: Linear::new(store, "denoiser.time", 3, dims.cond_width)?,
            input: Linear::new(store, "denoiser.input", 2, dims.width)?,
            film_in: Film::new(store, "denoiser.film_in", cond, dims.width)?,
            positions: sinusoidal_positions(dims.horizon, dims.width, store.dtype(), store.device())?,
            layers,
            film_out: Film::new(store, "denoiser.film_out", cond, dims.width)?,
            output: Linear::new(store, "denoiser.output", dims.width, 2)?,
            dims,
        })
    }

    pub fn dims(&self) -> DenoiserDims {
        self.dims
    }

    /// Appends the projected time embedding to the `(batch, 3, d)` condition
    /// and flattens to `(batch, 4d)`.
    pub fn condition_with_time(&self, cond: &Tensor, k_emb: &Tensor) -> Result<Tensor> {
        let (batch, rows, width) = cond.dims3()?;
        if rows != 3 || width != self.dims.cond_width {
            return Err(Error::Shape(format!(
                "condition must be (batch, 3, {}), got {:?}",
                self.dims.cond_width,
                cond.dims()
            )));
        }
        if k_emb.dims() != [batch, 3] {
            return Err(Error::Shape(format!("time embedding must be ({batch}, 3), got {:?}", k_emb.dims())));
        }
        let t = self.time.forward(k_emb)?.unsqueeze(1)?;
        Ok(Tensor::cat(&[cond, &t], 1)?.flatten_from(1)?)
    }

    /// Predicts the noise in `x_k` (`(batch, H, 2)`).
    pub fn predict(&self, x_k: &Tensor, k_emb: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (batch, horizon, feat) = x_k.dims3()?;
        if horizon != self.dims.horizon || feat != 2 {
            return Err(Error::Shape(format!(
                "noisy trajectory must be (batch, {}, 2), got {:?}",
                self.dims.horizon,
                x_k.dims()
            )));
        }
        if cond.dims()[0] != batch {
            return Err(Error::Shape(format!("condition batch {} vs trajectory batch {batch}", cond.dims()[0])));
        }
        let mut stages: Vec<(String, Tensor)> = Vec::with_capacity(self.layers.len() + 5);
        let c_k = self.condition_with_time(cond, k_emb)?;
        stages.push(("time embedding".into(), c_k.clone()));
        let e1 = self.input.forward(x_k)?;
        stages.push(("input projection".into(), e1.clone()));
        let mut e = self.film_in.forward(&e1, &c_k)?.broadcast_add(&self.positions)?;
        stages.push(("input modulation".into(), e.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            e = layer.forward(&e)?;
            stages.push((format!("transformer layer {i}"), e.clone()));
        }
        let e = self.film_out.forward(&e, &c_k)?;
        stages.push(("output modulation".into(), e.clone()));
        let out = self.output.forward(&e)?;
        if ensure_finite(&out, "denoiser output").is_err() {
            for (name, t) in &stages {
                ensure_finite(t, name)?;
            }
            return Err(Error::NonFinite("denoiser output projection".into()));
        }
        Ok(out)
    }
}
