//! Small neural-network toolkit over `candle_core` tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and are drawn
//! from a seeded ChaCha stream in construction order, so two models built
//! with the same seed and layout are bitwise identical.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, NamedArray};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Named trainable parameters.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, precision: Precision) -> Self {
        Self {
            device: Device::Cpu,
            dtype: precision.dtype(),
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    /// Uniform `[-bound, bound]` initialization.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name.into(), values, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name.into(), vec![value; n], shape)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Euclidean norm of all parameters.
    pub fn norm(&self) -> Result<f64> {
        let mut total = 0.0;
        for v in self.vars.values() {
            total += v.as_tensor().to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(total.sqrt())
    }

    /// Parameters as container arrays, prefixed with `prefix`.
    pub fn to_arrays(&self, prefix: &str) -> Result<Vec<NamedArray>> {
        self.vars
            .iter()
            .map(|(name, var)| tensor_to_array(&format!("{prefix}{name}"), var.as_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `arrays`; names and shapes must match.
    pub fn load_arrays(&self, prefix: &str, arrays: &[NamedArray]) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedArray> = arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let a = by_name
                .get(key.as_str())
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks parameter `{name}`")))?;
            let t = array_to_tensor(a, &self.device)?.to_dtype(self.dtype)?;
            if t.dims() != var.dims() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, {:?} in model",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t)?;
        }
        Ok(())
    }
}

pub fn tensor_to_array(name: &str, t: &Tensor) -> Result<NamedArray> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let data = match t.dtype() {
        DType::F32 => ArrayData::F32(flat.to_vec1::<f32>()?),
        DType::F64 => ArrayData::F64(flat.to_vec1::<f64>()?),
        other => return Err(Error::Shape(format!("unsupported dtype {other:?} for `{name}`"))),
    };
    Ok(NamedArray::new(name, shape, data))
}

pub fn array_to_tensor(a: &NamedArray, device: &Device) -> Result<Tensor> {
    let t = match &a.data {
        ArrayData::F32(v) => Tensor::from_slice(v, a.shape.as_slice(), device)?,
        ArrayData::F64(v) => Tensor::from_slice(v, a.shape.as_slice(), device)?,
        _ => return Err(Error::Shape(format!("array `{}` is not floating point", a.name))),
    };
    Ok(t)
}

/// Fails with `what` in the message if `t` holds NaN or infinity.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Softmax over the last dimension with a detached max shift.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Affine map `x W^T + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[outputs, inputs], bound)?,
            bias: store.uniform(format!("{name}.bias"), &[outputs], bound)?,
        })
    }

    pub fn outputs(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inputs = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows = x.elem_count() / inputs.max(1);
        let y = x
            .reshape((rows, inputs))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.outputs();
        Ok(y.reshape(out)?)
    }
}

/// Single-layer long short-term memory network with gate order
/// (input, forget, cell, output); returns the final hidden state.
#[derive(Debug, Clone)]
pub struct Lstm {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &format!("{name}.ih"), inputs, 4 * hidden)?,
            recurrent: Linear::new(store, &format!("{name}.hh"), hidden, 4 * hidden)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `x` is `(batch, time, inputs)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, steps, _) = x.dims3()?;
        let projected = self.input.forward(x)?;
        let hsz = self.hidden;
        let mut h = Tensor::zeros((batch, hsz), x.dtype(), x.device())?;
        let mut c = h.clone();
        for t in 0..steps {
            let gates = (projected.narrow(1, t, 1)?.squeeze(1)? + self.recurrent.forward(&h)?)?;
            let i = sigmoid(&gates.narrow(1, 0, hsz)?)?;
            let f = sigmoid(&gates.narrow(1, hsz, hsz)?)?;
            let g = gates.narrow(1, 2 * hsz, hsz)?.tanh()?;
            let o = sigmoid(&gates.narrow(1, 3 * hsz, hsz)?)?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
        }
        Ok(h)
    }
}

/// 3×3 convolution with stride 2 and padding 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let bound = 1.0 / ((inputs * 9) as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[outputs, inputs, 3, 3], bound)?,
            bias: store.uniform(format!("{name}.bias"), &[outputs], bound)?,
        })
    }

    /// `x` is `(batch, channels, height, width)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.weight.dims()[0];
        let y = x.conv2d(&self.weight, 1, 2, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.constant(format!("{name}.gain"), &[width], 1.0)?,
            shift: store.constant(format!("{name}.shift"), &[width], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide model width {width}"
            )));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width)?,
            out: Linear::new(store, &format!("{name}.out"), width, width)?,
            heads,
        })
    }

    /// `x` is `(batch, time, width)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, steps, width) = x.dims3()?;
        let head_dim = width / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((batch, steps, 3, self.heads, head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (head_dim as f64).sqrt())?;
        let attended = softmax_last(&scores)?.matmul(&v)?;
        let merged = attended.transpose(1, 2)?.reshape((batch, steps, width))?;
        self.out.forward(&merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, width)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.silu()?)
    }
}

/// Pre-norm transformer layer: `x + attn(norm(x))`, then `x + ffn(norm(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    attn_norm: LayerNorm,
    attn: SelfAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), width)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), width)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, ffn)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.attn_norm.forward(x)?)?)?;
        Ok((&x + self.ffn.forward(&self.ffn_norm.forward(&x)?)?)?)
    }
}

/// Fixed sinusoidal position table of shape `(steps, width)`.
pub fn sinusoidal_positions(steps: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut table = vec![0.0f64; steps * width];
    for pos in 0..steps {
        for i in 0..width {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * freq;
            table[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(table, (steps, width), device)?.to_dtype(dtype)?)
}
