//! Condition encoders: target history, aggregated neighbor context and the
//! fused trajectory-on-map grid, stacked into a `(batch, 3, d)` block.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, Conv2d, Linear, Lstm, ParamStore};

pub const HISTORY_ROW: usize = 0;
pub const NEIGHBOR_ROW: usize = 1;
pub const MAP_ROW: usize = 2;

/// Condition rows to zero out. A masked row's encoder is never evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationMask {
    pub history: bool,
    pub neighbors: bool,
    pub map: bool,
}

impl AblationMask {
    pub const NONE: Self = Self {
        history: false,
        neighbors: false,
        map: false,
    };
    pub const ALL: Self = Self {
        history: true,
        neighbors: true,
        map: true,
    };

    pub fn rows(&self) -> [bool; 3] {
        [self.history, self.neighbors, self.map]
    }

    /// Short label such as `full`, `no-history` or `no-history+map`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = ["history", "neighbors", "map"]
            .into_iter()
            .zip(self.rows())
            .filter_map(|(n, m)| m.then_some(n))
            .collect();
        if names.is_empty() {
            "full".to_string()
        } else {
            format!("no-{}", names.join("+"))
        }
    }
}

/// Stacked condition rows `(Z_en, Z_neigh, Z_map)`, shape `(batch, 3, d)`.
#[derive(Debug, Clone)]
pub struct Condition(Tensor);

impl Condition {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    /// Row `row` of every batch entry, `(batch, d)`.
    pub fn row(&self, row: usize) -> Result<Tensor> {
        Ok(self.0.narrow(1, row, 1)?.squeeze(1)?)
    }
}

/// Stacks three `(batch, d)` embeddings in fixed order, zeroing masked rows.
pub fn build_condition(z_en: &Tensor, z_neigh: &Tensor, z_map: &Tensor, mask: AblationMask) -> Result<Condition> {
    let dims = z_en.dims();
    if dims.len() != 2 {
        return Err(Error::Shape(format!("condition rows must be (batch, d), got {dims:?}")));
    }
    for (name, z) in [("neighbor", z_neigh), ("map", z_map)] {
        if z.dims() != dims {
            return Err(Error::Shape(format!(
                "{name} embedding {:?} does not match history embedding {dims:?}",
                z.dims()
            )));
        }
    }
    let rows: Vec<Tensor> = [z_en, z_neigh, z_map]
        .into_iter()
        .zip(mask.rows())
        .map(|(z, masked)| if masked { z.zeros_like() } else { Ok(z.clone()) })
        .collect::<candle_core::Result<_>>()?;
    Ok(Condition(Tensor::stack(&rows, 1)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub lstm_hidden: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub grid: usize,
}

#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    history_lstm: Lstm,
    history_proj: Linear,
    neighbor_lstm: Lstm,
    neighbor_proj: Linear,
    convs: [Conv2d; 3],
    map_proj: Linear,
    dims: EncoderDims,
}

impl ConditionEncoder {
    pub fn new(store: &mut ParamStore, dims: EncoderDims) -> Result<Self> {
        let [c1, c2, c3] = dims.channels;
        Ok(Self {
            history_lstm: Lstm::new(store, "encoder.history.lstm", 2, dims.lstm_hidden)?,
            history_proj: Linear::new(store, "encoder.history.proj", dims.lstm_hidden, dims.width)?,
            neighbor_lstm: Lstm::new(store, "encoder.neighbors.lstm", 4, dims.lstm_hidden)?,
            neighbor_proj: Linear::new(store, "encoder.neighbors.proj", dims.lstm_hidden, dims.width)?,
            convs: [
                Conv2d::new(store, "encoder.map.conv1", 1, c1)?,
                Conv2d::new(store, "encoder.map.conv2", c1, c2)?,
                Conv2d::new(store, "encoder.map.conv3", c2, c3)?,
            ],
            map_proj: Linear::new(store, "encoder.map.proj", c3, dims.width)?,
            dims,
        })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    /// `observed` is `(batch, L, 2)`; returns `(batch, d)`.
    pub fn encode_history(&self, observed: &Tensor) -> Result<Tensor> {
        let (_, steps, feat) = observed.dims3()?;
        if steps == 0 || feat != 2 {
            return Err(Error::Shape(format!("history must be (batch, L ≥ 1, 2), got {:?}", observed.dims())));
        }
        ensure_finite(observed, "observed history")?;
        self.history_proj.forward(&self.history_lstm.forward(observed)?)
    }

    /// Encodes the per-step concatenation of the neighbor sum and the
    /// target's own history, both `(batch, L, 2)`.
    pub fn encode_neighbors(&self, neighbor_sum: &Tensor, observed: &Tensor) -> Result<Tensor> {
        if neighbor_sum.dims() != observed.dims() || observed.rank() != 3 {
            return Err(Error::Shape(format!(
                "neighbor sum {:?} and history {:?} must share a (batch, L, 2) shape",
                neighbor_sum.dims(),
                observed.dims()
            )));
        }
        ensure_finite(neighbor_sum, "neighbor sum")?;
        let joint = Tensor::cat(&[neighbor_sum, observed], 2)?;
        self.neighbor_proj.forward(&self.neighbor_lstm.forward(&joint)?)
    }

    /// `fused` is `(batch, W, W)` with rows south to north.
    pub fn encode_map(&self, fused: &Tensor) -> Result<Tensor> {
        let (_, h, w) = fused.dims3()?;
        if h != self.dims.grid || w != self.dims.grid {
            return Err(Error::Shape(format!(
                "map grid is {h}×{w}, the encoder expects {0}×{0}",
                self.dims.grid
            )));
        }
        ensure_finite(fused, "fused map grid")?;
        let mut x = fused.unsqueeze(1)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.silu()?;
        }
        let pooled = x.flatten_from(2)?.mean(D::Minus1)?;
        self.map_proj.forward(&pooled)
    }

    /// Builds the condition, evaluating only the unmasked encoders.
    pub fn encode(&self, observed: &Tensor, neighbor_sum: &Tensor, fused: &Tensor, mask: AblationMask) -> Result<Condition> {
        let batch = observed.dims()[0];
        let zeros = || Tensor::zeros((batch, self.dims.width), observed.dtype(), observed.device());
        let z_en = if mask.history { zeros()? } else { self.encode_history(observed)? };
        let z_neigh = if mask.neighbors {
            zeros()?
        } else {
            self.encode_neighbors(neighbor_sum, observed)?
        };
        let z_map = if mask.map { zeros()? } else { self.encode_map(fused)? };
        build_condition(&z_en, &z_neigh, &z_map, mask)
    }
}
