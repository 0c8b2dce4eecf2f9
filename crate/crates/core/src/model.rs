//! Encoder + denoiser bundle, batch assembly from trajectory windows and
//! seeded random streams.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::ais::TrajectoryWindow;
use crate::config::{cache_dir, RunConfig};
use crate::container::{ArrayData, Container, NamedArray};
use crate::denoiser::{embed_steps, Denoiser, DenoiserDims};
use crate::diffusion::{self, normal_tensor, NoisePredictor, NoiseSchedule, SampleOutput, SamplerConfig};
use crate::encoder::{AblationMask, Condition, ConditionEncoder, EncoderDims};
use crate::error::{Error, Result};
use crate::interaction::aggregate;
use crate::nn::ParamStore;
use crate::scene::{fuse, rasterize_coastline, render_heatmap, CoastlineFile, SceneImage};

/// Purposes for [`stream`]; each gets an independent ChaCha key.
pub mod purpose {
    pub const INIT: u64 = 0;
    pub const TRAIN_STEP: u64 = 1;
    pub const EPOCH_ORDER: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const PROBE: u64 = 4;
}

/// Deterministic generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Windows with precomputed neighbor sums, ready for batching.
#[derive(Debug, Clone)]
pub struct Dataset {
    windows: Vec<TrajectoryWindow>,
    neighbor_sums: Vec<Vec<[f64; 2]>>,
    history_len: usize,
    horizon: usize,
}

impl Dataset {
    pub fn new(windows: Vec<TrajectoryWindow>, history_len: usize, horizon: usize) -> Result<Self> {
        let mut sums = Vec::with_capacity(windows.len());
        for w in &windows {
            if w.observed.len() != history_len || w.future.len() != horizon {
                return Err(Error::Shape(format!(
                    "window `{}` has {}+{} states, expected {history_len}+{horizon}",
                    w.journey_id,
                    w.observed.len(),
                    w.future.len()
                )));
            }
            sums.push(aggregate(&w.neighbors, history_len)?);
        }
        Ok(Self {
            windows,
            neighbor_sums: sums,
            history_len,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn windows(&self) -> &[TrajectoryWindow] {
        &self.windows
    }

    pub fn neighbor_sum(&self, i: usize) -> &[[f64; 2]] {
        &self.neighbor_sums[i]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            neighbor_sums: idx.iter().map(|&i| self.neighbor_sums[i].clone()).collect(),
            history_len: self.history_len,
            horizon: self.horizon,
        }
    }
}

/// Model-ready tensors for a set of windows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub observed: Tensor,
    pub neighbor_sum: Tensor,
    pub fused: Tensor,
    /// Scaled future offsets from the anchor, `(batch, H, 2)`.
    pub x0: Tensor,
    pub anchors: Vec<[f64; 2]>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Builds batches: heatmaps are rendered on demand and fused with the scene.
#[derive(Debug, Clone)]
pub struct Batcher {
    pub scene: SceneImage,
    pub sigma: f64,
    pub coord_scale: f64,
    pub dtype: DType,
}

impl Batcher {
    /// Batcher for `config`, with the scene rasterized from the configured
    /// coastline or all water when there is none.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            scene: load_scene(config)?,
            sigma: config.scene.sigma,
            coord_scale: config.model.coord_scale,
            dtype: config.model.precision.dtype(),
        })
    }

    /// `alphas` holds one blend weight per index.
    pub fn batch(&self, data: &Dataset, idx: &[usize], alphas: &[f64]) -> Result<Batch> {
        if idx.len() != alphas.len() {
            return Err(Error::Shape("one alpha per batch entry is required".into()));
        }
        let (l, h, w) = (data.history_len, data.horizon, self.scene.size);
        let mut observed = Vec::with_capacity(idx.len() * l * 2);
        let mut sums = Vec::with_capacity(idx.len() * l * 2);
        let mut fused = Vec::with_capacity(idx.len() * w * w);
        let mut x0 = Vec::with_capacity(idx.len() * h * 2);
        let mut anchors = Vec::with_capacity(idx.len());
        for (&i, &alpha) in idx.iter().zip(alphas) {
            let win = &data.windows[i];
            observed.extend(win.observed.iter().flatten());
            sums.extend(data.neighbor_sums[i].iter().flatten());
            let heat = render_heatmap(&win.observed, w, self.sigma)?;
            fused.extend(fuse(&heat, &self.scene, alpha)?);
            let a = win.anchor();
            for p in &win.future {
                x0.push((p[0] - a[0]) / self.coord_scale);
                x0.push((p[1] - a[1]) / self.coord_scale);
            }
            anchors.push(a);
        }
        let dev = Device::Cpu;
        let n = idx.len();
        let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, &dev)?.to_dtype(self.dtype)?)
        };
        Ok(Batch {
            observed: t(observed, &[n, l, 2])?,
            neighbor_sum: t(sums, &[n, l, 2])?,
            fused: t(fused, &[n, w, w])?,
            x0: t(x0, &[n, h, 2])?,
            anchors,
        })
    }

    /// Converts scaled offsets `(batch·n, H, 2)` back to normalized positions,
    /// grouped per window.
    pub fn to_positions(&self, samples: &Tensor, anchors: &[[f64; 2]], n: usize) -> Result<Vec<Vec<Vec<[f64; 2]>>>> {
        let v = samples.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        if v.len() != anchors.len() * n {
            return Err(Error::Shape(format!("{} samples for {} windows × {n}", v.len(), anchors.len())));
        }
        Ok(anchors
            .iter()
            .enumerate()
            .map(|(b, a)| {
                (0..n)
                    .map(|s| {
                        v[b * n + s]
                            .iter()
                            .map(|p| [a[0] + self.coord_scale * p[0], a[1] + self.coord_scale * p[1]])
                            .collect()
                    })
                    .collect()
            })
            .collect())
    }
}

const SCENE_MAGIC: &[u8; 8] = b"VTSCENE\0";

/// Rasterizes the configured coastline. When the cache directory is set the
/// raster is stored there, keyed by the coastline bytes, ROI and grid size.
pub fn load_scene(config: &RunConfig) -> Result<SceneImage> {
    let (roi, size) = (config.data.roi, config.scene.grid);
    let Some(rel) = &config.scene.coastline else {
        return Ok(SceneImage::all_water(size, roi));
    };
    let path = config.resolve(rel);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io_path(&path, e))?;
    let key = {
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update(serde_json::to_vec(&(roi, size))?);
        hex::encode(&h.finalize()[..8])
    };
    let cached = cache_dir().map(|d| d.join(format!("scene-{key}.bin")));
    if let Some(bytes) = cached.as_ref().and_then(|p| std::fs::read(p).ok()) {
        if let Ok(mut c) = Container::from_bytes(SCENE_MAGIC, &bytes) {
            if let Ok(NamedArray { data: ArrayData::F64(cells), .. }) = c.take("cells") {
                if cells.len() == size * size {
                    return Ok(SceneImage { size, cells, roi });
                }
            }
        }
    }
    let image = rasterize_coastline(&CoastlineFile::from_json(&text)?.rings, &roi, size)?;
    if let Some(p) = cached {
        let mut c = Container::new(serde_json::json!({"roi": roi, "size": size}));
        c.push(NamedArray::new("cells", vec![size, size], ArrayData::F64(image.cells.clone())));
        // A cache that cannot be written is not an error.
        if let Ok(bytes) = c.to_bytes(SCENE_MAGIC) {
            let _ = std::fs::create_dir_all(p.parent().unwrap_or(Path::new("."))).and_then(|_| std::fs::write(&p, bytes));
        }
    }
    Ok(image)
}

/// Parameters and architecture of one conditional diffusion model.
pub struct TrajectoryModel {
    store: ParamStore,
    encoder: ConditionEncoder,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
}

impl TrajectoryModel {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let m = &config.model;
        let mut store = ParamStore::new(config.seed ^ purpose::INIT, m.precision);
        let encoder = ConditionEncoder::new(
            &mut store,
            EncoderDims {
                lstm_hidden: m.lstm_hidden,
                width: m.cond_width,
                channels: m.cnn_channels,
                grid: config.scene.grid,
            },
        )?;
        let denoiser = Denoiser::new(
            &mut store,
            DenoiserDims {
                horizon: config.data.horizon,
                cond_width: m.cond_width,
                width: m.width,
                heads: m.heads,
                layers: m.layers,
                ffn: m.ffn,
            },
        )?;
        Ok(Self {
            store,
            encoder,
            denoiser,
            schedule: config.diffusion.schedule()?,
            sampler: config.diffusion.sampler(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn encoder(&self) -> &ConditionEncoder {
        &self.encoder
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn condition(&self, batch: &Batch, mask: AblationMask) -> Result<Condition> {
        self.encoder.encode(&batch.observed, &batch.neighbor_sum, &batch.fused, mask)
    }

    /// Noise-prediction loss for explicit steps and noise.
    pub fn loss_with(&self, batch: &Batch, mask: AblationMask, steps: &[usize], eps: &Tensor) -> Result<Tensor> {
        let cond = self.condition(batch, mask)?;
        diffusion::training_target(&batch.x0, steps, eps, cond.tensor(), self, &self.schedule)
    }

    /// Draws per-row steps and noise from `rng`, then returns the loss with
    /// the draws for diagnostics.
    pub fn loss<R: Rng + ?Sized>(&self, batch: &Batch, mask: AblationMask, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        let steps: Vec<usize> = (0..batch.len())
            .map(|_| diffusion::sample_step(rng, self.schedule.steps()))
            .collect();
        let eps = normal_tensor(rng, batch.x0.dims(), batch.x0.dtype(), batch.x0.device())?;
        Ok((self.loss_with(batch, mask, &steps, &eps)?, steps))
    }

    /// `n` reverse-process samples per window, as scaled offsets.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        mask: AblationMask,
        n: usize,
        rng: &mut R,
        keep_trace: bool,
    ) -> Result<SampleOutput> {
        let cond = self.condition(batch, mask)?;
        let horizon = batch.x0.dims()[1];
        diffusion::sample(self, cond.tensor(), &self.schedule, &self.sampler, n, horizon, rng, keep_trace)
    }
}

impl NoisePredictor for TrajectoryModel {
    fn predict_noise(&self, x_k: &Tensor, steps: &[usize], condition: &Tensor) -> Result<Tensor> {
        let k_emb = embed_steps(steps, &self.schedule, x_k)?;
        self.denoiser.predict(x_k, &k_emb, condition)
    }
}

/// Per-example blend weights: the fixed α, or fresh U[0, 1) draws.
pub fn alphas<R: Rng + ?Sized>(n: usize, alpha: f64, resample: bool, rng: &mut R) -> Vec<f64> {
    if resample {
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    } else {
        vec![alpha; n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::desk();
        c.model.width = 16;
        c.model.ffn = 16;
        c.model.lstm_hidden = 8;
        c.model.cond_width = 8;
        c.model.cnn_channels = [2, 2, 2];
        c.scene.grid = 16;
        c
    }

    fn data(c: &RunConfig) -> Dataset {
        let js = synthetic::journeys(&c.data.synthetic, 0).unwrap();
        let w = crate::ais::make_windows(&js, &c.data.window_spec()).unwrap();
        Dataset::new(w, 8, 24).unwrap()
    }

    fn batcher(c: &RunConfig) -> Batcher {
        Batcher {
            scene: SceneImage::all_water(c.scene.grid, c.data.roi),
            sigma: c.scene.sigma,
            coord_scale: c.model.coord_scale,
            dtype: c.model.precision.dtype(),
        }
    }

    #[test]
    fn batch_round_trips_future() {
        let c = tiny();
        let d = data(&c);
        let b = batcher(&c);
        let batch = b.batch(&d, &[3, 5], &[0.5, 0.5]).unwrap();
        assert_eq!(batch.fused.dims(), &[2, 16, 16]);
        let back = b.to_positions(&batch.x0, &batch.anchors, 1).unwrap();
        for (got, i) in back.iter().zip([3, 5]) {
            for (p, q) in got[0].iter().zip(&d.windows()[i].future) {
                assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_model_and_loss() {
        let c = tiny();
        let d = data(&c);
        let batch = batcher(&c).batch(&d, &[0, 1, 2], &[0.5; 3]).unwrap();
        let run = || {
            let m = TrajectoryModel::new(&c).unwrap();
            let (loss, _) = m.loss(&batch, AblationMask::NONE, &mut stream(1, purpose::TRAIN_STEP, 0)).unwrap();
            loss.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn streams_are_independent() {
        let a: u64 = stream(1, purpose::TRAIN_STEP, 0).random();
        let b: u64 = stream(1, purpose::TRAIN_STEP, 1).random();
        let c: u64 = stream(1, purpose::EPOCH_ORDER, 0).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, stream(1, purpose::TRAIN_STEP, 0).random::<u64>());
    }
}
