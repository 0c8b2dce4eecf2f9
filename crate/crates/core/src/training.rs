//! Optimizer, training loop, checkpoints and validation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::container::{ArrayData, Container, NamedArray};
use crate::encoder::AblationMask;
use crate::error::{io_path, Error, Result};
use crate::evaluation::{horizons_from_hours, report, Distance, Horizon, MetricReport, WindowPrediction};
use crate::model::{alphas, purpose, stream, Batcher, Dataset, TrajectoryModel};
use crate::nn::{array_to_tensor, tensor_to_array};
use crate::trace::{SampleTrace, TraceMeta, TraceWindow, TRACE_FORMAT, TRACE_VERSION};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VTCKPT\0\0";
const CHECKPOINT_FORMAT: &str = "trajdiff-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Multiplicative learning-rate factor per epoch.
    pub lr_decay: f64,
    pub max_steps: u64,
    pub ablation: AblationMask,
    /// Validation period in steps; 0 disables validation and early stopping.
    pub eval_every: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 256,
            lr_decay: 0.98,
            max_steps: 20_000,
            ablation: AblationMask::NONE,
            eval_every: 500,
            patience: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(
                "learning_rate must be positive, batch_size ≥ 1 and lr_decay in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that received a gradient. Parameters absent
    /// from `grads` did not take part in the loss and are left untouched.
    pub fn step(&mut self, model: &TrajectoryModel, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in model.store().vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry their own graph; moments must not retain it.
            let g = g.detach();
            let g = &g;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        let mut out = Vec::new();
        for (prefix, map) in [("adam.m/", &self.m), ("adam.v/", &self.v)] {
            for (name, t) in map {
                out.push(tensor_to_array(&format!("{prefix}{name}"), t)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Saved training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub model_hash: String,
    pub checkpoint_id: String,
    pub step: u64,
    pub container: Container,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_path(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let container = Container::from_bytes(CHECKPOINT_MAGIC, bytes)?;
        let meta = &container.meta;
        if meta["format"] != CHECKPOINT_FORMAT || meta["version"] != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "unsupported checkpoint {} v{}",
                meta["format"], meta["version"]
            )));
        }
        let config: RunConfig = serde_json::from_value(meta["config"].clone())?;
        let text = |k: &str| meta[k].as_str().unwrap_or_default().to_string();
        Ok(Self {
            config_hash: text("config_hash"),
            model_hash: text("model_hash"),
            checkpoint_id: text("checkpoint_id"),
            step: meta["step"].as_u64().unwrap_or(0),
            config,
            container,
        })
    }

    /// Rejects a checkpoint produced under a different configuration.
    pub fn ensure_matches(&self, config: &RunConfig) -> Result<()> {
        if self.config_hash != config.hash() {
            return Err(Error::Incompatible(format!(
                "checkpoint config hash {} does not match config hash {}",
                self.config_hash,
                config.hash()
            )));
        }
        Ok(())
    }

    /// Accepts ablation variants of `config`: everything but the mask must
    /// agree.
    pub fn ensure_family(&self, config: &RunConfig) -> Result<()> {
        let (ours, theirs) = (self.config.family_hash(), config.family_hash());
        if ours != theirs {
            return Err(Error::Incompatible(format!(
                "checkpoint family hash {ours} does not match config family hash {theirs}"
            )));
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<LossRecord> {
        let (Some(s), Some(l)) = (self.container.get("curve/step"), self.container.get("curve/loss_lr")) else {
            return Vec::new();
        };
        match (&s.data, &l.data) {
            (ArrayData::I64(steps), ArrayData::F64(vals)) => steps
                .iter()
                .zip(vals.chunks(2))
                .map(|(&step, v)| LossRecord {
                    step: step as u64,
                    loss: v[0],
                    lr: v[1],
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Builds the model with the stored parameters.
    pub fn model(&self) -> Result<TrajectoryModel> {
        let model = TrajectoryModel::new(&self.config)?;
        model.store().load_arrays("param/", &self.container.arrays)?;
        Ok(model)
    }
}

/// Outcome of [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub stopped_early: bool,
    pub best_validation: Option<(u64, f64)>,
    pub checkpoint: Option<PathBuf>,
}

/// Single-writer training loop with deterministic batch composition.
pub struct Trainer {
    config: RunConfig,
    model: TrajectoryModel,
    adam: Adam,
    step: u64,
    batcher: Batcher,
    train: Dataset,
    val: Option<Dataset>,
    order: Option<(u64, Vec<usize>)>,
    losses: Vec<LossRecord>,
    best: Option<(u64, f64)>,
    since_best: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, batcher: Batcher, train: Dataset, val: Option<Dataset>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training set has no windows".into()));
        }
        Ok(Self {
            config: config.clone(),
            model: TrajectoryModel::new(config)?,
            adam: Adam::default(),
            step: 0,
            batcher,
            train,
            val,
            order: None,
            losses: Vec::new(),
            best: None,
            since_best: 0,
        })
    }

    /// Continues from a checkpoint written under the same configuration.
    pub fn resume(ckpt: &Checkpoint, config: &RunConfig, batcher: Batcher, train: Dataset, val: Option<Dataset>) -> Result<Self> {
        ckpt.ensure_matches(config)?;
        let mut t = Self::new(config, batcher, train, val)?;
        t.model.store().load_arrays("param/", &ckpt.container.arrays)?;
        let meta = &ckpt.container.meta;
        t.adam.t = meta["adam"]["t"].as_u64().unwrap_or(0);
        let device = t.model.store().device().clone();
        for a in &ckpt.container.arrays {
            let dtype = t.model.store().dtype();
            if let Some(name) = a.name.strip_prefix("adam.m/") {
                t.adam.m.insert(name.to_string(), array_to_tensor(a, &device)?.to_dtype(dtype)?);
            } else if let Some(name) = a.name.strip_prefix("adam.v/") {
                t.adam.v.insert(name.to_string(), array_to_tensor(a, &device)?.to_dtype(dtype)?);
            }
        }
        t.step = ckpt.step;
        t.losses = ckpt.losses();
        if let Some(best) = meta["best_validation"].as_array() {
            t.best = Some((best[0].as_u64().unwrap_or(0), best[1].as_f64().unwrap_or(f64::INFINITY)));
        }
        t.since_best = meta["since_best"].as_u64().unwrap_or(0) as usize;
        Ok(t)
    }

    pub fn model(&self) -> &TrajectoryModel {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn losses(&self) -> &[LossRecord] {
        &self.losses
    }

    pub fn batcher(&self) -> &Batcher {
        &self.batcher
    }

    fn epoch_of(&self, step: u64) -> u64 {
        step * self.config.train.batch_size as u64 / self.train.len() as u64
    }

    /// Learning rate in force at `step`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let t = &self.config.train;
        t.learning_rate * t.lr_decay.powi(self.epoch_of(step) as i32)
    }

    /// Seeded permutation of the training windows for one epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut stream(self.config.seed, purpose::EPOCH_ORDER, epoch));
        idx
    }

    /// Window indices used at `step`; batches run across epoch boundaries.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.train.len() as u64;
        let b = self.config.train.batch_size as u64;
        (step * b..(step + 1) * b)
            .map(|pos| {
                let epoch = pos / n;
                if self.order.as_ref().map(|o| o.0) != Some(epoch) {
                    self.order = Some((epoch, self.epoch_order(epoch)));
                }
                self.order.as_ref().unwrap().1[(pos % n) as usize]
            })
            .collect()
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let mut rng = stream(self.config.seed, purpose::TRAIN_STEP, step);
        let scene = &self.config.scene;
        let a = alphas(idx.len(), scene.alpha, scene.resample_alpha, &mut rng);
        let batch = self.batcher.batch(&self.train, &idx, &a)?;
        let (loss, steps) = self.model.loss(&batch, self.config.train.ablation, &mut rng)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch: (step * self.config.train.batch_size as u64 % self.train.len() as u64) as usize,
                diffusion_steps: steps,
                param_norm: self.model.store().norm()?,
            });
        }
        let grads = loss.backward()?;
        let lr = self.learning_rate(step);
        self.adam.step(&self.model, &grads, lr)?;
        self.losses.push(LossRecord { step, loss: value, lr });
        self.step += 1;
        Ok(value)
    }

    /// Best-of-N ADE at the full horizon on the validation set, in
    /// normalized units.
    pub fn validation_ade(&self) -> Result<Option<f64>> {
        let Some(val) = &self.val else { return Ok(None) };
        let cap = self.config.eval.max_windows;
        let idx: Vec<usize> = (0..val.len()).take(if cap == 0 { usize::MAX } else { cap }).collect();
        let preds = predict(
            &self.model,
            val,
            &idx,
            &self.batcher,
            &self.config,
            self.config.eval.n_samples,
            self.config.seed,
        )?;
        let h = [Horizon {
            hours: 0.0,
            steps: self.config.data.horizon,
        }];
        let r = report(&preds, &h, &self.config.data.roi, Distance::Normalized, "", "")?;
        Ok(Some(r.rows[0].ade))
    }

    /// Runs until `max_steps` or early stop. With `out`, writes
    /// `loss_curve.csv`, periodic and final checkpoints, and on a non-finite
    /// loss the last good state as `last_good.ckpt`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainSummary> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| io_path(dir, e))?;
        }
        let t = self.config.train.clone();
        let mut stopped_early = false;
        while self.step < t.max_steps {
            if let Err(e) = self.train_step() {
                if let (Some(dir), Error::NonFiniteLoss { .. }) = (out, &e) {
                    self.save(&dir.join("last_good.ckpt"))?;
                    self.write_curve(&dir.join("loss_curve.csv"))?;
                }
                return Err(e);
            }
            if t.eval_every > 0 && self.step % t.eval_every == 0 {
                if let Some(ade) = self.validation_ade()? {
                    if self.best.is_none_or(|(_, b)| ade < b) {
                        self.best = Some((self.step, ade));
                        self.since_best = 0;
                        if let Some(dir) = out {
                            self.save(&dir.join("best.ckpt"))?;
                        }
                    } else {
                        self.since_best += 1;
                        if self.since_best >= t.patience {
                            stopped_early = true;
                            break;
                        }
                    }
                }
            }
            if let Some(dir) = out {
                if t.checkpoint_every > 0 && self.step % t.checkpoint_every == 0 {
                    self.save(&dir.join(format!("step{:07}.ckpt", self.step)))?;
                }
            }
        }
        let mut checkpoint = None;
        if let Some(dir) = out {
            let path = dir.join("final.ckpt");
            self.save(&path)?;
            self.write_curve(&dir.join("loss_curve.csv"))?;
            checkpoint = Some(path);
        }
        Ok(TrainSummary {
            steps: self.step,
            final_loss: self.losses.last().map_or(f64::NAN, |r| r.loss),
            stopped_early,
            best_validation: self.best,
            checkpoint,
        })
    }

    pub fn write_curve(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_path(path, e))?);
        writeln!(f, "# config_hash={}", self.config.hash())?;
        writeln!(f, "step,loss,lr")?;
        for r in &self.losses {
            writeln!(f, "{},{},{}", r.step, r.loss, r.lr)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut arrays = self.model.store().to_arrays("param/")?;
        arrays.extend(self.adam.to_arrays()?);
        arrays.push(NamedArray::new(
            "curve/step",
            vec![self.losses.len()],
            ArrayData::I64(self.losses.iter().map(|r| r.step as i64).collect()),
        ));
        arrays.push(NamedArray::new(
            "curve/loss_lr",
            vec![self.losses.len(), 2],
            ArrayData::F64(self.losses.iter().flat_map(|r| [r.loss, r.lr]).collect()),
        ));
        let mut meta = json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config_hash": self.config.hash(),
            "model_hash": self.config.model_hash(),
            "step": self.step,
            "rng": {"seed": self.config.seed, "next_step_stream": self.step},
            "adam": {"t": self.adam.t, "beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps},
            "best_validation": self.best.map(|(s, v)| json!([s, v])),
            "since_best": self.since_best,
            "config": serde_json::to_value(&self.config)?,
        });
        let mut container = Container::new(meta.clone());
        for a in arrays {
            container.push(a);
        }
        let id = hex::encode(&Sha256::digest(container.to_bytes(CHECKPOINT_MAGIC)?)[..8]);
        meta["checkpoint_id"] = json!(id);
        container.meta = meta;
        Ok(Checkpoint {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            model_hash: self.config.model_hash(),
            checkpoint_id: id,
            step: self.step,
            container,
        })
    }

    pub fn save(&self, path: &Path) -> Result<Checkpoint> {
        let ckpt = self.checkpoint()?;
        let bytes = ckpt.container.to_bytes(CHECKPOINT_MAGIC)?;
        std::fs::write(path, bytes).map_err(|e| io_path(path, e))?;
        Ok(ckpt)
    }
}

/// Windows scored per reverse-process batch.
pub const SAMPLE_CHUNK: usize = 16;

/// Samples per window, plus intermediate states when requested.
#[derive(Debug, Clone)]
pub struct WindowSamples {
    pub window: usize,
    pub samples: Vec<Vec<[f64; 2]>>,
    /// `(k, samples)` for each retained reverse step.
    pub trace: Vec<(usize, Vec<Vec<[f64; 2]>>)>,
}

/// Runs the sampler over `idx` in fixed-size chunks, each with its own
/// seeded stream, and returns normalized positions.
pub fn sample_windows(
    model: &TrajectoryModel,
    data: &Dataset,
    idx: &[usize],
    batcher: &Batcher,
    config: &RunConfig,
    n: usize,
    seed: u64,
    keep_trace: bool,
) -> Result<Vec<WindowSamples>> {
    let mut out = Vec::with_capacity(idx.len());
    for (c, chunk) in idx.chunks(SAMPLE_CHUNK).enumerate() {
        let batch = batcher.batch(data, chunk, &vec![config.scene.alpha; chunk.len()])?;
        let mut rng = stream(seed, purpose::SAMPLING, c as u64);
        let result = model.sample(&batch, config.train.ablation, n, &mut rng, keep_trace)?;
        let finals = batcher.to_positions(&result.samples, &batch.anchors, n)?;
        let mut traces: Vec<Vec<(usize, Vec<Vec<[f64; 2]>>)>> = vec![Vec::new(); chunk.len()];
        for step in &result.trace {
            for (b, s) in batcher.to_positions(&step.x, &batch.anchors, n)?.into_iter().enumerate() {
                traces[b].push((step.k, s));
            }
        }
        for ((&window, samples), trace) in chunk.iter().zip(finals).zip(traces) {
            out.push(WindowSamples { window, samples, trace });
        }
    }
    Ok(out)
}

/// Final samples paired with ground truth.
pub fn predict(
    model: &TrajectoryModel,
    data: &Dataset,
    idx: &[usize],
    batcher: &Batcher,
    config: &RunConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<WindowPrediction>> {
    Ok(sample_windows(model, data, idx, batcher, config, n, seed, false)?
        .into_iter()
        .map(|w| WindowPrediction {
            truth: data.windows()[w.window].future.clone(),
            samples: w.samples,
        })
        .collect())
}

/// Largest absolute entry of each condition row (history, neighbors,
/// map) over a probe batch of up to `SAMPLE_CHUNK` windows.
pub fn probe_rows(model: &TrajectoryModel, data: &Dataset, batcher: &Batcher, config: &RunConfig) -> Result<[f64; 3]> {
    let idx: Vec<usize> = (0..data.len().min(SAMPLE_CHUNK)).collect();
    if idx.is_empty() {
        return Err(Error::Empty("no windows to probe".into()));
    }
    let mut rng = stream(config.seed, purpose::PROBE, 0);
    let a = alphas(idx.len(), config.scene.alpha, config.scene.resample_alpha, &mut rng);
    let batch = batcher.batch(data, &idx, &a)?;
    let cond = model.condition(&batch, config.train.ablation)?;
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = cond.row(i)?.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(out)
}

/// Samples `idx` and packs the result as a [`SampleTrace`]. Without
/// `keep_trace` only the final step `0` is held.
#[allow(clippy::too_many_arguments)]
pub fn sample_trace(
    model: &TrajectoryModel,
    data: &Dataset,
    idx: &[usize],
    batcher: &Batcher,
    config: &RunConfig,
    n: usize,
    seed: u64,
    keep_trace: bool,
    checkpoint_id: &str,
) -> Result<SampleTrace> {
    if idx.is_empty() {
        return Err(Error::Empty("no windows to sample".into()));
    }
    let results = sample_windows(model, data, idx, batcher, config, n, seed, keep_trace)?;
    let steps: Vec<usize> = if keep_trace {
        results[0].trace.iter().map(|(k, _)| *k).collect()
    } else {
        vec![0]
    };
    let mut states = Vec::new();
    let mut truth = Vec::new();
    let mut observed = Vec::new();
    let mut windows = Vec::with_capacity(idx.len());
    for r in &results {
        let w = &data.windows()[r.window];
        if keep_trace {
            for (_, samples) in &r.trace {
                samples.iter().flatten().for_each(|p| states.extend_from_slice(p));
            }
        } else {
            r.samples.iter().flatten().for_each(|p| states.extend_from_slice(p));
        }
        w.future.iter().for_each(|p| truth.extend_from_slice(p));
        w.observed.iter().for_each(|p| observed.extend_from_slice(p));
        windows.push(TraceWindow {
            journey_id: w.journey_id.clone(),
            anchor_time: w.anchor_time,
        });
    }
    Ok(SampleTrace {
        meta: TraceMeta {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            config_hash: config.hash(),
            checkpoint_id: checkpoint_id.into(),
            roi: config.data.roi,
            delta_minutes: config.data.delta_minutes,
            history_len: config.data.history_len,
            horizon: config.data.horizon,
            n_samples: n,
            seed,
            steps,
            windows,
        },
        states,
        truth,
        observed,
    })
}

/// Samples every window of `data` and reports best-of-`n` metrics at the
/// configured horizons.
pub fn validate(
    model: &TrajectoryModel,
    data: &Dataset,
    batcher: &Batcher,
    config: &RunConfig,
    n: usize,
    checkpoint_id: &str,
) -> Result<MetricReport> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds = predict(model, data, &idx, batcher, config, n, config.seed)?;
    let horizons = horizons_from_hours(&config.eval.horizons_hours, config.data.delta_minutes, config.data.horizon)?;
    report(&preds, &horizons, &config.data.roi, config.eval.distance, &config.hash(), checkpoint_id)
}
