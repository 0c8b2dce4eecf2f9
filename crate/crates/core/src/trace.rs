//! Sampler output files: final samples and, optionally, every retained
//! reverse step, stored in normalized coordinates with the metadata needed
//! to evaluate or plot them without the model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ais::NormalizationParams;
use crate::container::{ArrayData, Container, NamedArray};
use crate::error::{io_path, Error, Result};
use crate::evaluation::WindowPrediction;

pub const TRACE_MAGIC: &[u8; 8] = b"VTTRACE\0";
pub const TRACE_FORMAT: &str = "sample-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceWindow {
    pub journey_id: String,
    pub anchor_time: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub checkpoint_id: String,
    pub roi: NormalizationParams,
    pub delta_minutes: u32,
    pub history_len: usize,
    pub horizon: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Reverse steps held, in sampling order and ending at `0`.
    pub steps: Vec<usize>,
    pub windows: Vec<TraceWindow>,
}

/// Samples for `W` windows at `S` reverse steps.
///
/// `states` is `[W, S, n, H, 2]`, `truth` is `[W, H, 2]` and `observed` is
/// `[W, L, 2]`, all normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub meta: TraceMeta,
    pub states: Vec<f64>,
    pub truth: Vec<f64>,
    pub observed: Vec<f64>,
}

fn points(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect()
}

impl SampleTrace {
    pub fn windows(&self) -> usize {
        self.meta.windows.len()
    }

    fn sample_len(&self) -> usize {
        self.meta.horizon * 2
    }

    fn step_len(&self) -> usize {
        self.meta.n_samples * self.sample_len()
    }

    /// The `n` samples of window `w` at step position `s`.
    pub fn samples_at(&self, w: usize, s: usize) -> Vec<Vec<[f64; 2]>> {
        let base = (w * self.meta.steps.len() + s) * self.step_len();
        self.states[base..base + self.step_len()]
            .chunks_exact(self.sample_len())
            .map(points)
            .collect()
    }

    pub fn truth(&self, w: usize) -> Vec<[f64; 2]> {
        let n = self.sample_len();
        points(&self.truth[w * n..(w + 1) * n])
    }

    pub fn observed(&self, w: usize) -> Vec<[f64; 2]> {
        let n = self.meta.history_len * 2;
        points(&self.observed[w * n..(w + 1) * n])
    }

    /// Position of reverse step `k` in `meta.steps`.
    pub fn step_index(&self, k: usize) -> Option<usize> {
        self.meta.steps.iter().position(|&s| s == k)
    }

    /// Predictions at step position `s` paired with ground truth.
    pub fn predictions_at(&self, s: usize) -> Vec<WindowPrediction> {
        (0..self.windows())
            .map(|w| WindowPrediction {
                samples: self.samples_at(w, s),
                truth: self.truth(w),
            })
            .collect()
    }

    /// Predictions from the last held step, which is the sampler output.
    pub fn final_predictions(&self) -> Vec<WindowPrediction> {
        self.predictions_at(self.meta.steps.len() - 1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (w, s, n, h, l) = (
            self.windows(),
            self.meta.steps.len(),
            self.meta.n_samples,
            self.meta.horizon,
            self.meta.history_len,
        );
        let mut c = Container::new(serde_json::to_value(&self.meta)?);
        c.push(NamedArray::new("states", vec![w, s, n, h, 2], ArrayData::F64(self.states.clone())));
        c.push(NamedArray::new("truth", vec![w, h, 2], ArrayData::F64(self.truth.clone())));
        c.push(NamedArray::new("observed", vec![w, l, 2], ArrayData::F64(self.observed.clone())));
        c.to_bytes(TRACE_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Container::from_bytes(TRACE_MAGIC, bytes)?;
        let bad = |reason: String| Error::Corrupt { offset: 20, reason };
        let meta: TraceMeta = serde_json::from_value(c.meta.clone()).map_err(|e| bad(format!("trace meta: {e}")))?;
        if meta.format != TRACE_FORMAT || meta.version != TRACE_VERSION {
            return Err(bad(format!("unsupported trace {} v{}", meta.format, meta.version)));
        }
        if meta.steps.last() != Some(&0) || meta.n_samples == 0 {
            return Err(bad("trace must hold at least one sample and end at step 0".into()));
        }
        let mut take = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
            let a = c.take(name)?;
            match a.data {
                ArrayData::F64(v) if a.shape == shape => Ok(v),
                _ => Err(bad(format!("array `{name}` is not f64 of shape {shape:?}"))),
            }
        };
        let (w, h, l) = (meta.windows.len(), meta.horizon, meta.history_len);
        let states = take("states", vec![w, meta.steps.len(), meta.n_samples, h, 2])?;
        let truth = take("truth", vec![w, h, 2])?;
        let observed = take("observed", vec![w, l, 2])?;
        Ok(Self {
            meta,
            states,
            truth,
            observed,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| io_path(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_path(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Mean pairwise spread at step position `s`, averaged over windows.
    pub fn spread_at(&self, s: usize) -> f64 {
        let total: f64 = (0..self.windows()).map(|w| mean_pairwise_spread(&self.samples_at(w, s))).sum();
        total / self.windows() as f64
    }

    /// Final samples in degrees, one row per sampled state:
    /// `journey_id,anchor_time,sample,step,lat,lon`.
    pub fn samples_csv(&self) -> String {
        let mut out = format!(
            "# config_hash={} checkpoint_id={}\njourney_id,anchor_time,sample,step,lat,lon\n",
            self.meta.config_hash, self.meta.checkpoint_id
        );
        let last = self.meta.steps.len() - 1;
        for (w, win) in self.meta.windows.iter().enumerate() {
            for (i, sample) in self.samples_at(w, last).iter().enumerate() {
                for (t, p) in sample.iter().enumerate() {
                    let d = self.meta.roi.denormalize_point(*p);
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        win.journey_id,
                        win.anchor_time,
                        i,
                        t + 1,
                        d[0],
                        d[1]
                    ));
                }
            }
        }
        out
    }
}

/// Mean over sample pairs of the average per-step Euclidean distance
/// between them, in the samples' own units. Zero for fewer than two samples.
pub fn mean_pairwise_spread(samples: &[Vec<[f64; 2]>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (a, b) = (&samples[i], &samples[j]);
            let d: f64 = a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum();
            total += d / a.len().max(1) as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}
