//! Declarative run configuration. One TOML document drives every stage; its
//! hash is stamped into each artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ais::{ColumnMap, NormalizationParams, SpeedBand, SplitRatios, WindowSpec};
use crate::diffusion::{build_schedule, NoiseSchedule, SamplerConfig, ScheduleKind};
use crate::error::{io_path, Error, Result};
use crate::evaluation::Distance;
use crate::nn::Precision;
use crate::synthetic::SyntheticConfig;
use crate::training::TrainConfig;

/// Environment variable naming the cache directory for derived artifacts.
pub const CACHE_DIR_ENV: &str = "TRAJDIFF_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Ais,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Raw AIS files, relative to the config file.
    pub inputs: Vec<PathBuf>,
    pub columns: ColumnMap,
    pub roi: NormalizationParams,
    pub delta_minutes: u32,
    pub history_len: usize,
    pub horizon: usize,
    pub window_stride: usize,
    pub neighbor_threshold: f64,
    pub gap_hours: f64,
    pub min_samples: usize,
    pub speed: SpeedBand,
    pub splits: SplitRatios,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Ais,
            inputs: Vec::new(),
            columns: ColumnMap::default(),
            roi: NormalizationParams::DANISH_STRAITS,
            delta_minutes: 10,
            history_len: 8,
            horizon: 24,
            window_stride: 1,
            neighbor_threshold: 0.05,
            gap_hours: 2.0,
            min_samples: 36,
            speed: SpeedBand::default(),
            splits: SplitRatios::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            history_len: self.history_len,
            horizon: self.horizon,
            stride: self.window_stride,
            neighbor_threshold: self.neighbor_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Coastline ring file, relative to the config file. Absent means open water.
    pub coastline: Option<PathBuf>,
    /// Grid side `W` in pixels.
    pub grid: usize,
    /// Gaussian kernel standard deviation in pixels.
    pub sigma: f64,
    pub alpha: f64,
    /// Draw α ~ U[0, 1) per training example instead of using `alpha`.
    pub resample_alpha: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            coastline: None,
            grid: 64,
            sigma: 2.0,
            alpha: 0.5,
            resample_alpha: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampling stride γ.
    pub stride: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.05,
            stride: 5,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.schedule, self.beta_start, self.beta_end)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { stride: self.stride }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub precision: Precision,
    pub lstm_hidden: usize,
    /// Condition row width `d`.
    pub cond_width: usize,
    pub cnn_channels: [usize; 3],
    /// Transformer width `D`.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    /// Future offsets from the anchor are divided by this before diffusion.
    pub coord_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            lstm_hidden: 128,
            cond_width: 64,
            cnn_channels: [32, 64, 128],
            width: 512,
            heads: 4,
            layers: 3,
            ffn: 2048,
            coord_scale: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub horizons_hours: Vec<f64>,
    pub distance: Distance,
    /// Cap on validation windows scored during training; 0 means all.
    pub max_windows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 20,
            horizons_hours: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
            distance: Distance::Haversine,
            max_windows: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Directory relative paths resolve against. Not part of the hash.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            scene: SceneConfig::default(),
            diffusion: DiffusionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// Small CPU preset on synthetic data.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.data.source = DataSource::Synthetic;
        c.scene.grid = 32;
        c.model = ModelConfig {
            precision: Precision::F32,
            lstm_hidden: 32,
            cond_width: 32,
            cnn_channels: [8, 16, 32],
            width: 32,
            heads: 4,
            layers: 2,
            ffn: 64,
            coord_scale: 0.25,
        };
        c.train.batch_size = 32;
        c.train.learning_rate = 1e-3;
        c.train.lr_decay = 0.999;
        c.train.max_steps = 2000;
        c.train.eval_every = 0;
        c.eval.max_windows = 32;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_path(path, e))?;
        let mut c = Self::from_toml(&text)?;
        c.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.data.roi.validate()?;
        let d = &self.data;
        if d.history_len == 0 || d.horizon == 0 || d.window_stride == 0 || d.delta_minutes == 0 {
            return fail("history_len, horizon, window_stride and delta_minutes must be positive".into());
        }
        if d.neighbor_threshold < 0.0 || d.gap_hours <= 0.0 {
            return fail("neighbor_threshold must be non-negative and gap_hours positive".into());
        }
        let s = &d.splits;
        if [s.train, s.val, s.test].iter().any(|r| *r < 0.0) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return fail(format!("split ratios must be non-negative and sum to 1, got {s:?}"));
        }
        if d.source == DataSource::Ais && d.inputs.is_empty() {
            return fail("data.inputs lists no AIS files".into());
        }
        if self.scene.grid < 8 || !(self.scene.sigma > 0.0) || !(0.0..1.0).contains(&self.scene.alpha) {
            return fail("scene.grid must be ≥ 8, sigma > 0 and alpha in [0, 1)".into());
        }
        let schedule = self.diffusion.schedule()?;
        self.diffusion.sampler().validate(&schedule)?;
        let m = &self.model;
        if m.heads == 0 || m.width % m.heads != 0 {
            return fail(format!("{} heads do not divide model width {}", m.heads, m.width));
        }
        if [m.lstm_hidden, m.cond_width, m.width, m.layers, m.ffn].contains(&0) || m.cnn_channels.contains(&0) {
            return fail("model widths must be positive".into());
        }
        if !(m.coord_scale > 0.0) {
            return fail("coord_scale must be positive".into());
        }
        self.train.validate()?;
        if self.eval.n_samples == 0 {
            return fail("eval.n_samples must be at least 1".into());
        }
        if self.eval.horizons_hours.is_empty() {
            return fail("eval.horizons_hours is empty".into());
        }
        crate::evaluation::horizons_from_hours(&self.eval.horizons_hours, d.delta_minutes, d.horizon)?;
        Ok(())
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Digest ignoring the training ablation mask; checkpoints trained as
    /// ablation variants of one run share it.
    pub fn family_hash(&self) -> String {
        let mut c = self.clone();
        c.train.ablation = Default::default();
        c.hash()
    }

    /// Digest of the seed and the data settings the configured source
    /// reads; together they determine the preprocessed window archive.
    pub fn data_hash(&self) -> String {
        let mut data = serde_json::to_value(&self.data).expect("data config serializes");
        let unused: &[&str] = match self.data.source {
            DataSource::Ais => &["synthetic"],
            DataSource::Synthetic => &["inputs", "columns", "speed", "gap_hours", "min_samples", "splits"],
        };
        if let Some(map) = data.as_object_mut() {
            unused.iter().for_each(|k| {
                map.remove(*k);
            });
        }
        let key = serde_json::json!({"seed": self.seed, "data": data});
        digest(&serde_json::to_vec(&key).expect("data config serializes"))
    }

    /// Digest of the fields that fix the parameter layout.
    pub fn model_hash(&self) -> String {
        let key = serde_json::json!({
            "model": self.model,
            "history_len": self.data.history_len,
            "horizon": self.data.horizon,
            "grid": self.scene.grid,
        });
        digest(&serde_json::to_vec(&key).expect("model config serializes"))
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Cache directory from the environment, if set.
pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from)
}
