//! The preprocessing pipeline and the window archive it writes.
//!
//! An archive holds every window of every split together with the journey
//! table, ROI and window geometry needed to read it back. Arrays:
//!
//! | name             | type | shape         |
//! |------------------|------|---------------|
//! | `window_journey` | u32  | `[n]`         |
//! | `anchor_time`    | i64  | `[n]`         |
//! | `observed`       | f64  | `[n, L, 2]`   |
//! | `future`         | f64  | `[n, H, 2]`   |
//! | `neighbor_count` | u32  | `[n]`         |
//! | `neighbors`      | f64  | `[m, L, 2]`   |

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ais::{
    assign_splits, filter_speed, make_windows, normalize, parse_ais, resample, segment_journeys, AisRecord, Journey,
    NormalizationParams, ParseReport, ResampleRejection, Split, TrajectoryWindow,
};
use crate::config::{DataConfig, DataSource, RunConfig};
use crate::container::{ArrayData, Container, NamedArray};
use crate::error::{io_path, Error, Result};
use crate::model::Dataset;
use crate::synthetic;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"VTWINDOW";
pub const ARCHIVE_FORMAT: &str = "window-archive";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Counts at every preprocessing stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub source: DataSource,
    pub files: usize,
    pub parse: ParseReport,
    /// Records outside the speed band.
    pub speed_filtered: usize,
    /// Journeys after splitting at long gaps.
    pub raw_journeys: usize,
    /// Raw journeys with fewer than two distinct timestamps.
    pub too_few_records: usize,
    /// Resampled journeys below the minimum length.
    pub too_short: usize,
    pub resampled: usize,
    /// Resampled states outside the ROI.
    pub out_of_roi_points: usize,
    /// In-ROI pieces below the minimum length.
    pub short_pieces: usize,
    pub journeys: usize,
    pub windows: usize,
    pub split_journeys: SplitCounts,
    pub split_windows: SplitCounts,
}

impl PreprocessReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JourneyEntry {
    pub id: String,
    pub mmsi: u64,
    pub start: i64,
    pub len: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub format: String,
    pub version: u32,
    pub data_hash: String,
    pub source: DataSource,
    pub roi: NormalizationParams,
    pub delta_minutes: u32,
    pub history_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub neighbor_threshold: f64,
    pub journeys: Vec<JourneyEntry>,
    pub report: PreprocessReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowArchive {
    pub meta: ArchiveMeta,
    pub windows: Vec<TrajectoryWindow>,
    /// Index into `meta.journeys` for every window.
    pub window_journey: Vec<u32>,
}

impl WindowArchive {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn split_of(&self, window: usize) -> Split {
        self.meta.journeys[self.window_journey[window] as usize].split
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_of(i) == split).collect()
    }

    /// Windows of one split, in archive order.
    pub fn dataset(&self, split: Split) -> Result<Dataset> {
        let windows = self
            .indices(split)
            .into_iter()
            .map(|i| self.windows[i].clone())
            .collect();
        Dataset::new(windows, self.meta.history_len, self.meta.horizon)
    }

    /// Refuses an archive preprocessed under different data settings.
    pub fn ensure_matches(&self, config: &RunConfig) -> Result<()> {
        let expected = config.data_hash();
        if self.meta.data_hash != expected {
            return Err(Error::Incompatible(format!(
                "archive data hash {} does not match config data hash {expected}",
                self.meta.data_hash
            )));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let (l, h) = (self.meta.history_len, self.meta.horizon);
        let n = self.windows.len();
        let flat = |rows: &[[f64; 2]], out: &mut Vec<f64>| rows.iter().for_each(|p| out.extend_from_slice(p));
        let mut observed = Vec::with_capacity(n * l * 2);
        let mut future = Vec::with_capacity(n * h * 2);
        let mut neighbors = Vec::new();
        let mut counts = Vec::with_capacity(n);
        for w in &self.windows {
            flat(&w.observed, &mut observed);
            flat(&w.future, &mut future);
            counts.push(w.neighbors.len() as u32);
            w.neighbors.iter().for_each(|nb| flat(nb, &mut neighbors));
        }
        let m = neighbors.len() / (2 * l);
        let mut c = Container::new(serde_json::to_value(&self.meta).expect("meta serializes"));
        c.push(NamedArray::new("window_journey", vec![n], ArrayData::U32(self.window_journey.clone())));
        c.push(NamedArray::new(
            "anchor_time",
            vec![n],
            ArrayData::I64(self.windows.iter().map(|w| w.anchor_time).collect()),
        ));
        c.push(NamedArray::new("observed", vec![n, l, 2], ArrayData::F64(observed)));
        c.push(NamedArray::new("future", vec![n, h, 2], ArrayData::F64(future)));
        c.push(NamedArray::new("neighbor_count", vec![n], ArrayData::U32(counts)));
        c.push(NamedArray::new("neighbors", vec![m, l, 2], ArrayData::F64(neighbors)));
        c
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes(ARCHIVE_MAGIC)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| io_path(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_path(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Container::from_bytes(ARCHIVE_MAGIC, bytes)?;
        let bad = |reason: String| Error::Corrupt { offset: 0, reason };
        let meta: ArchiveMeta = serde_json::from_value(c.meta.clone()).map_err(|e| bad(format!("archive meta: {e}")))?;
        if meta.format != ARCHIVE_FORMAT || meta.version != ARCHIVE_VERSION {
            return Err(bad(format!("unsupported archive {} v{}", meta.format, meta.version)));
        }
        let (l, h) = (meta.history_len, meta.horizon);
        let mut take = |name: &str| c.take(name).map(|a| a.data);
        let (
            ArrayData::U32(journey),
            ArrayData::I64(anchor),
            ArrayData::F64(observed),
            ArrayData::F64(future),
            ArrayData::U32(counts),
            ArrayData::F64(neighbors),
        ) = (
            take("window_journey")?,
            take("anchor_time")?,
            take("observed")?,
            take("future")?,
            take("neighbor_count")?,
            take("neighbors")?,
        )
        else {
            return Err(bad("archive array has the wrong element type".into()));
        };
        let n = journey.len();
        let total: usize = counts.iter().map(|&k| k as usize).sum();
        if anchor.len() != n
            || counts.len() != n
            || observed.len() != n * l * 2
            || future.len() != n * h * 2
            || neighbors.len() != total * l * 2
            || journey.iter().any(|&j| j as usize >= meta.journeys.len())
        {
            return Err(bad("archive arrays disagree in length".into()));
        }
        let rows = |flat: &[f64]| flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect::<Vec<_>>();
        let mut windows = Vec::with_capacity(n);
        let mut nb = 0;
        for i in 0..n {
            let k = counts[i] as usize;
            windows.push(TrajectoryWindow {
                journey_id: meta.journeys[journey[i] as usize].id.clone(),
                anchor_time: anchor[i],
                observed: rows(&observed[i * l * 2..(i + 1) * l * 2]),
                future: rows(&future[i * h * 2..(i + 1) * h * 2]),
                neighbors: (nb..nb + k).map(|m| rows(&neighbors[m * l * 2..(m + 1) * l * 2])).collect(),
            });
            nb += k;
        }
        Ok(Self {
            meta,
            windows,
            window_journey: journey,
        })
    }
}

/// Cleans raw AIS sources into normalized journeys of at least
/// `min_samples` states, tallying every stage into `report`.
pub fn clean_ais<R: Read>(sources: Vec<R>, data: &DataConfig, report: &mut PreprocessReport) -> Result<Vec<Journey>> {
    let mut records: Vec<AisRecord> = Vec::new();
    for source in sources {
        let (recs, parsed) = parse_ais(source, &data.columns)?;
        report.files += 1;
        report.parse.rows += parsed.rows;
        report.parse.accepted += parsed.accepted;
        report.parse.malformed += parsed.malformed;
        report.parse.short_mmsi += parsed.short_mmsi;
        report.parse.out_of_range += parsed.out_of_range;
        records.extend(recs);
    }
    records.sort_by_key(|r| (r.mmsi, r.timestamp));
    let (records, removed) = filter_speed(records, data.speed);
    report.speed_filtered = removed;

    let raw = segment_journeys(&records, data.gap_hours);
    report.raw_journeys = raw.len();
    let mut journeys = Vec::new();
    for r in &raw {
        let journey = match resample(r, data.delta_minutes, data.min_samples) {
            Ok(j) => j,
            Err(ResampleRejection::TooFewRecords) => {
                report.too_few_records += 1;
                continue;
            }
            Err(ResampleRejection::TooShort { .. }) => {
                report.too_short += 1;
                continue;
            }
        };
        report.resampled += 1;
        let outcome = normalize(&journey, &data.roi)?;
        report.out_of_roi_points += outcome.dropped_points;
        for piece in outcome.pieces {
            if piece.len() < data.min_samples {
                report.short_pieces += 1;
            } else {
                journeys.push(piece);
            }
        }
    }
    Ok(journeys)
}

fn open_inputs(config: &RunConfig) -> Result<Vec<File>> {
    config
        .data
        .inputs
        .iter()
        .map(|p| {
            let path = config.resolve(p);
            File::open(&path).map_err(|e| io_path(path, e))
        })
        .collect()
}

/// Runs the configured pipeline from raw input (or the synthetic generator)
/// to a window archive.
pub fn preprocess(config: &RunConfig) -> Result<WindowArchive> {
    let data = &config.data;
    let mut report = PreprocessReport {
        source: data.source,
        ..Default::default()
    };
    let labelled: Vec<(Journey, Split)> = match data.source {
        DataSource::Ais => {
            let journeys = clean_ais(open_inputs(config)?, data, &mut report)?;
            let ids: Vec<String> = journeys.iter().map(|j| j.journey_id.clone()).collect();
            let splits = assign_splits(&ids, data.splits, config.seed);
            journeys
                .into_iter()
                .map(|j| {
                    let s = splits[&j.journey_id];
                    (j, s)
                })
                .collect()
        }
        DataSource::Synthetic => synthetic::split_journeys(&data.synthetic, config.seed)?,
    };
    build_archive(labelled, config, report)
}

/// Windows labelled journeys and packs them with their metadata.
pub fn build_archive(
    mut labelled: Vec<(Journey, Split)>,
    config: &RunConfig,
    mut report: PreprocessReport,
) -> Result<WindowArchive> {
    if labelled.is_empty() {
        return Err(Error::Empty("no journeys survived preprocessing".into()));
    }
    labelled.sort_by(|a, b| a.0.journey_id.cmp(&b.0.journey_id));
    if let Some(w) = labelled.windows(2).find(|w| w[0].0.journey_id == w[1].0.journey_id) {
        return Err(Error::Config(format!("duplicate journey id `{}`", w[0].0.journey_id)));
    }
    let journeys: Vec<Journey> = labelled.iter().map(|(j, _)| j.clone()).collect();
    let windows = make_windows(&journeys, &config.data.window_spec())?;

    let entries: Vec<JourneyEntry> = labelled
        .iter()
        .map(|(j, s)| JourneyEntry {
            id: j.journey_id.clone(),
            mmsi: j.mmsi,
            start: j.start,
            len: j.len(),
            split: *s,
        })
        .collect();
    let mut window_journey = Vec::with_capacity(windows.len());
    let mut cursor = 0;
    for w in &windows {
        // Both lists are in journey id order.
        while entries[cursor].id != w.journey_id {
            cursor += 1;
        }
        window_journey.push(cursor as u32);
    }

    report.journeys = entries.len();
    report.windows = windows.len();
    for e in &entries {
        report.split_journeys.bump(e.split);
    }
    for &j in &window_journey {
        report.split_windows.bump(entries[j as usize].split);
    }
    let d = &config.data;
    Ok(WindowArchive {
        meta: ArchiveMeta {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            data_hash: config.data_hash(),
            source: d.source,
            roi: d.roi,
            delta_minutes: d.delta_minutes,
            history_len: d.history_len,
            horizon: d.horizon,
            stride: d.window_stride,
            neighbor_threshold: d.neighbor_threshold,
            journeys: entries,
            report,
        },
        windows,
        window_journey,
    })
}
