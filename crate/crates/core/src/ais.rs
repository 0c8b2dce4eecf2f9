//! AIS ingestion: parsing, cleaning, journey segmentation, fixed-rate
//! resampling, ROI normalization and sliding-window extraction.

use std::collections::BTreeMap;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::find_neighbors;

/// Smallest MMSI with nine decimal digits.
const MIN_MMSI: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AisRecord {
    pub mmsi: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    /// Speed over ground in knots.
    pub sog: f64,
}

/// Maps the delimited input's header names onto record fields.
///
/// The default matches the Danish Maritime Authority CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub delimiter: char,
    pub mmsi: String,
    pub timestamp: String,
    pub lat: String,
    pub lon: String,
    pub sog: String,
    /// `"epoch"` for integer seconds, otherwise a chrono format string
    /// interpreted as UTC.
    pub timestamp_format: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            delimiter: ',',
            mmsi: "MMSI".into(),
            timestamp: "# Timestamp".into(),
            lat: "Latitude".into(),
            lon: "Longitude".into(),
            sog: "SOG".into(),
            timestamp_format: "%d/%m/%Y %H:%M:%S".into(),
        }
    }
}

/// Rows rejected while parsing, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows: usize,
    pub accepted: usize,
    /// Missing or unparseable values.
    pub malformed: usize,
    /// MMSI with fewer than nine digits.
    pub short_mmsi: usize,
    /// Latitude, longitude or speed outside their valid ranges.
    pub out_of_range: usize,
}

fn parse_timestamp(raw: &str, format: &str) -> Option<i64> {
    if format == "epoch" {
        return raw.parse::<i64>().ok();
    }
    chrono::NaiveDateTime::parse_from_str(raw, format)
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

/// Parses delimited AIS text into records sorted by `(mmsi, timestamp)`.
///
/// A header lacking any mapped column is fatal. Bad rows are skipped and
/// tallied in the returned [`ParseReport`].
pub fn parse_ais<R: Read>(source: R, columns: &ColumnMap) -> Result<(Vec<AisRecord>, ParseReport)> {
    let delimiter = u8::try_from(columns.delimiter)
        .map_err(|_| Error::Config(format!("delimiter {:?} is not ASCII", columns.delimiter)))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut report = ParseReport::default();

    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(Error::Header(e.to_string())),
    };
    if headers.is_empty() {
        return Ok((Vec::new(), report));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Header(format!("missing column `{name}`")))
    };
    let idx = [
        find(&columns.mmsi)?,
        find(&columns.timestamp)?,
        find(&columns.lat)?,
        find(&columns.lon)?,
        find(&columns.sog)?,
    ];

    let mut records = Vec::new();
    for row in reader.records() {
        report.rows += 1;
        let Ok(row) = row else {
            report.malformed += 1;
            continue;
        };
        let field = |i: usize| row.get(idx[i]).filter(|s| !s.is_empty());
        let parsed = (|| {
            Some(AisRecord {
                mmsi: field(0)?.parse().ok()?,
                timestamp: parse_timestamp(field(1)?, &columns.timestamp_format)?,
                lat: field(2)?.parse().ok()?,
                lon: field(3)?.parse().ok()?,
                sog: field(4)?.parse().ok()?,
            })
        })();
        let Some(rec) = parsed.filter(|r| r.lat.is_finite() && r.lon.is_finite() && r.sog.is_finite())
        else {
            report.malformed += 1;
            continue;
        };
        if rec.mmsi < MIN_MMSI {
            report.short_mmsi += 1;
            continue;
        }
        if !(-90.0..=90.0).contains(&rec.lat) || !(-180.0..=180.0).contains(&rec.lon) || rec.sog < 0.0 {
            report.out_of_range += 1;
            continue;
        }
        records.push(rec);
    }
    records.sort_by_key(|r| (r.mmsi, r.timestamp));
    report.accepted = records.len();
    Ok((records, report))
}

/// Open speed interval, in knots, outside of which records are discarded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedBand {
    /// Records at or below this speed are treated as anchored.
    pub min: f64,
    /// Records at or above this speed are implausible.
    pub max: f64,
}

impl Default for SpeedBand {
    fn default() -> Self {
        Self { min: 0.2, max: 30.0 }
    }
}

/// Keeps records with `min < sog < max`; returns the survivors and the
/// number removed.
pub fn filter_speed(records: Vec<AisRecord>, band: SpeedBand) -> (Vec<AisRecord>, usize) {
    let before = records.len();
    let kept: Vec<_> = records
        .into_iter()
        .filter(|r| r.sog > band.min && r.sog < band.max)
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// A gap-free run of raw records from one vessel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawJourney {
    pub journey_id: String,
    pub mmsi: u64,
    pub records: Vec<AisRecord>,
}

/// Splits time-sorted, mmsi-grouped records wherever consecutive reports of
/// the same vessel are more than `gap_hours` apart.
pub fn segment_journeys(records: &[AisRecord], gap_hours: f64) -> Vec<RawJourney> {
    let max_gap = gap_hours * 3600.0;
    let mut out: Vec<RawJourney> = Vec::new();
    let mut seq = 0usize;
    for rec in records {
        let split = match out.last() {
            Some(j) if j.mmsi == rec.mmsi => {
                let prev = j.records.last().expect("journeys are never empty");
                (rec.timestamp - prev.timestamp) as f64 > max_gap
            }
            _ => {
                seq = 0;
                true
            }
        };
        if split {
            out.push(RawJourney {
                journey_id: format!("{}-{}", rec.mmsi, seq),
                mmsi: rec.mmsi,
                records: Vec::new(),
            });
            seq += 1;
        }
        out.last_mut().unwrap().records.push(*rec);
    }
    out
}

/// A fixed-rate trajectory. State `i` is at `start + i * delta_minutes * 60`.
///
/// Points are `[lat, lon]`, in degrees before [`normalize`] and in `[0, 1]`
/// afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Journey {
    pub journey_id: String,
    pub mmsi: u64,
    pub start: i64,
    pub delta_minutes: u32,
    pub points: Vec<[f64; 2]>,
}

impl Journey {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn step_seconds(&self) -> i64 {
        i64::from(self.delta_minutes) * 60
    }

    pub fn timestamp(&self, i: usize) -> i64 {
        self.start + i as i64 * self.step_seconds()
    }

    /// Index of the state at `time`, if `time` is on this journey's grid.
    pub fn index_of(&self, time: i64) -> Option<usize> {
        let offset = time - self.start;
        if offset < 0 || offset % self.step_seconds() != 0 {
            return None;
        }
        let i = (offset / self.step_seconds()) as usize;
        (i < self.points.len()).then_some(i)
    }

    pub fn point_at(&self, time: i64) -> Option<[f64; 2]> {
        self.index_of(time).map(|i| self.points[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleRejection {
    /// Fewer than two distinct timestamps.
    TooFewRecords,
    /// The uniform grid holds fewer than the minimum number of samples.
    TooShort { samples: usize },
}

/// Linearly interpolates a raw journey onto the absolute grid of multiples
/// of `delta_minutes`, restricted to the span of its records.
pub fn resample(
    raw: &RawJourney,
    delta_minutes: u32,
    min_samples: usize,
) -> std::result::Result<Journey, ResampleRejection> {
    let mut recs: Vec<&AisRecord> = Vec::with_capacity(raw.records.len());
    for r in &raw.records {
        if recs.last().is_none_or(|p| r.timestamp > p.timestamp) {
            recs.push(r);
        }
    }
    if recs.len() < 2 {
        return Err(ResampleRejection::TooFewRecords);
    }
    let step = i64::from(delta_minutes) * 60;
    let first = recs[0].timestamp.div_euclid(step) * step
        + if recs[0].timestamp.rem_euclid(step) == 0 { 0 } else { step };
    let last = recs[recs.len() - 1].timestamp.div_euclid(step) * step;
    if last < first {
        return Err(ResampleRejection::TooShort { samples: 0 });
    }
    let samples = ((last - first) / step + 1) as usize;
    if samples < min_samples {
        return Err(ResampleRejection::TooShort { samples });
    }

    let mut points = Vec::with_capacity(samples);
    let mut seg = 0usize;
    for i in 0..samples {
        let t = first + i as i64 * step;
        while recs[seg + 1].timestamp < t {
            seg += 1;
        }
        let (a, b) = (recs[seg], recs[seg + 1]);
        let p = if t == a.timestamp {
            [a.lat, a.lon]
        } else if t == b.timestamp {
            [b.lat, b.lon]
        } else {
            let w = (t - a.timestamp) as f64 / (b.timestamp - a.timestamp) as f64;
            [a.lat + w * (b.lat - a.lat), a.lon + w * (b.lon - a.lon)]
        };
        points.push(p);
    }
    Ok(Journey {
        journey_id: raw.journey_id.clone(),
        mmsi: raw.mmsi,
        start: first,
        delta_minutes,
        points,
    })
}

/// Region-of-interest bounds used for min-max normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationParams {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl NormalizationParams {
    /// Danish Straits region of interest.
    pub const DANISH_STRAITS: Self = Self {
        lat_min: 55.5,
        lat_max: 58.0,
        lon_min: 10.3,
        lon_max: 13.0,
    };

    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let p = Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite());
        if !ok || self.lat_max <= self.lat_min || self.lon_max <= self.lon_min {
            return Err(Error::Config(format!("degenerate ROI bounds {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.lat_min..=self.lat_max).contains(&p[0]) && (self.lon_min..=self.lon_max).contains(&p[1])
    }

    pub fn normalize_point(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.lat_min) / (self.lat_max - self.lat_min),
            (p[1] - self.lon_min) / (self.lon_max - self.lon_min),
        ]
    }

    pub fn denormalize_point(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] * (self.lat_max - self.lat_min) + self.lat_min,
            p[1] * (self.lon_max - self.lon_min) + self.lon_min,
        ]
    }
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self::DANISH_STRAITS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizeOutcome {
    /// Contiguous in-ROI runs. A journey that never leaves the ROI yields
    /// one piece with its original id; otherwise pieces are suffixed `.0`,
    /// `.1`, ...
    pub pieces: Vec<Journey>,
    pub dropped_points: usize,
}

/// Min-max normalizes a resampled journey into `[0, 1]²`, dropping states
/// outside the ROI and splitting the journey around them.
pub fn normalize(journey: &Journey, params: &NormalizationParams) -> Result<NormalizeOutcome> {
    params.validate()?;
    let mut runs: Vec<(usize, Vec<[f64; 2]>)> = Vec::new();
    let mut dropped = 0;
    let mut open = false;
    for (i, p) in journey.points.iter().enumerate() {
        if !params.contains(*p) {
            dropped += 1;
            open = false;
            continue;
        }
        if !open {
            runs.push((i, Vec::new()));
            open = true;
        }
        runs.last_mut().unwrap().1.push(params.normalize_point(*p));
    }
    let split = dropped > 0;
    let pieces = runs
        .into_iter()
        .enumerate()
        .map(|(n, (first, points))| Journey {
            journey_id: if split {
                format!("{}.{}", journey.journey_id, n)
            } else {
                journey.journey_id.clone()
            },
            mmsi: journey.mmsi,
            start: journey.timestamp(first),
            delta_minutes: journey.delta_minutes,
            points,
        })
        .collect();
    Ok(NormalizeOutcome {
        pieces,
        dropped_points: dropped,
    })
}

/// One training/evaluation sample in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub journey_id: String,
    /// Timestamp of the last observed state.
    pub anchor_time: i64,
    /// `L` observed `[lat, lon]` states, oldest first.
    pub observed: Vec<[f64; 2]>,
    /// `H` future `[lat, lon]` states following the anchor.
    pub future: Vec<[f64; 2]>,
    /// Zero-padded `L`-step neighbor histories at the anchor time.
    pub neighbors: Vec<Vec<[f64; 2]>>,
}

impl TrajectoryWindow {
    pub fn anchor(&self) -> [f64; 2] {
        *self.observed.last().expect("windows observe at least one state")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub neighbor_threshold: f64,
}

/// Cuts every journey into sliding windows of `history_len + horizon` states
/// and attaches the neighbor histories found at each window's anchor.
///
/// Windows are emitted in `journey_id` order, then by start offset.
pub fn make_windows(journeys: &[Journey], spec: &WindowSpec) -> Result<Vec<TrajectoryWindow>> {
    if spec.history_len == 0 || spec.horizon == 0 || spec.stride == 0 {
        return Err(Error::Config(format!(
            "window lengths and stride must be positive: {spec:?}"
        )));
    }
    let span = spec.history_len + spec.horizon;
    let mut order: Vec<&Journey> = journeys.iter().collect();
    order.sort_by(|a, b| a.journey_id.cmp(&b.journey_id));
    let mut windows = Vec::new();
    for j in order {
        if j.len() < span {
            continue;
        }
        for start in (0..=j.len() - span).step_by(spec.stride) {
            let anchor_idx = start + spec.history_len - 1;
            let anchor_time = j.timestamp(anchor_idx);
            let neighbors = find_neighbors(
                j,
                journeys,
                anchor_time,
                spec.history_len,
                spec.neighbor_threshold,
            );
            windows.push(TrajectoryWindow {
                journey_id: j.journey_id.clone(),
                anchor_time,
                observed: j.points[start..=anchor_idx].to_vec(),
                future: j.points[anchor_idx + 1..start + span].to_vec(),
                neighbors: neighbors.histories,
            });
        }
    }
    Ok(windows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Seeded journey-level split. Ids are sorted, shuffled, and the leading
/// `round(val·n)` go to validation, the next `round(test·n)` to test and the
/// rest to training.
pub fn assign_splits(ids: &[String], ratios: SplitRatios, seed: u64) -> BTreeMap<String, Split> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n = sorted.len() as f64;
    let n_val = (ratios.val * n).round() as usize;
    let n_test = ((ratios.test * n).round() as usize).min(sorted.len() - n_val.min(sorted.len()));
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            (id.clone(), split)
        })
        .collect()
}
