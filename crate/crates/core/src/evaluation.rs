//! Displacement metrics, best-of-N selection and per-horizon reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ais::NormalizationParams;
use crate::error::{io_path, Error, Result};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

fn check_degrees(p: [f64; 2]) -> Result<()> {
    if !(-90.0..=90.0).contains(&p[0]) || !(-180.0..=180.0).contains(&p[1]) || !p[0].is_finite() || !p[1].is_finite() {
        return Err(Error::Config(format!("({}, {}) is not a valid (lat, lon) in degrees", p[0], p[1])));
    }
    Ok(())
}

/// Great-circle distance between two `(lat, lon)` points in degrees.
pub fn haversine_km(p: [f64; 2], q: [f64; 2]) -> Result<f64> {
    check_degrees(p)?;
    check_degrees(q)?;
    let (phi1, phi2) = (p[0].to_radians(), q[0].to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (q[1] - p[1]).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Kilometres on denormalized degrees.
    #[default]
    Haversine,
    /// Euclidean distance in normalized units.
    Normalized,
}

impl Distance {
    pub fn unit(self) -> &'static str {
        match self {
            Distance::Haversine => "km",
            Distance::Normalized => "normalized",
        }
    }

    pub fn between(self, p: [f64; 2], q: [f64; 2]) -> Result<f64> {
        match self {
            Distance::Haversine => haversine_km(p, q),
            Distance::Normalized => Ok(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()),
        }
    }
}

fn per_step(pred: &[[f64; 2]], truth: &[[f64; 2]], steps: usize, distance: Distance) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::Config("horizon must cover at least one step".into()));
    }
    if steps > pred.len() || steps > truth.len() {
        return Err(Error::Shape(format!(
            "horizon of {steps} steps exceeds trajectories of {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    pred[..steps].iter().zip(&truth[..steps]).map(|(p, t)| distance.between(*p, *t)).collect()
}

/// Mean displacement over the first `steps` future states.
pub fn ade(pred: &[[f64; 2]], truth: &[[f64; 2]], steps: usize, distance: Distance) -> Result<f64> {
    let d = per_step(pred, truth, steps, distance)?;
    Ok(d.iter().sum::<f64>() / steps as f64)
}

/// Displacement at step `steps`.
pub fn fde(pred: &[[f64; 2]], truth: &[[f64; 2]], steps: usize, distance: Distance) -> Result<f64> {
    per_step(pred, truth, steps, distance)?;
    distance.between(pred[steps - 1], truth[steps - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ade,
    Fde,
}

/// Smallest metric value over the sample pool.
pub fn best_of_n(
    samples: &[Vec<[f64; 2]>],
    truth: &[[f64; 2]],
    steps: usize,
    metric: Metric,
    distance: Distance,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("best-of-N needs at least one sample".into()));
    }
    let mut best = f64::INFINITY;
    for s in samples {
        let v = match metric {
            Metric::Ade => ade(s, truth, steps, distance)?,
            Metric::Fde => fde(s, truth, steps, distance)?,
        };
        best = best.min(v);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub hours: f64,
    pub steps: usize,
}

/// Maps lead times in hours to step counts at `delta_minutes`.
pub fn horizons_from_hours(hours: &[f64], delta_minutes: u32, max_steps: usize) -> Result<Vec<Horizon>> {
    if hours.is_empty() {
        return Err(Error::Config("no horizons requested".into()));
    }
    hours
        .iter()
        .map(|&h| {
            let exact = h * 60.0 / delta_minutes as f64;
            let steps = exact.round() as usize;
            if (exact - steps as f64).abs() > 1e-9 || steps < 1 || steps > max_steps {
                return Err(Error::Config(format!(
                    "horizon {h} h is not a whole number of {delta_minutes}-minute steps within 1..={max_steps}"
                )));
            }
            Ok(Horizon { hours: h, steps })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub hours: f64,
    pub steps: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<HorizonRow>,
    pub n_samples: usize,
    pub sample_count: usize,
    pub distance: Distance,
    pub config_hash: String,
    pub checkpoint_id: String,
}

impl MetricReport {
    pub fn row(&self, steps: usize) -> Option<&HorizonRow> {
        self.rows.iter().find(|r| r.steps == steps)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Comma-separated table with a commented provenance header.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# config_hash={} checkpoint_id={} n={} windows={} unit={}\nhours,steps,ade,fde\n",
            self.config_hash,
            self.checkpoint_id,
            self.n_samples,
            self.sample_count,
            self.distance.unit()
        );
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", r.hours, r.steps, r.ade, r.fde));
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:>7} {:>6} {:>12} {:>12}\n", "hours", "steps", "ADE", "FDE");
        for r in &self.rows {
            out.push_str(&format!("{:>7} {:>6} {:>12.4} {:>12.4}\n", r.hours, r.steps, r.ade, r.fde));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_path(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| io_path(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| io_path(&csv, e))?;
        Ok(())
    }
}

/// Side-by-side ADE/FDE table for several reports over the same horizons.
pub fn comparison_csv(labels: &[String], reports: &[MetricReport]) -> Result<String> {
    let first = reports.first().ok_or_else(|| Error::Empty("no reports to compare".into()))?;
    let mut out = String::from("hours,steps");
    for l in labels {
        out.push_str(&format!(",{l}_ade,{l}_fde"));
    }
    out.push('\n');
    for (i, row) in first.rows.iter().enumerate() {
        out.push_str(&format!("{},{}", row.hours, row.steps));
        for r in reports {
            let other = r
                .rows
                .get(i)
                .filter(|o| o.steps == row.steps)
                .ok_or_else(|| Error::Incompatible("reports cover different horizons".into()))?;
            out.push_str(&format!(",{:.6},{:.6}", other.ade, other.fde));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Sampled futures for one window in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub samples: Vec<Vec<[f64; 2]>>,
    pub truth: Vec<[f64; 2]>,
}

/// Best-of-N ADE and FDE per horizon, averaged over windows. Metrics are
/// taken on denormalized degrees for [`Distance::Haversine`].
pub fn report(
    predictions: &[WindowPrediction],
    horizons: &[Horizon],
    roi: &NormalizationParams,
    distance: Distance,
    config_hash: &str,
    checkpoint_id: &str,
) -> Result<MetricReport> {
    if predictions.is_empty() {
        return Err(Error::Empty("no windows to evaluate".into()));
    }
    if horizons.is_empty() {
        return Err(Error::Config("no horizons requested".into()));
    }
    let to_metric_space = |traj: &[[f64; 2]]| -> Vec<[f64; 2]> {
        match distance {
            Distance::Haversine => traj.iter().map(|p| roi.denormalize_point(*p)).collect(),
            Distance::Normalized => traj.to_vec(),
        }
    };
    let n_samples = predictions[0].samples.len();
    let mut sums = vec![(0.0, 0.0); horizons.len()];
    for w in predictions {
        if w.samples.len() != n_samples {
            return Err(Error::Shape("windows carry different sample counts".into()));
        }
        let truth = to_metric_space(&w.truth);
        let samples: Vec<Vec<[f64; 2]>> = w.samples.iter().map(|s| to_metric_space(s)).collect();
        for (acc, h) in sums.iter_mut().zip(horizons) {
            acc.0 += best_of_n(&samples, &truth, h.steps, Metric::Ade, distance)?;
            acc.1 += best_of_n(&samples, &truth, h.steps, Metric::Fde, distance)?;
        }
    }
    let n = predictions.len() as f64;
    Ok(MetricReport {
        rows: horizons
            .iter()
            .zip(sums)
            .map(|(h, (a, f))| HorizonRow {
                hours: h.hours,
                steps: h.steps,
                ade: a / n,
                fde: f / n,
            })
            .collect(),
        n_samples,
        sample_count: predictions.len(),
        distance,
        config_hash: config_hash.to_string(),
        checkpoint_id: checkpoint_id.to_string(),
    })
}

/// Writes `(step, value)` pairs as CSV.
pub fn write_series(path: &Path, header: &str, rows: &[(usize, f64)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_path(path, e))?;
    writeln!(f, "{header}")?;
    for (k, v) in rows {
        writeln!(f, "{k},{v}")?;
    }
    Ok(())
}
