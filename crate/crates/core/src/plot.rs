//! Headless PNG figures: per-step sample panels, error against reverse
//! step and metrics against lead time. Output bytes depend only on the
//! inputs and [`Style`].

use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{report, Distance, Horizon, MetricReport};
use crate::trace::SampleTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub width: u32,
    pub height: u32,
    /// Margin around the plot area in pixels.
    pub margin: u32,
    /// Side of a scatter marker in pixels.
    pub marker: u32,
}

impl Default for Style {
    fn default() -> Self {
        Self {
            width: 480,
            height: 480,
            margin: 24,
            marker: 3,
        }
    }
}

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([80, 80, 80]);
const HISTORY: Rgb<u8> = Rgb([31, 119, 180]);
const TRUTH: Rgb<u8> = Rgb([44, 160, 44]);
const SAMPLE: Rgb<u8> = Rgb([214, 39, 40]);
const SERIES: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([23, 190, 207]),
];

/// Data-space rectangle mapped onto the plot area.
#[derive(Debug, Clone, Copy)]
struct Frame {
    x: [f64; 2],
    y: [f64; 2],
}

impl Frame {
    fn around(points: impl IntoIterator<Item = [f64; 2]>) -> Result<Self> {
        let mut f = Frame {
            x: [f64::INFINITY, f64::NEG_INFINITY],
            y: [f64::INFINITY, f64::NEG_INFINITY],
        };
        for [x, y] in points {
            if !(x.is_finite() && y.is_finite()) {
                return Err(Error::NonFinite("plot data".into()));
            }
            f.x = [f.x[0].min(x), f.x[1].max(x)];
            f.y = [f.y[0].min(y), f.y[1].max(y)];
        }
        if !f.x[0].is_finite() {
            return Err(Error::Empty("nothing to plot".into()));
        }
        for r in [&mut f.x, &mut f.y] {
            let pad = ((r[1] - r[0]) * 0.05).max(1e-9);
            *r = [r[0] - pad, r[1] + pad];
        }
        Ok(f)
    }
}

struct Canvas {
    img: RgbImage,
    style: Style,
    frame: Frame,
}

impl Canvas {
    fn new(style: Style, frame: Frame) -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(style.width, style.height, BACKGROUND),
            style,
            frame,
        };
        let (m, w, h) = (style.margin as i64, style.width as i64, style.height as i64);
        c.segment_px((m, h - m), (w - m, h - m), AXIS);
        c.segment_px((m, m), (m, h - m), AXIS);
        c
    }

    fn to_px(&self, [x, y]: [f64; 2]) -> (i64, i64) {
        let s = self.style;
        let (w, h) = ((s.width - 2 * s.margin) as f64, (s.height - 2 * s.margin) as f64);
        let u = (x - self.frame.x[0]) / (self.frame.x[1] - self.frame.x[0]);
        let v = (y - self.frame.y[0]) / (self.frame.y[1] - self.frame.y[0]);
        (
            s.margin as i64 + (u * w).round() as i64,
            (s.height - s.margin) as i64 - (v * h).round() as i64,
        )
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn segment_px(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn polyline(&mut self, points: &[[f64; 2]], c: Rgb<u8>) {
        for pair in points.windows(2) {
            let (a, b) = (self.to_px(pair[0]), self.to_px(pair[1]));
            self.segment_px(a, b, c);
        }
    }

    fn dot(&mut self, p: [f64; 2], c: Rgb<u8>) {
        let (x, y) = self.to_px(p);
        let r = self.style.marker as i64 / 2;
        for dy in -r..=r {
            for dx in -r..=r {
                self.put(x + dx, y + dy, c);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }
}

/// `[lat, lon]` to plot `[x, y]` (longitude east, latitude north).
fn xy(p: [f64; 2]) -> [f64; 2] {
    [p[1], p[0]]
}

/// One scatter panel per retained reverse step for window `w`, named
/// `step_{k:03}.png`. Axes are shared across panels so contraction is
/// visible.
pub fn step_panels(trace: &SampleTrace, w: usize, dir: &Path, style: Style) -> Result<Vec<PathBuf>> {
    if w >= trace.windows() {
        return Err(Error::Config(format!("trace holds {} windows, asked for {w}", trace.windows())));
    }
    let (observed, truth) = (trace.observed(w), trace.truth(w));
    let steps: Vec<Vec<Vec<[f64; 2]>>> = (0..trace.meta.steps.len()).map(|s| trace.samples_at(w, s)).collect();
    let frame = Frame::around(
        observed
            .iter()
            .chain(&truth)
            .chain(steps.iter().flatten().flatten())
            .map(|p| xy(*p)),
    )?;
    let mut paths = Vec::with_capacity(steps.len());
    for (k, samples) in trace.meta.steps.iter().zip(&steps) {
        let mut c = Canvas::new(style, frame);
        for s in samples {
            for p in s {
                c.dot(xy(*p), SAMPLE);
            }
        }
        let to_xy = |v: &[[f64; 2]]| v.iter().map(|p| xy(*p)).collect::<Vec<_>>();
        let mut future = vec![*observed.last().expect("history is non-empty")];
        future.extend_from_slice(&truth);
        c.polyline(&to_xy(&observed), HISTORY);
        c.polyline(&to_xy(&future), TRUTH);
        let path = dir.join(format!("step_{k:03}.png"));
        c.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Best-of-N ADE per retained step and horizon, in trace order.
pub fn error_by_step(trace: &SampleTrace, horizons: &[Horizon], distance: Distance) -> Result<Vec<(usize, Vec<f64>)>> {
    if horizons.is_empty() {
        return Err(Error::Config("horizon list is empty".into()));
    }
    trace
        .meta
        .steps
        .iter()
        .enumerate()
        .map(|(s, &k)| {
            let r = report(&trace.predictions_at(s), horizons, &trace.meta.roi, distance, "", "")?;
            Ok((k, r.rows.iter().map(|row| row.ade).collect()))
        })
        .collect()
}

/// Error against reverse step, one line per horizon, with the series as CSV
/// next to the image.
pub fn error_curve(
    trace: &SampleTrace,
    horizons: &[Horizon],
    distance: Distance,
    path: &Path,
    style: Style,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let series = error_by_step(trace, horizons, distance)?;
    let k_max = trace.meta.steps.iter().copied().max().unwrap_or(0) as f64;
    // Reverse steps run right to left so time flows left to right.
    let pts = |h: usize| -> Vec<[f64; 2]> { series.iter().map(|(k, v)| [k_max - *k as f64, v[h]]).collect() };
    let frame = Frame::around((0..horizons.len()).flat_map(pts).chain([[0.0, 0.0]]))?;
    let mut c = Canvas::new(style, frame);
    for h in 0..horizons.len() {
        let p = pts(h);
        c.polyline(&p, SERIES[h % SERIES.len()]);
        p.iter().for_each(|q| c.dot(*q, SERIES[h % SERIES.len()]));
    }
    c.save(path)?;
    let mut csv = String::from("k");
    for h in horizons {
        csv.push_str(&format!(",ade_{}h", h.hours));
    }
    csv.push('\n');
    for (k, v) in &series {
        csv.push_str(&k.to_string());
        v.iter().for_each(|x| csv.push_str(&format!(",{x}")));
        csv.push('\n');
    }
    std::fs::write(path.with_extension("csv"), csv).map_err(|e| crate::error::io_path(path.with_extension("csv"), e))?;
    Ok(series)
}

/// ADE and FDE against lead time for each report, ADE solid and FDE dotted.
pub fn report_curve(reports: &[MetricReport], path: &Path, style: Style) -> Result<()> {
    if reports.is_empty() || reports.iter().any(|r| r.rows.is_empty()) {
        return Err(Error::Config("horizon list is empty".into()));
    }
    let frame = Frame::around(
        reports
            .iter()
            .flat_map(|r| r.rows.iter().flat_map(|row| [[row.hours, row.ade], [row.hours, row.fde]]))
            .chain([[0.0, 0.0]]),
    )?;
    let mut c = Canvas::new(style, frame);
    for (i, r) in reports.iter().enumerate() {
        let colour = SERIES[i % SERIES.len()];
        let ade: Vec<[f64; 2]> = r.rows.iter().map(|row| [row.hours, row.ade]).collect();
        c.polyline(&ade, colour);
        for row in &r.rows {
            c.dot([row.hours, row.ade], colour);
            c.dot([row.hours, row.fde], colour);
        }
    }
    c.save(path)
}
