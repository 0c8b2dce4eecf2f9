//! Scene context: a land/water raster of the region of interest, Gaussian
//! heatmaps of observed tracks, and their blend into a trajectory-on-map grid.
//!
//! Grids are `W×W`, row-major, with row `r` covering normalized latitude
//! `[r/W, (r+1)/W)` (south to north) and column `c` covering normalized
//! longitude `[c/W, (c+1)/W)`. The center of cell `(r, c)` sits at pixel
//! coordinate `(r, c)`; a normalized point `u` maps to pixel `u·W − 0.5`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ais::NormalizationParams;
use crate::error::{Error, Result};

pub const WATER: f64 = 1.0;
pub const LAND: f64 = 0.0;

/// Closed `[lat, lon]` polygon in degrees.
pub type Ring = Vec<[f64; 2]>;

pub const COASTLINE_FORMAT: &str = "coastline-rings";
pub const COASTLINE_VERSION: u32 = 1;

/// On-disk coastline description.
///
/// ```json
/// {"format": "coastline-rings", "version": 1, "rings": [[[55.6, 10.4], ...]]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoastlineFile {
    pub format: String,
    pub version: u32,
    pub rings: Vec<Ring>,
}

impl CoastlineFile {
    pub fn new(rings: Vec<Ring>) -> Self {
        Self {
            format: COASTLINE_FORMAT.into(),
            version: COASTLINE_VERSION,
            rings,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        if file.format != COASTLINE_FORMAT || file.version != COASTLINE_VERSION {
            return Err(Error::Config(format!(
                "unsupported coastline file {} v{}",
                file.format, file.version
            )));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_path(path, e))?;
        Self::from_json(&text)
    }
}

/// Land/water raster over the full region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub size: usize,
    pub cells: Vec<f64>,
    pub roi: NormalizationParams,
}

impl SceneImage {
    pub fn all_water(size: usize, roi: NormalizationParams) -> Self {
        Self {
            size,
            cells: vec![WATER; size * size],
            roi,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.size + col]
    }
}

fn point_in_ring(p: [f64; 2], ring: &[[f64; 2]]) -> bool {
    // Even-odd crossing test on a ray towards +lon.
    let mut inside = false;
    for edge in ring.windows(2) {
        let (a, b) = (edge[0], edge[1]);
        if (a[0] > p[0]) != (b[0] > p[0]) {
            let lon_cross = a[1] + (p[0] - a[0]) / (b[0] - a[0]) * (b[1] - a[1]);
            if p[1] < lon_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Marks every cell whose center lies inside a land ring as [`LAND`].
pub fn rasterize_coastline(rings: &[Ring], roi: &NormalizationParams, size: usize) -> Result<SceneImage> {
    roi.validate()?;
    if size == 0 {
        return Err(Error::Config("scene grid size must be positive".into()));
    }
    for (i, ring) in rings.iter().enumerate() {
        if ring.len() < 4 {
            return Err(Error::Geometry {
                ring: i,
                reason: format!("{} vertices; a closed ring needs at least 4", ring.len()),
            });
        }
        if ring.first() != ring.last() {
            return Err(Error::Geometry {
                ring: i,
                reason: "ring is not closed (first vertex != last vertex)".into(),
            });
        }
    }
    let mut image = SceneImage::all_water(size, *roi);
    for row in 0..size {
        for col in 0..size {
            let center = roi.denormalize_point([
                (row as f64 + 0.5) / size as f64,
                (col as f64 + 0.5) / size as f64,
            ]);
            if rings.iter().any(|r| point_in_ring(center, r)) {
                image.cells[row * size + col] = LAND;
            }
        }
    }
    Ok(image)
}

/// Sum of isotropic Gaussian kernels, one per observed state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryHeatmap {
    pub size: usize,
    /// Kernel standard deviation in pixels.
    pub sigma: f64,
    pub cells: Vec<f64>,
}

/// Maps a normalized coordinate onto continuous pixel space.
pub fn to_pixel(u: f64, size: usize) -> f64 {
    u * size as f64 - 0.5
}

/// Renders `H(x, y) = Σ_t exp(−((x−x_t)² + (y−y_t)²) / 2σ²)` for the observed
/// normalized `[lat, lon]` states. Off-grid states contribute their tails.
pub fn render_heatmap(observed: &[[f64; 2]], size: usize, sigma: f64) -> Result<TrajectoryHeatmap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let mut cells = vec![0.0; size * size];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for p in observed {
        let (pr, pc) = (to_pixel(p[0], size), to_pixel(p[1], size));
        for row in 0..size {
            let dr = row as f64 - pr;
            let base = row * size;
            for col in 0..size {
                let dc = col as f64 - pc;
                cells[base + col] += (-(dr * dr + dc * dc) * inv).exp();
            }
        }
    }
    Ok(TrajectoryHeatmap { size, sigma, cells })
}

/// `alpha ⊙ H + (1 − alpha) ⊙ I`, cell by cell.
pub fn fuse(heatmap: &TrajectoryHeatmap, scene: &SceneImage, alpha: f64) -> Result<Vec<f64>> {
    if heatmap.size != scene.size {
        return Err(Error::Shape(format!(
            "heatmap is {0}x{0} but scene is {1}x{1}",
            heatmap.size, scene.size
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("fusion alpha must lie in [0, 1), got {alpha}")));
    }
    Ok(heatmap
        .cells
        .iter()
        .zip(&scene.cells)
        .map(|(h, i)| alpha * h + (1.0 - alpha) * i)
        .collect())
}

/// Writes a grid as an 8-bit grayscale PNG, north up, scaled so the
/// grid maximum is white.
pub fn write_grid_png(cells: &[f64], size: usize, path: &Path) -> Result<()> {
    let max = cells.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let img = image::GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let row = size - 1 - y as usize;
        let v = cells[row * size + x as usize].max(0.0) * scale;
        image::Luma([v.round().min(255.0) as u8])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_roi() -> NormalizationParams {
        NormalizationParams::new(0.0, 1.0, 0.0, 1.0).unwrap()
    }

    fn square(lat0: f64, lat1: f64, lon0: f64, lon1: f64) -> Ring {
        vec![[lat0, lon0], [lat0, lon1], [lat1, lon1], [lat1, lon0], [lat0, lon0]]
    }

    #[test]
    fn no_polygons_means_all_water() {
        let img = rasterize_coastline(&[], &unit_roi(), 8).unwrap();
        assert!(img.cells.iter().all(|&v| v == WATER));
    }

    #[test]
    fn full_cover_means_all_land() {
        let img = rasterize_coastline(&[square(-1.0, 2.0, -1.0, 2.0)], &unit_roi(), 8).unwrap();
        assert!(img.cells.iter().all(|&v| v == LAND));
    }

    #[test]
    fn left_half_square() {
        // Cell centers at lon 0.125, 0.375 fall inside [−0.1, 0.5]; 0.625 and
        // 0.875 do not.
        let img = rasterize_coastline(&[square(-0.1, 1.1, -0.1, 0.5)], &unit_roi(), 4).unwrap();
        for row in 0..4 {
            let got: Vec<f64> = (0..4).map(|c| img.at(row, c)).collect();
            assert_eq!(got, vec![LAND, LAND, WATER, WATER]);
        }
    }

    #[test]
    fn unclosed_ring_names_index() {
        let mut open = square(0.0, 0.5, 0.0, 0.5);
        open.pop();
        open.push([0.1, 0.1]);
        let err = rasterize_coastline(&[square(0.0, 0.1, 0.0, 0.1), open], &unit_roi(), 4).unwrap_err();
        assert!(matches!(err, Error::Geometry { ring: 1, .. }));
    }

    #[test]
    fn coastline_file_round_trip_and_version_check() {
        let f = CoastlineFile::new(vec![square(0.0, 0.5, 0.0, 0.5)]);
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(CoastlineFile::from_json(&text).unwrap(), f);
        let bad = text.replace("\"version\":1", "\"version\":9");
        assert!(CoastlineFile::from_json(&bad).is_err());
    }

    fn pixel_to_norm(px: f64, size: usize) -> f64 {
        (px + 0.5) / size as f64
    }

    #[test]
    fn kernel_peak_at_cell_center() {
        let p = [pixel_to_norm(3.0, 8), pixel_to_norm(5.0, 8)];
        let h = render_heatmap(&[p], 8, 1.5).unwrap();
        assert!((h.cells[3 * 8 + 5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_add() {
        let p = [pixel_to_norm(3.0, 8), pixel_to_norm(5.0, 8)];
        let h = render_heatmap(&[p, p], 8, 1.5).unwrap();
        assert!((h.cells[3 * 8 + 5] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_value_two_pixels_away() {
        let p = [pixel_to_norm(10.0, 32), pixel_to_norm(10.0, 32)];
        let h = render_heatmap(&[p], 32, 2.0).unwrap();
        let want = (-4.0f64 / 8.0).exp();
        assert!((h.cells[12 * 32 + 10] - want).abs() < 1e-12);
        assert!((want - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn non_positive_sigma_rejected() {
        assert!(render_heatmap(&[[0.5, 0.5]], 8, 0.0).is_err());
    }

    #[test]
    fn fuse_cases() {
        let scene = SceneImage::all_water(2, unit_roi());
        let h = TrajectoryHeatmap {
            size: 2,
            sigma: 1.0,
            cells: vec![1.0, 2.0, 0.0, 0.5],
        };
        assert_eq!(fuse(&h, &scene, 0.0).unwrap(), scene.cells);
        let half = fuse(&h, &scene, 0.5).unwrap();
        assert_eq!(half[0], 1.0);
        let mut land = scene.clone();
        land.cells = vec![LAND; 4];
        assert_eq!(fuse(&h, &land, 0.5).unwrap()[1], 1.0);
        assert!(fuse(&h, &SceneImage::all_water(3, unit_roi()), 0.5).is_err());
        assert!(fuse(&h, &scene, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn heatmap_ignores_temporal_order(pts in prop::collection::vec(prop::array::uniform2(0.0..1.0f64), 1..6)) {
            let mut rev = pts.clone();
            rev.reverse();
            let a = render_heatmap(&pts, 12, 1.5).unwrap();
            let b = render_heatmap(&rev, 12, 1.5).unwrap();
            for (x, y) in a.cells.iter().zip(&b.cells) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn heatmap_shift_by_one_pixel(r in 4.0..8.0f64, c in 4.0..8.0f64) {
            let size = 16;
            let p = [pixel_to_norm(r, size), pixel_to_norm(c, size)];
            let q = [pixel_to_norm(r + 1.0, size), pixel_to_norm(c, size)];
            let a = render_heatmap(&[p], size, 1.0).unwrap();
            let b = render_heatmap(&[q], size, 1.0).unwrap();
            for row in 0..size - 1 {
                for col in 0..size {
                    prop_assert!((a.cells[row * size + col] - b.cells[(row + 1) * size + col]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn fuse_bounded(alpha in 0.0..0.999f64, pts in prop::collection::vec(prop::array::uniform2(0.0..1.0f64), 1..4)) {
            let h = render_heatmap(&pts, 8, 1.0).unwrap();
            let scene = rasterize_coastline(&[square(0.0, 0.5, 0.0, 0.5)], &unit_roi(), 8).unwrap();
            let fused = fuse(&h, &scene, alpha).unwrap();
            let bound = h.cells.iter().cloned().fold(1.0f64, f64::max);
            prop_assert!(fused.iter().all(|&v| v <= bound + 1e-12 && v >= 0.0));
        }

        #[test]
        fn raster_is_binary(lat0 in -0.5..0.5f64, lon0 in -0.5..0.5f64, w in 0.1..1.0f64) {
            let img = rasterize_coastline(&[square(lat0, lat0 + w, lon0, lon0 + w)], &unit_roi(), 8).unwrap();
            prop_assert!(img.cells.iter().all(|&v| v == LAND || v == WATER));
        }
    }
}
