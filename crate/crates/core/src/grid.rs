//! Probabilistic occupancy grids with sub-cell bilinear interpolation.
//!
//! Cells store log-odds; the probability view `M` is what interpolation and
//! matching consume. Values are sampled at cell centers, so a continuous
//! world point interpolates between the four surrounding centers, which also
//! yields the spatial gradient the scan matcher needs. A pyramid keeps
//! several grids of halving resolution that are updated independently from
//! the same scans rather than down-sampled from the finest level.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fmt::g9;
use crate::pose::PoseSE2;
use crate::scan::PlanarScan;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid extent must be positive, got {width} x {height} cells")]
    EmptyExtent { width: usize, height: usize },
    #[error("{param} must be positive, got {value}")]
    NonPositiveParam { param: &'static str, value: f64 },
    #[error("point ({0}, {1}) is outside the interpolable grid interior")]
    OutOfBounds(f64, f64),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Tunables for one grid level.
#[derive(Debug, Clone, Copy)]
pub struct GridConfig {
    /// Meters per cell.
    pub resolution: f64,
    /// World coordinates of the corner of cell (0, 0).
    pub origin: (f64, f64),
    /// Extent in cells.
    pub width: usize,
    pub height: usize,
    /// Log-odds increment for a beam end point.
    pub l_hit: f64,
    /// Log-odds decrement (negative) for a traversed cell.
    pub l_miss: f64,
    /// Log-odds clamp.
    pub l_min: f64,
    pub l_max: f64,
    /// Occupancy probability threshold separating occupied from free.
    pub occupied_threshold: f64,
}

impl GridConfig {
    pub fn with_extent(resolution: f64, origin: (f64, f64), width: usize, height: usize) -> Self {
        Self {
            resolution,
            origin,
            width,
            height,
            ..Self::default()
        }
    }

    /// Extent given in world units: a rectangle anchored at `origin` spanning
    /// `size` meters.
    pub fn with_world_extent(resolution: f64, origin: (f64, f64), size: (f64, f64)) -> Self {
        let width = (size.0 / resolution).ceil() as usize;
        let height = (size.1 / resolution).ceil() as usize;
        Self::with_extent(resolution, origin, width, height)
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            origin: (-85.0, -85.0),
            width: 3400,
            height: 3400,
            l_hit: 0.9,
            l_miss: -0.4,
            l_min: -4.0,
            l_max: 4.0,
            occupied_threshold: 0.5,
        }
    }
}

/// Interpolated occupancy value and its spatial gradient (1/meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpResult {
    pub value: f64,
    pub gradient: (f64, f64),
}

/// One occupancy grid level.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    config: GridConfig,
    /// Row-major log-odds, index `iy * width + ix`.
    log_odds: Vec<f64>,
}

fn probability(log_odds: f64) -> f64 {
    1.0 / (1.0 + (-log_odds).exp())
}

impl OccupancyGrid {
    pub fn new(config: GridConfig) -> Result<Self, GridError> {
        if config.width == 0 || config.height == 0 {
            return Err(GridError::EmptyExtent {
                width: config.width,
                height: config.height,
            });
        }
        if !(config.resolution > 0.0) {
            return Err(GridError::NonPositiveParam {
                param: "resolution",
                value: config.resolution,
            });
        }
        Ok(Self {
            log_odds: vec![0.0; config.width * config.height],
            config,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn resolution(&self) -> f64 {
        self.config.resolution
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.config.width + ix
    }

    /// Cell containing a world point, if inside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let gx = (x - self.config.origin.0) / self.config.resolution;
        let gy = (y - self.config.origin.1) / self.config.resolution;
        if gx < 0.0 || gy < 0.0 {
            return None;
        }
        let ix = gx.floor() as usize;
        let iy = gy.floor() as usize;
        if ix >= self.config.width || iy >= self.config.height {
            return None;
        }
        Some((ix, iy))
    }

    /// World coordinates of a cell center.
    pub fn center_of(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.config.origin.0 + (ix as f64 + 0.5) * self.config.resolution,
            self.config.origin.1 + (iy as f64 + 0.5) * self.config.resolution,
        )
    }

    pub fn log_odds_at(&self, ix: usize, iy: usize) -> f64 {
        self.log_odds[self.index(ix, iy)]
    }

    /// Occupancy probability of a cell; unknown cells report 0.5.
    pub fn probability_at(&self, ix: usize, iy: usize) -> f64 {
        probability(self.log_odds_at(ix, iy))
    }

    pub fn is_occupied(&self, ix: usize, iy: usize) -> bool {
        self.probability_at(ix, iy) > self.config.occupied_threshold
    }

    pub fn set_log_odds(&mut self, ix: usize, iy: usize, value: f64) {
        let clamped = value.clamp(self.config.l_min, self.config.l_max);
        let idx = self.index(ix, iy);
        self.log_odds[idx] = clamped;
    }

    /// Register a beam end point observation in a cell.
    pub fn apply_hit(&mut self, ix: usize, iy: usize) {
        self.set_log_odds(ix, iy, self.log_odds_at(ix, iy) + self.config.l_hit);
    }

    /// Register free space observed along a beam in a cell.
    pub fn apply_miss(&mut self, ix: usize, iy: usize) {
        self.set_log_odds(ix, iy, self.log_odds_at(ix, iy) + self.config.l_miss);
    }

    /// Bilinear occupancy value and gradient at a world point.
    ///
    /// The four surrounding cell centers are blended; the gradient carries
    /// the metric factor so its units are 1/meters. Points outside the
    /// interior (extent minus a half-cell border on the node lattice) signal
    /// out of bounds and contribute nothing to matching.
    pub fn interpolate(&self, x: f64, y: f64) -> Result<InterpResult, GridError> {
        let res = self.config.resolution;
        let gx = (x - self.config.origin.0) / res - 0.5;
        let gy = (y - self.config.origin.1) / res - 0.5;
        if gx < 0.0 || gy < 0.0 {
            return Err(GridError::OutOfBounds(x, y));
        }
        let ix = gx.floor() as usize;
        let iy = gy.floor() as usize;
        if ix + 1 >= self.config.width || iy + 1 >= self.config.height {
            return Err(GridError::OutOfBounds(x, y));
        }
        let u = gx - ix as f64;
        let v = gy - iy as f64;

        let m00 = self.probability_at(ix, iy);
        let m10 = self.probability_at(ix + 1, iy);
        let m01 = self.probability_at(ix, iy + 1);
        let m11 = self.probability_at(ix + 1, iy + 1);

        let value = v * (u * m11 + (1.0 - u) * m01) + (1.0 - v) * (u * m10 + (1.0 - u) * m00);
        let dx = (v * (m11 - m01) + (1.0 - v) * (m10 - m00)) / res;
        let dy = (u * (m11 - m10) + (1.0 - u) * (m01 - m00)) / res;
        Ok(InterpResult {
            value,
            gradient: (dx, dy),
        })
    }

    /// Integrate one scan taken at `pose`.
    ///
    /// Every non-empty beam decrements the cells it traverses and increments
    /// its end-point cell. Beams leaving the extent are truncated at the
    /// boundary; their traversed cells still count as misses.
    pub fn update_with_scan(&mut self, pose: &PoseSE2, scan: &PlanarScan) {
        let (sx, sy) = (pose.x, pose.y);
        let beams: Vec<(f64, f64)> = scan
            .endpoints()
            .map(|(ex, ey)| pose.transform(ex, ey))
            .collect();
        for (ex, ey) in beams {
            self.integrate_beam(sx, sy, ex, ey);
        }
    }

    fn integrate_beam(&mut self, sx: f64, sy: f64, ex: f64, ey: f64) {
        let end_cell = self.cell_of(ex, ey);
        let Some(((cx0, cy0), (cx1, cy1))) = self.clip_segment(sx, sy, ex, ey) else {
            return;
        };
        let mut cells = Vec::new();
        self.walk_cells(cx0, cy0, cx1, cy1, |c| cells.push(c));
        for &(ix, iy) in &cells {
            if Some((ix, iy)) == end_cell {
                continue;
            }
            self.apply_miss(ix, iy);
        }
        if let Some((ix, iy)) = end_cell {
            self.apply_hit(ix, iy);
        }
    }

    /// Liang–Barsky clip of a segment against the grid rectangle.
    fn clip_segment(
        &self,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    ) -> Option<((f64, f64), (f64, f64))> {
        let (ox, oy) = self.config.origin;
        let w = self.config.width as f64 * self.config.resolution;
        let h = self.config.height as f64 * self.config.resolution;
        // Shrink by a sliver so clipped points index a valid cell.
        let eps = 1e-9 * self.config.resolution;
        let (min_x, max_x) = (ox + eps, ox + w - eps);
        let (min_y, max_y) = (oy + eps, oy + h - eps);

        let dx = x1 - x0;
        let dy = y1 - y0;
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for (p, q) in [
            (-dx, x0 - min_x),
            (dx, max_x - x0),
            (-dy, y0 - min_y),
            (dy, max_y - y0),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
            }
        }
        if t0 > t1 {
            return None;
        }
        Some((
            (x0 + t0 * dx, y0 + t0 * dy),
            (x0 + t1 * dx, y0 + t1 * dy),
        ))
    }

    /// Integer grid traversal from the cell under `(x0, y0)` to the cell
    /// under `(x1, y1)`, visiting every crossed cell once.
    fn walk_cells(&self, x0: f64, y0: f64, x1: f64, y1: f64, mut visit: impl FnMut((usize, usize))) {
        let res = self.config.resolution;
        let gx0 = (x0 - self.config.origin.0) / res;
        let gy0 = (y0 - self.config.origin.1) / res;
        let gx1 = (x1 - self.config.origin.0) / res;
        let gy1 = (y1 - self.config.origin.1) / res;

        let mut ix = gx0.floor() as i64;
        let mut iy = gy0.floor() as i64;
        let end_ix = gx1.floor() as i64;
        let end_iy = gy1.floor() as i64;
        let dx = gx1 - gx0;
        let dy = gy1 - gy0;
        let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
        let step_y: i64 = if dy > 0.0 { 1 } else { -1 };

        // Parametric distance to the first x/y cell boundary and per-cell
        // increments, in units of the segment parameter t in [0, 1].
        let mut t_max_x = if dx != 0.0 {
            let next = if dx > 0.0 { ix + 1 } else { ix };
            (next as f64 - gx0) / dx
        } else {
            f64::INFINITY
        };
        let mut t_max_y = if dy != 0.0 {
            let next = if dy > 0.0 { iy + 1 } else { iy };
            (next as f64 - gy0) / dy
        } else {
            f64::INFINITY
        };
        let t_delta_x = if dx != 0.0 { (1.0 / dx).abs() } else { f64::INFINITY };
        let t_delta_y = if dy != 0.0 { (1.0 / dy).abs() } else { f64::INFINITY };

        let in_bounds = |ix: i64, iy: i64| {
            ix >= 0 && iy >= 0 && (ix as usize) < self.config.width && (iy as usize) < self.config.height
        };

        let mut guard = 2 * (self.config.width + self.config.height) as i64 + 4;
        loop {
            if in_bounds(ix, iy) {
                visit((ix as usize, iy as usize));
            }
            if (ix == end_ix && iy == end_iy) || guard <= 0 {
                break;
            }
            guard -= 1;
            if t_max_x < t_max_y {
                t_max_x += t_delta_x;
                ix += step_x;
            } else {
                t_max_y += t_delta_y;
                iy += step_y;
            }
        }
    }

    /// Occupied cells as `(ix, iy)` pairs, row-major order.
    pub fn occupied_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for iy in 0..self.config.height {
            for ix in 0..self.config.width {
                if self.is_occupied(ix, iy) {
                    out.push((ix, iy));
                }
            }
        }
        out
    }

    /// Export as plain-text PGM (P2) plus a sidecar metadata file.
    ///
    /// Gray value is `round(255 * (1 - M))`: occupied is dark. Image rows run
    /// from the top (largest y) down, matching viewer conventions.
    pub fn export_pgm(&self, pgm_path: &Path, meta_path: &Path) -> Result<(), GridError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| GridError::Io { path, source }
        };
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(pgm_path).map_err(io_err(pgm_path))?,
        );
        let write = |out: &mut dyn Write, s: String| -> Result<(), GridError> {
            out.write_all(s.as_bytes()).map_err(io_err(pgm_path))
        };
        write(&mut out, "P2\n".into())?;
        write(
            &mut out,
            format!("{} {}\n255\n", self.config.width, self.config.height),
        )?;
        for iy in (0..self.config.height).rev() {
            let mut row = String::with_capacity(self.config.width * 4);
            for ix in 0..self.config.width {
                let gray = (255.0 * (1.0 - self.probability_at(ix, iy))).round() as u32;
                if ix > 0 {
                    row.push(' ');
                }
                row.push_str(&gray.to_string());
            }
            row.push('\n');
            write(&mut out, row)?;
        }
        out.flush().map_err(io_err(pgm_path))?;

        let meta = format!(
            "resolution_m = {}\norigin_x_m = {}\norigin_y_m = {}\nwidth_cells = {}\nheight_cells = {}\noccupied_threshold = {}\nrow_order = top_down\n",
            g9(self.config.resolution),
            g9(self.config.origin.0),
            g9(self.config.origin.1),
            self.config.width,
            self.config.height,
            g9(self.config.occupied_threshold),
        );
        std::fs::write(meta_path, meta).map_err(io_err(meta_path))
    }
}

/// Multi-resolution stack of grids over one shared world extent.
///
/// Level `k + 1` has twice the cell size of level `k`; all levels are updated
/// from the same scans, never down-sampled from each other.
#[derive(Debug, Clone)]
pub struct OccupancyPyramid {
    levels: Vec<OccupancyGrid>,
}

impl OccupancyPyramid {
    /// Build `levels` grids with `finest` describing level 0. Coarser levels
    /// share the world origin and cover at least the same extent, overhanging
    /// by less than one coarse cell.
    pub fn new(finest: GridConfig, levels: usize) -> Result<Self, GridError> {
        if levels == 0 {
            return Err(GridError::EmptyExtent { width: 0, height: 0 });
        }
        let world_w = finest.width as f64 * finest.resolution;
        let world_h = finest.height as f64 * finest.resolution;
        let mut grids = Vec::with_capacity(levels);
        for k in 0..levels {
            let resolution = finest.resolution * (1 << k) as f64;
            let config = GridConfig {
                resolution,
                width: (world_w / resolution).ceil() as usize,
                height: (world_h / resolution).ceil() as usize,
                ..finest
            };
            grids.push(OccupancyGrid::new(config)?);
        }
        Ok(Self { levels: grids })
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &OccupancyGrid {
        &self.levels[k]
    }

    pub fn finest(&self) -> &OccupancyGrid {
        &self.levels[0]
    }

    pub fn levels(&self) -> &[OccupancyGrid] {
        &self.levels
    }

    /// Apply one scan at every level independently.
    pub fn update_with_scan(&mut self, pose: &PoseSE2, scan: &PlanarScan) {
        for grid in &mut self.levels {
            grid.update_with_scan(pose, scan);
        }
    }

    /// Export every level as `map_L<k>.pgm` / `map_L<k>.meta.txt` under `dir`.
    pub fn export_pgm_set(&self, dir: &Path) -> Result<Vec<PathBuf>, GridError> {
        let mut written = Vec::new();
        for (k, grid) in self.levels.iter().enumerate() {
            let pgm = dir.join(format!("map_L{k}.pgm"));
            let meta = dir.join(format!("map_L{k}.meta.txt"));
            grid.export_pgm(&pgm, &meta)?;
            written.push(pgm);
            written.push(meta);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::{project_to_scan, Point3D, PointCloud3D};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn small_grid(resolution: f64, n: usize) -> OccupancyGrid {
        OccupancyGrid::new(GridConfig::with_extent(resolution, (0.0, 0.0), n, n)).unwrap()
    }

    fn log_odds_for(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn unknown_cells_are_half() {
        let grid = small_grid(0.1, 10);
        assert_relative_eq!(grid.probability_at(3, 4), 0.5);
        let r = grid.interpolate(0.5, 0.5).unwrap();
        assert_relative_eq!(r.value, 0.5);
        assert_relative_eq!(r.gradient.0, 0.0);
        assert_relative_eq!(r.gradient.1, 0.0);
    }

    #[test]
    fn interpolation_identity_at_vertex() {
        let mut grid = small_grid(0.2, 8);
        grid.set_log_odds(2, 3, log_odds_for(0.83));
        grid.set_log_odds(3, 3, log_odds_for(0.2));
        grid.set_log_odds(2, 4, log_odds_for(0.9));
        grid.set_log_odds(3, 4, log_odds_for(0.1));
        let (cx, cy) = grid.center_of(2, 3);
        let r = grid.interpolate(cx, cy).unwrap();
        assert_relative_eq!(r.value, 0.83, epsilon = 1e-12);
    }

    #[test]
    fn interpolation_cell_center_blend() {
        // Corners (M00, M10, M01, M11) = (0, 0, 1, 1); center of the cell
        // formed by the four nodes blends to 0.5.
        let mut grid = small_grid(0.2, 8);
        grid.set_log_odds(2, 2, -1e9); // clamps to l_min => M ~ 0
        grid.set_log_odds(3, 2, -1e9);
        grid.set_log_odds(2, 3, 1e9);
        grid.set_log_odds(3, 3, 1e9);
        let (x0, y0) = grid.center_of(2, 2);
        let (x1, y1) = grid.center_of(3, 3);
        let r = grid.interpolate(0.5 * (x0 + x1), 0.5 * (y0 + y1)).unwrap();
        let m_lo = probability(-4.0);
        let m_hi = probability(4.0);
        assert_relative_eq!(r.value, 0.5 * (m_lo + m_hi), epsilon = 1e-12);
        // Clamped extremes are symmetric around 0.5.
        assert_relative_eq!(r.value, 0.5, epsilon = 1e-12);
    }

    /// Fill a grid's log-odds so that the probability view equals an affine
    /// field a + bx + cy at every cell center.
    fn affine_grid(n: usize, res: f64, a: f64, b: f64, c: f64) -> OccupancyGrid {
        let mut config = GridConfig::with_extent(res, (0.0, 0.0), n, n);
        config.l_min = -50.0;
        config.l_max = 50.0;
        let mut grid = OccupancyGrid::new(config).unwrap();
        for iy in 0..n {
            for ix in 0..n {
                let (x, y) = grid.center_of(ix, iy);
                let m = a + b * x + c * y;
                assert!(m > 0.0 && m < 1.0, "field must stay in (0,1)");
                grid.set_log_odds(ix, iy, log_odds_for(m));
            }
        }
        grid
    }

    #[test]
    fn affine_field_reproduced_exactly() {
        let (a, b, c) = (0.2, 0.3, 0.1);
        let grid = affine_grid(12, 0.1, a, b, c);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = rng.gen_range(0.1..1.1);
            let y = rng.gen_range(0.1..1.1);
            let r = grid.interpolate(x, y).unwrap();
            assert_relative_eq!(r.value, a + b * x + c * y, epsilon = 1e-9);
            assert_relative_eq!(r.gradient.0, b, epsilon = 1e-9);
            assert_relative_eq!(r.gradient.1, c, epsilon = 1e-9);
        }
    }

    #[test]
    fn interpolation_within_corner_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut grid = small_grid(0.5, 6);
        for iy in 0..6 {
            for ix in 0..6 {
                grid.set_log_odds(ix, iy, rng.gen_range(-4.0..4.0));
            }
        }
        for _ in 0..500 {
            let x = rng.gen_range(0.3..2.7);
            let y = rng.gen_range(0.3..2.7);
            let r = grid.interpolate(x, y).unwrap();
            assert!(r.value >= 0.0 && r.value <= 1.0);
            let gx = (x - 0.0) / 0.5 - 0.5;
            let gy = (y - 0.0) / 0.5 - 0.5;
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let corners = [
                grid.probability_at(ix, iy),
                grid.probability_at(ix + 1, iy),
                grid.probability_at(ix, iy + 1),
                grid.probability_at(ix + 1, iy + 1),
            ];
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(r.value >= lo - 1e-12 && r.value <= hi + 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut grid = small_grid(0.1, 30);
        for iy in 0..30 {
            for ix in 0..30 {
                grid.set_log_odds(ix, iy, rng.gen_range(-4.0..4.0));
            }
        }
        let h = 1e-7;
        let mut checked = 0;
        while checked < 1000 {
            let x = rng.gen_range(0.2..2.8);
            let y = rng.gen_range(0.2..2.8);
            // Stay strictly inside one bilinear cell.
            let gx: f64 = x / 0.1 - 0.5;
            let gy: f64 = y / 0.1 - 0.5;
            if (gx - gx.round()).abs() < 1e-3 || (gy - gy.round()).abs() < 1e-3 {
                continue;
            }
            let r = grid.interpolate(x, y).unwrap();
            let fdx = (grid.interpolate(x + h, y).unwrap().value
                - grid.interpolate(x - h, y).unwrap().value)
                / (2.0 * h);
            let fdy = (grid.interpolate(x, y + h).unwrap().value
                - grid.interpolate(x, y - h).unwrap().value)
                / (2.0 * h);
            let scale = r.gradient.0.abs().max(r.gradient.1.abs()).max(1e-3);
            assert!(
                (r.gradient.0 - fdx).abs() / scale < 1e-6,
                "dx mismatch at ({x}, {y}): {} vs {fdx}",
                r.gradient.0
            );
            assert!(
                (r.gradient.1 - fdy).abs() / scale < 1e-6,
                "dy mismtach at ({x}, {y}): {} vs {fdy}",
                r.gradient.1
            );
            checked += 1;
        }
    }

    #[test]
    fn out_of_bounds_signalled() {
        let grid = small_grid(0.1, 10);
        assert!(grid.interpolate(-0.5, 0.5).is_err());
        assert!(grid.interpolate(0.5, 5.0).is_err());
        // Inside the extent but within the half-cell border.
        assert!(grid.interpolate(0.01, 0.01).is_err());
    }

    fn scan_of_beams(beams: &[(f64, f64)]) -> PlanarScan {
        let points: Vec<Point3D> = beams
            .iter()
            .map(|&(bearing, range)| {
                Point3D::new(range * bearing.cos(), range * bearing.sin(), 0.0)
            })
            .collect();
        project_to_scan(&PointCloud3D::new(0.0, points), PI / 720.0, 100.0).unwrap()
    }

    #[test]
    fn single_beam_marks_hit_and_misses() {
        let mut grid = OccupancyGrid::new(GridConfig::with_extent(0.1, (-2.0, -2.0), 40, 40)).unwrap();
        let scan = scan_of_beams(&[(0.0, 1.0)]);
        let pose = PoseSE2::origin();
        grid.update_with_scan(&pose, &scan);

        let end = grid.cell_of(1.0, 0.0).unwrap();
        assert!(grid.probability_at(end.0, end.1) > 0.5);
        for step in 1..9 {
            let x = 0.05 + 0.1 * step as f64;
            let c = grid.cell_of(x - 0.1, 0.0).unwrap();
            if c == end {
                continue;
            }
            assert!(
                grid.probability_at(c.0, c.1) < 0.5,
                "cell {c:?} on the beam should be free"
            );
        }
    }

    #[test]
    fn hit_and_equal_miss_cancel() {
        let mut config = GridConfig::with_extent(0.1, (0.0, 0.0), 10, 10);
        config.l_hit = 0.7;
        config.l_miss = -0.7;
        let mut grid = OccupancyGrid::new(config).unwrap();
        grid.apply_hit(4, 4);
        grid.apply_miss(4, 4);
        assert_relative_eq!(grid.log_odds_at(4, 4), 0.0);
        assert_relative_eq!(grid.probability_at(4, 4), 0.5);
    }

    #[test]
    fn log_odds_stay_clamped() {
        let mut grid = small_grid(0.1, 4);
        for _ in 0..100 {
            grid.apply_hit(1, 1);
            grid.apply_miss(2, 2);
        }
        assert_relative_eq!(grid.log_odds_at(1, 1), 4.0);
        assert_relative_eq!(grid.log_odds_at(2, 2), -4.0);
        assert!(grid.probability_at(1, 1) <= 1.0);
        assert!(grid.probability_at(2, 2) >= 0.0);
    }

    #[test]
    fn beam_leaving_grid_truncates() {
        let mut grid = small_grid(0.1, 10); // covers [0,1]x[0,1]
        let scan = scan_of_beams(&[(0.0, 5.0)]);
        let pose = PoseSE2::new(0.05, 0.55, 0.0);
        grid.update_with_scan(&pose, &scan);
        // Everything along the row got a miss, nothing got a hit.
        let iy = grid.cell_of(0.05, 0.55).unwrap().1;
        for ix in 0..10 {
            assert!(grid.probability_at(ix, iy) < 0.5, "cell {ix} not decremented");
        }
        assert!(grid.occupied_cells().is_empty());
    }

    /// Analytic distance from the origin to the boundary of a centered square
    /// room of half-size `half` along `bearing`.
    fn square_room_range(bearing: f64, half: f64) -> f64 {
        let (s, c) = bearing.sin_cos();
        let tx = if c.abs() > 1e-12 { half / c.abs() } else { f64::INFINITY };
        let ty = if s.abs() > 1e-12 { half / s.abs() } else { f64::INFINITY };
        tx.min(ty)
    }

    fn square_room_scan(half: f64, bins: usize) -> PlanarScan {
        let beams: Vec<(f64, f64)> = (0..bins)
            .map(|i| {
                let bearing = -PI + (i as f64 + 0.5) * 2.0 * PI / bins as f64;
                (bearing, square_room_range(bearing, half))
            })
            .collect();
        scan_of_beams(&beams)
    }

    #[test]
    fn square_room_matches_wall_rasterization() {
        let res = 0.1;
        let mut grid =
            OccupancyGrid::new(GridConfig::with_extent(res, (-6.0, -6.0), 120, 120)).unwrap();
        let scan = square_room_scan(5.0, 1440);
        grid.update_with_scan(&PoseSE2::origin(), &scan);

        let occupied = grid.occupied_cells();
        assert!(!occupied.is_empty());
        // Every occupied cell lies within one cell of the wall boundary.
        for &(ix, iy) in &occupied {
            let (x, y) = grid.center_of(ix, iy);
            let d = (x.abs().max(y.abs()) - 5.0).abs();
            assert!(d <= res + 1e-9, "cell ({ix},{iy}) at distance {d} from wall");
        }
        // Every wall cell (center within half a cell of the boundary, seen
        // from the center) is occupied or adjacent to an occupied cell.
        let occ_set: std::collections::HashSet<(usize, usize)> = occupied.into_iter().collect();
        for iy in 0..120 {
            for ix in 0..120 {
                let (x, y) = grid.center_of(ix, iy);
                let d = x.abs().max(y.abs()) - 5.0;
                if d.abs() > res / 2.0 {
                    continue;
                }
                let near_hit = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let nx = ix as i64 + dx;
                        let ny = iy as i64 + dy;
                        nx >= 0 && ny >= 0 && occ_set.contains(&(nx as usize, ny as usize))
                    })
                });
                assert!(near_hit, "wall cell ({ix},{iy}) has no nearby occupied cell");
            }
        }
    }

    #[test]
    fn identical_updates_are_bit_identical() {
        let scan = square_room_scan(4.0, 720);
        let make = || {
            let mut grid =
                OccupancyGrid::new(GridConfig::with_extent(0.05, (-5.0, -5.0), 200, 200)).unwrap();
            grid.update_with_scan(&PoseSE2::new(0.3, -0.2, 0.4), &scan);
            grid.update_with_scan(&PoseSE2::new(0.31, -0.21, 0.41), &scan);
            grid
        };
        let a = make();
        let b = make();
        assert_eq!(a.log_odds, b.log_odds);
    }

    #[test]
    fn pyramid_resolutions_halve() {
        let finest = GridConfig::with_world_extent(0.05, (0.0, 0.0), (10.0, 10.0));
        let pyr = OccupancyPyramid::new(finest, 5).unwrap();
        let expect = [0.05, 0.1, 0.2, 0.4, 0.8];
        for (k, grid) in pyr.levels().iter().enumerate() {
            assert_relative_eq!(grid.resolution(), expect[k]);
            // Same world extent within one coarse cell of overhang.
            let w = grid.width() as f64 * grid.resolution();
            assert!(w >= 10.0 && w < 10.0 + grid.resolution());
        }
    }

    #[test]
    fn empty_scan_changes_nothing() {
        let finest = GridConfig::with_world_extent(0.1, (-5.0, -5.0), (10.0, 10.0));
        let mut pyr = OccupancyPyramid::new(finest, 3).unwrap();
        let before: Vec<Vec<f64>> = pyr.levels().iter().map(|g| g.log_odds.clone()).collect();
        let empty = PlanarScan::empty(0.0, PI / 720.0).unwrap();
        pyr.update_with_scan(&PoseSE2::origin(), &empty);
        for (grid, prev) in pyr.levels().iter().zip(&before) {
            assert_eq!(&grid.log_odds, prev);
        }
    }

    #[test]
    fn pyramid_levels_overlap() {
        let finest = GridConfig::with_world_extent(0.1, (-6.0, -6.0), (12.0, 12.0));
        let mut pyr = OccupancyPyramid::new(finest, 4).unwrap();
        let scan = square_room_scan(5.0, 1440);
        pyr.update_with_scan(&PoseSE2::origin(), &scan);

        for k in 0..pyr.level_count() - 1 {
            let fine = pyr.level(k);
            let coarse = pyr.level(k + 1);
            for (ix, iy) in fine.occupied_cells() {
                let (x, y) = fine.center_of(ix, iy);
                let (cx, cy) = coarse.cell_of(x, y).unwrap();
                let near = (-1i64..=1).any(|dy| {
                    (-1i64..=1).any(|dx| {
                        let nx = cx as i64 + dx;
                        let ny = cy as i64 + dy;
                        nx >= 0
                            && ny >= 0
                            && (nx as usize) < coarse.width()
                            && (ny as usize) < coarse.height()
                            && coarse.is_occupied(nx as usize, ny as usize)
                    })
                });
                assert!(
                    near,
                    "fine occupied cell ({ix},{iy}) at level {k} has no coarse counterpart"
                );
            }
        }
    }

    #[test]
    fn pgm_export_format() {
        let dir = tempfile::tempdir().unwrap();
        let mut grid = small_grid(0.1, 3);
        grid.set_log_odds(0, 0, 4.0);
        let pgm = dir.path().join("m.pgm");
        let meta = dir.path().join("m.meta.txt");
        grid.export_pgm(&pgm, &meta).unwrap();
        let text = std::fs::read_to_string(&pgm).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("3 3"));
        assert_eq!(lines.next(), Some("255"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3);
        // Occupied cell (0,0) is in the bottom image row, dark.
        let bottom: Vec<u32> = rows[2].split(' ').map(|v| v.parse().unwrap()).collect();
        assert!(bottom[0] < 10);
        assert_eq!(bottom[1], 128);
        let meta_text = std::fs::read_to_string(&meta).unwrap();
        assert!(meta_text.contains("resolution_m = 0.1"));
        assert!(meta_text.contains("occupied_threshold = 0.5"));
    }
}
