//! Point cloud ingestion: ground removal and projection to a planar scan.
//!
//! A sweep arrives as a set of 3D points in the sensor frame (x–y parallel to
//! the ground, z up). Ground returns are stripped with an occupancy height
//! map: the x–y plane is divided into square cells and a cell keeps its
//! points only when its vertical spread `z_max - z_min` reaches a threshold.
//! The survivors are collapsed to a 2D scan of one range per angular bin,
//! keeping the smallest range seen in each direction.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::fmt::g9;

/// Default height-map cell size in meters.
pub const DEFAULT_CELL_SIZE: f64 = 0.2;
/// Default vertical spread threshold in meters separating ground from
/// obstacles.
pub const DEFAULT_H_THRES: f64 = 0.3;
/// Default angular bin width: 0.25 degrees, 1440 bins per revolution.
pub const DEFAULT_BIN_WIDTH: f64 = 0.25 * PI / 180.0;
/// Default maximum detection range in meters.
pub const DEFAULT_MAX_RANGE: f64 = 80.0;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("point {index} has a non-finite coordinate ({x}, {y}, {z})")]
    NonFinitePoint { index: usize, x: f64, y: f64, z: f64 },
    #[error("{param} must be positive, got {value}")]
    NonPositiveParam { param: &'static str, value: f64 },
    #[error("bin width {0} does not divide 2*pi into an integer bin count")]
    UnevenBinWidth(f64),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A single LIDAR return in the sensor frame, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Horizontal distance from the sensor origin.
    pub fn planar_range(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// One timestamped LIDAR sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud3D {
    pub timestamp: f64,
    pub points: Vec<Point3D>,
}

impl PointCloud3D {
    pub fn new(timestamp: f64, points: Vec<Point3D>) -> Self {
        Self { timestamp, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-cell statistics of the occupancy height map.
#[derive(Debug, Clone)]
pub struct HeightCell {
    pub z_min: f64,
    pub z_max: f64,
    /// Indices into the source cloud.
    pub point_indices: Vec<usize>,
}

impl HeightCell {
    /// Vertical spread of the returns that fell into this cell.
    pub fn spread(&self) -> f64 {
        self.z_max - self.z_min
    }
}

/// Occupancy height map: x–y cells with the min/max z of their points.
///
/// Extent is whatever the frame covers; cells are half-open squares, a point
/// on an edge belongs to the cell of its floor-divided index.
#[derive(Debug)]
pub struct HeightGrid {
    pub cell_size: f64,
    cells: HashMap<(i64, i64), HeightCell>,
}

impl HeightGrid {
    pub fn build(cloud: &PointCloud3D, cell_size: f64) -> Result<Self, ScanError> {
        if !(cell_size > 0.0) {
            return Err(ScanError::NonPositiveParam {
                param: "cell_size",
                value: cell_size,
            });
        }
        let mut cells: HashMap<(i64, i64), HeightCell> = HashMap::new();
        for (index, p) in cloud.points.iter().enumerate() {
            if !p.is_finite() {
                return Err(ScanError::NonFinitePoint {
                    index,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                });
            }
            let key = Self::cell_of(p, cell_size);
            let cell = cells.entry(key).or_insert_with(|| HeightCell {
                z_min: p.z,
                z_max: p.z,
                point_indices: Vec::new(),
            });
            cell.z_min = cell.z_min.min(p.z);
            cell.z_max = cell.z_max.max(p.z);
            cell.point_indices.push(index);
        }
        Ok(Self { cell_size, cells })
    }

    pub fn cell_of(p: &Point3D, cell_size: f64) -> (i64, i64) {
        (
            (p.x / cell_size).floor() as i64,
            (p.y / cell_size).floor() as i64,
        )
    }

    pub fn cell(&self, key: (i64, i64)) -> Option<&HeightCell> {
        self.cells.get(&key)
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }
}

/// Angularly binned 2D scan: one range per bearing bin, or empty.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarScan {
    pub timestamp: f64,
    bin_width: f64,
    ranges: Vec<Option<f64>>,
}

impl PlanarScan {
    /// An all-empty scan with `round(2*pi / bin_width)` bins.
    pub fn empty(timestamp: f64, bin_width: f64) -> Result<Self, ScanError> {
        let n = bin_count(bin_width)?;
        Ok(Self {
            timestamp,
            bin_width: 2.0 * PI / n as f64,
            ranges: vec![None; n],
        })
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn bin_count(&self) -> usize {
        self.ranges.len()
    }

    /// Bin index of a bearing; `(-pi, pi]` maps bijectively onto `0..n`.
    pub fn bin_of(&self, bearing: f64) -> usize {
        let n = self.ranges.len();
        let idx = ((bearing + PI) / self.bin_width).floor() as i64;
        (idx.rem_euclid(n as i64)) as usize
    }

    /// Center bearing of a bin, in `[-pi, pi)`.
    pub fn bearing_of(&self, bin: usize) -> f64 {
        -PI + (bin as f64 + 0.5) * self.bin_width
    }

    pub fn range_at(&self, bin: usize) -> Option<f64> {
        self.ranges[bin]
    }

    fn record(&mut self, bin: usize, range: f64) {
        let slot = &mut self.ranges[bin];
        match slot {
            Some(r) if *r <= range => {}
            _ => *slot = Some(range),
        }
    }

    /// Number of non-empty bins.
    pub fn beam_count(&self) -> usize {
        self.ranges.iter().filter(|r| r.is_some()).count()
    }

    /// Iterate non-empty beams as `(bearing, range)` in bin order.
    pub fn beams(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ranges
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|range| (self.bearing_of(i), range)))
    }

    /// Beam end points `(x, y)` in the sensor frame.
    pub fn endpoints(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.beams().map(|(bearing, range)| {
            let (sin, cos) = bearing.sin_cos();
            (range * cos, range * sin)
        })
    }
}

fn bin_count(bin_width: f64) -> Result<usize, ScanError> {
    if !(bin_width > 0.0) {
        return Err(ScanError::NonPositiveParam {
            param: "bin_width",
            value: bin_width,
        });
    }
    let n = 2.0 * PI / bin_width;
    let rounded = n.round();
    if (n - rounded).abs() > 1e-6 || rounded < 1.0 {
        return Err(ScanError::UnevenBinWidth(bin_width));
    }
    Ok(rounded as usize)
}

/// Strip ground-plane returns from a sweep.
///
/// Keeps exactly the points whose height-map cell has vertical spread
/// `>= h_thres`; points are filtered, never modified. An empty cloud yields
/// an empty cloud.
pub fn remove_ground(
    cloud: &PointCloud3D,
    cell_size: f64,
    h_thres: f64,
) -> Result<PointCloud3D, ScanError> {
    if !(h_thres > 0.0) {
        return Err(ScanError::NonPositiveParam {
            param: "h_thres",
            value: h_thres,
        });
    }
    let grid = HeightGrid::build(cloud, cell_size)?;
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            let cell = grid
                .cell(HeightGrid::cell_of(p, cell_size))
                .expect("every point maps to a cell");
            cell.spread() >= h_thres
        })
        .copied()
        .collect();
    Ok(PointCloud3D::new(cloud.timestamp, points))
}

/// Project a (ground-filtered) cloud onto the 2D scan plane.
///
/// Each point contributes bearing `atan2(y, x)` and range `hypot(x, y)`; the
/// smallest range per bin wins. Points beyond `max_range` are dropped, points
/// at the exact origin are skipped (bearing undefined).
pub fn project_to_scan(
    cloud: &PointCloud3D,
    bin_width: f64,
    max_range: f64,
) -> Result<PlanarScan, ScanError> {
    if !(max_range > 0.0) {
        return Err(ScanError::NonPositiveParam {
            param: "max_range",
            value: max_range,
        });
    }
    let mut scan = PlanarScan::empty(cloud.timestamp, bin_width)?;
    for (index, p) in cloud.points.iter().enumerate() {
        if !p.is_finite() {
            return Err(ScanError::NonFinitePoint {
                index,
                x: p.x,
                y: p.y,
                z: p.z,
            });
        }
        let range = p.planar_range();
        if range == 0.0 {
            log::debug!("skipping point {index} at the sensor origin");
            continue;
        }
        if range > max_range {
            continue;
        }
        let bearing = p.y.atan2(p.x);
        let bin = scan.bin_of(bearing);
        scan.record(bin, range);
    }
    Ok(scan)
}

/// Write clouds to the plain-text frame log format.
///
/// One record per frame: a header line `FRAME <timestamp_s> <n_points>`
/// followed by `n_points` lines of `x y z` in meters.
pub fn write_frame_log<W: Write>(out: &mut W, frames: &[PointCloud3D]) -> std::io::Result<()> {
    for frame in frames {
        writeln!(out, "FRAME {} {}", g9(frame.timestamp), frame.points.len())?;
        for p in &frame.points {
            writeln!(out, "{} {} {}", g9(p.x), g9(p.y), g9(p.z))?;
        }
    }
    Ok(())
}

pub fn write_frame_log_file(path: &Path, frames: &[PointCloud3D]) -> Result<(), ScanError> {
    let io_err = |source| ScanError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    write_frame_log(&mut out, frames).map_err(io_err)?;
    out.flush().map_err(io_err)
}

/// Parse a frame log produced by [`write_frame_log`].
pub fn read_frame_log<R: BufRead>(input: R, path: &str) -> Result<Vec<PointCloud3D>, ScanError> {
    let parse_err = |line: usize, msg: String| ScanError::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut frames = Vec::new();
    let mut pending: Option<(f64, usize)> = None;
    let mut points = Vec::new();

    for (lineno, line) in input.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|source| ScanError::Io {
            path: path.to_string(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields[0] == "FRAME" {
            if let Some((ts, expected)) = pending.take() {
                if points.len() != expected {
                    return Err(parse_err(
                        lineno,
                        format!("frame at t={ts} declared {expected} points, got {}", points.len()),
                    ));
                }
                frames.push(PointCloud3D::new(ts, std::mem::take(&mut points)));
            }
            if fields.len() != 3 {
                return Err(parse_err(lineno, "expected FRAME <timestamp> <n>".into()));
            }
            let ts: f64 = fields[1]
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad timestamp: {e}")))?;
            let n: usize = fields[2]
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad point count: {e}")))?;
            pending = Some((ts, n));
        } else {
            if pending.is_none() {
                return Err(parse_err(lineno, "point line before any FRAME header".into()));
            }
            if fields.len() != 3 {
                return Err(parse_err(lineno, "expected x y z".into()));
            }
            let mut coords = [0.0; 3];
            for (i, f) in fields.iter().enumerate() {
                coords[i] = f
                    .parse()
                    .map_err(|e| parse_err(lineno, format!("bad coordinate: {e}")))?;
            }
            points.push(Point3D::new(coords[0], coords[1], coords[2]));
        }
    }
    if let Some((ts, expected)) = pending {
        if points.len() != expected {
            return Err(ScanError::Parse {
                path: path.to_string(),
                line: 0,
                msg: format!(
                    "frame at t={ts} declared {expected} points, got {} at end of file",
                    points.len()
                ),
            });
        }
        frames.push(PointCloud3D::new(ts, points));
    }
    Ok(frames)
}

pub fn read_frame_log_file(path: &Path) -> Result<Vec<PointCloud3D>, ScanError> {
    let file = std::fs::File::open(path).map_err(|source| ScanError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_frame_log(std::io::BufReader::new(file), &path.display().to_string())
}
