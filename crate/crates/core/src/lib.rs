//! 2D LIDAR SLAM and closed-loop path-following simulation.
//!
//! The pipeline turns 3D point clouds into planar scans (ground removal +
//! projection), registers them against a multi-resolution probabilistic
//! occupancy grid with a Levenberg–Marquardt scan matcher, and feeds the
//! resulting pose estimates to a single-track vehicle controller inside a
//! deterministic raycast world.
//!
//! Modules follow the data flow:
//!
//! * [`scan`] — point clouds, ground removal, 3D→2D projection, frame logs
//! * [`grid`] — occupancy grids, bilinear interpolation, map pyramid, PGM export
//! * [`matcher`] — LM / Gauss–Newton scan-to-map alignment
//! * [`slam`] — the per-frame online pipeline and trajectory export
//! * [`vehicle`] — single-track lateral dynamics, path splines, PID steering
//! * [`sim`] — synthetic worlds, raycast LIDAR, closed-loop harness
//! * [`cli`] — config files and the `slam`/`sim`/`gen`/`eval` commands
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod fmt;
pub mod grid;
pub mod matcher;
pub mod pose;
pub mod scan;
pub mod sim;
pub mod slam;
pub mod vehicle;

pub use grid::{GridConfig, InterpResult, OccupancyGrid, OccupancyPyramid};
pub use matcher::{MatchConfig, MatchResult, SolverKind};
pub use pose::PoseSE2;
pub use scan::{PlanarScan, Point3D, PointCloud3D};
