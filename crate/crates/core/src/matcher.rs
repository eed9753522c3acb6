//! Scan-to-map alignment.
//!
//! The matcher finds the rigid transform that minimizes the summed squared
//! occupancy residual `sum_i (1 - M(S_i(xi)))^2` between a planar scan's end
//! points and an occupancy grid. The default solver is Levenberg–Marquardt
//! with capped robust weights and a step-norm stop criterion; a fixed-step
//! undamped Gauss–Newton mode is kept as the comparison baseline.
//!
//! Residual weights cap each point's squared-loss contribution at the square
//! of the occupancy threshold, so occluded or dynamic end points far from any
//! mapped surface cannot dominate the normal equations.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::grid::{OccupancyGrid, OccupancyPyramid};
use crate::pose::PoseSE2;
use crate::scan::PlanarScan;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("scan has no beams")]
    EmptyScan,
    #[error("no scan end point overlaps the map")]
    NoOverlap,
    #[error("initial pose is not finite")]
    NonFinitePose,
}

/// Solver selection for [`match_scan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    /// Damped iteration with robust weights and the step-norm stop criterion.
    LevenbergMarquardt,
    /// Undamped normal equations for exactly `max_iterations` steps, no stop
    /// criterion.
    GaussNewtonFixed,
}

#[derive(Debug, Clone, Copy)]
pub struct MatchConfig {
    pub max_iterations: usize,
    /// Stop threshold on the step norm.
    pub epsilon: f64,
    /// Initial damping.
    pub lambda_init: f64,
    /// Damping growth factor on a rejected step.
    pub lambda_up: f64,
    /// Damping shrink factor on an accepted step.
    pub lambda_down: f64,
    /// Upper bound for the damping parameter.
    pub lambda_cap: f64,
    /// Occupancy threshold; also the robust cap on per-point loss.
    pub occupied_threshold: f64,
    pub solver: SolverKind,
    /// Whether the Gauss–Newton baseline also applies the robust weights.
    pub gn_use_weights: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            epsilon: 0.001,
            lambda_init: 0.01,
            lambda_up: 10.0,
            lambda_down: 10.0,
            lambda_cap: 1e7,
            occupied_threshold: 0.5,
            solver: SolverKind::LevenbergMarquardt,
            gn_use_weights: false,
        }
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Alignment error after this iteration's accept/reject decision.
    pub error: f64,
    pub step_norm: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    pub pose: PoseSE2,
    /// Iterations spent at the (finest) level.
    pub iterations: usize,
    /// Sum over pyramid levels; equals `iterations` for single-grid matching.
    pub total_iterations: usize,
    /// Final summed squared occupancy residual over in-bounds points.
    pub final_alignment_error: f64,
    /// Whether the solver exited through its own termination rule rather
    /// than an abort: the step-norm criterion for LM, the planned step count
    /// for fixed-step Gauss–Newton.
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
}

impl MatchResult {
    /// Trace rows as CSV lines `iter,error,step_norm,lambda`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,error,step_norm,lambda\n");
        for row in &self.trace {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.iteration,
                crate::fmt::g9(row.error),
                crate::fmt::g9(row.step_norm),
                crate::fmt::g9(row.lambda)
            ));
        }
        out
    }
}

/// Transform a sensor-frame scan end point into the world frame.
pub fn transform_endpoint(pose: &PoseSE2, s: (f64, f64)) -> (f64, f64) {
    pose.transform(s.0, s.1)
}

/// Residual, Jacobian row and robust weight of one scan end point.
#[derive(Debug, Clone, Copy)]
pub struct PointResidual {
    /// `1 - M(S_i(xi))`; zero for out-of-bounds points.
    pub residual: f64,
    /// `grad M * dS_i/dxi`; zero row for out-of-bounds points.
    pub jacobian: [f64; 3],
    pub weight: f64,
    pub in_bounds: bool,
}

/// Evaluate residuals, Jacobian rows and weights for every beam.
///
/// Out-of-bounds end points carry zero residual and a zero Jacobian row and
/// are excluded from counts; if every point is out of bounds the scan does
/// not overlap the map and matching must abort.
pub fn residual_and_jacobian(
    grid: &OccupancyGrid,
    pose: &PoseSE2,
    scan: &PlanarScan,
    occupied_threshold: f64,
) -> Result<Vec<PointResidual>, MatchError> {
    if scan.beam_count() == 0 {
        return Err(MatchError::EmptyScan);
    }
    if !pose.is_finite() {
        return Err(MatchError::NonFinitePose);
    }
    let endpoints: Vec<(f64, f64)> = scan.endpoints().collect();
    let rows: Vec<PointResidual> = endpoints
        .iter()
        .map(|&s| point_residual(grid, pose, s, occupied_threshold))
        .collect();
    if rows.iter().all(|r| !r.in_bounds) {
        return Err(MatchError::NoOverlap);
    }
    Ok(rows)
}

fn point_residual(
    grid: &OccupancyGrid,
    pose: &PoseSE2,
    s: (f64, f64),
    occupied_threshold: f64,
) -> PointResidual {
    let (wx, wy) = pose.transform(s.0, s.1);
    match grid.interpolate(wx, wy) {
        Ok(interp) => {
            let r = 1.0 - interp.value;
            let (gx, gy) = interp.gradient;
            let (sin, cos) = pose.theta.sin_cos();
            let dx_dtheta = -s.0 * sin - s.1 * cos;
            let dy_dtheta = s.0 * cos - s.1 * sin;
            PointResidual {
                residual: r,
                jacobian: [gx, gy, gx * dx_dtheta + gy * dy_dtheta],
                weight: robust_weight(r, occupied_threshold),
                in_bounds: true,
            }
        }
        Err(_) => PointResidual {
            residual: 0.0,
            jacobian: [0.0; 3],
            weight: 0.0,
            in_bounds: false,
        },
    }
}

/// Weight realizing the capped loss: unity inside the threshold, shrinking
/// as `pi^2 / r^2` beyond it so that `w * r^2 <= pi^2`.
fn robust_weight(residual: f64, occupied_threshold: f64) -> f64 {
    let pi = occupied_threshold;
    if residual.abs() <= pi {
        1.0
    } else {
        pi * pi / (residual * residual)
    }
}

struct NormalEquations {
    h: Matrix3<f64>,
    b: Vector3<f64>,
    valid: usize,
}

fn accumulate(
    grid: &OccupancyGrid,
    pose: &PoseSE2,
    endpoints: &[(f64, f64)],
    occupied_threshold: f64,
    use_weights: bool,
) -> NormalEquations {
    let mut h = Matrix3::zeros();
    let mut b = Vector3::zeros();
    let mut valid = 0;
    for &s in endpoints {
        let row = point_residual(grid, pose, s, occupied_threshold);
        if !row.in_bounds {
            continue;
        }
        valid += 1;
        let w = if use_weights { row.weight } else { 1.0 };
        let j = Vector3::new(row.jacobian[0], row.jacobian[1], row.jacobian[2]);
        h += w * j * j.transpose();
        b += w * j * row.residual;
    }
    NormalEquations { h, b, valid }
}

fn alignment_error(grid: &OccupancyGrid, pose: &PoseSE2, endpoints: &[(f64, f64)]) -> Option<f64> {
    let mut error = 0.0;
    let mut valid = 0;
    for &s in endpoints {
        let (wx, wy) = pose.transform(s.0, s.1);
        if let Ok(interp) = grid.interpolate(wx, wy) {
            let r = 1.0 - interp.value;
            error += r * r;
            valid += 1;
        }
    }
    (valid > 0).then_some(error)
}

/// Align `scan` to `grid` starting from `init`.
pub fn match_scan(
    grid: &OccupancyGrid,
    scan: &PlanarScan,
    init: &PoseSE2,
    cfg: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    if scan.beam_count() == 0 {
        return Err(MatchError::EmptyScan);
    }
    if !init.is_finite() {
        return Err(MatchError::NonFinitePose);
    }
    let endpoints: Vec<(f64, f64)> = scan.endpoints().collect();
    match cfg.solver {
        SolverKind::LevenbergMarquardt => match_lm(grid, &endpoints, init, cfg),
        SolverKind::GaussNewtonFixed => match_gn_fixed(grid, &endpoints, init, cfg),
    }
}

fn match_lm(
    grid: &OccupancyGrid,
    endpoints: &[(f64, f64)],
    init: &PoseSE2,
    cfg: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    let pi = cfg.occupied_threshold;
    let mut pose = *init;
    let mut error = alignment_error(grid, &pose, endpoints).ok_or(MatchError::NoOverlap)?;
    let mut lambda = cfg.lambda_init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iteration in 1..=cfg.max_iterations {
        iterations = iteration;
        let eqs = accumulate(grid, &pose, endpoints, pi, true);
        if eqs.valid == 0 {
            return Err(MatchError::NoOverlap);
        }
        // Damped solve; grow lambda until the system factors or the cap is hit.
        let step = loop {
            let damped = eqs.h + Matrix3::identity() * lambda;
            match damped.lu().solve(&eqs.b) {
                Some(step) if step.iter().all(|v| v.is_finite()) => break Some(step),
                _ => {
                    if lambda >= cfg.lambda_cap {
                        break None;
                    }
                    lambda = (lambda * cfg.lambda_up).min(cfg.lambda_cap);
                }
            }
        };
        let Some(step) = step else {
            // Singular even at the damping cap: abort with the best pose so far.
            return Ok(MatchResult {
                pose,
                iterations,
                total_iterations: iterations,
                final_alignment_error: error,
                converged: false,
                trace,
            });
        };
        let step_norm = step.norm();
        let candidate = pose.plus(step[0], step[1], step[2]);
        let candidate_error = alignment_error(grid, &candidate, endpoints);
        let accepted = matches!(candidate_error, Some(e) if e <= error);
        if accepted {
            pose = candidate;
            error = candidate_error.unwrap();
            lambda /= cfg.lambda_down;
        } else {
            lambda = (lambda * cfg.lambda_up).min(cfg.lambda_cap);
        }
        trace.push(IterationRecord {
            iteration,
            error,
            step_norm,
            lambda,
        });
        if step_norm < cfg.epsilon {
            converged = true;
            break;
        }
    }

    Ok(MatchResult {
        pose,
        iterations,
        total_iterations: iterations,
        final_alignment_error: error,
        converged,
        trace,
    })
}

fn match_gn_fixed(
    grid: &OccupancyGrid,
    endpoints: &[(f64, f64)],
    init: &PoseSE2,
    cfg: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    let pi = cfg.occupied_threshold;
    let mut pose = *init;
    alignment_error(grid, &pose, endpoints).ok_or(MatchError::NoOverlap)?;
    let mut trace = Vec::new();
    let mut iterations = 0;

    for iteration in 1..=cfg.max_iterations {
        iterations = iteration;
        let eqs = accumulate(grid, &pose, endpoints, pi, cfg.gn_use_weights);
        if eqs.valid == 0 {
            return Err(MatchError::NoOverlap);
        }
        let step = match eqs.h.lu().solve(&eqs.b) {
            Some(step) if step.iter().all(|v| v.is_finite()) => step,
            _ => {
                let error =
                    alignment_error(grid, &pose, endpoints).ok_or(MatchError::NoOverlap)?;
                return Ok(MatchResult {
                    pose,
                    iterations,
                    total_iterations: iterations,
                    final_alignment_error: error,
                    converged: false,
                    trace,
                });
            }
        };
        pose = pose.plus(step[0], step[1], step[2]);
        let error = alignment_error(grid, &pose, endpoints).unwrap_or(f64::INFINITY);
        trace.push(IterationRecord {
            iteration,
            error,
            step_norm: step.norm(),
            lambda: 0.0,
        });
    }

    let error = alignment_error(grid, &pose, endpoints).ok_or(MatchError::NoOverlap)?;
    Ok(MatchResult {
        pose,
        iterations,
        total_iterations: iterations,
        final_alignment_error: error,
        converged: true,
        trace,
    })
}

/// Coarse-to-fine alignment over a map pyramid.
///
/// Each level's estimate seeds the next finer level. A failed intermediate
/// level falls through with its incoming estimate; the reported result is
/// the finest level's, with `total_iterations` summed across levels.
pub fn match_pyramid(
    pyramid: &OccupancyPyramid,
    scan: &PlanarScan,
    init: &PoseSE2,
    cfg: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    let mut pose = *init;
    let mut total = 0;
    let last = pyramid.level_count() - 1;
    for k in (1..=last).rev() {
        if let Ok(result) = match_scan(pyramid.level(k), scan, &pose, cfg) {
            total += result.iterations;
            pose = result.pose;
        }
    }
    let mut result = match_scan(pyramid.finest(), scan, &pose, cfg)?;
    result.total_iterations = total + result.iterations;
    Ok(result)
}
