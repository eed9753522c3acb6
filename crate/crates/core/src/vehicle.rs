//! Single-track lateral dynamics, reference paths and the steering controller.
//!
//! The plant is the linear single-track (bicycle) model in the usual
//! error-state form: side slip, yaw rate, heading error relative to the path
//! tangent, and lateral error at a preview distance. Reference paths are
//! piecewise cubics fitted to waypoints with hard position and first
//! derivative continuity at the segment joints. Steering comes from a PID on
//! the preview error followed by a first-order 25% command blend.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::pose::wrap_angle;

/// Below this speed the lateral dynamics are held frozen; the model is
/// singular at standstill.
pub const V_MIN_DYNAMICS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("vehicle speed must be positive, got {0}")]
    NonPositiveSpeed(f64),
    #[error("path fitting needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("waypoint {0} is not finite")]
    NonFiniteWaypoint(usize),
    #[error("segment {0} is degenerate (all points identical)")]
    DegenerateSegment(usize),
    #[error("pose is farther than {limit} m from the path")]
    OffPath { limit: f64 },
    #[error("path fit failed: {0}")]
    FitFailed(&'static str),
}

/// Physical parameters of the single-track model.
#[derive(Debug, Clone, Copy)]
pub struct VehicleParams {
    /// Mass, kg.
    pub mass: f64,
    /// Yaw moment of inertia, kg m^2.
    pub inertia: f64,
    /// Center of gravity to front axle, m.
    pub l_f: f64,
    /// Center of gravity to rear axle, m.
    pub l_r: f64,
    /// Front cornering stiffness, N/rad.
    pub c_f: f64,
    /// Rear cornering stiffness, N/rad.
    pub c_r: f64,
    /// Preview distance, m.
    pub l_s: f64,
    /// Scheduling speed, m/s.
    pub speed: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 2000.0,
            inertia: 3728.0,
            l_f: 1.3008,
            l_r: 1.54527,
            c_f: 1.9e5,
            c_r: 5.0e5,
            l_s: 2.0,
            speed: 12.0 / 3.6,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    pub fn with_speed(mut self, speed: f64) -> Self {
        self.speed = speed;
        self
    }
}

/// Coefficients of the state-space model at the params' scheduling speed.
#[derive(Debug, Clone, Copy)]
pub struct LateralCoefficients {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub b11: f64,
    pub b21: f64,
}

pub fn lateral_coefficients(params: &VehicleParams) -> Result<LateralCoefficients, VehicleError> {
    let v = params.speed;
    if !(v > 0.0) {
        return Err(VehicleError::NonPositiveSpeed(v));
    }
    let (m, j) = (params.mass, params.inertia);
    let (cf, cr) = (params.c_f, params.c_r);
    let (lf, lr) = (params.l_f, params.l_r);
    Ok(LateralCoefficients {
        a11: -(cr + cf) / (m * v),
        a12: -1.0 + (cr * lr - cf * lf) / (m * v * v),
        a21: -(cr * lr - cf * lf) / j,
        a22: -(cr * lr * lr - cf * lf * lf) / (j * v * v),
        b11: cf / (m * v),
        b21: cf * lf / j,
    })
}

/// Lateral error-state vector: side slip, yaw rate, heading error relative
/// to the path tangent, lateral error at the preview distance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LateralState {
    pub beta: f64,
    pub yaw_rate: f64,
    pub heading_error: f64,
    pub lateral_error: f64,
}

impl LateralState {
    fn scaled(&self, f: f64) -> Self {
        Self {
            beta: self.beta * f,
            yaw_rate: self.yaw_rate * f,
            heading_error: self.heading_error * f,
            lateral_error: self.lateral_error * f,
        }
    }

    fn added(&self, o: &Self) -> Self {
        Self {
            beta: self.beta + o.beta,
            yaw_rate: self.yaw_rate + o.yaw_rate,
            heading_error: self.heading_error + o.heading_error,
            lateral_error: self.lateral_error + o.lateral_error,
        }
    }
}

/// State derivative `A x + B u` of the single-track error model with inputs
/// `u = (delta_f, rho_ref)`.
pub fn lateral_dynamics(
    state: &LateralState,
    delta_f: f64,
    rho_ref: f64,
    params: &VehicleParams,
) -> Result<LateralState, VehicleError> {
    let c = lateral_coefficients(params)?;
    let v = params.speed;
    let ls = params.l_s;
    Ok(LateralState {
        beta: c.a11 * state.beta + c.a12 * state.yaw_rate + c.b11 * delta_f,
        yaw_rate: c.a21 * state.beta + c.a22 * state.yaw_rate + c.b21 * delta_f,
        heading_error: state.yaw_rate - v * rho_ref,
        lateral_error: v * state.beta
            + ls * state.yaw_rate
            + v * state.heading_error
            + ls * v * rho_ref,
    })
}

/// One RK4 step of the four-state error model.
pub fn step_lateral(
    state: &LateralState,
    delta_f: f64,
    rho_ref: f64,
    params: &VehicleParams,
    dt: f64,
) -> Result<LateralState, VehicleError> {
    let f = |s: &LateralState| lateral_dynamics(s, delta_f, rho_ref, params);
    let k1 = f(state)?;
    let k2 = f(&state.added(&k1.scaled(dt / 2.0)))?;
    let k3 = f(&state.added(&k2.scaled(dt / 2.0)))?;
    let k4 = f(&state.added(&k3.scaled(dt)))?;
    Ok(state.added(
        &k1.added(&k2.scaled(2.0))
            .added(&k3.scaled(2.0))
            .added(&k4)
            .scaled(dt / 6.0),
    ))
}

/// Vehicle state carried by the closed-loop simulation: the dynamic lateral
/// states plus the global pose and actual speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub beta: f64,
    pub yaw_rate: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub speed: f64,
}

impl VehicleState {
    pub fn at_pose(x: f64, y: f64, psi: f64, speed: f64) -> Self {
        Self {
            beta: 0.0,
            yaw_rate: 0.0,
            x,
            y,
            psi,
            speed,
        }
    }
}

/// RK4 step of the full simulation state: side-slip/yaw dynamics, kinematic
/// global pose (`x' = V cos psi`, `y' = V sin psi`, `psi' = r`) and a
/// first-order speed lag toward `v_cmd`. Below [`V_MIN_DYNAMICS`] the lateral
/// dynamics are frozen.
pub fn step_vehicle(
    state: &VehicleState,
    delta_f: f64,
    v_cmd: f64,
    speed_lag: f64,
    params: &VehicleParams,
    dt: f64,
) -> VehicleState {
    type S = [f64; 6];
    let deriv = |s: &S| -> S {
        let [beta, r, _, _, psi, v] = *s;
        let (dbeta, dr) = if v >= V_MIN_DYNAMICS {
            let c = lateral_coefficients(&params.with_speed(v)).expect("v >= V_MIN_DYNAMICS");
            (
                c.a11 * beta + c.a12 * r + c.b11 * delta_f,
                c.a21 * beta + c.a22 * r + c.b21 * delta_f,
            )
        } else {
            (0.0, 0.0)
        };
        [
            dbeta,
            dr,
            v * psi.cos(),
            v * psi.sin(),
            r,
            (v_cmd - v) / speed_lag,
        ]
    };
    let y0: S = [state.beta, state.yaw_rate, state.x, state.y, state.psi, state.speed];
    let k1 = deriv(&y0);
    let k2 = deriv(&std::array::from_fn(|i| y0[i] + k1[i] * dt / 2.0));
    let k3 = deriv(&std::array::from_fn(|i| y0[i] + k2[i] * dt / 2.0));
    let k4 = deriv(&std::array::from_fn(|i| y0[i] + k3[i] * dt));
    let next: S =
        std::array::from_fn(|i| y0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    VehicleState {
        beta: next[0],
        yaw_rate: next[1],
        x: next[2],
        y: next[3],
        psi: wrap_angle(next[4]),
        speed: next[5],
    }
}

/// One cubic segment in the fit parameter `lambda in [0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct CubicSegment {
    /// x(l) = ax*l^3 + bx*l^2 + cx*l + dx, likewise for y.
    pub ax: f64,
    pub bx: f64,
    pub cx: f64,
    pub dx: f64,
    pub ay: f64,
    pub by: f64,
    pub cy: f64,
    pub dy: f64,
}

impl CubicSegment {
    pub fn eval(&self, l: f64) -> (f64, f64) {
        (
            ((self.ax * l + self.bx) * l + self.cx) * l + self.dx,
            ((self.ay * l + self.by) * l + self.cy) * l + self.dy,
        )
    }

    pub fn deriv(&self, l: f64) -> (f64, f64) {
        (
            (3.0 * self.ax * l + 2.0 * self.bx) * l + self.cx,
            (3.0 * self.ay * l + 2.0 * self.by) * l + self.cy,
        )
    }

    fn second_deriv(&self, l: f64) -> (f64, f64) {
        (6.0 * self.ax * l + 2.0 * self.bx, 6.0 * self.ay * l + 2.0 * self.by)
    }
}

/// Piecewise cubic reference path with C0/C1 joints.
#[derive(Debug, Clone)]
pub struct PathSpline {
    segments: Vec<CubicSegment>,
    /// Root-mean-square fit residual over all waypoints, meters.
    pub fit_rms: f64,
}

/// Result of the preview error computation.
#[derive(Debug, Clone, Copy)]
pub struct PathError {
    /// Signed lateral offset to the nearest path point, positive left.
    pub h: f64,
    /// Heading error relative to the path tangent, wrapped.
    pub heading_error: f64,
    /// Preview error `y = h + l_s * sin(heading_error)`.
    pub y: f64,
    /// Nearest segment index and parameter, for progress tracking.
    pub segment: usize,
    pub lambda: f64,
}

const NEIGHBORHOOD_LIMIT: f64 = 10.0;
const COARSE_SAMPLES: usize = 20;

impl PathSpline {
    /// Fit waypoints with segments of `seg_len` consecutive points.
    ///
    /// Every segment is a least-squares cubic in `lambda in [0, 1]`;
    /// position and first-derivative continuity at the joints are enforced
    /// exactly by construction (the fit parametrizes joint values and joint
    /// derivatives directly, Hermite style). Points sit at cell-centered
    /// parameters `(j + 0.5) / count`, so a segment joint falls midway
    /// between the adjacent chunks and the fit reproduces polynomials
    /// exactly when the chunks are equal.
    pub fn fit(waypoints: &[(f64, f64)], seg_len: usize) -> Result<Self, VehicleError> {
        let seg_len = seg_len.max(3);
        let n = waypoints.len();
        if n < 2 * seg_len {
            return Err(VehicleError::TooFewPoints {
                needed: 2 * seg_len,
                got: n,
            });
        }
        for (i, &(x, y)) in waypoints.iter().enumerate() {
            if !(x.is_finite() && y.is_finite()) {
                return Err(VehicleError::NonFiniteWaypoint(i));
            }
        }
        // Near-equal contiguous chunks (sizes differ by at most one).
        let n_seg = ((n as f64 / seg_len as f64).round() as usize).max(2);
        let base = n / n_seg;
        let rem = n % n_seg;
        let mut bounds = Vec::with_capacity(n_seg);
        let mut start = 0;
        for i in 0..n_seg {
            let size = base + usize::from(i < rem);
            bounds.push((start, start + size));
            start += size;
        }
        for (i, &(start, end)) in bounds.iter().enumerate() {
            let first = waypoints[start];
            if waypoints[start..end]
                .iter()
                .all(|p| (p.0 - first.0).abs() < 1e-12 && (p.1 - first.1).abs() < 1e-12)
            {
                return Err(VehicleError::DegenerateSegment(i));
            }
        }

        // Unknowns per axis: joint values P_0..P_S then joint derivatives
        // m_0..m_S, S = n_seg. Each waypoint row blends its segment's four
        // joint unknowns with the cubic Hermite basis, so the joint
        // constraints hold for any solution.
        let unknowns = 2 * (n_seg + 1);
        let mut design = DMatrix::zeros(n, unknowns);
        let mut rhs_x = DMatrix::zeros(n, 1);
        let mut rhs_y = DMatrix::zeros(n, 1);
        let mut row = 0;
        for (seg, &(start, end)) in bounds.iter().enumerate() {
            for j in 0..(end - start) {
                let l = (j as f64 + 0.5) / (end - start) as f64;
                let l2 = l * l;
                let l3 = l2 * l;
                design[(row, seg)] = 2.0 * l3 - 3.0 * l2 + 1.0;
                design[(row, seg + 1)] = -2.0 * l3 + 3.0 * l2;
                design[(row, n_seg + 1 + seg)] = l3 - 2.0 * l2 + l;
                design[(row, n_seg + 1 + seg + 1)] = l3 - l2;
                let (wx, wy) = waypoints[start + j];
                rhs_x[(row, 0)] = wx;
                rhs_y[(row, 0)] = wy;
                row += 1;
            }
        }

        let svd = design.svd(true, true);
        let sol_x = svd
            .solve(&rhs_x, 1e-12)
            .map_err(|_| VehicleError::FitFailed("rank-deficient design matrix"))?;
        let sol_y = svd
            .solve(&rhs_y, 1e-12)
            .map_err(|_| VehicleError::FitFailed("rank-deficient design matrix"))?;

        let mut segments = Vec::with_capacity(n_seg);
        for seg in 0..n_seg {
            let (p0x, p1x) = (sol_x[(seg, 0)], sol_x[(seg + 1, 0)]);
            let (m0x, m1x) = (sol_x[(n_seg + 1 + seg, 0)], sol_x[(n_seg + 2 + seg, 0)]);
            let (p0y, p1y) = (sol_y[(seg, 0)], sol_y[(seg + 1, 0)]);
            let (m0y, m1y) = (sol_y[(n_seg + 1 + seg, 0)], sol_y[(n_seg + 2 + seg, 0)]);
            segments.push(CubicSegment {
                ax: 2.0 * p0x + m0x - 2.0 * p1x + m1x,
                bx: -3.0 * p0x - 2.0 * m0x + 3.0 * p1x - m1x,
                cx: m0x,
                dx: p0x,
                ay: 2.0 * p0y + m0y - 2.0 * p1y + m1y,
                by: -3.0 * p0y - 2.0 * m0y + 3.0 * p1y - m1y,
                cy: m0y,
                dy: p0y,
            });
        }

        let mut ss = 0.0;
        for (seg, &(start, end)) in bounds.iter().enumerate() {
            for j in 0..(end - start) {
                let l = (j as f64 + 0.5) / (end - start) as f64;
                let (px, py) = segments[seg].eval(l);
                let (wx, wy) = waypoints[start + j];
                ss += (px - wx).powi(2) + (py - wy).powi(2);
            }
        }
        let fit_rms = (ss / n as f64).sqrt();
        Ok(Self { segments, fit_rms })
    }

    pub fn segments(&self) -> &[CubicSegment] {
        &self.segments
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn eval(&self, segment: usize, lambda: f64) -> (f64, f64) {
        self.segments[segment].eval(lambda)
    }

    /// Tangent heading at a path point.
    pub fn heading(&self, segment: usize, lambda: f64) -> f64 {
        let (dx, dy) = self.segments[segment].deriv(lambda);
        dy.atan2(dx)
    }

    /// Nearest path point to `(x, y)`: coarse sampling per segment followed
    /// by Newton refinement of the squared distance. Returns
    /// `(segment, lambda, distance)`.
    pub fn nearest(&self, x: f64, y: f64) -> (usize, f64, f64) {
        let mut best = (0usize, 0.0f64, f64::INFINITY);
        for (si, seg) in self.segments.iter().enumerate() {
            let mut seg_best = (0.0f64, f64::INFINITY);
            for k in 0..=COARSE_SAMPLES {
                let l = k as f64 / COARSE_SAMPLES as f64;
                let (px, py) = seg.eval(l);
                let d2 = (px - x).powi(2) + (py - y).powi(2);
                if d2 < seg_best.1 {
                    seg_best = (l, d2);
                }
            }
            // Newton on g(l) = (P(l) - q) . P'(l).
            let mut l = seg_best.0;
            for _ in 0..5 {
                let (px, py) = seg.eval(l);
                let (dx, dy) = seg.deriv(l);
                let (ddx, ddy) = seg.second_deriv(l);
                let g = (px - x) * dx + (py - y) * dy;
                let dg = dx * dx + dy * dy + (px - x) * ddx + (py - y) * ddy;
                if dg.abs() < 1e-12 {
                    break;
                }
                l = (l - g / dg).clamp(0.0, 1.0);
            }
            let (px, py) = seg.eval(l);
            let refined = (px - x).powi(2) + (py - y).powi(2);
            let (l, d2) = if refined < seg_best.1 {
                (l, refined)
            } else {
                seg_best
            };
            if d2 < best.2 {
                best = (si, l, d2);
            }
        }
        (best.0, best.1, best.2.sqrt())
    }

    /// Densely sampled arc length of the whole spline.
    pub fn arc_length(&self) -> f64 {
        let mut len = 0.0;
        for seg in &self.segments {
            let mut prev = seg.eval(0.0);
            for k in 1..=50 {
                let p = seg.eval(k as f64 / 50.0);
                len += (p.0 - prev.0).hypot(p.1 - prev.1);
                prev = p;
            }
        }
        len
    }
}

/// Lateral offset, heading error and preview error of a pose relative to the
/// path, evaluated at the nearest path point.
pub fn path_error(
    spline: &PathSpline,
    pose: (f64, f64, f64),
    l_s: f64,
) -> Result<PathError, VehicleError> {
    let (x, y, psi) = pose;
    let (segment, lambda, dist) = spline.nearest(x, y);
    if dist >= NEIGHBORHOOD_LIMIT {
        return Err(VehicleError::OffPath {
            limit: NEIGHBORHOOD_LIMIT,
        });
    }
    let (px, py) = spline.eval(segment, lambda);
    let (tx, ty) = spline.segments[segment].deriv(lambda);
    let norm = tx.hypot(ty);
    let (tx, ty) = (tx / norm, ty / norm);
    // Positive to the left of the tangent.
    let h = tx * (y - py) - ty * (x - px);
    let heading_error = wrap_angle(psi - ty.atan2(tx));
    Ok(PathError {
        h,
        heading_error,
        y: h + l_s * heading_error.sin(),
        segment,
        lambda,
    })
}

/// PID gains and limits for the steering loop.
#[derive(Debug, Clone, Copy)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Steering saturation, rad.
    pub delta_max: f64,
    /// Clamp on the magnitude of the integral contribution, rad.
    pub windup_limit: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            kp: 2.5,
            ki: 0.4,
            kd: 0.05,
            delta_max: 0.5,
            windup_limit: 0.45,
        }
    }
}

/// PID on the negated preview error with anti-windup and output saturation.
#[derive(Debug, Clone)]
pub struct PidController {
    pub config: PidConfig,
    integral: f64,
    prev_error: f64,
}

impl PidController {
    pub fn new(config: PidConfig) -> Self {
        Self {
            config,
            integral: 0.0,
            prev_error: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = 0.0;
    }

    /// Raw steering command for the current preview error.
    pub fn step(&mut self, y: f64, dt: f64) -> f64 {
        assert!(dt > 0.0, "dt must be positive");
        let error = -y;
        self.integral = (self.integral + self.config.ki * error * dt)
            .clamp(-self.config.windup_limit, self.config.windup_limit);
        let derivative = (error - self.prev_error) / dt;
        self.prev_error = error;
        let raw = self.config.kp * error + self.integral + self.config.kd * derivative;
        raw.clamp(-self.config.delta_max, self.config.delta_max)
    }
}

/// Fraction of a new command passed through per step.
pub const DEFAULT_COMMAND_BLEND: f64 = 0.25;

/// First-order blend: the executed command moves 25% of the way from the
/// previous command toward the new one.
pub fn command_filter(prev_cmd: f64, new_cmd: f64) -> f64 {
    command_filter_with(prev_cmd, new_cmd, DEFAULT_COMMAND_BLEND)
}

pub fn command_filter_with(prev_cmd: f64, new_cmd: f64, blend: f64) -> f64 {
    prev_cmd + blend * (new_cmd - prev_cmd)
}

/// Full steering chain: PID followed by the command filter, holding the
/// filter state between steps.
#[derive(Debug, Clone)]
pub struct SteeringController {
    pub pid: PidController,
    pub blend: f64,
    last_command: f64,
}

impl SteeringController {
    pub fn new(config: PidConfig, blend: f64) -> Self {
        Self {
            pid: PidController::new(config),
            blend,
            last_command: 0.0,
        }
    }

    pub fn last_command(&self) -> f64 {
        self.last_command
    }

    pub fn step(&mut self, y: f64, dt: f64) -> f64 {
        let raw = self.pid.step(y, dt);
        self.last_command = command_filter_with(self.last_command, raw, self.blend);
        self.last_command
    }
}
