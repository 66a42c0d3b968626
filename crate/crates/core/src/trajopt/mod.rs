//! Local planner: smooth, dynamically feasible trajectories through a
//! waypoint sequence.
//!
//! Position is a degree-9 polynomial per axis and segment minimizing the
//! integrated squared snap. Yaw is degree 5 minimizing the integrated
//! squared angular acceleration. Both are solved in closed form over the
//! endpoint derivatives at the knots: fixed values (waypoints, start state,
//! terminal conditions) stay put and the remaining free derivatives come
//! from one symmetric linear solve, which also makes them continuous across
//! knots.

mod basis;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_diff, wrap_angle_unchecked, Timestamp, Vec3, Waypoint};

pub use basis::{eval_derivative, falling};
use basis::{snap_basis, yaw_basis, Basis};

/// Shortest allowed segment duration, seconds.
pub const T_MIN: f64 = 0.1;
/// Condition number above which the knot system counts as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Sampling period of the feasibility check, seconds.
pub const FEASIBILITY_STEP: f64 = 0.05;
/// Relative slack on the limits, absorbing rounding when a constraint sits exactly at the limit.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;
pub const REPAIR_FACTOR: f64 = 1.1;
pub const REPAIR_MAX_ITERATIONS: usize = 20;

const POS_ORDERS: usize = 5;
const YAW_ORDERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajoptError {
    #[error("need at least two waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("{durations} durations for {segments} segments")]
    DurationMismatch { segments: usize, durations: usize },
    #[error("segment {segment}: invalid duration {duration}")]
    InvalidDuration { segment: usize, duration: f64 },
    #[error("segment {segment}: {reason}")]
    Numeric { segment: usize, reason: String },
    #[error("time {t} outside trajectory [{start}, {end}]")]
    OutOfRange {
        t: Timestamp,
        start: Timestamp,
        end: Timestamp,
    },
    #[error("infeasible after {iterations} repairs: peak speed {peak_speed:.3} m/s, peak accel {peak_accel:.3} m/s^2")]
    Infeasible {
        iterations: usize,
        peak_speed: f64,
        peak_accel: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    pub v_max: f64,
    pub a_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { v_max: 1.0, a_max: 2.0 }
    }
}

/// Flat outputs of a multirotor at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlatState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub jerk: Vec3,
    pub yaw: f64,
    pub yaw_rate: f64,
}

impl FlatState {
    pub fn at_rest(position: Vec3, yaw: f64) -> Self {
        FlatState {
            position,
            yaw,
            ..FlatState::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolySegment {
    pub duration: f64,
    /// Per axis, coefficients of `t^0..t^9` in local time.
    pub coeffs_xyz: [[f64; 10]; 3],
    /// Coefficients of `t^0..t^5` in local time, unwrapped yaw.
    pub coeffs_yaw: [f64; 6],
}

impl PolySegment {
    pub fn position_derivative(&self, order: usize, t: f64) -> Vec3 {
        Vec3::new(
            eval_derivative(&self.coeffs_xyz[0], order, t),
            eval_derivative(&self.coeffs_xyz[1], order, t),
            eval_derivative(&self.coeffs_xyz[2], order, t),
        )
    }

    pub fn yaw_derivative(&self, order: usize, t: f64) -> f64 {
        eval_derivative(&self.coeffs_yaw, order, t)
    }

    /// Closed-form integrated squared snap over all three axes.
    pub fn snap_cost(&self) -> f64 {
        let b = snap_basis();
        self.coeffs_xyz
            .iter()
            .map(|c| b.coefficient_cost(self.duration, c))
            .sum()
    }

    fn state(&self, t: f64) -> FlatState {
        FlatState {
            position: self.position_derivative(0, t),
            velocity: self.position_derivative(1, t),
            acceleration: self.position_derivative(2, t),
            jerk: self.position_derivative(3, t),
            yaw: wrap_angle_unchecked(self.yaw_derivative(0, t)),
            yaw_rate: self.yaw_derivative(1, t),
        }
    }
}

/// Inputs an optimized trajectory was built from, kept for re-timing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryProblem {
    pub waypoints: Vec<Waypoint>,
    pub start: FlatState,
    pub terminal_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyTrajectory {
    segments: Vec<PolySegment>,
    t0: Timestamp,
    problem: TrajectoryProblem,
}

impl PolyTrajectory {
    pub fn segments(&self) -> &[PolySegment] {
        &self.segments
    }

    pub fn problem(&self) -> &TrajectoryProblem {
        &self.problem
    }

    pub fn t0(&self) -> Timestamp {
        self.t0
    }

    pub fn with_start_time(mut self, t0: Timestamp) -> Self {
        self.t0 = t0;
        self
    }

    pub fn durations(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.duration).collect()
    }

    /// Total duration in seconds.
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn end_time(&self) -> Timestamp {
        self.t0.add_secs(self.duration())
    }

    /// Local times of the knots, starting at 0.
    pub fn knot_times(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for s in &self.segments {
            acc += s.duration;
            out.push(acc);
        }
        out
    }

    pub fn snap_cost(&self) -> f64 {
        self.segments.iter().map(PolySegment::snap_cost).sum()
    }

    /// Segment index and local time for `tau` seconds after start.
    pub fn locate(&self, tau: f64) -> (usize, f64) {
        let mut start = 0.0;
        let last = self.segments.len() - 1;
        for (i, s) in self.segments.iter().enumerate() {
            if tau < start + s.duration || i == last {
                return (i, (tau - start).clamp(0.0, s.duration));
            }
            start += s.duration;
        }
        unreachable!("trajectory has segments")
    }

    /// State `tau` seconds after the start; `tau` is clamped to the span.
    pub fn sample_local(&self, tau: f64) -> FlatState {
        let (i, t) = self.locate(tau);
        self.segments[i].state(t)
    }

    pub fn sample(&self, t: Timestamp) -> Result<FlatState, TrajoptError> {
        let end = self.end_time();
        if t < self.t0 || t > end {
            return Err(TrajoptError::OutOfRange { t, start: self.t0, end });
        }
        Ok(self.sample_local(t.secs_since(self.t0)))
    }

    /// Largest sampled speed and acceleration magnitude on a `step` grid
    /// (the final instant is always included).
    pub fn peak_speed_accel(&self, step: f64) -> (f64, f64) {
        let total = self.duration();
        let n = (total / step).floor() as usize;
        let mut peak = (0.0f64, 0.0f64);
        let mut visit = |tau: f64| {
            let s = self.sample_local(tau);
            peak.0 = peak.0.max(s.velocity.norm());
            peak.1 = peak.1.max(s.acceleration.norm());
        };
        for k in 0..=n {
            visit(k as f64 * step);
        }
        visit(total);
        peak
    }

    pub fn is_feasible(&self, limits: &Limits) -> bool {
        let (v, a) = self.peak_speed_accel(FEASIBILITY_STEP);
        let slack = 1.0 + FEASIBILITY_TOLERANCE;
        v <= limits.v_max * slack && a <= limits.a_max * slack
    }
}

/// Trapezoidal-profile time allocation per chord, clamped to [`T_MIN`].
pub fn allocate_times(positions: &[Vec3], limits: &Limits) -> Vec<f64> {
    let (v, a) = (limits.v_max, limits.a_max);
    positions
        .windows(2)
        .map(|w| {
            let d = (w[1] - w[0]).norm();
            let t = if d >= v * v / a {
                d / v + v / a
            } else {
                2.0 * (d / a).sqrt()
            };
            t.max(T_MIN)
        })
        .collect()
}

/// Fraction of `a_max` assumed by [`speed_profile`]; a smooth polynomial
/// peaks well above the trapezoid it is timed against.
pub const PROFILE_ACCEL_FRACTION: f64 = 0.5;

/// Cruise and ramp scales tried by [`plan`] before falling back to repair.
pub const PROFILE_RETRY_SCALES: [f64; 4] = [0.85, 0.7, 0.55, 0.4];

/// Time to cover `d` entering at speed `u` and leaving at `w`, ramping at `a`
/// up to at most `v_max`. With `u = w = 0` this is the rest-to-rest trapezoid
/// of [`allocate_times`]. When the speed change does not fit in `d` at `a`,
/// a constant rate of change is assumed instead.
pub fn trapezoid_time(d: f64, u: f64, w: f64, v_max: f64, a: f64) -> f64 {
    let peak = v_max.max(u).max(w).min(((u * u + w * w) / 2.0 + a * d).sqrt());
    if peak < u.max(w) {
        return if u + w > 0.0 { 2.0 * d / (u + w) } else { 0.0 };
    }
    if peak <= 0.0 {
        return 0.0;
    }
    let ramps = (2.0 * peak * peak - u * u - w * w) / (2.0 * a);
    (peak - u) / a + (peak - w) / a + (d - ramps).max(0.0) / peak
}

/// Knot speeds and chord durations of a speed profile along a polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    pub knot_speeds: Vec<f64>,
    pub durations: Vec<f64>,
}

impl SpeedProfile {
    /// Exit speed the profile can actually reach.
    pub fn terminal_speed(&self) -> f64 {
        self.knot_speeds.last().copied().unwrap_or(0.0)
    }
}

/// Speed profile over the whole polyline: the entry speed is `start_speed`,
/// the speed at each interior knot is capped by its turn angle, a forward
/// and a backward pass bound the speed change between knots, and each chord
/// gets the trapezoid between its boundary speeds. The exit speed is
/// `terminal_speed` where reachable and lower otherwise.
pub fn speed_profile(positions: &[Vec3], start_speed: f64, terminal_speed: f64, limits: &Limits) -> SpeedProfile {
    profile_at(positions, start_speed, terminal_speed, limits, 1.0)
}

/// Profile with cruise speed and ramp rate scaled by `scale`.
fn profile_at(positions: &[Vec3], start_speed: f64, terminal_speed: f64, limits: &Limits, scale: f64) -> SpeedProfile {
    let n = positions.len();
    if n < 2 {
        return SpeedProfile {
            knot_speeds: vec![start_speed; n],
            durations: Vec::new(),
        };
    }
    let v_max = limits.v_max * scale;
    let a = limits.a_max * PROFILE_ACCEL_FRACTION * scale;
    let chords: Vec<Vec3> = positions.windows(2).map(|w| w[1] - w[0]).collect();
    let lengths: Vec<f64> = chords.iter().map(|c| c.norm()).collect();
    let mut speed = vec![v_max; n];
    speed[0] = start_speed.max(0.0);
    speed[n - 1] = terminal_speed.clamp(0.0, limits.v_max);
    for k in 1..n - 1 {
        let (l0, l1) = (lengths[k - 1], lengths[k]);
        if l0 <= 0.0 || l1 <= 0.0 {
            continue;
        }
        let turn = (chords[k - 1].dot(&chords[k]) / (l0 * l1)).clamp(-1.0, 1.0).acos();
        if turn > 1e-9 {
            // turn spread over the shorter chord at the profile acceleration
            speed[k] = speed[k].min((a * l0.min(l1) / turn).sqrt());
        }
    }
    for k in 1..n {
        let reach = (speed[k - 1] * speed[k - 1] + 2.0 * a * lengths[k - 1]).sqrt();
        speed[k] = speed[k].min(reach);
    }
    // the entry speed is a given; only later knots are lowered
    for k in (1..n - 1).rev() {
        let reach = (speed[k + 1] * speed[k + 1] + 2.0 * a * lengths[k]).sqrt();
        speed[k] = speed[k].min(reach);
    }
    let durations = (0..n - 1)
        .map(|k| trapezoid_time(lengths[k], speed[k], speed[k + 1], v_max, a).max(T_MIN))
        .collect();
    SpeedProfile {
        knot_speeds: speed,
        durations,
    }
}

/// Sum of segment hessians over the knot-derivative vector.
pub(crate) fn assemble_hessian(basis: &Basis, durations: &[f64]) -> DMatrix<f64> {
    let r = basis.r;
    let n = r * (durations.len() + 1);
    let mut h = DMatrix::zeros(n, n);
    for (i, &t) in durations.iter().enumerate() {
        let hs = basis.segment_hessian(t);
        let off = i * r;
        for a in 0..2 * r {
            for b in 0..2 * r {
                h[(off + a, off + b)] += hs[(a, b)];
            }
        }
    }
    h
}

/// Knot derivatives per axis: `Some(v)` fixed, `None` free. Every axis
/// must share the same free pattern.
pub(crate) fn solve_knots(
    basis: &Basis,
    durations: &[f64],
    fixed: &[Vec<Option<f64>>],
) -> Result<Vec<Vec<f64>>, TrajoptError> {
    let h = assemble_hessian(basis, durations);
    let n = h.nrows();
    let free: Vec<usize> = (0..n).filter(|&i| fixed[0][i].is_none()).collect();
    let pinned: Vec<usize> = (0..n).filter(|&i| fixed[0][i].is_some()).collect();
    let mut out: Vec<Vec<f64>> = fixed
        .iter()
        .map(|axis| axis.iter().map(|v| v.unwrap_or(0.0)).collect())
        .collect();
    if free.is_empty() {
        return Ok(out);
    }

    let blame = || {
        durations
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let h_pp = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
    let h_pf = DMatrix::from_fn(free.len(), pinned.len(), |a, b| h[(free[a], pinned[b])]);

    // Conditioning after Jacobi scaling, so that unit choices do not count.
    let diag: Vec<f64> = (0..free.len()).map(|i| h_pp[(i, i)]).collect();
    if diag.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(TrajoptError::Numeric {
            segment: blame(),
            reason: "degenerate knot system".into(),
        });
    }
    let scaled = DMatrix::from_fn(free.len(), free.len(), |a, b| h_pp[(a, b)] / (diag[a] * diag[b]).sqrt());
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(TrajoptError::Numeric {
            segment: blame(),
            reason: format!("knot system ill-conditioned (condition {:.3e})", hi / lo),
        });
    }
    let chol = h_pp.clone().cholesky().ok_or_else(|| TrajoptError::Numeric {
        segment: blame(),
        reason: "knot system not positive definite".into(),
    })?;
    for axis in out.iter_mut() {
        let d_f = DVector::from_iterator(pinned.len(), pinned.iter().map(|&i| axis[i]));
        let rhs = -(&h_pf * d_f);
        let mut d_p = chol.solve(&rhs);
        // one step of iterative refinement
        let resid = &rhs - &h_pp * &d_p;
        d_p += chol.solve(&resid);
        for (k, &i) in free.iter().enumerate() {
            axis[i] = d_p[k];
        }
    }
    Ok(out)
}

/// Minimum-snap trajectory through `waypoints`, starting at `start`'s
/// derivatives. The first waypoint is the start position. The final
/// velocity is `terminal_speed` along the last chord; a zero terminal speed
/// means a full stop (acceleration, jerk and snap also zero).
pub fn optimize(
    waypoints: &[Waypoint],
    start: &FlatState,
    terminal_speed: f64,
    durations: &[f64],
) -> Result<PolyTrajectory, TrajoptError> {
    let m = waypoints.len().saturating_sub(1);
    if waypoints.len() < 2 {
        return Err(TrajoptError::TooFewWaypoints(waypoints.len()));
    }
    if durations.len() != m {
        return Err(TrajoptError::DurationMismatch {
            segments: m,
            durations: durations.len(),
        });
    }
    for (segment, &duration) in durations.iter().enumerate() {
        if !(duration.is_finite() && duration >= T_MIN * (1.0 - 1e-12)) {
            return Err(TrajoptError::InvalidDuration { segment, duration });
        }
    }
    let r = POS_ORDERS;
    let ry = YAW_ORDERS;
    let knots = solve_knots(
        snap_basis(),
        durations,
        &position_constraints(waypoints, start, terminal_speed),
    )?;
    let yaw_knots = solve_knots(
        yaw_basis(),
        durations,
        &[yaw_constraints(waypoints, start, terminal_speed)],
    )?
    .remove(0);

    let segments = durations
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut coeffs_xyz = [[0.0; 10]; 3];
            for (axis, c) in coeffs_xyz.iter_mut().enumerate() {
                let ends = &knots[axis][i * r..(i + 2) * r];
                c.copy_from_slice(&snap_basis().coefficients(t, ends));
            }
            let mut coeffs_yaw = [0.0; 6];
            coeffs_yaw.copy_from_slice(&yaw_basis().coefficients(t, &yaw_knots[i * ry..(i + 2) * ry]));
            check_finite(i, &coeffs_xyz, &coeffs_yaw)?;
            Ok(PolySegment {
                duration: t,
                coeffs_xyz,
                coeffs_yaw,
            })
        })
        .collect::<Result<Vec<_>, TrajoptError>>()?;

    Ok(PolyTrajectory {
        segments,
        t0: Timestamp::ZERO,
        problem: TrajectoryProblem {
            waypoints: waypoints.to_vec(),
            start: *start,
            terminal_speed,
        },
    })
}

/// Fixed knot derivatives of the position problem, per axis.
pub(crate) fn position_constraints(
    waypoints: &[Waypoint],
    start: &FlatState,
    terminal_speed: f64,
) -> Vec<Vec<Option<f64>>> {
    let m = waypoints.len() - 1;
    let r = POS_ORDERS;
    let stop = terminal_speed == 0.0;
    let chord = waypoints[m].position - waypoints[m - 1].position;
    let terminal_velocity = if stop || chord.norm() == 0.0 {
        Vec3::zeros()
    } else {
        chord.normalize() * terminal_speed
    };
    let mut fixed = vec![vec![None; r * (m + 1)]; 3];
    for (axis, f) in fixed.iter_mut().enumerate() {
        for (k, wp) in waypoints.iter().enumerate() {
            f[k * r] = Some(wp.position[axis]);
        }
        f[1] = Some(start.velocity[axis]);
        f[2] = Some(start.acceleration[axis]);
        f[3] = Some(start.jerk[axis]);
        f[4] = Some(0.0);
        let last = m * r;
        f[last + 1] = Some(terminal_velocity[axis]);
        if stop {
            f[last + 2] = Some(0.0);
            f[last + 3] = Some(0.0);
            f[last + 4] = Some(0.0);
        }
    }
    fixed
}

/// Fixed knot derivatives of the yaw problem. Targets are unwrapped onto
/// the branch nearest the previous knot.
pub(crate) fn yaw_constraints(waypoints: &[Waypoint], start: &FlatState, terminal_speed: f64) -> Vec<Option<f64>> {
    let m = waypoints.len() - 1;
    let r = YAW_ORDERS;
    let mut fixed = vec![None; r * (m + 1)];
    let mut prev = waypoints[0].yaw;
    for (k, wp) in waypoints.iter().enumerate() {
        if k > 0 {
            prev += angle_diff(wp.yaw, prev);
        }
        fixed[k * r] = Some(prev);
    }
    fixed[1] = Some(start.yaw_rate);
    fixed[2] = Some(0.0);
    if terminal_speed == 0.0 {
        fixed[m * r + 1] = Some(0.0);
        fixed[m * r + 2] = Some(0.0);
    }
    fixed
}

fn check_finite(segment: usize, xyz: &[[f64; 10]; 3], yaw: &[f64; 6]) -> Result<(), TrajoptError> {
    let ok = xyz.iter().flatten().chain(yaw.iter()).all(|c| c.is_finite());
    if ok {
        Ok(())
    } else {
        Err(TrajoptError::Numeric {
            segment,
            reason: "non-finite coefficients".into(),
        })
    }
}

/// Stretches all durations by [`REPAIR_FACTOR`] and re-optimizes until the
/// sampled speed and acceleration respect `limits`.
pub fn repair_feasibility(traj: &PolyTrajectory, limits: &Limits) -> Result<PolyTrajectory, TrajoptError> {
    let mut current = traj.clone();
    for iteration in 0..=REPAIR_MAX_ITERATIONS {
        if current.is_feasible(limits) {
            return Ok(current);
        }
        if iteration == REPAIR_MAX_ITERATIONS {
            break;
        }
        let durations: Vec<f64> = current.durations().iter().map(|d| d * REPAIR_FACTOR).collect();
        let p = &current.problem;
        current = optimize(&p.waypoints, &p.start, p.terminal_speed, &durations)?.with_start_time(traj.t0);
    }
    let (peak_speed, peak_accel) = current.peak_speed_accel(FEASIBILITY_STEP);
    Err(TrajoptError::Infeasible {
        iterations: REPAIR_MAX_ITERATIONS,
        peak_speed,
        peak_accel,
    })
}

/// Times the waypoints along a [`speed_profile`] from the current speed,
/// optimizes and repairs. The terminal speed is lowered to what the profile
/// can reach; the returned problem records the value used.
pub fn plan(
    waypoints: &[Waypoint],
    start: &FlatState,
    terminal_speed: f64,
    limits: &Limits,
) -> Result<PolyTrajectory, TrajoptError> {
    let positions: Vec<Vec3> = waypoints.iter().map(|w| w.position).collect();
    let start_speed = start.velocity.norm();
    let profile = speed_profile(&positions, start_speed, terminal_speed, limits);
    let terminal = terminal_speed.min(profile.terminal_speed());
    let mut traj = optimize(waypoints, start, terminal, &profile.durations)?;
    // a gentler profile, ending no faster than it cruises, keeps the pinned
    // end states consistent where uniform stretching tends to overshoot
    for scale in PROFILE_RETRY_SCALES {
        if traj.is_feasible(limits) {
            return Ok(traj);
        }
        let slower = profile_at(
            &positions,
            start_speed,
            terminal.min(limits.v_max * scale),
            limits,
            scale,
        );
        traj = optimize(waypoints, start, slower.terminal_speed(), &slower.durations)?;
    }
    repair_feasibility(&traj, limits)
}
