//! Fixed-step multirotor stand-in: double-integrator translation, first-order
//! yaw, a feedforward plus PD tracking law, localization noise and
//! emergency braking.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::fmt_f64;
use crate::geometry::{angle_diff, wrap_angle_unchecked, yaw_quaternion, Pose6DoF, Timestamp, Vec3};
use crate::rng::CounterRng;
use crate::trajopt::{FlatState, PolyTrajectory};

/// Physics tick, seconds.
pub const DT: f64 = 0.01;
pub const TICK_NS: u64 = 10_000_000;
/// Below this speed an estopped vehicle is considered stopped.
pub const STOPPED_SPEED: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("illegal mode transition {from} -> {to}")]
    IllegalTransition { from: Mode, to: Mode },
    #[error("invalid simulator parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    Executing,
    Following,
    Estopped,
    Done,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Idle => "idle",
            Mode::Executing => "executing",
            Mode::Following => "following",
            Mode::Estopped => "estopped",
            Mode::Done => "done",
        }
    }

    /// Transitions reachable without an operator reset.
    pub fn can_transition(self, to: Mode) -> bool {
        use Mode::*;
        match (self, to) {
            (Done, Estopped) => false,
            (_, Estopped) => true,
            (Idle, Executing) | (Idle, Following) => true,
            (Executing, Executing) | (Executing, Done) => true,
            (Following, Following) | (Following, Done) => true,
            _ => false,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "idle" => Mode::Idle,
            "executing" => Mode::Executing,
            "following" => Mode::Following,
            "estopped" => Mode::Estopped,
            "done" => Mode::Done,
            other => return Err(format!("unknown mode {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub t: Timestamp,
    pub position: Vec3,
    pub velocity: Vec3,
    pub yaw: f64,
    pub yaw_rate: f64,
    pub mode: Mode,
}

impl VehicleState {
    pub fn at_rest(t: Timestamp, position: Vec3, yaw: f64) -> Self {
        VehicleState {
            t,
            position,
            velocity: Vec3::zeros(),
            yaw: wrap_angle_unchecked(yaw),
            yaw_rate: 0.0,
            mode: Mode::Idle,
        }
    }

    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlCommand {
    pub acceleration: Vec3,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerParams {
    pub kp: f64,
    pub kd: f64,
    pub kyaw: f64,
    pub a_cmd_max: f64,
    pub yaw_rate_max: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams {
            kp: 6.0,
            kd: 4.5,
            kyaw: 2.0,
            a_cmd_max: 4.0,
            yaw_rate_max: 1.5,
        }
    }
}

/// Plant limits: hard speed clamp and estop braking deceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantParams {
    pub v_max_hard: f64,
    pub a_brake: f64,
}

impl PlantParams {
    /// Hard clamp at twice the planning speed, braking at the planning acceleration.
    pub fn from_limits(v_max: f64, a_max: f64) -> Self {
        PlantParams {
            v_max_hard: 2.0 * v_max,
            a_brake: a_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub sigma_p: f64,
    pub sigma_yaw: f64,
    pub seed: Option<u64>,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            sigma_p: 0.02,
            sigma_yaw: 0.01,
            seed: None,
        }
    }
}

impl NoiseParams {
    pub fn noiseless() -> Self {
        NoiseParams {
            sigma_p: 0.0,
            sigma_yaw: 0.0,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sigma_p >= 0.0 && self.sigma_p.is_finite()) || !(self.sigma_yaw >= 0.0 && self.sigma_yaw.is_finite())
        {
            return Err(SimError::InvalidParams(format!(
                "noise sigmas must be non-negative, got {} and {}",
                self.sigma_p, self.sigma_yaw
            )));
        }
        Ok(())
    }
}

fn clip_norm(v: Vec3, max: f64) -> Vec3 {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Feedforward plus PD law toward a flat reference.
pub fn track_reference(
    reference: &FlatState,
    position: &Vec3,
    velocity: &Vec3,
    yaw: f64,
    gains: &ControllerParams,
) -> ControlCommand {
    let a = reference.acceleration
        + (reference.position - position) * gains.kp
        + (reference.velocity - velocity) * gains.kd;
    let w = reference.yaw_rate + gains.kyaw * angle_diff(reference.yaw, yaw);
    ControlCommand {
        acceleration: clip_norm(a, gains.a_cmd_max),
        yaw_rate: w.clamp(-gains.yaw_rate_max, gains.yaw_rate_max),
    }
}

/// Tracking command for `traj` at `t`; times outside the span are clamped,
/// which holds the final state.
pub fn track(traj: &PolyTrajectory, t: Timestamp, state: &VehicleState, gains: &ControllerParams) -> ControlCommand {
    let tau = if t <= traj.t0() { 0.0 } else { t.secs_since(traj.t0()) };
    let reference = traj.sample_local(tau);
    track_reference(&reference, &state.position, &state.velocity, state.yaw, gains)
}

/// One semi-implicit Euler tick. Estopped vehicles ignore `cmd` and brake.
pub fn step(state: &VehicleState, cmd: &ControlCommand, dt: f64, plant: &PlantParams) -> VehicleState {
    let mut next = *state;
    next.t = state.t.add_secs(dt);
    match state.mode {
        Mode::Estopped => {
            let speed = state.velocity.norm();
            let slowed = speed - plant.a_brake * dt;
            next.velocity = if slowed < STOPPED_SPEED {
                Vec3::zeros()
            } else {
                state.velocity * (slowed / speed)
            };
            next.yaw_rate = 0.0;
        }
        _ => {
            next.velocity = clip_norm(state.velocity + cmd.acceleration * dt, plant.v_max_hard);
            next.yaw_rate = cmd.yaw_rate;
        }
    }
    next.position = state.position + next.velocity * dt;
    next.yaw = wrap_angle_unchecked(state.yaw + next.yaw_rate * dt);
    next
}

/// Owns the true state, the mode machine and the localization noise stream.
#[derive(Debug, Clone)]
pub struct Vehicle {
    state: VehicleState,
    plant: PlantParams,
    gains: ControllerParams,
    noise: NoiseParams,
    rng: CounterRng,
}

impl Vehicle {
    pub fn new(initial: VehicleState, plant: PlantParams, gains: ControllerParams, noise: NoiseParams) -> Self {
        Vehicle {
            state: initial,
            plant,
            gains,
            noise,
            rng: CounterRng::new(noise.seed.unwrap_or(0)),
        }
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    pub fn gains(&self) -> &ControllerParams {
        &self.gains
    }

    pub fn set_mode(&mut self, to: Mode) -> Result<(), SimError> {
        let from = self.state.mode;
        if !from.can_transition(to) {
            return Err(SimError::IllegalTransition { from, to });
        }
        self.state.mode = to;
        Ok(())
    }

    /// Absorbing until [`Vehicle::reset`]; a finished vehicle is left alone.
    pub fn emergency_stop(&mut self) {
        if self.state.mode != Mode::Done {
            self.state.mode = Mode::Estopped;
        }
    }

    /// Operator reset back to idle, keeping position and velocity.
    pub fn reset(&mut self) {
        self.state.mode = Mode::Idle;
    }

    pub fn step(&mut self, cmd: &ControlCommand) {
        self.state = step(&self.state, cmd, DT, &self.plant);
    }

    /// Noisy pose estimate of the current state; always consumes four
    /// gaussian draws so streams stay aligned regardless of sigma.
    pub fn localize(&mut self) -> Pose6DoF {
        localize(&self.state, &self.noise, &mut self.rng)
    }
}

/// Pose estimate with per-axis position noise and yaw noise applied as a
/// rotation about world z.
pub fn localize(state: &VehicleState, noise: &NoiseParams, rng: &mut CounterRng) -> Pose6DoF {
    let dp = Vec3::new(rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian()) * noise.sigma_p;
    let dyaw = rng.next_gaussian() * noise.sigma_yaw;
    let q = yaw_quaternion(state.yaw);
    let orientation: Quaternion<f64> = if dyaw == 0.0 {
        q
    } else {
        let rz = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), dyaw);
        (rz * UnitQuaternion::new_unchecked(q)).into_inner()
    };
    Pose6DoF {
        t: state.t,
        position: state.position + dp,
        orientation,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("mission log line {line}: {reason}")]
pub struct LogParseError {
    pub line: usize,
    pub reason: String,
}

/// One physics tick of the mission log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub t: Timestamp,
    pub mode: Mode,
    pub position: Vec3,
    pub velocity: Vec3,
    pub yaw: f64,
    /// Active sequence number, 0 before the first.
    pub seq_id: u32,
}

impl LogRecord {
    pub fn from_state(state: &VehicleState, seq_id: u32) -> Self {
        LogRecord {
            t: state.t,
            mode: state.mode,
            position: state.position,
            velocity: state.velocity,
            yaw: state.yaw,
            seq_id,
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {} {} {} {}",
            self.t.nanos(),
            self.mode,
            fmt_f64(self.position.x),
            fmt_f64(self.position.y),
            fmt_f64(self.position.z),
            fmt_f64(self.velocity.x),
            fmt_f64(self.velocity.y),
            fmt_f64(self.velocity.z),
            fmt_f64(self.yaw),
            self.seq_id
        )
    }

    pub fn parse_line(line: &str, number: usize) -> Result<Self, LogParseError> {
        let err = |reason: String| LogParseError { line: number, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(err(format!("expected 10 fields, got {}", fields.len())));
        }
        let t = fields[0].parse::<u64>().map_err(|e| err(format!("timestamp: {e}")))?;
        let mode = fields[1].parse::<Mode>().map_err(err)?;
        let mut nums = [0.0f64; 7];
        for (k, slot) in nums.iter_mut().enumerate() {
            let v = fields[2 + k]
                .parse::<f64>()
                .map_err(|e| err(format!("field {}: {e}", 3 + k)))?;
            if !v.is_finite() {
                return Err(err(format!("field {} is not finite", 3 + k)));
            }
            *slot = v;
        }
        let seq_id = fields[9].parse::<u32>().map_err(|e| err(format!("seq_id: {e}")))?;
        Ok(LogRecord {
            t: Timestamp(t),
            mode,
            position: Vec3::new(nums[0], nums[1], nums[2]),
            velocity: Vec3::new(nums[3], nums[4], nums[5]),
            yaw: nums[6],
            seq_id,
        })
    }
}

pub fn format_log(records: &[LogRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 200);
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, LogParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| LogRecord::parse_line(l, i + 1))
        .collect()
}
