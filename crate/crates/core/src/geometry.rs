//! Pose and waypoint types shared by every stage of the pipeline, plus the
//! reduction of a full 6-DOF pose to the `[x, y, z, yaw]` waypoint a
//! multirotor can fly.
//!
//! Conventions: world frame is z-up, quaternions are stored `(w, x, y, z)`,
//! and yaw is the heading of the rotated body x-axis projected onto the
//! world xy-plane.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum tolerated deviation of a quaternion norm from one.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

/// Horizontal length of the rotated body x-axis below which heading is undefined.
const GIMBAL_TOLERANCE: f64 = 1e-6;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("heading undefined: body x-axis is vertical")]
    GimbalDegenerate,
}

/// Nanoseconds since the session epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_secs(secs: f64) -> Timestamp {
        Timestamp((secs * 1e9).round().max(0.0) as u64)
    }

    pub fn nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    /// Signed difference `self - earlier` in seconds.
    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        (self.0 as i128 - earlier.0 as i128) as f64 * 1e-9
    }

    pub fn add_secs(self, secs: f64) -> Timestamp {
        let delta = (secs * 1e9).round() as i128;
        Timestamp((self.0 as i128 + delta).max(0) as u64)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Timestamped position and orientation in the common world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6DoF {
    pub t: Timestamp,
    pub position: Vec3,
    pub orientation: Quaternion<f64>,
}

impl Pose6DoF {
    /// Builds a pose, rejecting non-finite values and non-unit orientations.
    pub fn new(t: Timestamp, position: Vec3, orientation: Quaternion<f64>) -> Result<Self, GeometryError> {
        if !position.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidInput("non-finite position".to_string()));
        }
        check_unit(&orientation)?;
        Ok(Pose6DoF {
            t,
            position,
            orientation,
        })
    }

    /// Pose with a pure-yaw orientation.
    pub fn from_yaw(t: Timestamp, position: Vec3, yaw: f64) -> Self {
        Pose6DoF {
            t,
            position,
            orientation: yaw_quaternion(yaw),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointKind {
    Normal,
    Inspection,
    TrajectoryEnd,
}

impl WaypointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WaypointKind::Normal => "normal",
            WaypointKind::Inspection => "inspection",
            WaypointKind::TrajectoryEnd => "trajectory_end",
        }
    }

    pub fn parse(s: &str) -> Option<WaypointKind> {
        match s {
            "normal" => Some(WaypointKind::Normal),
            "inspection" => Some(WaypointKind::Inspection),
            "trajectory_end" => Some(WaypointKind::TrajectoryEnd),
            _ => None,
        }
    }

    /// Inspection points and the trajectory end require a full stop.
    pub fn is_stop(self) -> bool {
        !matches!(self, WaypointKind::Normal)
    }
}

/// A flyable `[x, y, z, yaw]` target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub position: Vec3,
    /// Radians in (-pi, pi].
    pub yaw: f64,
    pub kind: WaypointKind,
}

impl Waypoint {
    pub fn new(position: Vec3, yaw: f64, kind: WaypointKind) -> Self {
        Waypoint {
            position,
            yaw: wrap_angle_unchecked(yaw),
            kind,
        }
    }
}

fn check_unit(q: &Quaternion<f64>) -> Result<(), GeometryError> {
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(GeometryError::InvalidInput(format!(
            "quaternion norm {norm} is not unit"
        )));
    }
    Ok(())
}

/// Quaternion for a rotation of `yaw` radians about world z.
pub fn yaw_quaternion(yaw: f64) -> Quaternion<f64> {
    let half = 0.5 * yaw;
    Quaternion::new(half.cos(), 0.0, 0.0, half.sin())
}

/// Heading of a unit quaternion: `atan2` of the world-frame x/y components
/// of the rotated body x-axis.
pub fn yaw_from_quaternion(q: &Quaternion<f64>) -> Result<f64, GeometryError> {
    check_unit(q)?;
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    // First column of the rotation matrix.
    let fx = 1.0 - 2.0 * (y * y + z * z);
    let fy = 2.0 * (x * y + w * z);
    if fx.hypot(fy) < GIMBAL_TOLERANCE {
        return Err(GeometryError::GimbalDegenerate);
    }
    Ok(wrap_angle_unchecked(fy.atan2(fx)))
}

pub fn pose_to_waypoint(pose: &Pose6DoF, kind: WaypointKind) -> Result<Waypoint, GeometryError> {
    let yaw = yaw_from_quaternion(&pose.orientation)?;
    Ok(Waypoint {
        position: pose.position,
        yaw,
        kind,
    })
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> Result<f64, GeometryError> {
    if !a.is_finite() {
        return Err(GeometryError::InvalidInput(format!("non-finite angle {a}")));
    }
    Ok(wrap_angle_unchecked(a))
}

pub(crate) fn wrap_angle_unchecked(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Signed shortest rotation from `from` to `to`, in (-pi, pi].
pub fn angle_diff(to: f64, from: f64) -> f64 {
    wrap_angle_unchecked(to - from)
}

/// Minimal absolute difference between two headings, in [0, pi].
pub fn angular_distance(a: f64, b: f64) -> Result<f64, GeometryError> {
    if !a.is_finite() || !b.is_finite() {
        return Err(GeometryError::InvalidInput("non-finite angle".to_string()));
    }
    Ok(angle_diff(a, b).abs())
}

pub(crate) fn angular_distance_unchecked(a: f64, b: f64) -> f64 {
    angle_diff(a, b).abs()
}

/// Mean heading of a set of angles (direction of the summed unit vectors).
pub fn circular_mean(angles: impl IntoIterator<Item = f64>) -> f64 {
    let (s, c) = angles
        .into_iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    wrap_angle_unchecked(s.atan2(c))
}

/// Shortest distance from `p` to the segment `a`-`b`.
pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    (p - closest_point_on_segment(p, a, b)).norm()
}

pub fn closest_point_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let s = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * s
}
