use serde::{Deserialize, Serialize};

use crate::geometry::{angular_distance_unchecked, point_segment_distance, Vec3};
use crate::safety::EntityId;
use crate::simulator::{LogRecord, Mode};
use crate::teach::{KeyframeId, TeachSession};

use super::config::SphereSpec;

/// Speed below which the vehicle counts as holding, m/s.
pub const HOLD_SPEED: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionReport {
    pub keyframe_id: KeyframeId,
    pub position_error: f64,
    pub yaw_error: f64,
    /// Speed at the closest passage.
    pub speed: f64,
    /// Contiguous time below the hold speed around the closest passage, seconds.
    pub hold_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereReport {
    pub owner_id: EntityId,
    /// Smallest distance between the agent and the sphere center, meters.
    pub min_center_distance: f64,
    /// Smallest distance to the sphere surface; negative inside.
    pub min_clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionReport {
    pub inspections: Vec<InspectionReport>,
    pub max_cross_track: f64,
    pub spheres: Vec<SphereReport>,
    pub completed: bool,
    pub estop_events: u32,
    pub duration: f64,
}

impl MissionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Distance from `p` to the keyframe polyline (a single point if only one).
pub fn cross_track(p: &Vec3, polyline: &[Vec3]) -> f64 {
    match polyline {
        [] => f64::INFINITY,
        [only] => (p - only).norm(),
        _ => polyline
            .windows(2)
            .map(|w| point_segment_distance(p, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Report derived purely from a mission log, the taught session and the
/// obstacle spheres.
pub fn compute_metrics(log: &[LogRecord], session: &TeachSession, spheres: &[SphereSpec]) -> MissionReport {
    let polyline = session.polyline();
    let max_cross_track = log
        .iter()
        .map(|r| cross_track(&r.position, &polyline))
        .fold(0.0, f64::max);

    let inspections = session
        .inspection_ids()
        .iter()
        .filter_map(|&id| {
            let kf = session.keyframe(id)?;
            let (idx, rec) = log.iter().enumerate().min_by(|a, b| {
                let da = (a.1.position - kf.waypoint.position).norm();
                let db = (b.1.position - kf.waypoint.position).norm();
                da.total_cmp(&db)
            })?;
            let hold_duration = if rec.velocity.norm() < HOLD_SPEED {
                let slow = |r: &LogRecord| r.velocity.norm() < HOLD_SPEED;
                let mut first = idx;
                while first > 0 && slow(&log[first - 1]) {
                    first -= 1;
                }
                let mut last = idx;
                while last + 1 < log.len() && slow(&log[last + 1]) {
                    last += 1;
                }
                log[last].t.secs_since(log[first].t)
            } else {
                0.0
            };
            Some(InspectionReport {
                keyframe_id: id,
                position_error: (rec.position - kf.waypoint.position).norm(),
                yaw_error: angular_distance_unchecked(rec.yaw, kf.waypoint.yaw),
                speed: rec.velocity.norm(),
                hold_duration,
            })
        })
        .collect();

    let spheres = spheres
        .iter()
        .map(|s| {
            let d = log
                .iter()
                .map(|r| (r.position - s.at(r.t).center).norm())
                .fold(f64::INFINITY, f64::min);
            SphereReport {
                owner_id: s.owner_id,
                min_center_distance: d,
                min_clearance: d - s.radius,
            }
        })
        .collect();

    let estop_events = log
        .iter()
        .zip(std::iter::once(None).chain(log.iter().map(Some)))
        .filter(|(r, prev)| r.mode == Mode::Estopped && prev.is_none_or(|p| p.mode != Mode::Estopped))
        .count() as u32;

    MissionReport {
        inspections,
        max_cross_track,
        spheres,
        completed: log.last().is_some_and(|r| r.mode == Mode::Done),
        estop_events,
        duration: match (log.first(), log.last()) {
            (Some(a), Some(b)) => b.t.secs_since(a.t),
            _ => 0.0,
        },
    }
}
