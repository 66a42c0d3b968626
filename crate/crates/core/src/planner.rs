//! Global teach-and-repeat planner.
//!
//! Given the agent position and a finalized [`TeachSession`], picks the next
//! run of keyframes to fly. A sequence stops at the first inspection point or
//! the trajectory end, after `n_max` waypoints, or once its arc span exceeds
//! `l_max` (the crossing keyframe is kept). It ends at rest on stop
//! keyframes and at full speed otherwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Vec3, Waypoint, WaypointKind};
use crate::teach::{KeyframeId, TeachSession};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("session has no keyframes")]
    EmptySession,
    #[error("agent lost: nearest remaining keyframe is {distance:.3} m away")]
    Lost { distance: f64 },
    #[error("keyframe {0} is not part of the session")]
    UnknownKeyframe(KeyframeId),
    #[error("invalid planner parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerParams {
    /// Arc-length cap of one sequence, meters.
    pub l_max: f64,
    /// Waypoint-count cap of one sequence.
    pub n_max: usize,
    /// Terminal speed of sequences that end on a normal keyframe, m/s.
    pub v_max: f64,
    /// Keyframes within this radius of the agent count as reached, meters.
    pub capture_radius: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            l_max: 5.0,
            n_max: 10,
            v_max: 1.0,
            capture_radius: 1.0,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), PlannerError> {
        for (name, v) in [
            ("l_max", self.l_max),
            ("v_max", self.v_max),
            ("capture_radius", self.capture_radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlannerError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_max < 2 {
            return Err(PlannerError::InvalidParams(
                "n_max must allow at least two waypoints".into(),
            ));
        }
        Ok(())
    }

    /// Agents farther than this from every remaining keyframe are lost.
    pub fn lost_radius(&self) -> f64 {
        10.0 * self.capture_radius
    }
}

/// Last keyframe consumed by the planner. Only ever moves forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cursor {
    pub last_consumed: Option<KeyframeId>,
}

impl Cursor {
    pub fn at(id: KeyframeId) -> Self {
        Cursor {
            last_consumed: Some(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaypointSequence {
    pub waypoints: Vec<Waypoint>,
    /// Keyframe id of each waypoint.
    pub ids: Vec<KeyframeId>,
    pub terminal_speed: f64,
    pub end_kind: WaypointKind,
    pub start_id: KeyframeId,
    pub end_id: KeyframeId,
    /// Set by the safety stage when the sequence was cut short.
    pub truncated: bool,
}

impl WaypointSequence {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.waypoints.iter().map(|w| w.position).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Sequence(WaypointSequence),
    /// The cursor sits on the trajectory end.
    Done,
}

/// Picks the next keyframe sequence for an agent at `agent_position`.
pub fn select_sequence(
    session: &TeachSession,
    agent_position: &Vec3,
    cursor: Cursor,
    params: &PlannerParams,
) -> Result<(Selection, Cursor), PlannerError> {
    let kfs = session.keyframes();
    if kfs.is_empty() {
        return Err(PlannerError::EmptySession);
    }
    let first_idx = match cursor.last_consumed {
        Some(id) if id == session.end_id() => return Ok((Selection::Done, cursor)),
        Some(id) => session.index_of(id).ok_or(PlannerError::UnknownKeyframe(id))?,
        None => 0,
    };
    let remaining = &kfs[first_idx..];
    let dist = |i: usize| (remaining[i].waypoint.position - agent_position).norm();

    let captured = (0..remaining.len()).find(|&i| dist(i) <= params.capture_radius);
    let start = match captured {
        Some(i) => i,
        None => {
            let (i, d) = (0..remaining.len())
                .map(|i| (i, dist(i)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty");
            if d > params.lost_radius() {
                return Err(PlannerError::Lost { distance: d });
            }
            i
        }
    };

    let start_kf = &remaining[start];
    let waypoint_of = |id: KeyframeId, wp: &Waypoint| Waypoint {
        kind: session.stop_kind(id),
        ..*wp
    };
    let mut waypoints = vec![waypoint_of(start_kf.id, &start_kf.waypoint)];
    let mut ids = vec![start_kf.id];
    for kf in &remaining[start + 1..] {
        waypoints.push(waypoint_of(kf.id, &kf.waypoint));
        ids.push(kf.id);
        let span = kf.arc_length - start_kf.arc_length;
        if session.is_stop(kf.id) || waypoints.len() >= params.n_max || span > params.l_max {
            break;
        }
    }

    let end_id = *ids.last().expect("non-empty");
    let end_kind = session.stop_kind(end_id);
    let terminal_speed = if end_kind == WaypointKind::Normal {
        params.v_max
    } else {
        0.0
    };
    let seq = WaypointSequence {
        waypoints,
        ids,
        terminal_speed,
        end_kind,
        start_id: start_kf.id,
        end_id,
        truncated: false,
    };
    Ok((Selection::Sequence(seq), Cursor::at(end_id)))
}

/// Moves the cursor forward to `reached_id`; never moves it back.
pub fn advance_cursor(session: &TeachSession, cursor: Cursor, reached_id: KeyframeId) -> Result<Cursor, PlannerError> {
    if session.index_of(reached_id).is_none() {
        return Err(PlannerError::UnknownKeyframe(reached_id));
    }
    let next = match cursor.last_consumed {
        Some(c) => c.max(reached_id),
        None => reached_id,
    };
    Ok(Cursor::at(next))
}
