//! Recording of a taught trajectory.
//!
//! A [`TeachBuilder`] consumes the teacher's localized pose stream and keeps
//! a sparse key-framed copy of it. Keyframes are triggered by travelled
//! distance or heading change. When the teacher stays put for `t_dwell`
//! seconds an inspection keyframe is inserted at the centroid of the dwell
//! window. [`TeachBuilder::finalize`] closes the recording and marks the
//! trajectory end.
//!
//! Sessions persist as a small line-oriented text file:
//!
//! ```text
//! TNRSESSION v1 <frame_id> <params_digest>
//! KF <id> <t_ns> <x> <y> <z> <yaw> <kind> <arc>
//! END <crc32>
//! ```
//!
//! The CRC-32 (IEEE) covers every byte before the `END` line.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{fingerprint, fmt_f64};
use crate::geometry::{
    angular_distance_unchecked, circular_mean, pose_to_waypoint, GeometryError, Pose6DoF, Timestamp, Vec3, Waypoint,
    WaypointKind,
};

/// Slack on keyframe trigger comparisons so that exact threshold crossings
/// are not lost to rounding.
pub const TRIGGER_EPS: f64 = 1e-9;

/// Final pose is appended on finalize when at least this far from the last keyframe.
const FINAL_POSE_MIN_GAP: f64 = 1e-3;

const SESSION_MAGIC: &str = "TNRSESSION";
const SESSION_VERSION: &str = "v1";

pub type KeyframeId = u32;

#[derive(Debug, Error)]
pub enum TeachError {
    #[error("invalid teach parameters: {0}")]
    InvalidParams(String),
    #[error("pose stream not monotone: {got} after {previous}")]
    NonMonotoneTimestamp { previous: Timestamp, got: Timestamp },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no keyframes recorded")]
    EmptySession,
}

#[derive(Debug, Error)]
pub enum SessionFileError {
    #[error("session i/o: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported session version {0:?}")]
    Version(String),
    #[error("malformed session file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("session checksum mismatch: file says {stored:08x}, content is {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeachParams {
    /// Distance between keyframes, meters.
    pub d_kf: f64,
    /// Heading change between keyframes, radians.
    pub psi_kf: f64,
    /// Time the teacher must stay still to insert an inspection point, seconds.
    pub t_dwell: f64,
    /// Radius around the dwell centroid that counts as still, meters.
    pub r_dwell: f64,
    /// Distance the teacher must leave an inspection point before another can fire.
    pub r_rearm: f64,
}

impl Default for TeachParams {
    fn default() -> Self {
        TeachParams {
            d_kf: 0.3,
            psi_kf: 0.26,
            t_dwell: 2.0,
            r_dwell: 0.10,
            r_rearm: 0.20,
        }
    }
}

impl TeachParams {
    pub fn validate(&self) -> Result<(), TeachError> {
        let fields = [
            ("d_kf", self.d_kf),
            ("psi_kf", self.psi_kf),
            ("t_dwell", self.t_dwell),
            ("r_dwell", self.r_dwell),
            ("r_rearm", self.r_rearm),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(TeachError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.r_rearm < self.r_dwell {
            return Err(TeachError::InvalidParams(format!(
                "r_rearm ({}) must be >= r_dwell ({})",
                self.r_rearm, self.r_dwell
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let canonical = format!(
            "d_kf={};psi_kf={};t_dwell={};r_dwell={};r_rearm={}",
            fmt_f64(self.d_kf),
            fmt_f64(self.psi_kf),
            fmt_f64(self.t_dwell),
            fmt_f64(self.r_dwell),
            fmt_f64(self.r_rearm)
        );
        fingerprint(canonical.as_bytes())
    }

    fn t_dwell_ns(&self) -> u64 {
        (self.t_dwell * 1e9).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub waypoint: Waypoint,
    pub t: Timestamp,
    /// Meters along the keyframe polyline from the session start.
    pub arc_length: f64,
}

/// A finalized recording. Immutable; the last keyframe is the trajectory end.
#[derive(Debug, Clone, PartialEq)]
pub struct TeachSession {
    keyframes: Vec<Keyframe>,
    inspection_ids: BTreeSet<KeyframeId>,
    params_digest: String,
    frame_id: String,
}

impl TeachSession {
    /// Assembles a session from parts, checking all structural invariants.
    pub fn from_parts(keyframes: Vec<Keyframe>, params_digest: String, frame_id: String) -> Result<Self, String> {
        if keyframes.is_empty() {
            return Err("session has no keyframes".into());
        }
        validate_token(&frame_id).map_err(|e| format!("frame id: {e}"))?;
        validate_token(&params_digest).map_err(|e| format!("params digest: {e}"))?;
        let last = keyframes.len() - 1;
        for (i, kf) in keyframes.iter().enumerate() {
            if i > 0 {
                let prev = &keyframes[i - 1];
                if kf.id <= prev.id {
                    return Err(format!("keyframe ids not increasing at {}", kf.id));
                }
                if kf.arc_length < prev.arc_length {
                    return Err(format!("arc length decreases at keyframe {}", kf.id));
                }
                if kf.t < prev.t {
                    return Err(format!("timestamps decrease at keyframe {}", kf.id));
                }
            }
            let kind = kf.waypoint.kind;
            if i == last {
                if kind == WaypointKind::Normal {
                    return Err("last keyframe must end the trajectory".into());
                }
            } else if kind == WaypointKind::TrajectoryEnd {
                return Err(format!("trajectory_end before the last keyframe ({})", kf.id));
            }
            let finite = kf.waypoint.position.iter().all(|c| c.is_finite())
                && kf.waypoint.yaw.is_finite()
                && kf.arc_length.is_finite();
            if !finite {
                return Err(format!("non-finite values in keyframe {}", kf.id));
            }
        }
        let inspection_ids = keyframes
            .iter()
            .filter(|k| k.waypoint.kind == WaypointKind::Inspection)
            .map(|k| k.id)
            .collect();
        Ok(TeachSession {
            keyframes,
            inspection_ids,
            params_digest,
            frame_id,
        })
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn inspection_ids(&self) -> &BTreeSet<KeyframeId> {
        &self.inspection_ids
    }

    pub fn params_digest(&self) -> &str {
        &self.params_digest
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    /// Id of the last keyframe, the trajectory end.
    pub fn end_id(&self) -> KeyframeId {
        self.keyframes.last().map(|k| k.id).unwrap_or_default()
    }

    pub fn index_of(&self, id: KeyframeId) -> Option<usize> {
        self.keyframes.binary_search_by_key(&id, |k| k.id).ok()
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.index_of(id).map(|i| &self.keyframes[i])
    }

    pub fn is_inspection(&self, id: KeyframeId) -> bool {
        self.inspection_ids.contains(&id)
    }

    /// Whether reaching this keyframe requires a full stop.
    pub fn is_stop(&self, id: KeyframeId) -> bool {
        id == self.end_id() || self.is_inspection(id)
    }

    /// Kind used for planning: inspection membership wins over end status.
    pub fn stop_kind(&self, id: KeyframeId) -> WaypointKind {
        if self.is_inspection(id) {
            WaypointKind::Inspection
        } else if id == self.end_id() {
            WaypointKind::TrajectoryEnd
        } else {
            WaypointKind::Normal
        }
    }

    pub fn total_length(&self) -> f64 {
        self.keyframes.last().map(|k| k.arc_length).unwrap_or(0.0)
    }

    pub fn polyline(&self) -> Vec<Vec3> {
        self.keyframes.iter().map(|k| k.waypoint.position).collect()
    }

    /// Content fingerprint of the serialized session.
    pub fn digest(&self) -> String {
        fingerprint(self.to_text().as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut body = format!(
            "{SESSION_MAGIC} {SESSION_VERSION} {} {}\n",
            self.frame_id, self.params_digest
        );
        for kf in &self.keyframes {
            let p = kf.waypoint.position;
            body.push_str(&format!(
                "KF {} {} {} {} {} {} {} {}\n",
                kf.id,
                kf.t.nanos(),
                fmt_f64(p.x),
                fmt_f64(p.y),
                fmt_f64(p.z),
                fmt_f64(kf.waypoint.yaw),
                kf.waypoint.kind.as_str(),
                fmt_f64(kf.arc_length)
            ));
        }
        let crc = crc32fast::hash(body.as_bytes());
        body.push_str(&format!("END {crc:08x}\n"));
        body
    }

    pub fn from_text(text: &str) -> Result<Self, SessionFileError> {
        let malformed = |line: usize, reason: &str| SessionFileError::Malformed {
            line,
            reason: reason.to_string(),
        };
        let end_at = text
            .rfind("END ")
            .filter(|&i| i == 0 || text.as_bytes()[i - 1] == b'\n');
        let mut lines = text.lines().enumerate();

        let (_, header) = lines.next().ok_or_else(|| malformed(1, "empty file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.first() != Some(&SESSION_MAGIC) {
            return Err(malformed(1, "missing TNRSESSION header"));
        }
        match fields.get(1) {
            Some(&SESSION_VERSION) => {}
            Some(v) => return Err(SessionFileError::Version(v.to_string())),
            None => return Err(malformed(1, "missing version")),
        }
        if fields.len() != 4 {
            return Err(malformed(1, "header needs frame id and params digest"));
        }
        let frame_id = fields[2].to_string();
        let params_digest = fields[3].to_string();

        let end_at = end_at.ok_or_else(|| malformed(text.lines().count(), "missing END record"))?;
        let mut keyframes = Vec::new();
        let mut saw_end = false;
        for (idx, line) in &mut lines {
            let n = idx + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.first() {
                Some(&"KF") => {
                    if saw_end {
                        return Err(malformed(n, "record after END"));
                    }
                    if f.len() != 9 {
                        return Err(malformed(n, "KF record needs 8 fields"));
                    }
                    let num = |s: &str| s.parse::<f64>().map_err(|_| malformed(n, &format!("bad number {s:?}")));
                    let id = f[1]
                        .parse::<KeyframeId>()
                        .map_err(|_| malformed(n, "bad keyframe id"))?;
                    let t = f[2].parse::<u64>().map_err(|_| malformed(n, "bad timestamp"))?;
                    let position = Vec3::new(num(f[3])?, num(f[4])?, num(f[5])?);
                    let yaw = num(f[6])?;
                    let kind = WaypointKind::parse(f[7]).ok_or_else(|| malformed(n, "unknown keyframe kind"))?;
                    let arc_length = num(f[8])?;
                    keyframes.push(Keyframe {
                        id,
                        waypoint: Waypoint { position, yaw, kind },
                        t: Timestamp(t),
                        arc_length,
                    });
                }
                Some(&"END") => {
                    if saw_end || f.len() != 2 || f[1].len() != 8 {
                        return Err(malformed(n, "bad END record"));
                    }
                    let stored = u32::from_str_radix(f[1], 16).map_err(|_| malformed(n, "bad checksum field"))?;
                    let computed = crc32fast::hash(&text.as_bytes()[..end_at]);
                    if stored != computed {
                        return Err(SessionFileError::Checksum { stored, computed });
                    }
                    saw_end = true;
                }
                Some(_) => return Err(malformed(n, "unknown record")),
                None => return Err(malformed(n, "blank line")),
            }
        }
        if !saw_end {
            return Err(malformed(text.lines().count(), "missing END record"));
        }
        TeachSession::from_parts(keyframes, params_digest, frame_id).map_err(|reason| malformed(0, &reason))
    }
}

fn validate_token(s: &str) -> Result<(), String> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        Err(format!("{s:?} must be a non-empty token without whitespace"))
    } else {
        Ok(())
    }
}

pub fn save_session(session: &TeachSession, path: &Path) -> Result<(), SessionFileError> {
    fs::write(path, session.to_text())?;
    Ok(())
}

pub fn load_session(path: &Path) -> Result<TeachSession, SessionFileError> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| SessionFileError::Malformed {
        line: 0,
        reason: "not valid UTF-8".into(),
    })?;
    TeachSession::from_text(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeachEvent {
    KeyframeAdded {
        id: KeyframeId,
        t: Timestamp,
    },
    InspectionInserted {
        id: KeyframeId,
        t: Timestamp,
        waypoint: Waypoint,
    },
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    t: Timestamp,
    position: Vec3,
    yaw: f64,
}

/// Single-owner recorder for one teach session.
#[derive(Debug, Clone)]
pub struct TeachBuilder {
    params: TeachParams,
    frame_id: String,
    keyframes: Vec<Keyframe>,
    window: VecDeque<Sample>,
    first_t: Option<Timestamp>,
    last: Option<Sample>,
    armed: bool,
    last_inspection: Option<Vec3>,
}

impl TeachBuilder {
    pub fn new(params: TeachParams, frame_id: impl Into<String>) -> Result<Self, TeachError> {
        params.validate()?;
        let frame_id = frame_id.into();
        validate_token(&frame_id).map_err(TeachError::InvalidParams)?;
        Ok(TeachBuilder {
            params,
            frame_id,
            keyframes: Vec::new(),
            window: VecDeque::new(),
            first_t: None,
            last: None,
            armed: true,
            last_inspection: None,
        })
    }

    pub fn params(&self) -> &TeachParams {
        &self.params
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        self.last.map(|s| s.t)
    }

    pub fn ingest_pose(&mut self, pose: &Pose6DoF) -> Result<Vec<TeachEvent>, TeachError> {
        if let Some(last) = self.last {
            if pose.t <= last.t {
                return Err(TeachError::NonMonotoneTimestamp {
                    previous: last.t,
                    got: pose.t,
                });
            }
        }
        let wp = pose_to_waypoint(pose, WaypointKind::Normal)?;
        let sample = Sample {
            t: pose.t,
            position: wp.position,
            yaw: wp.yaw,
        };
        self.first_t.get_or_insert(pose.t);
        self.last = Some(sample);

        let horizon = pose.t.nanos().checked_sub(self.params.t_dwell_ns());
        self.window.push_back(sample);
        if let Some(h) = horizon {
            while self.window.front().is_some_and(|s| s.t.nanos() < h) {
                self.window.pop_front();
            }
        }

        let mut events = Vec::new();
        if let Some(ev) = self.check_dwell(&sample, horizon) {
            events.push(ev);
            return Ok(events);
        }
        if self.should_keyframe(&sample) {
            let id = self.push_keyframe(sample, WaypointKind::Normal);
            events.push(TeachEvent::KeyframeAdded { id, t: sample.t });
        }
        Ok(events)
    }

    /// Manually marks the latest pose as an inspection point.
    pub fn mark_inspection(&mut self) -> Option<TeachEvent> {
        let last = self.last?;
        if self.near_inspection(&last.position) {
            return None;
        }
        Some(self.insert_inspection(last))
    }

    fn should_keyframe(&self, s: &Sample) -> bool {
        let Some(prev) = self.keyframes.last() else {
            return true;
        };
        let dist = (s.position - prev.waypoint.position).norm();
        let dyaw = angular_distance_unchecked(s.yaw, prev.waypoint.yaw);
        dist >= self.params.d_kf - TRIGGER_EPS || dyaw >= self.params.psi_kf - TRIGGER_EPS
    }

    fn check_dwell(&mut self, s: &Sample, horizon: Option<u64>) -> Option<TeachEvent> {
        if !self.armed {
            let far = self
                .last_inspection
                .is_none_or(|c| (s.position - c).norm() > self.params.r_rearm);
            if far {
                self.armed = true;
            } else {
                return None;
            }
        }
        // The stream must cover a full dwell duration.
        let horizon = horizon?;
        if self.first_t?.nanos() > horizon {
            return None;
        }
        let n = self.window.len() as f64;
        let centroid = self.window.iter().fold(Vec3::zeros(), |acc, w| acc + w.position) / n;
        let still = self
            .window
            .iter()
            .all(|w| (w.position - centroid).norm() <= self.params.r_dwell);
        if !still || self.near_inspection(&centroid) {
            return None;
        }
        let yaw = circular_mean(self.window.iter().map(|w| w.yaw));
        Some(self.insert_inspection(Sample {
            t: s.t,
            position: centroid,
            yaw,
        }))
    }

    fn near_inspection(&self, p: &Vec3) -> bool {
        self.keyframes.iter().any(|k| {
            k.waypoint.kind == WaypointKind::Inspection && (k.waypoint.position - p).norm() <= self.params.r_rearm
        })
    }

    fn insert_inspection(&mut self, s: Sample) -> TeachEvent {
        let id = self.push_keyframe(s, WaypointKind::Inspection);
        self.armed = false;
        self.last_inspection = Some(s.position);
        TeachEvent::InspectionInserted {
            id,
            t: s.t,
            waypoint: self.keyframes.last().expect("just pushed").waypoint,
        }
    }

    fn push_keyframe(&mut self, s: Sample, kind: WaypointKind) -> KeyframeId {
        let (id, arc_length) = match self.keyframes.last() {
            Some(prev) => (
                prev.id + 1,
                prev.arc_length + (s.position - prev.waypoint.position).norm(),
            ),
            None => (0, 0.0),
        };
        self.keyframes.push(Keyframe {
            id,
            waypoint: Waypoint::new(s.position, s.yaw, kind),
            t: s.t,
            arc_length,
        });
        id
    }

    /// Closes the recording. The final teacher pose is kept if it moved away
    /// from the last keyframe, and the last keyframe becomes the trajectory end.
    pub fn finalize(mut self) -> Result<TeachSession, TeachError> {
        if self.keyframes.is_empty() {
            return Err(TeachError::EmptySession);
        }
        let last_pose = self.last.expect("keyframes imply an ingested pose");
        let last_kf = self.keyframes.last().expect("non-empty");
        if (last_pose.position - last_kf.waypoint.position).norm() >= FINAL_POSE_MIN_GAP {
            self.push_keyframe(last_pose, WaypointKind::Normal);
        }
        let end = self.keyframes.last_mut().expect("non-empty");
        if end.waypoint.kind == WaypointKind::Normal {
            end.waypoint.kind = WaypointKind::TrajectoryEnd;
        }
        let mut arc = 0.0;
        for i in 0..self.keyframes.len() {
            if i > 0 {
                arc += (self.keyframes[i].waypoint.position - self.keyframes[i - 1].waypoint.position).norm();
            }
            self.keyframes[i].arc_length = arc;
        }
        let digest = self.params.digest();
        TeachSession::from_parts(self.keyframes, digest, self.frame_id).map_err(TeachError::InvalidParams)
    }
}

/// Runs a whole pose stream through a fresh builder.
pub fn teach_from_poses<'a>(
    poses: impl IntoIterator<Item = &'a Pose6DoF>,
    params: TeachParams,
    frame_id: &str,
) -> Result<(TeachSession, Vec<TeachEvent>), TeachError> {
    let mut builder = TeachBuilder::new(params, frame_id)?;
    let mut events = Vec::new();
    for pose in poses {
        events.extend(builder.ingest_pose(pose)?);
    }
    Ok((builder.finalize()?, events))
}
