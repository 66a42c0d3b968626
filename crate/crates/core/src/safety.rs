//! Passive collision avoidance against known safety spheres.
//!
//! Planned sequences are cut before the first point that comes within
//! `radius + r_agent + d_margin` of a sphere center, and the cut sequence
//! ends at rest. Independently, an agent whose own sphere intersects another
//! sphere is ordered to stop immediately.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{closest_point_on_segment, Vec3};
use crate::planner::WaypointSequence;

pub type EntityId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SafetyError {
    #[error("invalid safety parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetySphere {
    pub owner_id: EntityId,
    pub center: Vec3,
    pub radius: f64,
}

impl SafetySphere {
    pub fn new(owner_id: EntityId, center: Vec3, radius: f64) -> Result<Self, SafetyError> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(SafetyError::InvalidParams(format!(
                "sphere radius must be positive, got {radius}"
            )));
        }
        Ok(SafetySphere {
            owner_id,
            center,
            radius,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyParams {
    pub r_agent: f64,
    pub r_teacher: f64,
    pub r_other_agent: f64,
    /// Extra clearance covering the stopping distance, meters.
    pub d_margin: f64,
    /// Spacing of collision samples along waypoint chords, meters.
    pub sample_step: f64,
}

impl Default for SafetyParams {
    fn default() -> Self {
        SafetyParams {
            r_agent: 1.0,
            r_teacher: 2.0,
            r_other_agent: 1.5,
            d_margin: 0.3,
            sample_step: 0.1,
        }
    }
}

impl SafetyParams {
    /// Checks radii and that the margin covers the stopping distance
    /// `v_max^2 / (2 a_max)`.
    pub fn validate(&self, v_max: f64, a_max: f64) -> Result<(), SafetyError> {
        for (name, v) in [
            ("r_agent", self.r_agent),
            ("r_teacher", self.r_teacher),
            ("r_other_agent", self.r_other_agent),
            ("sample_step", self.sample_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SafetyError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        let stopping = v_max * v_max / (2.0 * a_max);
        if !(self.d_margin >= stopping) {
            return Err(SafetyError::InvalidParams(format!(
                "d_margin {} is below the stopping distance {stopping}",
                self.d_margin
            )));
        }
        Ok(())
    }

    /// Closest admissible distance between a planned point and `sphere`'s center.
    pub fn threshold(&self, sphere: &SafetySphere) -> f64 {
        sphere.radius + self.r_agent + self.d_margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truncation {
    Unchanged(WaypointSequence),
    Truncated(WaypointSequence),
    /// The first waypoint is already too close; hold position.
    Hold,
}

impl Truncation {
    pub fn sequence(&self) -> Option<&WaypointSequence> {
        match self {
            Truncation::Unchanged(s) | Truncation::Truncated(s) => Some(s),
            Truncation::Hold => None,
        }
    }

    pub fn into_sequence(self) -> Option<WaypointSequence> {
        match self {
            Truncation::Unchanged(s) | Truncation::Truncated(s) => Some(s),
            Truncation::Hold => None,
        }
    }
}

fn violates(p: &Vec3, spheres: &[SafetySphere], params: &SafetyParams) -> bool {
    spheres.iter().any(|s| (p - s.center).norm() < params.threshold(s))
}

/// Whether any sample on the chord `a`-`b`, excluding `a`, is too close.
/// Besides the regular samples, the closest point to each sphere center is
/// tested so that small spheres between samples are not missed.
fn chord_violates(a: &Vec3, b: &Vec3, spheres: &[SafetySphere], params: &SafetyParams) -> bool {
    let len = (b - a).norm();
    if len > 0.0 {
        let dir = (b - a) / len;
        let mut s = params.sample_step;
        while s < len {
            if violates(&(a + dir * s), spheres, params) {
                return true;
            }
            s += params.sample_step;
        }
    }
    if violates(b, spheres, params) {
        return true;
    }
    spheres.iter().any(|sp| {
        let c = closest_point_on_segment(&sp.center, a, b);
        (c - sp.center).norm() < params.threshold(sp)
    })
}

/// Cuts `seq` before the first chord that enters an inflated sphere.
pub fn truncate_sequence(seq: &WaypointSequence, spheres: &[SafetySphere], params: &SafetyParams) -> Truncation {
    let Some(first) = seq.waypoints.first() else {
        return Truncation::Hold;
    };
    if violates(&first.position, spheres, params) {
        return Truncation::Hold;
    }
    for i in 0..seq.waypoints.len() - 1 {
        let (a, b) = (&seq.waypoints[i].position, &seq.waypoints[i + 1].position);
        if chord_violates(a, b, spheres, params) {
            let mut cut = seq.clone();
            cut.waypoints.truncate(i + 1);
            cut.ids.truncate(i + 1);
            cut.end_id = cut.ids[i];
            cut.terminal_speed = 0.0;
            cut.truncated = true;
            return Truncation::Truncated(cut);
        }
    }
    Truncation::Unchanged(seq.clone())
}

/// True iff `own` strictly intersects any of `others`; tangency is safe.
pub fn check_estop(own: &SafetySphere, others: &[SafetySphere]) -> bool {
    others
        .iter()
        .filter(|s| s.owner_id != own.owner_id)
        .any(|s| (own.center - s.center).norm() < own.radius + s.radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Waypoint, WaypointKind};
    use proptest::prelude::*;

    fn seq_from(points: &[Vec3]) -> WaypointSequence {
        WaypointSequence {
            waypoints: points
                .iter()
                .map(|p| Waypoint::new(*p, 0.0, WaypointKind::Normal))
                .collect(),
            ids: (0..points.len() as u32).collect(),
            terminal_speed: 1.0,
            end_kind: WaypointKind::Normal,
            start_id: 0,
            end_id: points.len() as u32 - 1,
            truncated: false,
        }
    }

    fn x_line() -> WaypointSequence {
        seq_from(
            &(0..=10)
                .map(|i| Vec3::new(i as f64 * 0.5, 0.0, 0.0))
                .collect::<Vec<_>>(),
        )
    }

    fn sphere(x: f64, y: f64, z: f64, r: f64) -> SafetySphere {
        SafetySphere::new(7, Vec3::new(x, y, z), r).unwrap()
    }

    #[test]
    fn no_spheres_leaves_sequence_unchanged() {
        let seq = x_line();
        assert_eq!(
            truncate_sequence(&seq, &[], &SafetyParams::default()),
            Truncation::Unchanged(seq)
        );
    }

    #[test]
    fn sphere_on_the_line_cuts_at_half_meter() {
        let seq = x_line();
        let params = SafetyParams::default();
        let s = sphere(3.0, 0.0, 0.0, 1.0);
        assert!((params.threshold(&s) - 2.3).abs() < 1e-12);
        let Truncation::Truncated(cut) = truncate_sequence(&seq, &[s], &params) else {
            panic!("expected truncation");
        };
        assert_eq!(cut.waypoints.last().unwrap().position.x, 0.5);
        assert_eq!(cut.end_id, 1);
        assert_eq!(cut.terminal_speed, 0.0);
        assert!(cut.truncated);
        assert_eq!(cut.end_kind, WaypointKind::Normal);
    }

    #[test]
    fn first_waypoint_inside_holds() {
        let seq = x_line();
        let t = truncate_sequence(&seq, &[sphere(0.5, 0.0, 0.0, 1.0)], &SafetyParams::default());
        assert_eq!(t, Truncation::Hold);
    }

    #[test]
    fn small_sphere_between_samples_is_caught() {
        // off-axis sphere whose closest approach falls between 0.1 m samples
        let seq = seq_from(&[Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0)]);
        let params = SafetyParams {
            sample_step: 1.0,
            ..SafetyParams::default()
        };
        let s = sphere(5.5, 1.4, 0.0, 0.1);
        let t = truncate_sequence(&seq, &[s], &params);
        assert!(matches!(t, Truncation::Truncated(ref c) if c.len() == 1));
    }

    #[test]
    fn estop_boundaries() {
        let own = SafetySphere::new(1, Vec3::zeros(), 1.5).unwrap();
        let at = |d: f64| SafetySphere::new(2, Vec3::new(d, 0.0, 0.0), 1.5).unwrap();
        assert!(check_estop(&own, &[at(2.9)]));
        assert!(!check_estop(&own, &[at(3.1)]));
        assert!(!check_estop(&own, &[at(3.0)]));
        assert!(!check_estop(&own, &[]));
    }

    #[test]
    fn margin_must_cover_stopping_distance() {
        let p = SafetyParams::default();
        assert!(p.validate(1.0, 2.0).is_ok());
        assert!(p.validate(2.0, 2.0).is_err());
        assert!(SafetySphere::new(0, Vec3::zeros(), 0.0).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (WaypointSequence, Vec<SafetySphere>)> {
        let pts = prop::collection::vec((-6.0f64..6.0, -6.0f64..6.0, 0.0f64..3.0), 2..12);
        let sph = prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0, 0.0f64..3.0, 0.2f64..2.0), 0..4);
        (pts, sph).prop_map(|(pts, sph)| {
            let pts: Vec<Vec3> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let sph = sph
                .into_iter()
                .enumerate()
                .map(|(i, (x, y, z, r))| SafetySphere::new(i as u32 + 10, Vec3::new(x, y, z), r).unwrap())
                .collect();
            (seq_from(&pts), sph)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn truncation_is_a_clear_idempotent_prefix((seq, spheres) in arb_case()) {
            let params = SafetyParams::default();
            let t = truncate_sequence(&seq, &spheres, &params);
            let Some(out) = t.sequence() else { return Ok(()); };
            prop_assert!(out.len() <= seq.len());
            prop_assert_eq!(&out.waypoints[..], &seq.waypoints[..out.len()]);
            // brute-force resample at a tenth of the step
            let fine = params.sample_step / 10.0;
            for w in out.waypoints.windows(2) {
                let (a, b) = (w[0].position, w[1].position);
                let len = (b - a).norm();
                let n = (len / fine).ceil() as usize;
                for k in 0..=n {
                    let p = a + (b - a) * (k as f64 / n.max(1) as f64);
                    for s in &spheres {
                        prop_assert!((p - s.center).norm() >= params.threshold(s) - 1e-12);
                    }
                }
            }
            for s in &spheres {
                prop_assert!((out.waypoints[0].position - s.center).norm() >= params.threshold(s));
            }
            let again = truncate_sequence(out, &spheres, &params);
            prop_assert_eq!(again.sequence(), Some(out));
        }
    }
}
