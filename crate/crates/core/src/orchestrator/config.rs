use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::fingerprint;
use crate::geometry::{Timestamp, Vec3};
use crate::planner::PlannerParams;
use crate::protocol::LinkParams;
use crate::rng::splitmix64_mix;
use crate::safety::{EntityId, SafetyParams, SafetySphere};
use crate::simulator::{ControllerParams, NoiseParams};
use crate::teach::TeachParams;
use crate::trajopt::Limits;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A safety sphere moving at constant velocity from its initial center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereSpec {
    pub owner_id: EntityId,
    pub center: Vec3,
    pub radius: f64,
    #[serde(default = "Vec3::zeros")]
    pub velocity: Vec3,
}

impl SphereSpec {
    pub fn fixed(owner_id: EntityId, center: Vec3, radius: f64) -> Self {
        SphereSpec {
            owner_id,
            center,
            radius,
            velocity: Vec3::zeros(),
        }
    }

    /// Sphere at `t`, measured from the mission clock origin.
    pub fn at(&self, t: Timestamp) -> SafetySphere {
        SafetySphere {
            owner_id: self.owner_id,
            center: self.center + self.velocity * t.as_secs(),
            radius: self.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPose {
    pub position: Vec3,
    #[serde(default)]
    pub yaw: f64,
}

fn default_hold() -> f64 {
    2.0
}
fn default_d_safe() -> f64 {
    2.5
}
fn default_max_duration() -> f64 {
    600.0
}
fn default_teacher_timeout() -> f64 {
    2.0
}
fn default_settle_timeout() -> f64 {
    10.0
}
fn default_blocked_timeout() -> f64 {
    10.0
}
fn default_follow_tail() -> f64 {
    5.0
}
fn default_frame_id() -> String {
    "world".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionConfig {
    #[serde(default)]
    pub teach: TeachParams,
    #[serde(default)]
    pub planner: PlannerParams,
    #[serde(default)]
    pub safety: SafetyParams,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub controller: ControllerParams,
    #[serde(default)]
    pub noise: NoiseParams,
    #[serde(default)]
    pub link: LinkParams,
    /// Hold time at each inspection point, seconds.
    #[serde(default = "default_hold")]
    pub t_inspect_hold: f64,
    /// Following distance in live mode, meters.
    #[serde(default = "default_d_safe")]
    pub d_safe: f64,
    /// Master seed; module seeds left unset are derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub spheres: Vec<SphereSpec>,
    /// Agent start; repeat missions default to the first keyframe.
    #[serde(default)]
    pub start: Option<StartPose>,
    /// Simulated time after which a mission is aborted, seconds.
    #[serde(default = "default_max_duration")]
    pub max_duration: f64,
    /// Silence after which live mode holds, seconds.
    #[serde(default = "default_teacher_timeout")]
    pub teacher_timeout: f64,
    /// Longest wait for the vehicle to settle at an inspection point, seconds.
    #[serde(default = "default_settle_timeout")]
    pub settle_timeout: f64,
    /// Time a safety hold may last before the mission gives up, seconds.
    #[serde(default = "default_blocked_timeout")]
    pub blocked_timeout: f64,
    /// Time simulated after the last teacher pose in live mode, seconds.
    #[serde(default = "default_follow_tail")]
    pub follow_tail: f64,
    #[serde(default = "default_frame_id")]
    pub frame_id: String,
}

impl Default for MissionConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl MissionConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: MissionConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Configuration without localization noise, for nominal runs.
    pub fn noiseless() -> Self {
        MissionConfig {
            noise: NoiseParams::noiseless(),
            ..MissionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.teach.validate().map_err(|e| inv(e.to_string()))?;
        self.planner.validate().map_err(|e| inv(e.to_string()))?;
        self.safety
            .validate(self.limits.v_max, self.limits.a_max)
            .map_err(|e| inv(e.to_string()))?;
        self.noise.validate().map_err(|e| inv(e.to_string()))?;
        self.link.validate().map_err(inv)?;
        if !(self.limits.v_max > 0.0 && self.limits.a_max > 0.0) {
            return Err(inv("limits must be positive".into()));
        }
        if self.planner.v_max > self.limits.v_max {
            return Err(inv(format!(
                "planner terminal speed {} exceeds the speed limit {}",
                self.planner.v_max, self.limits.v_max
            )));
        }
        let c = &self.controller;
        if [c.kp, c.kd, c.kyaw, c.a_cmd_max, c.yaw_rate_max]
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(inv("controller gains and limits must be positive".into()));
        }
        for (name, v) in [
            ("d_safe", self.d_safe),
            ("max_duration", self.max_duration),
            ("teacher_timeout", self.teacher_timeout),
            ("settle_timeout", self.settle_timeout),
            ("blocked_timeout", self.blocked_timeout),
            ("follow_tail", self.follow_tail),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(inv(format!("{name} must be positive, got {v}")));
            }
        }
        if self.follow_teacher_radius() <= 0.0 {
            return Err(inv(format!(
                "d_safe {} leaves no room for the teacher sphere beyond r_agent + d_margin",
                self.d_safe
            )));
        }
        if !(self.t_inspect_hold.is_finite() && self.t_inspect_hold >= 0.0) {
            return Err(inv(format!(
                "t_inspect_hold must be non-negative, got {}",
                self.t_inspect_hold
            )));
        }
        for s in &self.spheres {
            SafetySphere::new(s.owner_id, s.center, s.radius).map_err(|e| inv(e.to_string()))?;
        }
        if self.frame_id.is_empty() || self.frame_id.chars().any(char::is_whitespace) {
            return Err(inv(format!(
                "frame_id must be a non-empty word, got {:?}",
                self.frame_id
            )));
        }
        Ok(())
    }

    /// Teacher sphere radius used for the estop check in live mode, small
    /// enough that holding at `d_safe` does not trip it.
    pub fn follow_teacher_radius(&self) -> f64 {
        self.safety
            .r_teacher
            .min(self.d_safe - self.safety.r_agent - self.safety.d_margin)
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise
            .seed
            .unwrap_or_else(|| splitmix64_mix(self.seed.wrapping_add(1)))
    }

    pub fn link_seed(&self) -> u64 {
        self.link
            .seed
            .unwrap_or_else(|| splitmix64_mix(self.seed.wrapping_add(2)))
    }

    /// Noise parameters with the effective seed filled in.
    pub fn effective_noise(&self) -> NoiseParams {
        NoiseParams {
            seed: Some(self.noise_seed()),
            ..self.noise
        }
    }

    pub fn effective_link(&self) -> LinkParams {
        LinkParams {
            seed: Some(self.link_seed()),
            ..self.link
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        fingerprint(self.canonical_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = MissionConfig::from_json("{}").unwrap();
        assert_eq!(c, MissionConfig::default());
        assert_eq!(c.t_inspect_hold, 2.0);
        assert_eq!(c.d_safe, 2.5);
        assert_eq!(c.teach.t_dwell, 2.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            MissionConfig::from_json(r#"{"sed": 3}"#),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            MissionConfig::from_json(r#"{"teach": {"d_kf": 0.3, "bogus": 1}}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            r#"{"teach": {"d_kf": -1}}"#,
            r#"{"limits": {"v_max": 3.0}}"#,
            r#"{"link": {"drop_prob": 1.5}}"#,
            r#"{"d_safe": 0}"#,
            r#"{"spheres": [{"owner_id": 1, "center": [0,0,0], "radius": 0}]}"#,
        ] {
            assert!(
                matches!(MissionConfig::from_json(bad), Err(ConfigError::Invalid(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn derived_seeds_and_digest() {
        let a = MissionConfig::from_json(r#"{"seed": 5}"#).unwrap();
        let b = MissionConfig::from_json(r#"{"seed": 6}"#).unwrap();
        assert_ne!(a.noise_seed(), b.noise_seed());
        assert_ne!(a.noise_seed(), a.link_seed());
        let pinned = MissionConfig::from_json(r#"{"seed": 5, "noise": {"seed": 9}}"#).unwrap();
        assert_eq!(pinned.noise_seed(), 9);
        assert_ne!(a.digest(), b.digest());
        let round: MissionConfig = serde_json::from_str(&a.canonical_json()).unwrap();
        assert_eq!(round.digest(), a.digest());
    }

    #[test]
    fn moving_sphere_position() {
        let s: SphereSpec =
            serde_json::from_str(r#"{"owner_id": 3, "center": [1, 0, 0], "radius": 0.5, "velocity": [0, 2, 0]}"#)
                .unwrap();
        let at = s.at(Timestamp::from_secs(1.5));
        assert_eq!(at.center, Vec3::new(1.0, 3.0, 0.0));
    }
}
