//! Mission execution: repeat and live-follow runs, metrics, file formats and
//! the console bridge.

mod bridge;
mod config;
mod follow;
mod metrics;
mod posefile;
mod repeat;

use thiserror::Error;

use crate::planner::PlannerError;
use crate::simulator::SimError;
use crate::trajopt::TrajoptError;

pub use bridge::{serve_bridge, BridgeError, BridgeServer, BridgeSession, Inbound, ShutdownFlag, STATE_PERIOD_TICKS};
pub use config::{ConfigError, MissionConfig, SphereSpec, StartPose};
pub use follow::{run_follow, FollowMission, FollowRun, TEACHER_SENDER};
pub use metrics::{compute_metrics, cross_track, InspectionReport, MissionReport, SphereReport, HOLD_SPEED};
pub use posefile::{format_poses, load_poses, parse_poses, PoseFileError};
pub use repeat::{
    anchor_sequence, condense_sequence, run_repeat, MissionEvent, MissionRun, RepeatMission, SafetyOutcome, AGENT_ID,
    LEAD_TIME, PLANNER_PERIOD_TICKS, PREPEND_TOLERANCE, REPLAN_HORIZON, YAW_SETTLE,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MissionError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Trajopt(#[from] TrajoptError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("session has no keyframes")]
    EmptySession,
    #[error("mission exceeded {seconds} s of simulated time")]
    Timeout { seconds: f64 },
    #[error("emergency stop")]
    Estopped,
    #[error("path blocked by a safety sphere for {seconds} s")]
    Blocked { seconds: f64 },
}

impl From<ConfigError> for MissionError {
    fn from(e: ConfigError) -> Self {
        MissionError::Config(e.to_string())
    }
}
