pub mod digest;
pub mod geometry;
pub mod orchestrator;
pub mod planner;
pub mod protocol;
pub mod rng;
pub mod safety;
pub mod simulator;
pub mod teach;
pub mod trajopt;
