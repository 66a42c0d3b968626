//! Scripted scenarios shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use tnr_core::geometry::{Pose6DoF, Timestamp, Vec3};
use tnr_core::rng::CounterRng;
use tnr_core::teach::{teach_from_poses, TeachParams, TeachSession};

/// 20 Hz teacher stream.
pub const TEACH_PERIOD_NS: u64 = 50_000_000;

/// Builds a 20 Hz stream walking `legs` at `speed`, dwelling `dwell_s` at every
/// point listed in `dwell_at` (indices into the leg endpoints).
pub struct Script {
    pub poses: Vec<Pose6DoF>,
    t: u64,
    pos: Vec3,
    yaw: f64,
}

impl Script {
    pub fn new(start: Vec3, yaw: f64) -> Self {
        let mut s = Script {
            poses: Vec::new(),
            t: 0,
            pos: start,
            yaw,
        };
        s.emit();
        s
    }

    fn emit(&mut self) {
        self.poses
            .push(Pose6DoF::from_yaw(Timestamp(self.t), self.pos, self.yaw));
        self.t += TEACH_PERIOD_NS;
    }

    pub fn walk_to(&mut self, goal: Vec3, speed: f64) -> &mut Self {
        let d = goal - self.pos;
        if d.x != 0.0 || d.y != 0.0 {
            self.yaw = d.y.atan2(d.x);
        }
        let steps = (d.norm() / (speed * TEACH_PERIOD_NS as f64 * 1e-9)).ceil().max(1.0) as usize;
        let from = self.pos;
        for k in 1..=steps {
            self.pos = from + d * (k as f64 / steps as f64);
            self.emit();
        }
        self
    }

    pub fn turn_to(&mut self, yaw: f64) -> &mut Self {
        self.yaw = yaw;
        self.emit();
        self
    }

    pub fn dwell(&mut self, secs: f64) -> &mut Self {
        let n = (secs / (TEACH_PERIOD_NS as f64 * 1e-9)).round() as usize;
        for _ in 0..n {
            self.emit();
        }
        self
    }
}

/// Desk-scale inspection round: about 20 m with five dwell points, the last
/// one at the end of the path.
pub fn inspection_round() -> Vec<Pose6DoF> {
    let mut s = Script::new(Vec3::new(0.0, 0.0, 1.0), 0.0);
    s.walk_to(Vec3::new(3.0, 0.0, 1.0), 0.5)
        .turn_to(1.2)
        .dwell(2.5)
        .walk_to(Vec3::new(6.0, 0.0, 1.0), 0.5)
        .walk_to(Vec3::new(6.0, 2.0, 1.4), 0.5)
        .turn_to(0.0)
        .dwell(2.5)
        .walk_to(Vec3::new(6.0, 4.0, 1.5), 0.5)
        .walk_to(Vec3::new(3.0, 4.0, 1.5), 0.5)
        .turn_to(-1.5)
        .dwell(2.5)
        .walk_to(Vec3::new(0.5, 4.0, 1.2), 0.5)
        .turn_to(2.5)
        .dwell(2.5)
        .walk_to(Vec3::new(0.5, 7.0, 1.0), 0.5)
        .dwell(2.5);
    s.poses
}

pub fn inspection_session() -> TeachSession {
    teach_from_poses(&inspection_round(), TeachParams::default(), "world")
        .unwrap()
        .0
}

/// Random walk of `legs` straight legs with occasional dwells, starting at
/// the origin; every stream ends with a dwell.
pub fn random_stream(seed: u64, legs: usize) -> Vec<Pose6DoF> {
    let mut rng = CounterRng::new(seed);
    let mut s = Script::new(Vec3::new(0.0, 0.0, 1.0), 0.0);
    let mut heading: f64 = 0.0;
    let mut p = Vec3::new(0.0, 0.0, 1.0);
    for _ in 0..legs {
        heading += (rng.next_f64() - 0.5) * 2.0;
        let len = 1.0 + 3.0 * rng.next_f64();
        let dz = (rng.next_f64() - 0.5) * 0.6;
        p += Vec3::new(len * heading.cos(), len * heading.sin(), dz);
        p.z = p.z.clamp(0.5, 2.5);
        let speed = 0.3 + 0.5 * rng.next_f64();
        s.walk_to(p, speed);
        if rng.next_f64() < 0.3 {
            s.dwell(2.3);
        }
    }
    s.dwell(2.3);
    s.poses
}
