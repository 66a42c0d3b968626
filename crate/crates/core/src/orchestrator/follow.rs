//! Live mode: follow the freshest teacher pose received over the link while
//! keeping `d_safe` away from it.

use crate::geometry::{Pose6DoF, Timestamp, Vec3, Waypoint, WaypointKind};
use crate::protocol::{encode, Datagram, LinkSim, ReceiveStats, Receiver, SenderId, WireMessage};
use crate::safety::{check_estop, truncate_sequence, SafetySphere, Truncation};
use crate::simulator::{track_reference, LogRecord, Mode, PlantParams, Vehicle, VehicleState, STOPPED_SPEED};
use crate::trajopt::{plan, FlatState, PolyTrajectory, TrajoptError};

use super::config::MissionConfig;
use super::metrics::HOLD_SPEED;
use super::repeat::{condense_sequence, MissionEvent, AGENT_ID, LEAD_TIME, PLANNER_PERIOD_TICKS};
use super::MissionError;
use crate::planner::WaypointSequence;

/// Link sender id of the teacher.
pub const TEACHER_SENDER: SenderId = 1;
/// Sphere owner id of the teacher.
const TEACHER_OWNER: u32 = 1;
/// Goals closer than this to the reference are not worth a new trajectory, meters.
const MIN_GOAL_STEP: f64 = 0.02;
/// Spacing of the intermediate points on an approach, meters.
const APPROACH_SPACING: f64 = 0.5;
const ESTOP_TAIL_TICKS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
struct TeacherFix {
    position: Vec3,
    received: Timestamp,
}

#[derive(Debug, Clone)]
struct Motion {
    traj: PolyTrajectory,
    braking: bool,
}

/// Finished live-mode run.
#[derive(Debug, Clone)]
pub struct FollowRun {
    pub log: Vec<LogRecord>,
    pub events: Vec<MissionEvent>,
    pub link: ReceiveStats,
    pub outcome: Result<(), MissionError>,
}

/// Stepwise live-mode mission. Teacher poses enter through
/// [`FollowMission::push_teacher_pose`] and reach the agent via the simulated link.
#[derive(Debug, Clone)]
pub struct FollowMission {
    config: MissionConfig,
    vehicle: Vehicle,
    link: LinkSim,
    receiver: Receiver,
    send_seq: u32,
    teacher: Option<TeacherFix>,
    motion: Option<Motion>,
    hold_ref: FlatState,
    warned: bool,
    start_time: Timestamp,
    ticks: u64,
    seq_counter: u32,
    estop_ticks: Option<u64>,
    finished: bool,
    error: Option<MissionError>,
    log: Vec<LogRecord>,
    events: Vec<MissionEvent>,
}

impl FollowMission {
    pub fn new(config: MissionConfig, initial: VehicleState) -> Result<Self, MissionError> {
        config.validate()?;
        let mut vehicle = Vehicle::new(
            initial,
            PlantParams::from_limits(config.limits.v_max, config.limits.a_max),
            config.controller,
            config.effective_noise(),
        );
        vehicle.set_mode(Mode::Following)?;
        Ok(FollowMission {
            link: LinkSim::new(config.effective_link()),
            config,
            vehicle,
            receiver: Receiver::new(),
            send_seq: 0,
            teacher: None,
            motion: None,
            hold_ref: FlatState::at_rest(initial.position, initial.yaw),
            warned: false,
            start_time: initial.t,
            ticks: 0,
            seq_counter: 0,
            estop_ticks: None,
            finished: false,
            error: None,
            log: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn vehicle(&self) -> &VehicleState {
        self.vehicle.state()
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn events(&self) -> &[MissionEvent] {
        &self.events
    }

    pub fn error(&self) -> Option<&MissionError> {
        self.error.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn receive_stats(&self) -> ReceiveStats {
        self.receiver.stats()
    }

    /// Freshest teacher position accepted by the agent.
    pub fn teacher_position(&self) -> Option<Vec3> {
        self.teacher.map(|f| f.position)
    }

    pub fn active_trajectory(&self) -> Option<&PolyTrajectory> {
        self.motion.as_ref().map(|m| &m.traj)
    }

    /// Sends one teacher pose over the link at the current time.
    pub fn push_teacher_pose(&mut self, pose: &Pose6DoF) {
        let msg = WireMessage::TeacherPose {
            seq: self.send_seq,
            t: pose.t,
            position: pose.position,
            orientation: pose.orientation,
        };
        self.send_seq = self.send_seq.wrapping_add(1);
        let now = self.vehicle.state().t;
        self.link.push(
            now,
            Datagram {
                sender: TEACHER_SENDER,
                bytes: encode(&msg),
            },
        );
    }

    pub fn emergency_stop(&mut self) {
        if !self.finished && self.estop_ticks.is_none() {
            let t = self.vehicle.state().t;
            self.vehicle.emergency_stop();
            self.events.push(MissionEvent::Estop { t });
            self.estop_ticks = Some(0);
        }
    }

    /// Ends the run with the agent in its final mode.
    pub fn finish(&mut self) {
        if self.finished {
            return;
        }
        if self.estop_ticks.is_some() {
            self.error = Some(MissionError::Estopped);
        } else if self.vehicle.set_mode(Mode::Done).is_ok() {
            self.events.push(MissionEvent::Completed {
                t: self.vehicle.state().t,
            });
        }
        self.finished = true;
    }

    fn teacher_sphere(&self) -> Option<SafetySphere> {
        self.teacher.map(|f| SafetySphere {
            owner_id: TEACHER_OWNER,
            center: f.position,
            radius: self.config.follow_teacher_radius(),
        })
    }

    fn reference(&self, now: Timestamp) -> FlatState {
        match &self.motion {
            Some(m) => {
                let tau = if now <= m.traj.t0() {
                    0.0
                } else {
                    now.secs_since(m.traj.t0())
                };
                m.traj.sample_local(tau)
            }
            None => self.hold_ref,
        }
    }

    /// Advances one physics tick. Returns false once the run is over.
    pub fn tick(&mut self) -> bool {
        if self.finished {
            return false;
        }
        let now = self.vehicle.state().t;
        if now.secs_since(self.start_time) > self.config.max_duration && self.estop_ticks.is_none() {
            self.error = Some(MissionError::Timeout {
                seconds: self.config.max_duration,
            });
            self.finished = true;
            return false;
        }

        for d in self.link.pull(now) {
            match self.receiver.receive(&d) {
                Some(WireMessage::TeacherPose { position, .. }) => {
                    self.teacher = Some(TeacherFix {
                        position,
                        received: now,
                    });
                    self.warned = false;
                }
                Some(WireMessage::Estop { .. }) => self.emergency_stop(),
                _ => {}
            }
        }

        if self.estop_ticks.is_none() {
            let own = SafetySphere {
                owner_id: AGENT_ID,
                center: self.vehicle.state().position,
                radius: self.config.safety.r_agent,
            };
            let mut others: Vec<SafetySphere> = self.config.spheres.iter().map(|s| s.at(now)).collect();
            others.extend(self.teacher_sphere());
            if check_estop(&own, &others) {
                self.emergency_stop();
            }
        }

        if let Some(stopped) = self.estop_ticks {
            let stopped = if self.vehicle.state().speed() < STOPPED_SPEED {
                stopped + 1
            } else {
                0
            };
            self.estop_ticks = Some(stopped);
            if stopped >= ESTOP_TAIL_TICKS {
                self.error = Some(MissionError::Estopped);
                self.finished = true;
                return false;
            }
        } else if self.ticks.is_multiple_of(PLANNER_PERIOD_TICKS) {
            if let Err(e) = self.plan(now) {
                log::warn!("follow aborted: {e}");
                self.error = Some(e);
                self.finished = true;
                return false;
            }
        }

        let reference = self.reference(now);
        let estimate = self.vehicle.localize();
        let est_yaw = crate::geometry::yaw_from_quaternion(&estimate.orientation).unwrap_or(self.vehicle.state().yaw);
        let cmd = track_reference(
            &reference,
            &estimate.position,
            &self.vehicle.state().velocity,
            est_yaw,
            self.vehicle.gains(),
        );
        self.vehicle.step(&cmd);
        self.ticks += 1;
        self.log
            .push(LogRecord::from_state(self.vehicle.state(), self.seq_counter));
        true
    }

    fn plan(&mut self, now: Timestamp) -> Result<(), MissionError> {
        let reference = self.reference(now);
        let fresh = self
            .teacher
            .filter(|f| now.secs_since(f.received) <= self.config.teacher_timeout);
        let Some(fix) = fresh else {
            if !self.warned && now.secs_since(self.start_time) > self.config.teacher_timeout {
                self.warned = true;
                self.events.push(MissionEvent::Warning {
                    t: now,
                    message: format!("no teacher pose for {} s, holding", self.config.teacher_timeout),
                });
            }
            return self.hold(now, &reference);
        };

        let offset = reference.position - fix.position;
        let dist = offset.norm();
        if dist <= self.config.d_safe || dist == 0.0 {
            return self.hold(now, &reference);
        }
        let goal = fix.position + offset * (self.config.d_safe / dist);
        if (goal - reference.position).norm() < MIN_GOAL_STEP {
            return self.hold(now, &reference);
        }
        let facing = (-offset.y).atan2(-offset.x);
        // evenly spaced points let the speed profile shape a long approach
        let run = goal - reference.position;
        let pieces = (run.norm() / APPROACH_SPACING).ceil().max(1.0) as usize;
        let mut waypoints = vec![Waypoint::new(reference.position, reference.yaw, WaypointKind::Normal)];
        waypoints.extend((1..=pieces).map(|k| {
            Waypoint::new(
                reference.position + run * (k as f64 / pieces as f64),
                facing,
                WaypointKind::Normal,
            )
        }));
        let seq = WaypointSequence {
            ids: vec![0; waypoints.len()],
            waypoints,
            terminal_speed: 0.0,
            end_kind: WaypointKind::Normal,
            start_id: 0,
            end_id: 0,
            truncated: false,
        };
        let seq = condense_sequence(&seq, reference.velocity.norm() * LEAD_TIME);
        let spheres: Vec<SafetySphere> = self.config.spheres.iter().map(|s| s.at(now)).collect();
        let seq = match truncate_sequence(&seq, &spheres, &self.config.safety) {
            Truncation::Unchanged(s) => s,
            Truncation::Truncated(s) if s.len() >= 2 => s,
            _ => return self.hold(now, &reference),
        };
        let traj = match plan(&seq.waypoints, &reference, 0.0, &self.config.limits) {
            Ok(t) => t.with_start_time(now),
            Err(TrajoptError::Infeasible { .. }) => {
                self.events.push(MissionEvent::Warning {
                    t: now,
                    message: "approach infeasible from the current state, holding".into(),
                });
                return self.hold(now, &reference);
            }
            Err(e) => return Err(e.into()),
        };
        self.seq_counter += 1;
        self.events.push(MissionEvent::Optimized {
            t: now,
            seq_no: self.seq_counter,
            duration: traj.duration(),
            waypoints: seq.len(),
            terminal_speed: 0.0,
        });
        self.motion = Some(Motion { traj, braking: false });
        Ok(())
    }

    /// Comes to rest: brakes along the reference velocity when moving.
    fn hold(&mut self, now: Timestamp, reference: &FlatState) -> Result<(), MissionError> {
        if self.motion.as_ref().is_some_and(|m| m.braking) {
            return Ok(());
        }
        let v = reference.velocity;
        let speed = v.norm();
        if speed < HOLD_SPEED {
            self.hold_ref = FlatState::at_rest(reference.position, reference.yaw);
            self.motion = None;
            return Ok(());
        }
        let stop = reference.position + v * speed / (2.0 * self.config.limits.a_max);
        let wps = [
            Waypoint::new(reference.position, reference.yaw, WaypointKind::Normal),
            Waypoint::new(stop, reference.yaw, WaypointKind::Normal),
        ];
        let Ok(traj) = plan(&wps, reference, 0.0, &self.config.limits) else {
            // leave the stop to the tracking controller
            self.hold_ref = FlatState::at_rest(stop, reference.yaw);
            self.motion = None;
            return Ok(());
        };
        self.seq_counter += 1;
        self.motion = Some(Motion {
            traj: traj.with_start_time(now),
            braking: true,
        });
        Ok(())
    }

    pub fn into_run(self) -> FollowRun {
        FollowRun {
            link: self.receiver.stats(),
            log: self.log,
            events: self.events,
            outcome: match self.error {
                Some(e) => Err(e),
                None => Ok(()),
            },
        }
    }
}

/// Streams `poses` to the agent in real time through the configured link and
/// runs until `follow_tail` seconds after the last pose. Without a configured
/// start the agent spawns `d_safe` behind the first pose along -x.
pub fn run_follow(poses: &[Pose6DoF], config: &MissionConfig) -> Result<FollowRun, MissionError> {
    let first = poses.first().ok_or(MissionError::EmptySession)?;
    let (p, yaw) = match config.start {
        Some(s) => (s.position, s.yaw),
        None => (first.position - Vec3::x() * config.d_safe, 0.0),
    };
    let start_time = Timestamp(
        first
            .t
            .nanos()
            .saturating_sub(first.t.nanos() % crate::simulator::TICK_NS),
    );
    let mut mission = FollowMission::new(config.clone(), VehicleState::at_rest(start_time, p, yaw))?;
    let end = poses.last().expect("non-empty").t.add_secs(config.follow_tail);
    let mut next = 0;
    loop {
        let now = mission.vehicle().t;
        while next < poses.len() && poses[next].t <= now {
            mission.push_teacher_pose(&poses[next]);
            next += 1;
        }
        if now >= end {
            mission.finish();
            break;
        }
        if !mission.tick() {
            break;
        }
    }
    Ok(mission.into_run())
}
