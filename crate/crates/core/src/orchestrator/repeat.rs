//! Teach-and-repeat execution: plan at 5 Hz, track at 100 Hz, stop and hold
//! at inspection points.

use serde::Serialize;

use crate::geometry::{angular_distance_unchecked, yaw_from_quaternion, Timestamp, Waypoint, WaypointKind};
use crate::planner::{advance_cursor, select_sequence, Cursor, Selection, WaypointSequence};
use crate::safety::{check_estop, truncate_sequence, SafetySphere, Truncation};
use crate::simulator::{track_reference, LogRecord, Mode, PlantParams, Vehicle, VehicleState};
use crate::teach::{KeyframeId, TeachSession};
use crate::trajopt::{plan, FlatState, PolyTrajectory, TrajoptError};

use super::config::MissionConfig;
use super::metrics::{compute_metrics, MissionReport, HOLD_SPEED};
use super::MissionError;

/// Physics ticks per planner tick.
pub const PLANNER_PERIOD_TICKS: u64 = 20;
/// Trajectories that end in motion are extended once less than this remains, seconds.
pub const REPLAN_HORIZON: f64 = 1.0;
/// Travel time ahead of a moving start within which waypoints are skipped, seconds.
pub const LEAD_TIME: f64 = 0.2;
/// A first waypoint this close to the reference is replaced rather than prepended, meters.
pub const PREPEND_TOLERANCE: f64 = 0.05;
/// Heading tolerance before an inspection hold starts, radians.
pub const YAW_SETTLE: f64 = 5.0 * std::f64::consts::PI / 180.0;
/// Sphere owner id of the agent itself.
pub const AGENT_ID: u32 = 0;
/// Ticks simulated after an estop once the vehicle has stopped.
const ESTOP_TAIL_TICKS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SafetyOutcome {
    Unchanged,
    Truncated { end_id: KeyframeId },
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MissionEvent {
    SequenceSelected {
        t: Timestamp,
        seq_no: u32,
        start_id: KeyframeId,
        end_id: KeyframeId,
        terminal_speed: f64,
        end_kind: WaypointKind,
    },
    SafetyChecked {
        t: Timestamp,
        seq_no: u32,
        result: SafetyOutcome,
    },
    Optimized {
        t: Timestamp,
        seq_no: u32,
        duration: f64,
        waypoints: usize,
        terminal_speed: f64,
    },
    InspectionReached {
        t: Timestamp,
        id: KeyframeId,
    },
    InspectionComplete {
        t: Timestamp,
        id: KeyframeId,
    },
    SafetyHold {
        t: Timestamp,
    },
    Estop {
        t: Timestamp,
    },
    Completed {
        t: Timestamp,
    },
    Warning {
        t: Timestamp,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Travel,
    Settle { id: KeyframeId, since: Timestamp },
    Inspect { id: KeyframeId, until: Timestamp },
    SafetyHold { since: Timestamp },
    Estopped { stopped_ticks: u64 },
    Finished,
}

#[derive(Debug, Clone)]
struct Active {
    seq: WaypointSequence,
    traj: PolyTrajectory,
    seq_no: u32,
    /// Cursor before this sequence was selected.
    committed: Cursor,
    /// Braking trajectory of a safety hold.
    braking: bool,
}

impl Active {
    fn remaining(&self, now: Timestamp) -> f64 {
        if now >= self.traj.end_time() {
            0.0
        } else {
            self.traj.end_time().secs_since(now)
        }
    }

    fn tau(&self, now: Timestamp) -> f64 {
        if now <= self.traj.t0() {
            0.0
        } else {
            now.secs_since(self.traj.t0())
        }
    }
}

/// Result of a finished (or aborted) mission run.
#[derive(Debug, Clone)]
pub struct MissionRun {
    pub log: Vec<LogRecord>,
    pub events: Vec<MissionEvent>,
    pub report: MissionReport,
    pub outcome: Result<(), MissionError>,
}

/// Waypoints starting exactly at `reference`: the first keyframe is replaced
/// when close, otherwise the reference is prepended.
pub fn anchor_sequence(seq: &WaypointSequence, reference: &FlatState) -> WaypointSequence {
    let mut out = seq.clone();
    let anchor = Waypoint::new(reference.position, reference.yaw, WaypointKind::Normal);
    if (seq.waypoints[0].position - reference.position).norm() <= PREPEND_TOLERANCE {
        out.waypoints[0] = anchor;
    } else {
        out.waypoints.insert(0, anchor);
        out.ids.insert(0, seq.ids[0]);
    }
    out
}

/// Drops interior waypoints closer than [`PREPEND_TOLERANCE`] to the next kept
/// one, so near-duplicate keyframes do not force a reversal, and those within
/// `lead` of the first waypoint, which a moving start would pass too soon to
/// shape. The first and last waypoints always stay.
pub fn condense_sequence(seq: &WaypointSequence, lead: f64) -> WaypointSequence {
    let n = seq.len();
    if n <= 2 {
        return seq.clone();
    }
    let mut keep = vec![n - 1];
    for i in (1..n - 1).rev() {
        let next = &seq.waypoints[*keep.last().expect("non-empty")];
        if (seq.waypoints[i].position - next.position).norm() >= PREPEND_TOLERANCE {
            keep.push(i);
        }
    }
    let lead = lead.max(PREPEND_TOLERANCE);
    while let [_, .., second] = keep[..] {
        if (seq.waypoints[0].position - seq.waypoints[second].position).norm() >= lead {
            break;
        }
        keep.pop();
    }
    keep.push(0);
    keep.reverse();
    let mut out = seq.clone();
    out.waypoints = keep.iter().map(|&i| seq.waypoints[i]).collect();
    out.ids = keep.iter().map(|&i| seq.ids[i]).collect();
    out
}

/// Stepwise repeat mission over one session.
#[derive(Debug, Clone)]
pub struct RepeatMission {
    session: TeachSession,
    config: MissionConfig,
    vehicle: Vehicle,
    cursor: Cursor,
    phase: Phase,
    active: Option<Active>,
    hold_ref: FlatState,
    seq_counter: u32,
    ticks: u64,
    start_time: Timestamp,
    log: Vec<LogRecord>,
    events: Vec<MissionEvent>,
    error: Option<MissionError>,
    extra_spheres: Vec<SafetySphere>,
}

impl RepeatMission {
    /// Starts at `config.start`, or at the first keyframe when unset.
    pub fn new(session: TeachSession, config: MissionConfig, start_time: Timestamp) -> Result<Self, MissionError> {
        config.validate()?;
        let first = session.keyframes().first().ok_or(MissionError::EmptySession)?;
        let (p, yaw) = match config.start {
            Some(s) => (s.position, s.yaw),
            None => (first.waypoint.position, first.waypoint.yaw),
        };
        let initial = VehicleState::at_rest(start_time, p, yaw);
        Self::with_vehicle_state(session, config, initial)
    }

    /// Starts from an existing vehicle state, which must be idle.
    pub fn with_vehicle_state(
        session: TeachSession,
        config: MissionConfig,
        initial: VehicleState,
    ) -> Result<Self, MissionError> {
        config.validate()?;
        if session.keyframes().is_empty() {
            return Err(MissionError::EmptySession);
        }
        let mut vehicle = Vehicle::new(
            initial,
            PlantParams::from_limits(config.limits.v_max, config.limits.a_max),
            config.controller,
            config.effective_noise(),
        );
        vehicle.set_mode(Mode::Executing)?;
        Ok(RepeatMission {
            session,
            hold_ref: FlatState::at_rest(initial.position, initial.yaw),
            config,
            vehicle,
            cursor: Cursor::default(),
            phase: Phase::Travel,
            active: None,
            seq_counter: 0,
            ticks: 0,
            start_time: initial.t,
            log: Vec::new(),
            events: Vec::new(),
            error: None,
            extra_spheres: Vec::new(),
        })
    }

    pub fn session(&self) -> &TeachSession {
        &self.session
    }

    pub fn config(&self) -> &MissionConfig {
        &self.config
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
        self.phase == Phase::Finished
    }

    pub fn active_trajectory(&self) -> Option<&PolyTrajectory> {
        self.active.as_ref().map(|a| &a.traj)
    }

    /// Spheres supplied by the caller each tick (teacher, other agents).
    pub fn set_extra_spheres(&mut self, spheres: Vec<SafetySphere>) {
        self.extra_spheres = spheres;
    }

    /// Operator estop, applied on the next tick.
    pub fn emergency_stop(&mut self) {
        if !matches!(self.phase, Phase::Finished | Phase::Estopped { .. }) {
            self.trigger_estop(self.vehicle.state().t);
        }
    }

    fn spheres_at(&self, t: Timestamp) -> Vec<SafetySphere> {
        self.config
            .spheres
            .iter()
            .map(|s| s.at(t))
            .chain(self.extra_spheres.iter().copied())
            .collect()
    }

    fn reference(&self, now: Timestamp) -> FlatState {
        match &self.active {
            Some(a) => a.traj.sample_local(a.tau(now)),
            None => self.hold_ref,
        }
    }

    fn trigger_estop(&mut self, t: Timestamp) {
        self.vehicle.emergency_stop();
        self.events.push(MissionEvent::Estop { t });
        self.phase = Phase::Estopped { stopped_ticks: 0 };
    }

    fn finish(&mut self, t: Timestamp) {
        if self.vehicle.set_mode(Mode::Done).is_ok() {
            self.events.push(MissionEvent::Completed { t });
        }
        self.phase = Phase::Finished;
    }

    fn abort(&mut self, err: MissionError) {
        log::warn!("mission aborted: {err}");
        self.error = Some(err);
        self.phase = Phase::Finished;
    }

    /// Advances one physics tick. Returns false once the mission is over.
    pub fn tick(&mut self) -> bool {
        if self.phase == Phase::Finished {
            return false;
        }
        let now = self.vehicle.state().t;
        if now.secs_since(self.start_time) > self.config.max_duration && !matches!(self.phase, Phase::Estopped { .. }) {
            self.abort(MissionError::Timeout {
                seconds: self.config.max_duration,
            });
            return false;
        }

        if !matches!(self.phase, Phase::Estopped { .. }) {
            let own = SafetySphere {
                owner_id: AGENT_ID,
                center: self.vehicle.state().position,
                radius: self.config.safety.r_agent,
            };
            if check_estop(&own, &self.spheres_at(now)) {
                self.trigger_estop(now);
            }
        }

        if let Err(e) = self.update_phase(now) {
            self.abort(e);
            return false;
        }
        // a completed mission still logs its final tick, in mode done
        let finished = self.phase == Phase::Finished;
        if finished && self.error.is_some() {
            return false;
        }

        let reference = self.reference(now);
        let estimate = self.vehicle.localize();
        let est_yaw = yaw_from_quaternion(&estimate.orientation).unwrap_or(self.vehicle.state().yaw);
        let cmd = track_reference(
            &reference,
            &estimate.position,
            &self.vehicle.state().velocity,
            est_yaw,
            self.vehicle.gains(),
        );
        self.vehicle.step(&cmd);
        self.ticks += 1;
        let seq_id = self.active.as_ref().map_or(0, |a| a.seq_no);
        self.log.push(LogRecord::from_state(self.vehicle.state(), seq_id));
        !finished
    }

    fn planner_due(&self) -> bool {
        self.ticks.is_multiple_of(PLANNER_PERIOD_TICKS)
    }

    fn update_phase(&mut self, now: Timestamp) -> Result<(), MissionError> {
        let speed = self.vehicle.state().speed();
        match self.phase {
            Phase::Finished => {}
            Phase::Estopped { stopped_ticks } => {
                let stopped = if speed == 0.0 { stopped_ticks + 1 } else { 0 };
                if stopped >= ESTOP_TAIL_TICKS {
                    self.phase = Phase::Finished;
                    self.error = Some(MissionError::Estopped);
                } else {
                    self.phase = Phase::Estopped { stopped_ticks: stopped };
                }
            }
            Phase::Travel => {
                let arrived = self.active.as_ref().and_then(|a| {
                    (a.seq.terminal_speed == 0.0 && now >= a.traj.end_time()).then_some((a.seq.clone(), a.braking))
                });
                match arrived {
                    Some((seq, braking)) if braking || seq.truncated => {
                        self.enter_hold(now);
                    }
                    Some((seq, _)) => match seq.end_kind {
                        WaypointKind::Inspection => {
                            self.phase = Phase::Settle {
                                id: seq.end_id,
                                since: now,
                            };
                        }
                        WaypointKind::TrajectoryEnd => {
                            if speed < HOLD_SPEED {
                                self.finish(now);
                            }
                        }
                        WaypointKind::Normal => {
                            // stopped short on a normal keyframe after a fallback
                            self.hold_ref = self.reference(now);
                            self.active = None;
                            self.plan_travel(now)?;
                        }
                    },
                    None => {
                        let exhausted = self.active.as_ref().is_some_and(|a| a.remaining(now) == 0.0);
                        if self.planner_due() || self.active.is_none() || exhausted {
                            self.plan_travel(now)?;
                        }
                    }
                }
            }
            Phase::Settle { id, since } => {
                let kf_yaw = self.session.keyframe(id).map_or(0.0, |k| k.waypoint.yaw);
                let yaw_err = angular_distance_unchecked(self.vehicle.state().yaw, kf_yaw);
                let settled = speed < HOLD_SPEED && yaw_err < YAW_SETTLE;
                let timed_out = now.secs_since(since) > self.config.settle_timeout;
                if settled || timed_out {
                    if timed_out && !settled {
                        self.events.push(MissionEvent::Warning {
                            t: now,
                            message: format!("inspection {id}: did not settle, holding anyway"),
                        });
                    }
                    self.events.push(MissionEvent::InspectionReached { t: now, id });
                    self.phase = Phase::Inspect {
                        id,
                        until: now.add_secs(self.config.t_inspect_hold),
                    };
                }
            }
            Phase::Inspect { id, until } => {
                if now >= until {
                    self.events.push(MissionEvent::InspectionComplete { t: now, id });
                    self.cursor = advance_cursor(&self.session, self.cursor, id)?;
                    self.hold_ref = self.reference(now);
                    self.active = None;
                    self.phase = Phase::Travel;
                    self.plan_travel(now)?;
                }
            }
            Phase::SafetyHold { since } => {
                let braking = self
                    .active
                    .as_ref()
                    .is_some_and(|a| a.braking && a.remaining(now) > 0.0);
                if !braking && self.planner_due() {
                    if self.active.is_some() {
                        self.hold_ref = self.reference(now);
                        self.active = None;
                    }
                    self.phase = Phase::Travel;
                    self.plan_travel(now)?;
                    if matches!(self.phase, Phase::SafetyHold { .. }) {
                        self.phase = Phase::SafetyHold { since };
                        if now.secs_since(since) > self.config.blocked_timeout {
                            return Err(MissionError::Blocked {
                                seconds: self.config.blocked_timeout,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn enter_hold(&mut self, now: Timestamp) {
        let reference = self.reference(now);
        self.hold_ref = FlatState::at_rest(reference.position, reference.yaw);
        self.active = None;
        self.phase = Phase::SafetyHold { since: now };
        self.events.push(MissionEvent::SafetyHold { t: now });
    }

    /// Brakes along the current reference velocity, then holds.
    fn brake_and_hold(&mut self, now: Timestamp, committed: Cursor) -> Result<(), MissionError> {
        let reference = self.reference(now);
        let v = reference.velocity;
        let speed = v.norm();
        self.events.push(MissionEvent::SafetyHold { t: now });
        if speed < HOLD_SPEED {
            self.hold_ref = FlatState::at_rest(reference.position, reference.yaw);
            self.active = None;
        } else {
            let stop = reference.position + v * speed / (2.0 * self.config.limits.a_max);
            let wps = [
                Waypoint::new(reference.position, reference.yaw, WaypointKind::Normal),
                Waypoint::new(stop, reference.yaw, WaypointKind::Normal),
            ];
            let Ok(traj) = plan(&wps, &reference, 0.0, &self.config.limits) else {
                // leave the stop to the tracking controller
                self.hold_ref = FlatState::at_rest(stop, reference.yaw);
                self.active = None;
                self.phase = Phase::SafetyHold { since: now };
                return Ok(());
            };
            let traj = traj.with_start_time(now);
            self.seq_counter += 1;
            let seq_no = self.seq_counter;
            self.events.push(MissionEvent::Optimized {
                t: now,
                seq_no,
                duration: traj.duration(),
                waypoints: 2,
                terminal_speed: 0.0,
            });
            self.active = Some(Active {
                seq: WaypointSequence {
                    waypoints: wps.to_vec(),
                    ids: vec![self.cursor.last_consumed.unwrap_or(0); 2],
                    terminal_speed: 0.0,
                    end_kind: WaypointKind::Normal,
                    start_id: 0,
                    end_id: 0,
                    truncated: true,
                },
                traj,
                seq_no,
                committed,
                braking: true,
            });
        }
        self.phase = Phase::SafetyHold { since: now };
        Ok(())
    }

    /// Brakes and retries from rest on a later planner tick.
    fn infeasible_hold(&mut self, now: Timestamp, seq_no: u32, committed: Cursor) -> Result<(), MissionError> {
        self.events.push(MissionEvent::Warning {
            t: now,
            message: format!("sequence {seq_no} infeasible from the current state, braking"),
        });
        self.cursor = committed;
        self.brake_and_hold(now, committed)
    }

    fn optimize_and_activate(
        &mut self,
        now: Timestamp,
        seq: WaypointSequence,
        reference: &FlatState,
        seq_no: u32,
        committed: Cursor,
    ) -> Result<(), MissionError> {
        let mut seq = seq;
        let traj = match plan(&seq.waypoints, reference, seq.terminal_speed, &self.config.limits) {
            Ok(t) => t,
            Err(TrajoptError::Infeasible { .. }) if seq.terminal_speed > 0.0 => {
                self.events.push(MissionEvent::Warning {
                    t: now,
                    message: format!("sequence {seq_no} infeasible at speed, ending it at rest"),
                });
                seq.terminal_speed = 0.0;
                match plan(&seq.waypoints, reference, 0.0, &self.config.limits) {
                    Ok(t) => t,
                    Err(TrajoptError::Infeasible { .. }) => return self.infeasible_hold(now, seq_no, committed),
                    Err(e) => return Err(e.into()),
                }
            }
            Err(TrajoptError::Infeasible { .. }) => return self.infeasible_hold(now, seq_no, committed),
            Err(e) => return Err(e.into()),
        }
        .with_start_time(now);
        self.events.push(MissionEvent::Optimized {
            t: now,
            seq_no,
            duration: traj.duration(),
            waypoints: seq.len(),
            terminal_speed: traj.problem().terminal_speed,
        });
        seq.terminal_speed = traj.problem().terminal_speed;
        self.active = Some(Active {
            seq,
            traj,
            seq_no,
            committed,
            braking: false,
        });
        Ok(())
    }

    /// Applies the safety stage to an anchored sequence and activates the result.
    fn check_and_activate(
        &mut self,
        now: Timestamp,
        anchored: WaypointSequence,
        reference: &FlatState,
        seq_no: u32,
        committed: Cursor,
    ) -> Result<(), MissionError> {
        let spheres = self.spheres_at(now);
        let outcome = truncate_sequence(&anchored, &spheres, &self.config.safety);
        let result = match &outcome {
            Truncation::Unchanged(_) => SafetyOutcome::Unchanged,
            Truncation::Truncated(c) if c.len() >= 2 => SafetyOutcome::Truncated { end_id: c.end_id },
            _ => SafetyOutcome::Hold,
        };
        self.events.push(MissionEvent::SafetyChecked {
            t: now,
            seq_no,
            result: result.clone(),
        });
        match (result, outcome) {
            (SafetyOutcome::Unchanged, Truncation::Unchanged(seq)) => {
                self.optimize_and_activate(now, seq, reference, seq_no, committed)
            }
            (SafetyOutcome::Truncated { end_id }, Truncation::Truncated(cut)) => {
                self.cursor = advance_cursor(&self.session, committed, end_id)?;
                self.optimize_and_activate(now, cut, reference, seq_no, committed)
            }
            _ => {
                self.cursor = committed;
                self.brake_and_hold(now, committed)
            }
        }
    }

    fn plan_travel(&mut self, now: Timestamp) -> Result<(), MissionError> {
        let reference = self.reference(now);
        let needs_new = match &self.active {
            None => true,
            Some(a) => a.seq.terminal_speed > 0.0 && a.remaining(now) < REPLAN_HORIZON,
        };
        if needs_new {
            let committed = self.cursor;
            let (selection, cursor) =
                select_sequence(&self.session, &reference.position, committed, &self.config.planner)?;
            let seq = match selection {
                Selection::Done => {
                    if self.active.is_none() && self.vehicle.state().speed() < HOLD_SPEED {
                        self.finish(now);
                    }
                    return Ok(());
                }
                Selection::Sequence(seq) => seq,
            };
            self.cursor = cursor;
            self.seq_counter += 1;
            let seq_no = self.seq_counter;
            self.events.push(MissionEvent::SequenceSelected {
                t: now,
                seq_no,
                start_id: seq.start_id,
                end_id: seq.end_id,
                terminal_speed: seq.terminal_speed,
                end_kind: seq.end_kind,
            });
            // waypoints of the active sequence not yet reached lead into the new one
            let mut joined = seq.clone();
            if let Some(active) = &self.active {
                let (segment, _) = active.traj.locate(active.tau(now));
                let last = active.seq.len() - 1;
                if segment + 1 < last && active.seq.ids[last] == seq.start_id {
                    joined
                        .waypoints
                        .splice(0..0, active.seq.waypoints[segment + 1..last].iter().copied());
                    joined
                        .ids
                        .splice(0..0, active.seq.ids[segment + 1..last].iter().copied());
                }
            }
            let anchored = condense_sequence(
                &anchor_sequence(&joined, &reference),
                reference.velocity.norm() * LEAD_TIME,
            );
            if anchored.len() < 2 {
                // already standing on a lone final keyframe
                self.hold_ref = FlatState::at_rest(reference.position, reference.yaw);
                return Ok(());
            }
            return self.check_and_activate(now, anchored, &reference, seq_no, committed);
        }

        // re-check the rest of the active sequence against moving spheres
        let Some(active) = self.active.clone() else {
            return Ok(());
        };
        let (segment, _) = active.traj.locate(active.tau(now));
        let mut rest = active.seq.clone();
        let skip = segment + 1;
        rest.waypoints.drain(..skip);
        rest.ids.drain(..skip);
        rest.waypoints.insert(
            0,
            Waypoint::new(reference.position, reference.yaw, WaypointKind::Normal),
        );
        rest.ids.insert(0, active.seq.ids[segment]);
        let rest = condense_sequence(&rest, reference.velocity.norm() * LEAD_TIME);
        let spheres = self.spheres_at(now);
        if let Truncation::Unchanged(_) = truncate_sequence(&rest, &spheres, &self.config.safety) {
            return Ok(());
        }
        self.seq_counter += 1;
        let seq_no = self.seq_counter;
        self.check_and_activate(now, rest, &reference, seq_no, active.committed)
    }

    pub fn report(&self) -> MissionReport {
        compute_metrics(&self.log, &self.session, &self.config.spheres)
    }

    pub fn into_run(self) -> MissionRun {
        let report = self.report();
        MissionRun {
            log: self.log,
            events: self.events,
            report,
            outcome: match self.error {
                Some(e) => Err(e),
                None => Ok(()),
            },
        }
    }
}

/// Runs a repeat mission to completion from `config.start` (or the first keyframe).
pub fn run_repeat(session: &TeachSession, config: &MissionConfig) -> Result<MissionRun, MissionError> {
    let mut mission = RepeatMission::new(session.clone(), config.clone(), Timestamp::ZERO)?;
    while mission.tick() {}
    Ok(mission.into_run())
}
