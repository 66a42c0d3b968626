//! Console gateway: a headless session driven by JSON text records, and a
//! websocket server that paces it in real time.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tungstenite::{Message, WebSocket};

use crate::geometry::{Pose6DoF, Timestamp, Vec3};
use crate::simulator::{track_reference, Mode, PlantParams, Vehicle, VehicleState, TICK_NS};
use crate::teach::{TeachBuilder, TeachSession};
use crate::trajopt::{FlatState, PolyTrajectory};

use super::config::MissionConfig;
use super::follow::FollowMission;
use super::metrics::MissionReport;
use super::repeat::{MissionEvent, RepeatMission};

/// Physics ticks between outbound state frames (20 Hz).
pub const STATE_PERIOD_TICKS: u64 = 5;
/// Samples of the active trajectory included in each state frame.
const TRAJECTORY_SAMPLES: usize = 20;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Mission(#[from] super::MissionError),
}

/// Inbound console records.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Inbound {
    TeachPose { x: f64, y: f64, z: f64, yaw: f64 },
    MarkInspection,
    StartRepeat,
    SetMode { mode: String },
    Estop,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Input {
    Teach,
    Follow,
    Idle,
}

impl Input {
    fn as_str(self) -> &'static str {
        match self {
            Input::Teach => "teach",
            Input::Follow => "follow",
            Input::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone)]
enum Agent {
    Idle { vehicle: Vehicle, hold: FlatState },
    Repeat(Box<RepeatMission>),
    Follow(Box<FollowMission>),
}

/// Headless bridge state machine. One [`BridgeSession::tick`] is one physics
/// tick; everything runs on the caller's thread.
#[derive(Debug, Clone)]
pub struct BridgeSession {
    config: MissionConfig,
    clock: Timestamp,
    ticks: u64,
    input: Input,
    builder: TeachBuilder,
    session: Option<TeachSession>,
    teacher: Option<Pose6DoF>,
    agent: Agent,
    events_sent: usize,
    outbox: Vec<String>,
}

fn idle_agent(config: &MissionConfig, state: VehicleState) -> Agent {
    let vehicle = Vehicle::new(
        state,
        PlantParams::from_limits(config.limits.v_max, config.limits.a_max),
        config.controller,
        config.effective_noise(),
    );
    Agent::Idle {
        vehicle,
        hold: FlatState::at_rest(state.position, state.yaw),
    }
}

fn error_frame(message: impl Into<String>) -> String {
    json!({ "type": "error", "message": message.into() }).to_string()
}

fn v3(v: &Vec3) -> Value {
    json!([v.x, v.y, v.z])
}

impl BridgeSession {
    pub fn new(config: MissionConfig) -> Result<Self, super::MissionError> {
        config.validate()?;
        let builder = TeachBuilder::new(config.teach, config.frame_id.clone())
            .map_err(|e| super::MissionError::Config(e.to_string()))?;
        let start = config.start.map_or((Vec3::zeros(), 0.0), |s| (s.position, s.yaw));
        let agent = idle_agent(&config, VehicleState::at_rest(Timestamp::ZERO, start.0, start.1));
        Ok(BridgeSession {
            config,
            clock: Timestamp::ZERO,
            ticks: 0,
            input: Input::Teach,
            builder,
            session: None,
            teacher: None,
            agent,
            events_sent: 0,
            outbox: Vec::new(),
        })
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    pub fn agent_state(&self) -> VehicleState {
        match &self.agent {
            Agent::Idle { vehicle, .. } => *vehicle.state(),
            Agent::Repeat(m) => *m.vehicle(),
            Agent::Follow(m) => *m.vehicle(),
        }
    }

    /// Session finalized by the last `start_repeat`.
    pub fn session(&self) -> Option<&TeachSession> {
        self.session.as_ref()
    }

    pub fn repeat_mission(&self) -> Option<&RepeatMission> {
        match &self.agent {
            Agent::Repeat(m) => Some(m),
            _ => None,
        }
    }

    pub fn report(&self) -> Option<MissionReport> {
        self.repeat_mission().map(|m| m.report())
    }

    fn events(&self) -> &[MissionEvent] {
        match &self.agent {
            Agent::Idle { .. } => &[],
            Agent::Repeat(m) => m.events(),
            Agent::Follow(m) => m.events(),
        }
    }

    fn set_agent(&mut self, agent: Agent) {
        self.agent = agent;
        self.events_sent = 0;
    }

    /// Handles one inbound text record. Returns frames meant only for the
    /// sender (errors); the connection stays open either way.
    pub fn handle_text(&mut self, text: &str) -> Vec<String> {
        match serde_json::from_str::<Inbound>(text) {
            Ok(record) => match self.handle(record) {
                Ok(()) => Vec::new(),
                Err(e) => vec![error_frame(e)],
            },
            Err(e) => vec![error_frame(format!("malformed record: {e}"))],
        }
    }

    pub fn handle(&mut self, record: Inbound) -> Result<(), String> {
        match record {
            Inbound::TeachPose { x, y, z, yaw } => {
                if ![x, y, z, yaw].iter().all(|v| v.is_finite()) {
                    return Err("teach_pose fields must be finite".into());
                }
                let pose = Pose6DoF::from_yaw(self.clock, Vec3::new(x, y, z), yaw);
                match self.input {
                    Input::Teach => {
                        self.builder.ingest_pose(&pose).map_err(|e| e.to_string())?;
                    }
                    Input::Follow => {
                        if let Agent::Follow(m) = &mut self.agent {
                            m.push_teacher_pose(&pose);
                        }
                    }
                    Input::Idle => {}
                }
                self.teacher = Some(pose);
            }
            Inbound::MarkInspection => {
                if self.input != Input::Teach {
                    return Err("mark_inspection is only valid while teaching".into());
                }
                if self.builder.mark_inspection().is_none() {
                    return Err("no pose to mark, or an inspection point is already there".into());
                }
            }
            Inbound::StartRepeat => {
                if self.is_busy() {
                    return Err("a mission is already running".into());
                }
                let session = match self.session.take() {
                    Some(s) if self.builder.keyframes().is_empty() => s,
                    _ => {
                        let fresh = TeachBuilder::new(self.config.teach, self.config.frame_id.clone())
                            .map_err(|e| e.to_string())?;
                        std::mem::replace(&mut self.builder, fresh)
                            .finalize()
                            .map_err(|e| e.to_string())?
                    }
                };
                let mission =
                    RepeatMission::new(session.clone(), self.config.clone(), self.clock).map_err(|e| e.to_string())?;
                self.session = Some(session);
                self.input = Input::Idle;
                self.set_agent(Agent::Repeat(Box::new(mission)));
            }
            Inbound::SetMode { mode } => {
                let input = match mode.as_str() {
                    "teach" => Input::Teach,
                    "follow" => Input::Follow,
                    "idle" => Input::Idle,
                    other => return Err(format!("unknown mode {other:?}; expected teach, follow or idle")),
                };
                if input == self.input {
                    return Ok(());
                }
                if self.is_busy() && input == Input::Follow {
                    return Err("a mission is already running".into());
                }
                let state = self.agent_state();
                if self.agent_state().mode == Mode::Estopped {
                    return Err("agent is estopped; reset first".into());
                }
                match input {
                    Input::Follow => {
                        let at = VehicleState::at_rest(state.t, state.position, state.yaw);
                        let mission = FollowMission::new(self.config.clone(), at).map_err(|e| e.to_string())?;
                        self.set_agent(Agent::Follow(Box::new(mission)));
                    }
                    _ if matches!(self.agent, Agent::Follow(_)) => {
                        let at = VehicleState {
                            mode: Mode::Idle,
                            ..state
                        };
                        self.set_agent(idle_agent(&self.config, at));
                    }
                    _ => {}
                }
                self.input = input;
            }
            Inbound::Estop => match &mut self.agent {
                Agent::Idle { vehicle, .. } => vehicle.emergency_stop(),
                Agent::Repeat(m) => m.emergency_stop(),
                Agent::Follow(m) => m.emergency_stop(),
            },
            Inbound::Reset => {
                let state = self.agent_state();
                let at = VehicleState {
                    mode: Mode::Idle,
                    ..state
                };
                self.set_agent(idle_agent(&self.config, at));
                self.builder =
                    TeachBuilder::new(self.config.teach, self.config.frame_id.clone()).map_err(|e| e.to_string())?;
                self.session = None;
                self.teacher = None;
                self.input = Input::Teach;
            }
        }
        Ok(())
    }

    fn is_busy(&self) -> bool {
        match &self.agent {
            Agent::Idle { .. } => false,
            Agent::Repeat(m) => !m.is_finished(),
            Agent::Follow(m) => !m.is_finished(),
        }
    }

    /// Advances the simulation one tick and queues a state frame every
    /// [`STATE_PERIOD_TICKS`] ticks.
    pub fn tick(&mut self) {
        match &mut self.agent {
            Agent::Idle { vehicle, hold } => {
                let s = *vehicle.state();
                let cmd = track_reference(hold, &s.position, &s.velocity, s.yaw, vehicle.gains());
                vehicle.step(&cmd);
            }
            Agent::Repeat(m) => {
                m.tick();
            }
            Agent::Follow(m) => {
                m.tick();
            }
        }
        self.ticks += 1;
        self.clock = Timestamp(self.ticks * TICK_NS);
        if self.ticks.is_multiple_of(STATE_PERIOD_TICKS) {
            let frame = self.state_frame().to_string();
            self.outbox.push(frame);
        }
    }

    /// Frames queued for every connected client since the last drain.
    pub fn drain_outbox(&mut self) -> Vec<String> {
        std::mem::take(&mut self.outbox)
    }

    fn trajectory(&self) -> Option<&PolyTrajectory> {
        match &self.agent {
            Agent::Idle { .. } => None,
            Agent::Repeat(m) => m.active_trajectory(),
            Agent::Follow(m) => m.active_trajectory(),
        }
    }

    pub fn state_frame(&mut self) -> Value {
        let agent = self.agent_state();
        let teacher = self.teacher.map(|p| {
            let yaw = crate::geometry::yaw_from_quaternion(&p.orientation).unwrap_or(0.0);
            json!({ "x": p.position.x, "y": p.position.y, "z": p.position.z, "yaw": yaw })
        });
        let mut spheres: Vec<Value> = self
            .config
            .spheres
            .iter()
            .map(|s| {
                let at = s.at(self.clock);
                json!({ "owner_id": at.owner_id, "center": v3(&at.center), "radius": at.radius })
            })
            .collect();
        if let Some(p) = &self.teacher {
            spheres.push(json!({
                "owner_id": "teacher",
                "center": v3(&p.position),
                "radius": self.config.safety.r_teacher,
            }));
        }
        let (keyframes, inspections, finalized): (Vec<Value>, Vec<Value>, bool) = match &self.session {
            Some(s) => (
                s.keyframes().iter().map(|k| v3(&k.waypoint.position)).collect(),
                s.keyframes()
                    .iter()
                    .filter(|k| s.is_inspection(k.id))
                    .map(|k| v3(&k.waypoint.position))
                    .collect(),
                true,
            ),
            None => (
                self.builder
                    .keyframes()
                    .iter()
                    .map(|k| v3(&k.waypoint.position))
                    .collect(),
                self.builder
                    .keyframes()
                    .iter()
                    .filter(|k| k.waypoint.kind == crate::geometry::WaypointKind::Inspection)
                    .map(|k| v3(&k.waypoint.position))
                    .collect(),
                false,
            ),
        };
        let trajectory: Vec<Value> = self
            .trajectory()
            .map(|traj| {
                (0..=TRAJECTORY_SAMPLES)
                    .map(|i| {
                        let tau = traj.duration() * i as f64 / TRAJECTORY_SAMPLES as f64;
                        v3(&traj.sample_local(tau).position)
                    })
                    .collect()
            })
            .unwrap_or_default();
        let events: Vec<Value> = self.events()[self.events_sent..]
            .iter()
            .map(|e| serde_json::to_value(e).expect("events serialize"))
            .collect();
        self.events_sent = self.events().len();
        json!({
            "type": "state",
            "t": self.clock.as_secs(),
            "input": self.input.as_str(),
            "teacher": teacher,
            "agent": {
                "mode": agent.mode.as_str(),
                "position": v3(&agent.position),
                "yaw": agent.yaw,
                "velocity": v3(&agent.velocity),
            },
            "spheres": spheres,
            "session": {
                "finalized": finalized,
                "keyframes": keyframes,
                "inspections": inspections,
            },
            "trajectory": trajectory,
            "events": events,
        })
    }
}

/// Cooperative stop signal for [`BridgeServer::run`].
#[derive(Debug, Clone, Default)]
pub struct ShutdownFlag(Arc<AtomicBool>);

impl ShutdownFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Websocket front end of a [`BridgeSession`], ticking it in real time.
pub struct BridgeServer {
    listener: TcpListener,
    session: BridgeSession,
    clients: Vec<WebSocket<TcpStream>>,
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if io.kind() == io::ErrorKind::WouldBlock)
}

impl BridgeServer {
    pub fn bind(config: MissionConfig, addr: impl std::net::ToSocketAddrs) -> Result<Self, BridgeError> {
        let session = BridgeSession::new(config)?;
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(BridgeServer {
            listener,
            session,
            clients: Vec::new(),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    fn accept_clients(&mut self) {
        loop {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let handshake = stream
                        .set_nonblocking(false)
                        .and_then(|_| stream.set_read_timeout(Some(Duration::from_secs(2))));
                    if let Err(e) = handshake {
                        log::warn!("bridge: cannot configure {peer}: {e}");
                        continue;
                    }
                    match tungstenite::accept(stream) {
                        Ok(ws) => {
                            if let Err(e) = ws.get_ref().set_nonblocking(true) {
                                log::warn!("bridge: cannot configure {peer}: {e}");
                                continue;
                            }
                            log::info!("bridge: client {peer} connected");
                            self.clients.push(ws);
                        }
                        Err(e) => log::warn!("bridge: handshake with {peer} failed: {e}"),
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) => {
                    log::warn!("bridge: accept failed: {e}");
                    break;
                }
            }
        }
    }

    /// Reads every pending record; drops clients that closed or failed.
    fn read_clients(&mut self) {
        let session = &mut self.session;
        self.clients.retain_mut(|ws| loop {
            match ws.read() {
                Ok(Message::Text(text)) => {
                    for reply in session.handle_text(&text) {
                        if let Err(e) = ws.send(Message::Text(reply)) {
                            if !would_block(&e) {
                                return false;
                            }
                        }
                    }
                }
                Ok(Message::Binary(_)) => {
                    let reply = error_frame("binary frames are not supported");
                    if let Err(e) = ws.send(Message::Text(reply)) {
                        if !would_block(&e) {
                            return false;
                        }
                    }
                }
                Ok(Message::Close(_)) => return false,
                Ok(_) => {}
                Err(e) if would_block(&e) => return true,
                Err(e) => {
                    log::info!("bridge: client dropped: {e}");
                    return false;
                }
            }
        });
    }

    fn broadcast(&mut self, frames: Vec<String>) {
        for frame in frames {
            self.clients
                .retain_mut(|ws| match ws.send(Message::Text(frame.clone())) {
                    Ok(()) => true,
                    Err(e) => would_block(&e),
                });
        }
    }

    /// Runs until `shutdown` is set, one physics tick per 10 ms of wall time.
    pub fn run(mut self, shutdown: &ShutdownFlag) -> Result<(), BridgeError> {
        let started = Instant::now();
        let mut ticks: u64 = 0;
        while !shutdown.is_set() {
            self.accept_clients();
            self.read_clients();
            let due = started.elapsed().as_nanos() as u64 / TICK_NS;
            while ticks < due {
                self.session.tick();
                ticks += 1;
            }
            let frames = self.session.drain_outbox();
            self.broadcast(frames);
            std::thread::sleep(Duration::from_millis(1));
        }
        for ws in &mut self.clients {
            let _ = ws.close(None);
            let _ = ws.flush();
        }
        Ok(())
    }
}

/// Serves the console bridge on `127.0.0.1:port` until `shutdown` is set.
pub fn serve_bridge(config: MissionConfig, port: u16, shutdown: &ShutdownFlag) -> Result<(), BridgeError> {
    let server = BridgeServer::bind(config, ("127.0.0.1", port))?;
    log::info!("bridge listening on ws://{}", server.local_addr()?);
    server.run(shutdown)
}
