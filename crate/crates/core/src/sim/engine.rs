//! Deterministic simulation loop: world at `dt`, planners at the planner
//! tick, supervisor at its own period.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{Metrics, MetricsAccumulator};
use super::scenario::{Event, FaultTarget, Persona, Scenario, ScenarioError, VehicleKind};
use super::telemetry::{
    CommandStamp, EgoView, InboundFrame, MetricsSoFar, OutboundFrame, Snapshot, TrajSample, VehicleClass,
    VehicleView, TELEMETRY_SCHEMA_VERSION,
};
use super::trace::{trace_header, TraceRow};
use crate::config::{Config, ControlConfig};
use crate::control::{
    assist_command, lane_keeping, lateral_control, longitudinal_control, pedal_demand, pedal_feedback,
    shared_torque, FuelState, Lead, SharedControlState, SpeedReference,
};
use crate::geometry::{step_vehicle, Command, RoadMap, VehicleState};
use crate::modes::{
    available_modes, check_mode_invariant, step_arbiter, tor_speed_cap, ArbiterContext, DriverInput,
    DriverMonitor, DriverReadiness, Mode, SpeedGuard, SystemHealth, TakeOverRequest, TorReason, TorState,
};
use crate::perception::{PerceptionStack, SensedObject, SensorStatus};
use crate::planner::{mrs_trajectory, plan, predict_others, ManeuverKind, PlanContext, TrackedObject, Trajectory};
use crate::rng::RngStreams;
use crate::traffic::{idm_accel, spawn_traffic, Supervisor, TrafficError, VehicleReport};

const TAIL_ROWS: usize = 25;
/// Largest lateral tracking error at which a new plan continues the previous one.
const STITCH_TOLERANCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error("integrity fault at t={t:.2} s: {message}\nlast trace rows:\n{tail}")]
    Integrity { t: f64, message: String, tail: String },
}

/// Audit trail of discrete happenings during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEvent {
    ModeChange { t: f64, vehicle: u64, from: Mode, to: Mode },
    TorIssued { t: f64, vehicle: u64, reason: TorReason, deadline: f64 },
    TorResolved { t: f64, vehicle: u64, state: TorState },
    Refusal { t: f64, vehicle: u64, requested: Mode, reason: String },
    Recommendation { t: f64, segment_id: u32, advised_limit: f64 },
    Collision { t: f64, a: u64, b: u64 },
    ObstacleSpawned { t: f64, id: u64, s: f64, lane: usize },
    Fault { t: f64, target: FaultTarget, active: bool },
    SecuredEndOverride { t: f64, at: f64 },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub trace: bool,
}

/// Worst values seen for automated vehicles while automated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Largest amount by which an automated vehicle exceeded the local limit.
    pub max_speed_excess: f64,
    /// Smallest bumper gap from an automated vehicle to the laterally overlapping vehicle ahead.
    pub min_front_gap: f64,
}

impl Default for Audit {
    fn default() -> Self {
        Self {
            max_speed_excess: f64::NEG_INFINITY,
            min_front_gap: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoFinal {
    pub state: VehicleState,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub trace: Option<String>,
    pub log: Vec<LogEvent>,
    pub audit: Audit,
    pub ego: Option<EgoFinal>,
}

#[derive(Debug, Clone)]
struct AbvAgent {
    perception: PerceptionStack,
    monitor: DriverMonitor,
    guard: SpeedGuard,
    mode: Mode,
    tor: Option<TakeOverRequest>,
    tor_base: f64,
    active: Option<Trajectory>,
    mrs: Option<Trajectory>,
    shared: SharedControlState,
    input: DriverInput,
    readiness: DriverReadiness,
    persona: Persona,
    planner_ok: bool,
    perceived: VehicleState,
    standstill_since: Option<f64>,
}

#[derive(Debug, Clone)]
enum AgentKind {
    Abv(Box<AbvAgent>),
    Conventional { speed_factor: f64 },
    Obstacle,
}

#[derive(Debug, Clone)]
struct Agent {
    id: u64,
    state: VehicleState,
    kind: AgentKind,
    fuel: FuelState,
    exited: bool,
}

impl Agent {
    fn abv(&self) -> Option<&AbvAgent> {
        match &self.kind {
            AgentKind::Abv(a) => Some(a),
            _ => None,
        }
    }

    fn class(&self) -> VehicleClass {
        match self.kind {
            AgentKind::Abv(_) => VehicleClass::Abv,
            AgentKind::Conventional { .. } => VehicleClass::Conventional,
            AgentKind::Obstacle => VehicleClass::Obstacle,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ExternalDriver {
    connected: bool,
    held: DriverInput,
    pending: DriverInput,
    stamp: Option<f64>,
}

/// Scripted input held over a time window; flags only fire at the start.
#[derive(Debug, Clone)]
struct HeldInput {
    start: f64,
    end: f64,
    input: DriverInput,
}

pub struct Simulation {
    scenario: Scenario,
    cfg: Config,
    map: RoadMap,
    streams: RngStreams,
    dt: f64,
    n_steps: u64,
    step: u64,
    agents: Vec<Agent>,
    ego: Option<usize>,
    next_event: usize,
    held: Vec<HeldInput>,
    faults: BTreeMap<FaultTarget, f64>,
    secured_cut: Option<f64>,
    supervisor: Supervisor,
    advised: BTreeMap<u32, f64>,
    acc: MetricsAccumulator,
    trace: Option<String>,
    tail: VecDeque<String>,
    log: Vec<LogEvent>,
    audit: Audit,
    colliding: BTreeSet<(u64, u64)>,
    external: Option<ExternalDriver>,
    last_command: Option<CommandStamp>,
    outbox: Vec<OutboundFrame>,
    paused: bool,
    next_id: u64,
}

fn steps_per(period: f64, dt: f64) -> u64 {
    ((period / dt).round() as u64).max(1)
}

impl Simulation {
    pub fn new(scenario: &Scenario, opts: RunOptions) -> Result<Self, SimError> {
        scenario.validate()?;
        let cfg = scenario.config()?;
        let map = scenario.map.clone();
        let streams = RngStreams::new(scenario.seed);
        let dt = cfg.sim.dt;
        let n_steps = (scenario.duration / dt).round() as u64;

        let mut sim = Self {
            scenario: scenario.clone(),
            cfg,
            map,
            streams,
            dt,
            n_steps,
            step: 0,
            agents: Vec::new(),
            ego: None,
            next_event: 0,
            held: Vec::new(),
            faults: BTreeMap::new(),
            secured_cut: None,
            supervisor: Supervisor::default(),
            advised: BTreeMap::new(),
            acc: MetricsAccumulator::default(),
            trace: opts.trace.then(trace_header),
            tail: VecDeque::new(),
            log: Vec::new(),
            audit: Audit::default(),
            colliding: BTreeSet::new(),
            external: None,
            last_command: None,
            outbox: Vec::new(),
            paused: false,
            next_id: 0,
        };

        let mut keep_clear = Vec::new();
        if let Some(ego) = &scenario.ego {
            let state = VehicleState::at(ego.s, ego.lane, ego.v, &sim.map);
            sim.ego = Some(sim.agents.len());
            sim.push_abv(state, ego.persona);
            keep_clear.push((ego.s, ego.lane));
        }
        for v in &scenario.vehicles {
            let state = VehicleState::at(v.s, v.lane, v.v, &sim.map);
            match v.kind {
                VehicleKind::Abv => sim.push_abv(state, Persona::Attentive),
                VehicleKind::Conventional => sim.push_agent(state, AgentKind::Conventional { speed_factor: v.speed_factor }),
            }
            keep_clear.push((v.s, v.lane));
        }
        if let Some(spec) = &scenario.traffic {
            let mut spec = spec.clone();
            spec.keep_clear.extend(keep_clear);
            let mut rng = sim.streams.stream("traffic.spawn", 0);
            for v in spawn_traffic(&spec, &sim.map, &sim.cfg.traffic, &sim.cfg.vehicle, &mut rng)? {
                if v.abv {
                    sim.push_abv(v.state, Persona::Attentive);
                } else {
                    sim.push_agent(v.state, AgentKind::Conventional { speed_factor: v.speed_factor });
                }
            }
        }
        let abvs = sim.agents.iter().filter(|a| a.abv().is_some()).count();
        sim.acc = MetricsAccumulator::new(sim.agents.len(), abvs);
        Ok(sim)
    }

    fn push_agent(&mut self, state: VehicleState, kind: AgentKind) {
        self.agents.push(Agent {
            id: self.next_id,
            state,
            kind,
            fuel: FuelState::default(),
            exited: false,
        });
        self.next_id += 1;
    }

    fn push_abv(&mut self, state: VehicleState, persona: Persona) {
        let id = self.next_id;
        let perception = PerceptionStack::new(
            self.streams.stream("perception.lanes", id),
            self.streams.stream("perception.localizer", id),
            self.streams.stream("perception.objects", id),
        );
        let abv = AbvAgent {
            perception,
            monitor: DriverMonitor::default(),
            guard: SpeedGuard::default(),
            mode: Mode::Driver,
            tor: None,
            tor_base: 0.0,
            active: None,
            mrs: None,
            shared: SharedControlState::default(),
            input: DriverInput::default(),
            readiness: DriverReadiness {
                ready: false,
                last_activity_age: f64::INFINITY,
            },
            persona,
            planner_ok: true,
            perceived: state,
            standstill_since: None,
        };
        self.push_agent(state, AgentKind::Abv(Box::new(abv)));
    }

    pub fn t(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.n_steps
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn ego_mode(&self) -> Option<Mode> {
        self.ego.and_then(|i| self.agents[i].abv()).map(|a| a.mode)
    }

    pub fn ego_state(&self) -> Option<VehicleState> {
        self.ego.map(|i| self.agents[i].state)
    }

    /// Frames produced since the last call (refusals for the ego).
    pub fn take_outbox(&mut self) -> Vec<OutboundFrame> {
        std::mem::take(&mut self.outbox)
    }

    /// Marks that a live driver session now controls the ego instead of the script.
    pub fn attach_driver(&mut self) {
        let ext = self.external.get_or_insert_with(ExternalDriver::default);
        ext.connected = true;
    }

    /// The live driver left: inputs fall to zero.
    pub fn detach_driver(&mut self) {
        if let Some(ext) = &mut self.external {
            ext.connected = false;
            ext.held = DriverInput::default();
            ext.pending = DriverInput::default();
        }
    }

    /// Queues a client command for the next step boundary.
    pub fn apply_command(&mut self, frame: &InboundFrame, received_t: f64) {
        if let InboundFrame::Pause { paused } = frame {
            self.paused = *paused;
            return;
        }
        let ext = self.external.get_or_insert_with(ExternalDriver::default);
        match frame {
            InboundFrame::DriverInput { steer_torque, throttle, brake, acknowledge } => {
                ext.held.steer_torque = *steer_torque;
                ext.held.throttle = *throttle;
                ext.held.brake = *brake;
                ext.pending.acknowledge |= *acknowledge;
            }
            InboundFrame::Engage { mode } => ext.pending.engage_request = Some(*mode),
            InboundFrame::Disengage => ext.pending.disengage_request = true,
            InboundFrame::ResetEmergency => ext.pending.reset_emergency = true,
            InboundFrame::Pause { .. } => {}
        }
        ext.stamp = Some(received_t);
    }

    fn secured_remaining(&self, s: f64) -> f64 {
        let mut rem = self.map.secured_remaining(s);
        if let Some(cut) = self.secured_cut {
            let ahead = self.map.delta_s(s, cut);
            rem = if ahead >= 0.0 { rem.min(ahead) } else if -ahead < 0.5 * self.map.total_length() { 0.0 } else { rem };
            if !self.map.is_closed() && ahead < 0.0 {
                rem = 0.0;
            }
        }
        rem
    }

    fn on_secured_truth(&self, s: f64) -> bool {
        self.secured_remaining(s) > 0.0
    }

    fn fault_active(&self, target: FaultTarget, t: f64) -> bool {
        self.faults.get(&target).is_some_and(|until| t < *until)
    }

    fn apply_events(&mut self, t: f64) {
        while let Some(ev) = self.scenario.events.get(self.next_event) {
            if ev.time() > t + 1e-9 {
                break;
            }
            let ev = ev.clone();
            self.next_event += 1;
            match ev {
                Event::ObstacleSpawn { s, ahead, lane, .. } => {
                    let base = match (s, ahead, self.ego) {
                        (Some(s), _, _) => s,
                        (None, Some(a), Some(e)) => self.agents[e].state.s + a,
                        _ => continue,
                    };
                    let s = self.map.wrap_s(base);
                    let state = VehicleState::at(s, lane, 0.0, &self.map);
                    let id = self.next_id;
                    self.push_agent(state, AgentKind::Obstacle);
                    self.log.push(LogEvent::ObstacleSpawned { t, id, s, lane });
                }
                Event::SecuredEndOverride { distance, .. } => {
                    if let Some(e) = self.ego {
                        let at = self.map.wrap_s(self.agents[e].state.s + distance);
                        self.secured_cut = Some(at);
                        self.log.push(LogEvent::SecuredEndOverride { t, at });
                    }
                }
                Event::SensorFault { sensor, duration, .. } => {
                    self.faults.insert(sensor, duration.map_or(f64::INFINITY, |d| t + d));
                    self.log.push(LogEvent::Fault { t, target: sensor, active: true });
                }
                Event::DriverInput { duration, input, .. } => {
                    self.held.push(HeldInput { start: t, end: t + duration.max(self.dt * 0.5), input });
                }
            }
        }
    }

    fn scripted_input(&self, t: f64) -> DriverInput {
        let mut out = DriverInput::default();
        for h in &self.held {
            if t + 1e-9 < h.start || t >= h.end - 1e-9 {
                continue;
            }
            out.steer_torque += h.input.steer_torque;
            out.throttle = out.throttle.max(h.input.throttle);
            out.brake = out.brake.max(h.input.brake);
            if (t - h.start).abs() < 0.5 * self.dt {
                out.engage_request = h.input.engage_request.or(out.engage_request);
                out.disengage_request |= h.input.disengage_request;
                out.acknowledge |= h.input.acknowledge;
                out.reset_emergency |= h.input.reset_emergency;
            }
        }
        out
    }

    /// Bumper gap and speed of the vehicle ahead in the same lane, from ground truth.
    /// Nearest vehicle ahead that overlaps laterally: `(bumper gap, speed)`.
    fn leaders(&self) -> Vec<Option<(f64, f64)>> {
        let len = self.cfg.vehicle.length;
        let width = self.cfg.vehicle.width;
        let mut order: Vec<usize> = (0..self.agents.len()).filter(|&i| !self.agents[i].exited).collect();
        order.sort_by(|&a, &b| {
            self.agents[a].state.s.total_cmp(&self.agents[b].state.s).then(self.agents[a].id.cmp(&self.agents[b].id))
        });
        let mut out = vec![None; self.agents.len()];
        let ring = self.map.is_closed();
        let total = self.map.total_length();
        let n = order.len();
        for (k, &i) in order.iter().enumerate() {
            let me = &self.agents[i].state;
            for step in 1..n {
                let wrapped = k + step >= n;
                if wrapped && !ring {
                    break;
                }
                let j = order[(k + step) % n];
                let other = &self.agents[j].state;
                if (other.d - me.d).abs() >= width {
                    continue;
                }
                let wrap = if wrapped { total } else { 0.0 };
                out[i] = Some((other.s + wrap - me.s - len, other.v));
                break;
            }
        }
        out
    }

    fn human_command(
        &self,
        state: &VehicleState,
        leader: Option<(f64, f64)>,
        desired_speed: f64,
        input: &DriverInput,
    ) -> Command {
        let seg = self.map.segment_at(state.s);
        let lane_d = seg.lane_center(seg.lane_of(state.d).min(seg.lane_count - 1));
        let steer = lane_keeping(state, lane_d, &self.map, &human_gains(&self.cfg, state.v), &self.cfg.vehicle).total()
            + input.steer_torque / self.cfg.control.torque_per_rad;
        let pedals = input.throttle > self.cfg.arbiter.pedal_activity || input.brake > self.cfg.arbiter.pedal_activity;
        let accel = if pedals {
            pedal_demand(input.throttle, input.brake, &self.cfg.vehicle)
        } else {
            let (gap, v_lead) = leader.unwrap_or((f64::INFINITY, state.v));
            idm_accel(state.v, v_lead, gap, desired_speed, &self.cfg.traffic.idm).accel
        };
        Command::new(steer, accel)
    }

    fn plan_context(&self, abv: &AbvAgent, t: f64, mode: Mode, on_secured: bool) -> PlanContext {
        let lateral_start = abv.active.as_ref().and_then(|traj| {
            let p = traj.point(t - traj.t0);
            ((abv.perceived.d - p.d).abs() < STITCH_TOLERANCE).then_some([p.d, p.d_dot, p.d_ddot])
        });
        PlanContext {
            lateral_start,
            t,
            mode: Some(mode),
            advised: self.advised.clone(),
            speed_cap: None,
            secured_here: on_secured,
            full_speed_threshold: self.cfg.arbiter.full_speed_threshold,
            tor_cap: abv.tor.map(|tor| tor_speed_cap(&tor, t, abv.tor_base, &self.cfg.arbiter)),
        }
    }

    /// Advances the world by one step.
    pub fn step(&mut self) -> Result<(), SimError> {
        if self.is_done() {
            return Ok(());
        }
        let t = self.t();
        let dt = self.dt;
        self.apply_events(t);

        let sup_every = steps_per(self.cfg.traffic.supervisor_period, dt);
        if self.step.is_multiple_of(sup_every) {
            let reports: Vec<VehicleReport> = self
                .agents
                .iter()
                .filter(|a| !a.exited && !matches!(a.kind, AgentKind::Obstacle))
                .map(|a| VehicleReport {
                    id: a.id,
                    segment: self.map.segment_index_clamped(a.state.s),
                    v: a.state.v,
                    abv: a.abv().is_some(),
                })
                .collect();
            let before = self.supervisor.issued;
            self.supervisor.update(&reports, &self.map, t, &self.cfg.traffic);
            if self.supervisor.issued > before {
                for r in self.supervisor.active.values().filter(|r| r.issued_at == t) {
                    self.log.push(LogEvent::Recommendation { t, segment_id: r.segment_id, advised_limit: r.advised_limit });
                }
                self.acc.recommendations += self.supervisor.issued - before;
            }
            self.advised = self.supervisor.advised(t);
        }

        let plan_every = steps_per(self.cfg.planner.tick, dt);
        let plan_tick = self.step.is_multiple_of(plan_every);
        let leaders = self.leaders();
        let objects: Vec<SensedObject> = self
            .agents
            .iter()
            .map(|a| SensedObject { s: a.state.s, d: a.state.d, v: a.state.v })
            .collect();
        let status = SensorStatus {
            camera: !self.fault_active(FaultTarget::Camera, t),
            laser: !self.fault_active(FaultTarget::Laser, t),
            lanes: !self.fault_active(FaultTarget::Lanes, t),
        };
        let actuation_ok = !self.fault_active(FaultTarget::Actuation, t);
        let script = self.scripted_input(t);

        let mut commands = Vec::with_capacity(self.agents.len());
        for i in 0..self.agents.len() {
            if self.agents[i].exited {
                commands.push(None);
                continue;
            }
            let cmd = match &self.agents[i].kind {
                AgentKind::Obstacle => None,
                AgentKind::Conventional { speed_factor } => {
                    let state = self.agents[i].state;
                    let desired = speed_factor * self.map.speed_limit_at(state.s);
                    Some(self.human_command(&state, leaders[i], desired, &DriverInput::default()))
                }
                AgentKind::Abv(_) => {
                    let visible: Vec<SensedObject> = objects
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i && !self.agents[*j].exited)
                        .map(|(_, o)| *o)
                        .collect();
                    Some(self.step_abv(i, t, plan_tick, &visible, status, actuation_ok, leaders[i], &script))
                }
            };
            commands.push(cmd);
        }

        let mut prev_s = Vec::with_capacity(self.agents.len());
        for (i, cmd) in commands.iter().enumerate() {
            prev_s.push(self.agents[i].state.s);
            let Some(cmd) = cmd else { continue };
            let next = step_vehicle(&self.agents[i].state, cmd, dt, &self.map, &self.cfg.vehicle).map_err(|e| {
                self.integrity(t, format!("vehicle {} integration failed: {e}", self.agents[i].id))
            })?;
            let agent = &mut self.agents[i];
            agent.state = next;
            agent.fuel.update(next.v, next.a, self.cfg.vehicle.mass, dt, &self.cfg.control.fuel);
            if !self.map.is_closed() && next.s >= self.map.total_length() {
                agent.exited = true;
            }
        }
        self.step += 1;
        let t_next = self.t();
        self.account(&prev_s, t_next)?;
        Ok(())
    }

    fn integrity(&self, t: f64, message: String) -> SimError {
        SimError::Integrity {
            t,
            message,
            tail: self.tail.iter().cloned().collect::<String>(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step_abv(
        &mut self,
        i: usize,
        t: f64,
        plan_tick: bool,
        visible: &[SensedObject],
        status: SensorStatus,
        actuation_ok: bool,
        leader: Option<(f64, f64)>,
        script: &DriverInput,
    ) -> Command {
        let is_ego = self.ego == Some(i);
        let truth = self.agents[i].state;
        let id = self.agents[i].id;
        let mut abv = match &mut self.agents[i].kind {
            AgentKind::Abv(a) => std::mem::replace(a, Box::new(placeholder())),
            _ => unreachable!("step_abv on a non-automated vehicle"),
        };
        let cfg = &self.cfg;
        let dt = self.dt;

        let percept = abv.perception.step(&truth, visible, &self.map, &cfg.perception, status, t, dt);
        let mut pe = percept.ego;
        pe.a = truth.a;
        pe.steer = truth.steer;
        pe.lane = self.map.segment_at(pe.s).lane_of(pe.d);
        abv.perceived = pe;

        let remaining = self.secured_remaining(pe.s);
        let margin = cfg.arbiter.secured_exit_margin;
        let on_secured = remaining > margin && self.secured_remaining(pe.s - margin) > 0.0;
        let v = pe.v.max(0.0);
        let need = v * cfg.arbiter.tor_deadline
            + v * v / (2.0 * cfg.planner.mrs_decel_emergency_lane)
            + cfg.arbiter.tor_margin;
        let secured = on_secured && remaining >= need;
        let cut_limits = self.secured_cut.is_some() && remaining < self.map.secured_remaining(pe.s);
        let speed_ok = abv.guard.update(v, t, &cfg.arbiter);
        let health = SystemHealth {
            perception_ok: percept.perception_ok,
            actuation_ok,
            planner_ok: abv.planner_ok,
        };
        let avail = available_modes(v, secured, health, &cfg.arbiter);

        let mut input = if is_ego {
            match &mut self.external {
                Some(ext) => {
                    let mut inp = ext.held;
                    inp.engage_request = ext.pending.engage_request;
                    inp.disengage_request = ext.pending.disengage_request;
                    inp.acknowledge = ext.pending.acknowledge;
                    inp.reset_emergency = ext.pending.reset_emergency;
                    ext.pending = DriverInput::default();
                    if let Some(received_t) = ext.stamp.take() {
                        self.last_command = Some(CommandStamp { received_t, applied_t: t });
                    }
                    inp
                }
                None => {
                    let mut inp = *script;
                    if self.step == 0 {
                        if let Some(m) = self.scenario.ego.as_ref().and_then(|e| e.engage) {
                            inp.engage_request = Some(m);
                        }
                    }
                    inp
                }
            }
        } else {
            let mut inp = DriverInput::default();
            match abv.mode {
                Mode::Driver | Mode::LongiAdas if avail.contains(Mode::FullSystem) => {
                    inp.engage_request = Some(Mode::FullSystem)
                }
                Mode::Driver if avail.contains(Mode::LongiAdas) => inp.engage_request = Some(Mode::LongiAdas),
                Mode::Emergency => {
                    if truth.v <= 0.05 {
                        let since = *abv.standstill_since.get_or_insert(t);
                        inp.reset_emergency = t - since >= 3.0;
                    } else {
                        abv.standstill_since = None;
                    }
                }
                _ => {}
            }
            inp
        };
        let scripted_persona = !is_ego || self.external.is_none();
        if scripted_persona {
            if let (Some(tor), Some(delay)) = (abv.tor, abv.persona.reaction_delay()) {
                let since = t - (tor.issued_at + delay);
                if (-1e-9..0.5).contains(&since) {
                    input.steer_torque += 0.5;
                    input.acknowledge |= since < 0.5 * dt;
                }
            }
        }
        abv.input = input;
        abv.readiness = abv.monitor.observe(t, &input, &cfg.arbiter);

        let ctx = ArbiterContext {
            v,
            secured,
            on_secured,
            speed_ok,
            health,
            override_active: abv.shared.override_active,
            supervisor_order: cut_limits,
        };
        let before = abv.mode;
        let had_tor = abv.tor.is_some();
        let tr = step_arbiter(abv.mode, abv.tor, &input, abv.readiness, avail, t, &ctx, &cfg.arbiter);
        abv.mode = tr.mode;
        abv.tor = tr.tor;
        if let (false, Some(tor)) = (had_tor, tr.tor) {
            abv.tor_base = v;
            self.acc.tor.issued += 1;
            self.log.push(LogEvent::TorIssued { t, vehicle: id, reason: tor.reason, deadline: tor.deadline });
        }
        if let Some(res) = tr.resolved {
            if had_tor {
                match res.state {
                    TorState::Acknowledged => self.acc.tor.acknowledged += 1,
                    TorState::Expired => self.acc.tor.expired += 1,
                    TorState::Pending => {}
                }
                self.log.push(LogEvent::TorResolved { t, vehicle: id, state: res.state });
            }
        }
        if let Some(refusal) = tr.refusal {
            self.acc.refusals += 1;
            let reason = serde_json::to_value(refusal.reason)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            if is_ego {
                self.outbox.push(OutboundFrame::Refusal { t, requested: Some(refusal.requested), reason: reason.clone() });
            }
            self.log.push(LogEvent::Refusal { t, vehicle: id, requested: refusal.requested, reason });
        }
        if abv.mode != before {
            self.log.push(LogEvent::ModeChange { t, vehicle: id, from: before, to: abv.mode });
        }

        let tracks: Vec<TrackedObject> = percept
            .tracks
            .iter()
            .filter(|tr| tr.confirmed)
            .map(|tr| {
                let (s, d, v) = tr.absolute(&pe, &self.map);
                TrackedObject { id: tr.id, s, d, v }
            })
            .collect();

        let mode = abv.mode;
        if mode == Mode::Emergency {
            let pctx = self.plan_context(&abv, t, mode, on_secured);
            if before != Mode::Emergency || abv.active.is_none() {
                let preds = predict_others(pe.s, &tracks, &self.map, cfg.planner.max_stop_horizon, cfg.planner.sample_dt);
                abv.active = Some(mrs_trajectory(&pe, &preds, &self.map, &pctx, &cfg.planner, &cfg.vehicle));
            } else if plan_tick {
                let preds = predict_others(pe.s, &tracks, &self.map, cfg.planner.max_stop_horizon, cfg.planner.sample_dt);
                let fresh = mrs_trajectory(&pe, &preds, &self.map, &pctx, &cfg.planner, &cfg.vehicle);
                let escalated = abv.active.as_ref().is_none_or(|a| a.maneuver.kind != ManeuverKind::EmergencyStop);
                if fresh.maneuver.kind == ManeuverKind::EmergencyStop && escalated {
                    abv.active = Some(fresh);
                }
            }
        } else if mode.is_automated() {
            if plan_tick || abv.active.is_none() || before != mode {
                let pctx = self.plan_context(&abv, t, mode, on_secured);
                let out = plan(
                    &pe,
                    &tracks,
                    &self.map,
                    &pctx,
                    &cfg.planner,
                    &cfg.vehicle,
                    cfg.control.eco_coast_decel,
                    cfg.control.eco_lookahead,
                );
                abv.planner_ok = out.planner_ok;
                abv.active = Some(out.nominal);
                abv.mrs = Some(out.mrs);
            }
        } else {
            abv.active = None;
            abv.mrs = None;
        }

        let lead = percept
            .tracks
            .iter()
            .filter(|tr| tr.confirmed && tr.rel_s > 0.0 && tr.rel_d.abs() < cfg.planner.same_lane_threshold)
            .min_by(|a, b| a.rel_s.total_cmp(&b.rel_s))
            .map(|tr| Lead { gap: tr.rel_s - cfg.vehicle.length, v: (pe.v + tr.rel_v).max(0.0) });

        let human = self.human_command(&truth, leader, self.map.speed_limit_at(truth.s), &input);
        let driver_accel = pedal_demand(input.throttle, input.brake, &cfg.vehicle);
        let cmd = match (mode, &abv.active) {
            (Mode::FullSystem | Mode::Emergency, Some(traj)) => {
                let t_on = t - traj.t0;
                let sc = lateral_control(&pe, traj, t_on, &self.map, &cfg.control, &cfg.vehicle);
                abv.shared = shared_torque(assist_command(sc.feedback, &cfg.control), input.steer_torque, &abv.shared, dt, &cfg.control);
                let steer = sc.feedforward + abv.shared.lambda * sc.feedback + input.steer_torque / cfg.control.torque_per_rad;
                let p = traj.point(t_on);
                let reference = SpeedReference { v: p.v, a: p.a, emergency: traj.emergency };
                let accel = longitudinal_control(pe.v, truth.a, reference, lead, dt, &cfg.control, &cfg.planner, &cfg.vehicle);
                abv.shared.pedal_feedback = pedal_feedback(accel, driver_accel, &cfg.control);
                Command { steer, accel, emergency: traj.emergency }
            }
            (Mode::LongiAdas, Some(traj)) => {
                abv.shared = shared_torque(0.0, input.steer_torque, &abv.shared, dt, &cfg.control);
                let p = traj.point(t - traj.t0);
                let reference = SpeedReference { v: p.v, a: p.a, emergency: traj.emergency };
                let accel = longitudinal_control(pe.v, truth.a, reference, lead, dt, &cfg.control, &cfg.planner, &cfg.vehicle);
                abv.shared.pedal_feedback = pedal_feedback(accel, driver_accel, &cfg.control);
                Command { steer: human.steer, accel, emergency: traj.emergency }
            }
            _ => {
                abv.shared = shared_torque(0.0, input.steer_torque, &abv.shared, dt, &cfg.control);
                abv.shared.pedal_feedback = 0.0;
                human
            }
        };
        self.acc.max_assist = self.acc.max_assist.max(abv.shared.assist_torque.abs());

        if let AgentKind::Abv(slot) = &mut self.agents[i].kind {
            *slot = abv;
        }
        cmd
    }

    fn account(&mut self, prev_s: &[f64], t: f64) -> Result<(), SimError> {
        let dt = self.dt;
        let total = self.map.total_length();
        let gantry = self.cfg.sim.gantry_s;
        let leaders = self.leaders();
        let mut speed_sum = 0.0;
        let mut moving = 0usize;
        for (i, a) in self.agents.iter().enumerate() {
            if matches!(a.kind, AgentKind::Obstacle) || (a.exited && prev_s[i] >= total) {
                continue;
            }
            let travel = if self.map.is_closed() {
                (a.state.s - prev_s[i]).rem_euclid(total)
            } else {
                a.state.s - prev_s[i]
            };
            let crossed = if self.map.is_closed() {
                travel > 0.0 && (gantry - prev_s[i]).rem_euclid(total) < travel
            } else {
                prev_s[i] < gantry && a.state.s >= gantry
            };
            if crossed {
                self.acc.gantry_crossings += 1;
            }
            self.acc.distance_m += travel;
            self.acc.fuel_g += a.fuel.rate * dt;
            self.acc.speed_time += a.state.v * dt;
            self.acc.vehicle_time += dt;
            speed_sum += a.state.v;
            moving += 1;
            if a.exited {
                continue;
            }
            let ttc = leaders[i].map_or(f64::INFINITY, |(gap, v_lead)| {
                let closing = a.state.v - v_lead;
                if closing > 1e-6 {
                    gap.max(0.0) / closing
                } else {
                    f64::INFINITY
                }
            });
            self.acc.record_ttc(ttc, dt);

            if let Some(abv) = a.abv() {
                *self.acc.mode_time.entry(abv.mode).or_insert(0.0) += dt;
                if abv.mode != Mode::Driver {
                    let excess = a.state.v - self.map.speed_limit_at(a.state.s);
                    self.audit.max_speed_excess = self.audit.max_speed_excess.max(excess);
                    if let Some((gap, _)) = leaders[i] {
                        self.audit.min_front_gap = self.audit.min_front_gap.min(gap);
                    }
                }
                let on_secured = self.on_secured_truth(a.state.s);
                if let Err(msg) = check_mode_invariant(abv.mode, on_secured, a.state.v, &self.cfg.arbiter) {
                    return Err(self.integrity(t, format!("vehicle {}: {msg}", a.id)));
                }
            }
        }

        let width = self.cfg.vehicle.width;
        let length = self.cfg.vehicle.length;
        let mut now = BTreeSet::new();
        for i in 0..self.agents.len() {
            let a = &self.agents[i];
            if a.exited {
                continue;
            }
            for b in &self.agents[i + 1..] {
                if b.exited || (a.state.d - b.state.d).abs() >= width {
                    continue;
                }
                if self.map.delta_s(a.state.s, b.state.s).abs() < length {
                    now.insert((a.id, b.id));
                }
            }
        }
        for pair in now.difference(&self.colliding) {
            self.acc.collisions += 1;
            self.log.push(LogEvent::Collision { t, a: pair.0, b: pair.1 });
        }
        self.colliding = now;

        let row_agent = self.ego.or_else(|| (!self.agents.is_empty()).then_some(0));
        if let Some(e) = row_agent {
            let a = &self.agents[e];
            let abv = a.abv();
            let row = TraceRow {
                step: self.step,
                t,
                s: a.state.s,
                d: a.state.d,
                v: a.state.v,
                a: a.state.a,
                steer: a.state.steer,
                mode: abv.map_or("none".into(), |x| x.mode.to_string()),
                tor_state: abv.and_then(|x| x.tor).map_or("none".into(), |_| "pending".into()),
                plan_kind: abv
                    .and_then(|x| x.active.as_ref())
                    .map_or("none".into(), |tr| kind_name(tr.maneuver.kind).into()),
                assist_torque: abv.map_or(0.0, |x| x.shared.assist_torque),
                driver_torque: abv.map_or(0.0, |x| x.shared.driver_torque),
                override_active: abv.is_some_and(|x| x.shared.override_active),
                fuel_g: a.fuel.cumulative,
                fleet_n: moving,
                fleet_mean_v: if moving > 0 { speed_sum / moving as f64 } else { 0.0 },
                collisions: self.acc.collisions,
            };
            let mut line = String::new();
            row.write_to(&mut line);
            if let Some(trace) = &mut self.trace {
                trace.push_str(&line);
            }
            self.tail.push_back(line);
            if self.tail.len() > TAIL_ROWS {
                self.tail.pop_front();
            }
        }
        Ok(())
    }

    pub fn metrics(&self) -> Metrics {
        self.acc.finish(self.t())
    }

    pub fn finish(self) -> RunOutput {
        let metrics = self.metrics();
        let ego = self.ego.map(|i| EgoFinal {
            state: self.agents[i].state,
            mode: self.agents[i].abv().map_or(Mode::Driver, |a| a.mode),
        });
        RunOutput {
            metrics,
            trace: self.trace,
            log: self.log,
            audit: self.audit,
            ego,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let t = self.t();
        let view = |a: &Agent| {
            let (x, y, heading) = self.map.frenet_to_global(a.state.s, a.state.d).unwrap_or((a.state.s, a.state.d, 0.0));
            VehicleView {
                id: a.id,
                class: a.class(),
                s: a.state.s,
                d: a.state.d,
                x,
                y,
                heading: heading + a.state.heading_err,
                v: a.state.v,
                lane: a.state.lane,
                mode: a.abv().map(|x| x.mode),
            }
        };
        let sample = |traj: &Trajectory| -> Vec<TrajSample> {
            let t_on = (t - traj.t0).max(0.0);
            let n = ((traj.horizon - t_on).max(0.0) / 0.5).floor() as usize;
            (0..=n)
                .map(|k| {
                    let tt = t_on + k as f64 * 0.5;
                    let p = traj.point(tt);
                    let s = self.map.wrap_s(traj.s0 + p.ds);
                    let (x, y, _) = self.map.frenet_to_global(s, p.d).unwrap_or((s, p.d, 0.0));
                    TrajSample { t: tt - t_on, s, d: p.d, x, y, v: p.v }
                })
                .collect()
        };
        let ego = self.ego.and_then(|i| {
            let a = &self.agents[i];
            let abv = a.abv()?;
            let seg = self.map.segment_at(a.state.s);
            Some(EgoView {
                id: a.id,
                mode: abv.mode,
                tor: abv.tor,
                tor_remaining: abv.tor.map(|tor| (tor.deadline - t).max(0.0)),
                readiness: DriverReadiness {
                    last_activity_age: abv.readiness.last_activity_age.min(f64::MAX),
                    ..abv.readiness
                },
                applied_input: abv.input,
                plan_kind: abv.active.as_ref().map(|tr| kind_name(tr.maneuver.kind).to_string()),
                trajectory: abv.active.as_ref().map(&sample).unwrap_or_default(),
                mrs: abv.mrs.as_ref().map(&sample).unwrap_or_default(),
                shared: abv.shared,
                speed_limit: seg.speed_limit,
                advised_limit: self.advised.get(&seg.id).copied(),
                detection_range: self.cfg.perception.camera.range,
                last_command: self.last_command,
            })
        });
        let m = self.metrics();
        Snapshot {
            schema_version: TELEMETRY_SCHEMA_VERSION,
            t,
            step: self.step,
            paused: self.paused,
            vehicles: self.agents.iter().filter(|a| !a.exited).map(view).collect(),
            ego,
            recommendations: self.supervisor.active.values().copied().collect(),
            metrics: MetricsSoFar {
                collisions: m.collisions,
                mean_speed: m.mean_speed,
                total_fuel_g: m.total_fuel_g,
                tor_issued: m.tor_outcomes.issued,
            },
        }
    }
}

/// Lane-keeping gains of the modelled human driver: a critically damped
/// second-order lateral response, slower than the automated controller.
fn human_gains(cfg: &Config, v: f64) -> ControlConfig {
    const OMEGA: f64 = 1.0;
    const ZETA: f64 = 1.0;
    let v = v.max(5.0);
    let l = cfg.vehicle.wheelbase;
    ControlConfig {
        k_d: l * OMEGA * OMEGA / (v * v),
        k_heading: 2.0 * ZETA * OMEGA * l / v,
        ..cfg.control.clone()
    }
}

fn placeholder() -> AbvAgent {
    let rng = RngStreams::new(0).stream("placeholder", 0);
    AbvAgent {
        perception: PerceptionStack::new(rng.clone(), rng.clone(), rng),
        monitor: DriverMonitor::default(),
        guard: SpeedGuard::default(),
        mode: Mode::Driver,
        tor: None,
        tor_base: 0.0,
        active: None,
        mrs: None,
        shared: SharedControlState::default(),
        input: DriverInput::default(),
        readiness: DriverReadiness { ready: false, last_activity_age: f64::INFINITY },
        persona: Persona::Absent,
        planner_ok: true,
        perceived: VehicleState::default(),
        standstill_since: None,
    }
}

pub fn kind_name(kind: ManeuverKind) -> &'static str {
    match kind {
        ManeuverKind::KeepLane => "keep_lane",
        ManeuverKind::Follow => "follow",
        ManeuverKind::Stop => "stop",
        ManeuverKind::ChangeLeft => "change_left",
        ManeuverKind::ChangeRight => "change_right",
        ManeuverKind::Mrs => "mrs",
        ManeuverKind::EmergencyStop => "emergency_stop",
    }
}

/// Runs a scenario headless from start to end.
pub fn run(scenario: &Scenario, opts: RunOptions) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(scenario, opts)?;
    while !sim.is_done() {
        sim.step()?;
    }
    Ok(sim.finish())
}
