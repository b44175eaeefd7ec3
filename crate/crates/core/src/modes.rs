//! Four-mode arbitration between the driver and the automation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::ArbiterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    Driver,
    LongiAdas,
    FullSystem,
    Emergency,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Driver, Mode::LongiAdas, Mode::FullSystem, Mode::Emergency];

    pub fn is_automated(self) -> bool {
        matches!(self, Mode::LongiAdas | Mode::FullSystem)
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Driver => "Driver",
            Mode::LongiAdas => "LongiAdas",
            Mode::FullSystem => "FullSystem",
            Mode::Emergency => "Emergency",
        };
        f.write_str(s)
    }
}

/// Small set of modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct ModeSet(u8);

impl ModeSet {
    pub fn of(modes: &[Mode]) -> Self {
        Self(modes.iter().fold(0, |acc, m| acc | m.bit()))
    }

    pub fn contains(self, m: Mode) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn insert(&mut self, m: Mode) {
        self.0 |= m.bit();
    }

    pub fn iter(self) -> impl Iterator<Item = Mode> {
        Mode::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

impl fmt::Display for ModeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|m| m.to_string()).collect();
        f.write_str(&names.join("|"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverInput {
    pub steer_torque: f64,
    pub throttle: f64,
    pub brake: f64,
    pub engage_request: Option<Mode>,
    pub disengage_request: bool,
    pub acknowledge: bool,
    /// Operator reset out of Emergency once the vehicle is at rest.
    pub reset_emergency: bool,
}

impl DriverInput {
    pub fn is_finite(&self) -> bool {
        self.steer_torque.is_finite() && self.throttle.is_finite() && self.brake.is_finite()
    }

    /// Activity that counts toward driver readiness.
    pub fn is_active(&self, cfg: &ArbiterConfig) -> bool {
        self.steer_torque.abs() > cfg.torque_activity
            || self.throttle > cfg.pedal_activity
            || self.brake > cfg.pedal_activity
            || self.acknowledge
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverReadiness {
    pub ready: bool,
    /// Infinite when no activity has ever been seen.
    pub last_activity_age: f64,
}

/// Readiness from a time-stamped input history.
pub fn monitor_driver(
    history: &[(f64, DriverInput)],
    now: f64,
    window: f64,
    cfg: &ArbiterConfig,
) -> DriverReadiness {
    let last = history
        .iter()
        .filter(|(t, inp)| *t <= now && inp.is_active(cfg))
        .map(|(t, _)| *t)
        .fold(f64::NEG_INFINITY, f64::max);
    let age = now - last;
    DriverReadiness {
        ready: age <= window + 1e-9,
        last_activity_age: age,
    }
}

/// Streaming form of [`monitor_driver`]; only the last activity time matters.
#[derive(Debug, Clone, Copy, Default)]
pub struct DriverMonitor {
    last_activity: Option<f64>,
}

impl DriverMonitor {
    pub fn observe(&mut self, t: f64, input: &DriverInput, cfg: &ArbiterConfig) -> DriverReadiness {
        if input.is_active(cfg) {
            self.last_activity = Some(t);
        }
        self.readiness(t, cfg.readiness_window)
    }

    pub fn readiness(&self, now: f64, window: f64) -> DriverReadiness {
        let age = self.last_activity.map_or(f64::INFINITY, |t| now - t);
        DriverReadiness {
            ready: age <= window + 1e-9,
            last_activity_age: age,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TorReason {
    SecuredRoadEnding,
    SpeedExceeded,
    SystemFault,
    SupervisorOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TorState {
    Pending,
    Acknowledged,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TakeOverRequest {
    pub issued_at: f64,
    pub deadline: f64,
    pub reason: TorReason,
    pub state: TorState,
}

impl TakeOverRequest {
    fn resolve(mut self, state: TorState) -> Self {
        self.state = state;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemHealth {
    pub perception_ok: bool,
    pub actuation_ok: bool,
    /// Cleared when the planner hits an internal failure.
    pub planner_ok: bool,
}

impl Default for SystemHealth {
    fn default() -> Self {
        Self::HEALTHY
    }
}

impl SystemHealth {
    pub const HEALTHY: SystemHealth = SystemHealth {
        perception_ok: true,
        actuation_ok: true,
        planner_ok: true,
    };
    pub const FAULTY: SystemHealth = SystemHealth {
        perception_ok: false,
        actuation_ok: true,
        planner_ok: true,
    };

    pub fn ok(&self) -> bool {
        self.perception_ok && self.actuation_ok && self.planner_ok
    }
}

/// Modes the driver may engage right now. Emergency is never engageable;
/// it is entered only by the arbiter itself.
pub fn available_modes(v: f64, secured: bool, health: SystemHealth, cfg: &ArbiterConfig) -> ModeSet {
    let mut set = ModeSet::of(&[Mode::Driver]);
    if health.ok() {
        set.insert(Mode::LongiAdas);
        if secured && v <= cfg.full_speed_threshold {
            set.insert(Mode::FullSystem);
        }
    }
    set
}

/// Tracks how long the speed has sat above the engagement threshold.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpeedGuard {
    above_since: Option<f64>,
}

impl SpeedGuard {
    /// False once the speed exceeds the threshold for longer than the dwell,
    /// or at once when it exceeds the threshold plus hysteresis.
    pub fn update(&mut self, v: f64, t: f64, cfg: &ArbiterConfig) -> bool {
        if v <= cfg.full_speed_threshold {
            self.above_since = None;
            return true;
        }
        let since = *self.above_since.get_or_insert(t);
        v <= cfg.full_speed_threshold + cfg.hysteresis && t - since <= cfg.dwell
    }
}

/// Situation facts the arbiter needs beyond the driver inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArbiterContext {
    pub v: f64,
    /// Road predicate for the full system, including enough secured road ahead.
    pub secured: bool,
    /// The segment under the vehicle is secured right now.
    pub on_secured: bool,
    /// Output of the speed guard with hysteresis and dwell.
    pub speed_ok: bool,
    pub health: SystemHealth,
    /// Sustained steering override reported by shared control.
    pub override_active: bool,
    /// The infrastructure has revoked the secured status ahead.
    pub supervisor_order: bool,
}

impl ArbiterContext {
    pub fn standstill(&self) -> bool {
        self.v <= 0.05
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefusalReason {
    SpeedAboveThreshold,
    RoadNotSecured,
    SystemFault,
    EmergencyActive,
    NotEngageable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refusal {
    pub requested: Mode,
    pub reason: RefusalReason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub mode: Mode,
    /// Still-pending take-over request, if any.
    pub tor: Option<TakeOverRequest>,
    /// Request resolved during this step.
    pub resolved: Option<TakeOverRequest>,
    pub refusal: Option<Refusal>,
}

fn refusal_reason(requested: Mode, ctx: &ArbiterContext, cfg: &ArbiterConfig) -> RefusalReason {
    if requested == Mode::Emergency {
        RefusalReason::NotEngageable
    } else if !ctx.health.ok() {
        RefusalReason::SystemFault
    } else if !ctx.secured {
        RefusalReason::RoadNotSecured
    } else if ctx.v > cfg.full_speed_threshold {
        RefusalReason::SpeedAboveThreshold
    } else {
        RefusalReason::NotEngageable
    }
}

#[allow(clippy::too_many_arguments)]
/// One arbitration step. Priority: Emergency latch, fault, driver override,
/// full-system guard and take-over handling, engagement.
pub fn step_arbiter(
    mode: Mode,
    tor: Option<TakeOverRequest>,
    input: &DriverInput,
    readiness: DriverReadiness,
    avail: ModeSet,
    t: f64,
    ctx: &ArbiterContext,
    cfg: &ArbiterConfig,
) -> Transition {
    let stay = |mode, tor| Transition {
        mode,
        tor,
        resolved: None,
        refusal: None,
    };
    let finish = |mode, tor: Option<TakeOverRequest>, state| Transition {
        mode,
        tor: None,
        resolved: tor.map(|r| r.resolve(state)),
        refusal: None,
    };

    if mode == Mode::Emergency {
        if ctx.standstill() && input.reset_emergency {
            return finish(Mode::Driver, tor, TorState::Expired);
        }
        let mut tr = stay(Mode::Emergency, tor);
        if let Some(requested) = input.engage_request {
            tr.refusal = Some(Refusal {
                requested,
                reason: RefusalReason::EmergencyActive,
            });
        }
        return tr;
    }

    if mode.is_automated() && !ctx.health.ok() {
        return finish(Mode::Emergency, tor, TorState::Expired);
    }

    if input.disengage_request || ctx.override_active {
        return finish(Mode::Driver, tor, TorState::Acknowledged);
    }

    if mode == Mode::FullSystem {
        let hard_exit = !ctx.on_secured || ctx.v > cfg.full_speed_threshold + cfg.hysteresis;
        if hard_exit {
            return if readiness.ready {
                finish(Mode::Driver, tor, TorState::Acknowledged)
            } else {
                finish(Mode::Emergency, tor, TorState::Expired)
            };
        }
        if let Some(req) = tor {
            if t > req.deadline {
                return finish(Mode::Emergency, tor, TorState::Expired);
            }
            let takes_controls = input.is_active(cfg) || input.engage_request.is_some();
            if readiness.ready && takes_controls {
                let target = match input.engage_request {
                    Some(Mode::LongiAdas) if avail.contains(Mode::LongiAdas) => Mode::LongiAdas,
                    _ => Mode::Driver,
                };
                return finish(target, tor, TorState::Acknowledged);
            }
            return stay(Mode::FullSystem, tor);
        }
        let retain = ctx.secured && ctx.speed_ok && ctx.health.ok();
        if !retain {
            let reason = if ctx.supervisor_order {
                TorReason::SupervisorOrder
            } else if !ctx.speed_ok {
                TorReason::SpeedExceeded
            } else {
                TorReason::SecuredRoadEnding
            };
            return stay(
                Mode::FullSystem,
                Some(TakeOverRequest {
                    issued_at: t,
                    deadline: t + cfg.tor_deadline,
                    reason,
                    state: TorState::Pending,
                }),
            );
        }
    }

    if let Some(requested) = input.engage_request {
        if requested == mode {
            return stay(mode, tor);
        }
        if avail.contains(requested) {
            return finish(requested, tor, TorState::Acknowledged);
        }
        let mut tr = stay(mode, tor);
        tr.refusal = Some(Refusal {
            requested,
            reason: refusal_reason(requested, ctx, cfg),
        });
        return tr;
    }

    stay(mode, tor)
}

/// Speed setpoint ceiling while a take-over request is pending: a linear ramp
/// from `base` down to the configured floor.
pub fn tor_speed_cap(tor: &TakeOverRequest, t: f64, base: f64, cfg: &ArbiterConfig) -> f64 {
    let floor = cfg.tor_speed_floor.min(base);
    let frac = ((t - tor.issued_at) / cfg.tor_degrade_time).clamp(0.0, 1.0);
    base - (base - floor) * frac
}

/// Mode safety invariant: the full system only runs on secured road within the speed guard.
pub fn check_mode_invariant(mode: Mode, on_secured: bool, v: f64, cfg: &ArbiterConfig) -> Result<(), String> {
    if mode == Mode::FullSystem && !(on_secured && v <= cfg.full_speed_threshold + cfg.hysteresis) {
        return Err(format!(
            "FullSystem active with secured={on_secured}, v={v:.3} m/s"
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverAction {
    None,
    Disengage,
    EngageLongi,
    EngageFull,
    Acknowledge,
    Override,
    ResetEmergency,
}

impl DriverAction {
    pub const ALL: [DriverAction; 7] = [
        DriverAction::None,
        DriverAction::Disengage,
        DriverAction::EngageLongi,
        DriverAction::EngageFull,
        DriverAction::Acknowledge,
        DriverAction::Override,
        DriverAction::ResetEmergency,
    ];

    /// Driver input and override flag realizing this action.
    pub fn realize(self) -> (DriverInput, bool) {
        let mut input = DriverInput::default();
        let mut override_active = false;
        match self {
            DriverAction::None => {}
            DriverAction::Disengage => input.disengage_request = true,
            DriverAction::EngageLongi => input.engage_request = Some(Mode::LongiAdas),
            DriverAction::EngageFull => input.engage_request = Some(Mode::FullSystem),
            DriverAction::Acknowledge => input.acknowledge = true,
            DriverAction::Override => {
                input.steer_torque = 2.5;
                override_active = true;
            }
            DriverAction::ResetEmergency => input.reset_emergency = true,
        }
        (input, override_active)
    }

    fn name(self) -> &'static str {
        match self {
            DriverAction::None => "none",
            DriverAction::Disengage => "disengage",
            DriverAction::EngageLongi => "engage_longi",
            DriverAction::EngageFull => "engage_full",
            DriverAction::Acknowledge => "acknowledge",
            DriverAction::Override => "override",
            DriverAction::ResetEmergency => "reset_emergency",
        }
    }
}

/// Speeds probed by the truth table: standstill, 30 km/h and 70 km/h.
pub const SPEED_BUCKETS: [f64; 3] = [0.0, 8.33, 19.44];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRow {
    pub mode: Mode,
    pub v: f64,
    pub secured: bool,
    pub healthy: bool,
    pub action: DriverAction,
    pub ready: bool,
    pub avail: ModeSet,
    pub result: Mode,
    pub refusal: Option<RefusalReason>,
    pub tor_issued: bool,
}

/// Context used for a truth-table cell: no take-over request pending and the
/// speed guard judged on the instantaneous speed.
pub fn truth_context(
    v: f64,
    secured: bool,
    healthy: bool,
    override_active: bool,
    cfg: &ArbiterConfig,
) -> ArbiterContext {
    ArbiterContext {
        v,
        secured,
        on_secured: secured,
        speed_ok: v <= cfg.full_speed_threshold,
        health: if healthy {
            SystemHealth::HEALTHY
        } else {
            SystemHealth::FAULTY
        },
        override_active,
        supervisor_order: false,
    }
}

/// Every (mode, speed, secured, health, action, readiness) cell with its outcome.
pub fn dump_truth_table(cfg: &ArbiterConfig) -> Vec<TruthRow> {
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        for v in SPEED_BUCKETS {
            for secured in [false, true] {
                for healthy in [false, true] {
                    for action in DriverAction::ALL {
                        for ready in [false, true] {
                            let (input, ovr) = action.realize();
                            let ctx = truth_context(v, secured, healthy, ovr, cfg);
                            let avail = available_modes(v, secured, ctx.health, cfg);
                            let readiness = DriverReadiness {
                                ready,
                                last_activity_age: if ready { 0.0 } else { f64::INFINITY },
                            };
                            let tr = step_arbiter(mode, None, &input, readiness, avail, 0.0, &ctx, cfg);
                            rows.push(TruthRow {
                                mode,
                                v,
                                secured,
                                healthy,
                                action,
                                ready,
                                avail,
                                result: tr.mode,
                                refusal: tr.refusal.map(|r| r.reason),
                                tor_issued: tr.tor.is_some(),
                            });
                        }
                    }
                }
            }
        }
    }
    rows
}

pub fn truth_table_csv(rows: &[TruthRow]) -> String {
    let mut out = String::from("mode,speed_mps,secured,healthy,action,ready,available,result,refusal,tor_issued\n");
    for r in rows {
        let refusal = r
            .refusal
            .map(|x| serde_json::to_value(x).unwrap().as_str().unwrap().to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.v,
            r.secured,
            r.healthy,
            r.action.name(),
            r.ready,
            r.avail,
            r.result,
            refusal,
            r.tor_issued
        ));
    }
    out
}
