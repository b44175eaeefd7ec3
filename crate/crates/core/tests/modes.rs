mod common;

use abv_core::config::ArbiterConfig;
use abv_core::modes::{
    available_modes, check_mode_invariant, dump_truth_table, step_arbiter, ArbiterContext, DriverAction,
    DriverMonitor, SpeedGuard, SystemHealth, TakeOverRequest,
};
use abv_core::{Mode, TorState};
use proptest::prelude::*;

const DT: f64 = 0.02;

#[test]
fn every_result_is_available_or_a_fallback() {
    let cfg = ArbiterConfig::default();
    for row in dump_truth_table(&cfg) {
        let oracle = available_modes(row.v, row.secured, if row.healthy { SystemHealth::HEALTHY } else { SystemHealth::FAULTY }, &cfg);
        assert_eq!(row.avail, oracle);
        if row.result != row.mode && !matches!(row.result, Mode::Emergency | Mode::Driver) {
            assert!(oracle.contains(row.result), "{row:?}");
        }
    }
}

#[test]
fn engage_at_seventy_is_refused_for_speed() {
    let cfg = ArbiterConfig::default();
    let row = dump_truth_table(&cfg)
        .into_iter()
        .find(|r| r.mode == Mode::Driver && r.v > 19.0 && r.secured && r.healthy && r.action == DriverAction::EngageFull && r.ready)
        .unwrap();
    assert_eq!(row.result, Mode::Driver);
    assert_eq!(
        (row.result, row.refusal),
        common::expected_transition(row.mode, row.v, true, true, DriverAction::EngageFull, true)
    );
}

fn action() -> impl Strategy<Value = DriverAction> {
    prop_oneof![
        20 => Just(DriverAction::None),
        1 => Just(DriverAction::Disengage),
        2 => Just(DriverAction::EngageLongi),
        3 => Just(DriverAction::EngageFull),
        1 => Just(DriverAction::Acknowledge),
        1 => Just(DriverAction::Override),
        1 => Just(DriverAction::ResetEmergency),
    ]
}

#[derive(Debug, Clone)]
struct Step {
    dv: f64,
    flip_secured: bool,
    flip_health: bool,
    action: DriverAction,
}

fn step() -> impl Strategy<Value = Step> {
    (-0.15..0.15f64, prop::bool::weighted(0.01), prop::bool::weighted(0.005), action())
        .prop_map(|(dv, flip_secured, flip_health, action)| Step { dv, flip_secured, flip_health, action })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn arbiter_keeps_the_mode_invariant(v0 in 0.0..16.0f64, secured0 in any::<bool>(), steps in prop::collection::vec(step(), 1..1500)) {
        let cfg = ArbiterConfig::default();
        let mut mode = Mode::Driver;
        let mut tor: Option<TakeOverRequest> = None;
        let mut guard = SpeedGuard::default();
        let mut monitor = DriverMonitor::default();
        let (mut v, mut secured, mut healthy) = (v0, secured0, true);
        for (k, st) in steps.iter().enumerate() {
            let t = k as f64 * DT;
            v = (v + st.dv).clamp(0.0, 20.0);
            secured ^= st.flip_secured;
            healthy ^= st.flip_health;
            let (input, override_active) = st.action.realize();
            let readiness = monitor.observe(t, &input, &cfg);
            let health = if healthy { SystemHealth::HEALTHY } else { SystemHealth::FAULTY };
            let ctx = ArbiterContext {
                v,
                secured,
                on_secured: secured,
                speed_ok: guard.update(v, t, &cfg),
                health,
                override_active,
                supervisor_order: false,
            };
            let avail = available_modes(v, secured, health, &cfg);
            let tr = step_arbiter(mode, tor, &input, readiness, avail, t, &ctx, &cfg);
            if let Some(req) = tr.tor {
                prop_assert!(req.deadline > req.issued_at);
                prop_assert_eq!(req.state, TorState::Pending);
            }
            if let Some(done) = tr.resolved {
                if done.state == TorState::Expired {
                    prop_assert_eq!(tr.mode, Mode::Emergency);
                }
            }
            if tr.mode == Mode::FullSystem {
                prop_assert!(healthy, "FullSystem while faulty");
                prop_assert!(check_mode_invariant(tr.mode, secured, v, &cfg).is_ok(), "t={t:.2} v={v:.2} secured={secured}");
            }
            if mode == Mode::Emergency && tr.mode != Mode::Emergency {
                prop_assert_eq!(tr.mode, Mode::Driver);
                prop_assert!(ctx.standstill());
            }
            mode = tr.mode;
            tor = tr.tor;
        }
    }
}
