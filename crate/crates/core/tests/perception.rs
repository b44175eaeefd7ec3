use abv_core::config::PerceptionConfig;
use abv_core::perception::{
    sense_objects, Detection, ObjectTrack, PerceptionStack, SensedObject, SensorKind, SensorStatus, TrackManager,
};
use abv_core::rng::RngStreams;
use abv_core::{RoadMap, RoadSegment, VehicleState};
use proptest::prelude::*;

const DT: f64 = 0.02;

fn road() -> RoadMap {
    RoadMap::new(vec![RoadSegment::straight(2000.0, 3, 13.89)], false).unwrap()
}

/// Maximum-cardinality, minimum-total-distance matching of tracks to detections inside the gate.
fn optimal_assignment(tracks: &[(u64, f64, f64)], dets: &[(usize, f64, f64)], gate: f64) -> Vec<(u64, usize)> {
    fn search(
        ti: usize,
        tracks: &[(u64, f64, f64)],
        dets: &[(usize, f64, f64)],
        gate: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<(u64, usize)>,
        cost: f64,
        best: &mut (usize, f64, Vec<(u64, usize)>),
    ) {
        if ti == tracks.len() {
            let better = current.len() > best.0 || (current.len() == best.0 && cost < best.1 - 1e-12);
            if better {
                *best = (current.len(), cost, current.clone());
            }
            return;
        }
        search(ti + 1, tracks, dets, gate, used, current, cost, best);
        let (id, ts, td) = tracks[ti];
        for (k, &(di, ds, dd)) in dets.iter().enumerate() {
            let dist = (ts - ds).hypot(td - dd);
            if used[k] || dist > gate {
                continue;
            }
            used[k] = true;
            current.push((id, di));
            search(ti + 1, tracks, dets, gate, used, current, cost + dist, best);
            current.pop();
            used[k] = false;
        }
    }
    let mut best = (0, f64::INFINITY, Vec::new());
    search(0, tracks, dets, gate, &mut vec![false; dets.len()], &mut Vec::new(), 0.0, &mut best);
    let mut pairs = best.2;
    pairs.sort();
    pairs
}

#[test]
fn crossing_objects_match_optimal_assignment() {
    let map = road();
    let cfg = PerceptionConfig::default();
    let ego = VehicleState { s: 0.0, d: 3.5, ..Default::default() };
    let mut rng = RngStreams::new(11).stream("objects", 0);
    let mut tm = TrackManager::new();
    let (mut agree, mut compared) = (0, 0);
    for k in 0..50 {
        let t = k as f64 * DT;
        let frac = k as f64 / 49.0;
        let objects = [
            SensedObject { s: 20.0, d: 3.5 - 3.0 + 6.0 * frac, v: 0.0 },
            SensedObject { s: 23.0, d: 3.5 + 3.0 - 6.0 * frac, v: 0.0 },
        ];
        let dets = sense_objects(&ego, &objects, &map, &cfg, SensorStatus::default(), t, &mut rng);
        let predicted: Vec<(u64, f64, f64)> = tm
            .tracks
            .iter()
            .map(|tr: &ObjectTrack| (tr.id, tr.rel_s + tr.rel_v * DT, tr.rel_d))
            .collect();
        let laser: Vec<(usize, f64, f64)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.sensor == SensorKind::Laser)
            .map(|(i, d)| (i, d.rel_s, d.rel_d))
            .collect();
        let expected = optimal_assignment(&predicted, &laser, cfg.gate);
        let report = tm.fuse_with_report(&dets, DT, &cfg);
        let mut got: Vec<(u64, usize)> = report
            .associations
            .iter()
            .filter(|a| dets[a.detection].sensor == SensorKind::Laser)
            .map(|a| (a.track_id, a.detection))
            .collect();
        got.sort();
        if !predicted.is_empty() {
            compared += 1;
            agree += usize::from(got == expected);
        }
    }
    assert!(compared >= 45);
    assert!(agree as f64 >= 0.95 * compared as f64, "{agree}/{compared}");
}

#[test]
fn stationary_obstacle_confirmed_before_two_second_ttc() {
    let map = road();
    let cfg = PerceptionConfig::default();
    let v = 13.89;
    for seed in 0..200 {
        let mut rng = RngStreams::new(seed).stream("objects", 0);
        let mut tm = TrackManager::new();
        let obstacle = [SensedObject { s: 130.0, d: 0.0, v: 0.0 }];
        let mut ego = VehicleState { s: 100.0, v, ..Default::default() };
        let mut confirmed_gap = None;
        for k in 0..20 {
            let dets = sense_objects(&ego, &obstacle, &map, &cfg, SensorStatus::default(), k as f64 * DT, &mut rng);
            tm.fuse(&dets, DT, &cfg);
            if tm.confirmed().next().is_some() {
                confirmed_gap = Some(130.0 - ego.s);
                break;
            }
            ego.s += v * DT;
        }
        let gap = confirmed_gap.unwrap_or_else(|| panic!("seed {seed}: never confirmed"));
        assert!(gap / v > 2.0, "seed {seed}: confirmed at ttc {:.2}", gap / v);
    }
}

#[test]
fn stacks_with_equal_seeds_agree() {
    let map = road();
    let cfg = PerceptionConfig::default();
    let streams = RngStreams::new(5);
    let make = || PerceptionStack::new(streams.stream("lanes", 0), streams.stream("loc", 0), streams.stream("objects", 0));
    let (mut a, mut b) = (make(), make());
    let mut ego = VehicleState { s: 10.0, v: 10.0, ..Default::default() };
    let objects = [SensedObject { s: 40.0, d: 0.2, v: 6.0 }, SensedObject { s: 60.0, d: 3.5, v: 9.0 }];
    for k in 0..300 {
        let t = k as f64 * DT;
        let oa = a.step(&ego, &objects, &map, &cfg, SensorStatus::default(), t, DT);
        let ob = b.step(&ego, &objects, &map, &cfg, SensorStatus::default(), t, DT);
        assert_eq!(oa, ob);
        ego.s += ego.v * DT;
    }
}

fn scatter() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((5.0..60.0f64, -4.0..8.0f64, -3.0..3.0f64), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn duplicate_tracks_do_not_persist(objs in scatter(), seed in any::<u64>()) {
        let map = road();
        let cfg = PerceptionConfig::default();
        let mut rng = RngStreams::new(seed).stream("objects", 0);
        let ego = VehicleState { s: 0.0, d: 0.0, ..Default::default() };
        let mut tm = TrackManager::new();
        let mut streak = 0;
        for k in 0..60 {
            let t = k as f64 * DT;
            let objects: Vec<SensedObject> = objs
                .iter()
                .map(|&(s, d, vd)| SensedObject { s, d: d + vd * t, v: 0.0 })
                .collect();
            let dets: Vec<Detection> = sense_objects(&ego, &objects, &map, &cfg, SensorStatus::default(), t, &mut rng);
            tm.fuse(&dets, DT, &cfg);
            let close = tm.tracks.iter().enumerate().any(|(i, a)| {
                tm.tracks[i + 1..].iter().any(|b| (a.rel_s - b.rel_s).hypot(a.rel_d - b.rel_d) <= cfg.gate)
            });
            streak = if close { streak + 1 } else { 0 };
            prop_assert!(streak <= 3);
            let mut ids: Vec<u64> = tm.tracks.iter().map(|t| t.id).collect();
            ids.dedup();
            prop_assert_eq!(ids.len(), tm.tracks.len());
        }
    }
}
