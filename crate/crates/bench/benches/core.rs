use std::hint::black_box;
use std::path::PathBuf;

use abv_core::config::{PerceptionConfig, PlannerConfig, VehicleParams};
use abv_core::perception::{Detection, SensorKind, TrackManager};
use abv_core::planner::{plan, solve_quintic, PlanContext, TrackedObject};
use abv_core::{load_scenario, run, Mode, RoadMap, RoadSegment, RunOptions, Simulation, VehicleState};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn scenario(name: &str) -> abv_core::Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect();
    load_scenario(&path).unwrap()
}

fn quintic(c: &mut Criterion) {
    c.bench_function("solve_quintic", |b| {
        b.iter(|| solve_quintic(black_box((0.5, 0.1, 0.0)), black_box((0.0, 0.0, 0.0)), black_box(4.0)).unwrap())
    });
}

fn planner_tick(c: &mut Criterion) {
    let map = RoadMap::new(vec![RoadSegment::straight(3000.0, 2, 13.89).secured(true)], false).unwrap();
    let ego = VehicleState { s: 100.0, v: 12.0, ..Default::default() };
    let objects = [
        TrackedObject { id: 1, s: 160.0, d: 0.0, v: 0.0 },
        TrackedObject { id: 2, s: 80.0, d: 3.5, v: 13.0 },
    ];
    let ctx = PlanContext { mode: Some(Mode::FullSystem), secured_here: true, full_speed_threshold: 13.89, ..Default::default() };
    let cfg = PlannerConfig::default();
    let vehicle = VehicleParams::default();
    c.bench_function("plan_tick", |b| {
        b.iter(|| plan(black_box(&ego), &objects, &map, &ctx, &cfg, &vehicle, 0.4, 200.0))
    });
}

fn fusion(c: &mut Criterion) {
    let cfg = PerceptionConfig::default();
    let detections: Vec<Detection> = (0..8)
        .flat_map(|i| {
            let rel_s = 10.0 + 12.0 * i as f64;
            let rel_d = if i % 2 == 0 { 0.0 } else { 3.5 };
            [
                Detection { sensor: SensorKind::Laser, rel_s, rel_d, rel_speed: Some(-1.0), timestamp: 0.0 },
                Detection { sensor: SensorKind::Camera, rel_s: rel_s + 0.3, rel_d, rel_speed: None, timestamp: 0.0 },
            ]
        })
        .collect();
    let mut warm = TrackManager::new();
    for _ in 0..10 {
        warm.fuse(&detections, 0.02, &cfg);
    }
    c.bench_function("fuse_16_detections", |b| {
        b.iter_batched(|| warm.clone(), |mut tm| tm.fuse(black_box(&detections), 0.02, &cfg), BatchSize::SmallInput)
    });
}

fn simulation(c: &mut Criterion) {
    let sc = scenario("s1_obstacle.json");
    c.bench_function("sim_step_s1", |b| {
        b.iter_batched(
            || Simulation::new(&sc, RunOptions::default()).unwrap(),
            |mut sim| sim.step().unwrap(),
            BatchSize::SmallInput,
        )
    });
    let mut short = sc.clone();
    short.duration = 10.0;
    let mut group = c.benchmark_group("run");
    group.sample_size(10);
    group.bench_function("s1_10s", |b| b.iter(|| run(black_box(&short), RunOptions::default()).unwrap()));
    group.finish();
}

criterion_group!(benches, quintic, planner_tick, fusion, simulation);
criterion_main!(benches);
