//! Open-loop evaluation throughput: scenario-level parallelism vs the
//! sequential fallback. Results must match bitwise, so only time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bridgead_core::config::RunConfig;
use bridgead_core::eval::run_open_loop;
use bridgead_core::model::BridgeModel;
use bridgead_core::par::Strategy;
use bridgead_core::scene::{generate_scenario, Scenario, ScenarioTemplate};

fn bench_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dims.channels = 16;
    cfg.dims.n_obj_max = 8;
    cfg.dims.n_map = 4;
    cfg.dims.map_points = 6;
    cfg.dims.m_mot = 2;
    cfg.dims.t_mot = 8;
    cfg.dims.m_plan = 6;
    cfg.dims.t_plan = 6;
    cfg.dims.k_history = 2;
    cfg.dims.t_m2m = 3;
    cfg.dims.t_p2p = 3;
    cfg.validate().expect("bench config valid");
    cfg
}

fn scenarios(n: usize) -> Vec<Scenario> {
    (0..n)
        .map(|i| generate_scenario(i as u64, ScenarioTemplate::OpenLoopRandom))
        .collect()
}

fn open_loop_strategies(c: &mut Criterion) {
    let cfg = bench_config();
    let model = BridgeModel::new(cfg);
    let mut group = c.benchmark_group("open_loop");
    group.sample_size(10);
    for n in [2usize, 8] {
        let scenes = scenarios(n);
        let seq = run_open_loop(&model, &scenes, false, Strategy::Sequential).unwrap();
        let par = run_open_loop(&model, &scenes, false, Strategy::Parallel).unwrap();
        assert_eq!(seq.l2_avg.to_bits(), par.l2_avg.to_bits());
        group.bench_with_input(BenchmarkId::new("sequential", n), &scenes, |b, s| {
            b.iter(|| run_open_loop(&model, s, false, Strategy::Sequential).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &scenes, |b, s| {
            b.iter(|| run_open_loop(&model, s, false, Strategy::Parallel).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, open_loop_strategies);
criterion_main!(benches);
