use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use rtpl_bench::{input_stream, lattice_network, memory, short_scenario};
use rtpl_core::simulation::run_closed_loop;
use rtpl_core::{LearnerKind, SimConfig, Trajectory};

fn regressor(c: &mut Criterion) {
    let net = lattice_network(0.3);
    c.bench_function("regressor_25", |b| {
        b.iter(|| net.regressor(black_box(&[0.12, -0.4])).unwrap())
    });
}

fn smrls_step(c: &mut Criterion) {
    let net = lattice_network(0.3);
    let inputs = input_stream(2_000);
    let regressors: Vec<_> = inputs.iter().map(|x| net.regressor(x).unwrap()).collect();
    // warm state with most partitions along the loop occupied
    let mut warm = memory(net.len());
    for (x, phi) in inputs.iter().zip(&regressors) {
        warm.step(phi, x[0] - x[1], x).unwrap();
    }
    let mut k = 0;
    c.bench_function("smrls_step_25", |b| {
        b.iter(|| {
            let i = k % inputs.len();
            k += 1;
            warm.step(&regressors[i], inputs[i][0] * 0.5, &inputs[i]).unwrap();
        })
    });
    c.bench_function("smrls_bounds_25", |b| b.iter(|| black_box(warm.p_bounds())));
}

fn closed_loop(c: &mut Criterion) {
    let spec = short_scenario(2.0);
    let trajectory = Trajectory::new(spec.trajectory).unwrap();
    let config = SimConfig {
        duration: 2.0,
        ..SimConfig::default()
    };
    let mut group = c.benchmark_group("closed_loop_2s");
    group.sample_size(20);
    for kind in [LearnerKind::Pd, LearnerKind::Sgdl, LearnerKind::Rtpl] {
        group.bench_function(kind.as_str(), |b| {
            b.iter_batched(
                || spec.controller(kind).unwrap(),
                |mut controller| {
                    run_closed_loop(
                        &spec.plant,
                        &trajectory,
                        trajectory.normalization(),
                        &mut controller,
                        &config,
                    )
                    .unwrap()
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, regressor, smrls_step, closed_loop);
criterion_main!(benches);
