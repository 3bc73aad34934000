use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use gbl_bench::{training_fixture, weno_fixture};
use gbl_core::flux::{flux_jet, m_star};
use gbl_core::nn::{AdamConfig, AdamState, OutputSeeds};
use gbl_core::riemann::solve_riemann;
use gbl_core::Mobility;

fn flux(c: &mut Criterion) {
    let m = Mobility::new(2.0).unwrap();
    c.bench_function("flux_jet", |b| b.iter(|| flux_jet(black_box(0.31), black_box(0.6), &m)));
    c.bench_function("m_star", |b| {
        b.iter(|| m_star(&Mobility::new(black_box(2.0)).unwrap()))
    });
}

fn riemann(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_riemann");
    for name in ["case1", "case3a", "case4a"] {
        let data = gbl_core::harness::find_case(name).unwrap().riemann_data().unwrap();
        g.bench_function(name, |b| b.iter(|| solve_riemann(black_box(&data)).unwrap()));
    }
    g.finish();
}

fn weno(c: &mut Criterion) {
    let (mut solver, fields) = weno_fixture("case1");
    let dt = solver.stable_dt(&fields);
    c.bench_function("weno_rk3_step/case1", |b| {
        b.iter(|| solver.step_tvdrk3(black_box(&fields), dt).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("cpinn");
    g.sample_size(20);
    let fx = training_fixture("case1");
    g.bench_function("losses/case1", |b| {
        b.iter(|| fx.problem.losses(&fx.net1, &fx.net2).unwrap())
    });
    g.bench_function("epoch/case1", |b| {
        b.iter_batched(
            || {
                let n1 = fx.net1.clone();
                let n2 = fx.net2.clone();
                let o1 = AdamState::new(&n1, AdamConfig::default());
                let o2 = AdamState::new(&n2, AdamConfig::default());
                (n1, n2, o1, o2)
            },
            |(mut n1, mut n2, mut o1, mut o2)| {
                let (a, b) = fx.problem.losses(&n1, &n2).unwrap();
                o1.step(&mut n1, &a.grads, 1e-3);
                o2.step(&mut n2, &b.grads, 1e-3);
                (n1, n2)
            },
            BatchSize::LargeInput,
        )
    });
    let pts = &fx.problem.samples.sd2_interior;
    g.bench_function("record_backward/sd2_interior", |b| {
        b.iter(|| {
            let mut tape = fx.net2.record(pts.view(), true);
            tape.backward(&OutputSeeds::zeros(1, pts.ncols(), true)).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, flux, riemann, weno, training);
criterion_main!(benches);
