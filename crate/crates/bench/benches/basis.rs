use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dfcast::datasets::Lorenz96Params;
use dfcast::propagator::DensityState;
use dfcast::{
    auto_bandwidth, build_propagator, generate, leading_eigenbasis, qr_mixed_basis,
    DiffusionOperator, Selection, Sparsity, System, TimeSeries,
};

fn l96(n: usize) -> Arc<TimeSeries> {
    Arc::new(generate(&System::Lorenz96(Lorenz96Params::default()), n, 0.05, 0).unwrap())
}

fn operator(n: usize) -> DiffusionOperator {
    let s = l96(n);
    let eps = auto_bandwidth(&s).unwrap().epsilon;
    DiffusionOperator::build(s, eps, Sparsity::Dense).unwrap()
}

fn bench_operator(c: &mut Criterion) {
    let mut g = c.benchmark_group("operator");
    g.sample_size(10);
    for n in [500, 1000, 2000] {
        let s = l96(n);
        let eps = auto_bandwidth(&s).unwrap().epsilon;
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| DiffusionOperator::build(s.clone(), eps, Sparsity::Dense).unwrap())
        });
    }
    g.finish();
}

/// The QR-versus-eigensolver comparison at fixed N.
fn bench_basis(c: &mut Criterion) {
    let op = operator(2000);
    let mut g = c.benchmark_group("basis_n2000");
    g.sample_size(10);
    for m in [50, 100, 200] {
        g.bench_with_input(BenchmarkId::new("qr", m), &m, |b, &m| {
            b.iter(|| qr_mixed_basis(&op, None, m, &Selection::Random(1)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("eig", m), &m, |b, &m| {
            b.iter(|| leading_eigenbasis(&op, m).unwrap())
        });
    }
    g.finish();
}

fn bench_forecast(c: &mut Criterion) {
    let op = operator(2000);
    let basis = qr_mixed_basis(&op, None, 200, &Selection::Middle).unwrap();
    let prop = build_propagator(&basis, op.training()).unwrap();
    let state = DensityState::equilibrium(basis.m());
    c.bench_function("propagator_step_m200_x10", |b| {
        b.iter(|| prop.step(&state, 10))
    });
}

criterion_group!(benches, bench_operator, bench_basis, bench_forecast);
criterion_main!(benches);
