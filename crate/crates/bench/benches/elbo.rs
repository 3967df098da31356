use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vbgp_core::vb::elbo_and_gradient;
use vbgp_core::{ElboProblem, KernelKind, Likelihood, Observations, TimeGrid, VariationalParams};

fn elbo_gradient(c: &mut Criterion) {
    let obs = Observations::new(vec![1.0, 3.0, 5.0, 7.0, 9.0], vec![0.3, -0.2, 0.8, 0.1, -0.5]).unwrap();
    let mut group = c.benchmark_group("elbo-gradient");
    group.sample_size(20);
    for kind in [KernelKind::Exponential, KernelKind::Matern32] {
        for &steps in &[32usize, 64] {
            let grid = TimeGrid::uniform(0.0, 10.0, steps).unwrap();
            let problem = ElboProblem::new(kind, obs.clone(), grid, Likelihood::Identity, 0.1).unwrap();
            let params = VariationalParams::init(kind, 50, 7).unwrap();
            group.bench_with_input(BenchmarkId::new(kind.to_string(), steps), &problem, |b, problem| {
                b.iter(|| elbo_and_gradient(&params, problem, black_box(10), 3).unwrap());
            });
        }
    }
    group.finish();
}

criterion_group!(benches, elbo_gradient);
criterion_main!(benches);
