use std::hint::black_box;

use creakbench::flow::{batch_nll, batch_nll_grad, DynamicsNet, ProbeSet, SolverConfig, ATTR_DIM};
use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;

fn flow(c: &mut Criterion) {
    let (b, d) = (200, 8);
    let net = DynamicsNet::random(d, ATTR_DIM, 64, 2, 0.5, 1);
    let s = DMatrix::from_fn(b, d, |r, k| ((r * 7 + k * 3) % 11) as f64 / 5.0 - 1.0);
    let a = DMatrix::from_fn(b, ATTR_DIM, |r, k| ((r + k) % 5) as f64 / 4.0);
    let cfg = SolverConfig::default();
    let exact = ProbeSet::exact(b, d);

    c.bench_function("nll batch200 d8 exact", |bench| {
        bench.iter(|| batch_nll(&net, black_box(&s), &a, &cfg, &exact).unwrap())
    });
    c.bench_function("nll+grad batch200 d8 exact", |bench| {
        bench.iter(|| batch_nll_grad(&net, black_box(&s), &a, &cfg, &exact).unwrap())
    });
}

criterion_group!(benches, flow);
criterion_main!(benches);
