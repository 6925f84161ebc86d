use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use zsym::catalog;
use zsym::hyperbolicity;
use zsym::report::{self, Options};
use zsym::symmetry;

fn solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_zsystem");
    for n in [2, 3, 4] {
        let s = catalog::euler_isentropic(n, 1.4).unwrap();
        let pts = s.samples().unwrap();
        g.bench_with_input(BenchmarkId::new("isentropic", n), &n, |b, _| {
            b.iter(|| symmetry::solve_zsystem(black_box(&s), &pts, 1e-9).unwrap())
        });
    }
    g.finish();
}

fn hessian(c: &mut Criterion) {
    let s = catalog::euler_extended(4, catalog::gibbs(3.5, 1.0).unwrap()).unwrap();
    let pts = s.samples().unwrap();
    let e = catalog::unit(4, 0);
    c.bench_function("hessian_check/extended-4", |b| {
        b.iter(|| hyperbolicity::hessian_check(black_box(&s), &e, &pts, 1e-9).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let s = catalog::euler_entropy_conserving(3, catalog::gibbs(3.5, 1.0).unwrap()).unwrap();
    c.bench_function("analyze/entropy-conserving-3", |b| {
        b.iter(|| report::run(black_box(&s), &Options::default()).unwrap())
    });
}

criterion_group!(benches, solve, hessian, pipeline);
criterion_main!(benches);
