use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fbsde_bench::{field_options, grid, linear_problem};
use fbsde_core::ldp::{self, MinimizeOptions};
use fbsde_core::limit::{self, BvpOptions, ShootingField};
use fbsde_core::{pde, simulate, Vector};

fn parabolic(c: &mut Criterion) {
    let p = linear_problem();
    let mut group = c.benchmark_group("solve_parabolic");
    group.sample_size(10);
    for n in [51, 101, 201] {
        let g = grid(&p, n, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &g, |b, g| {
            b.iter(|| pde::solve_parabolic(&p, 0.1, g, &field_options()).unwrap())
        });
    }
    group.finish();
}

fn paths(c: &mut Criterion) {
    let p = linear_problem();
    let g = grid(&p, 101, 81);
    let field = pde::solve_parabolic(&p, 0.1, &g, &field_options()).unwrap();
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    for n_paths in [1_000, 10_000] {
        group.bench_with_input(BenchmarkId::from_parameter(n_paths), &n_paths, |b, &m| {
            b.iter(|| simulate::simulate_from(&p, &field, 0.1, 0.0, &p.x0, m, 7).unwrap())
        });
    }
    group.finish();
}

fn shooting(c: &mut Criterion) {
    let p = linear_problem();
    let opts = BvpOptions::new(0.5 / 256.0, 1e-12);
    c.bench_function("solve_bvp_shooting", |b| {
        b.iter(|| limit::solve_bvp_shooting(&p, 0.0, &p.x0, &opts).unwrap())
    });
    let field = ShootingField::new(&p, BvpOptions::new(0.5 / 32.0, 1e-12));
    let target = Vector::from_element(1, 0.5);
    let mut group = c.benchmark_group("minimize_i1_endpoint");
    group.sample_size(10);
    group.bench_function("32", |b| {
        b.iter(|| {
            ldp::minimize_i1_endpoint(&p, &field, &target, 32, &MinimizeOptions::default()).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, parabolic, paths, shooting);
criterion_main!(benches);
