use std::f64::consts::PI;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use emqs_core::operators::build_incidence;
use emqs_core::scenario::{builtin, parse_scenario, Problem};
use emqs_core::solvers::{cocg, nested_dissection, SparseLu};
use emqs_core::{
    assemble, AssemblyOptions, FormulationId, Grid, GridSpec, SolverMethod, SolverOptions,
};

const OMEGA: f64 = 2.0 * PI * 1e7;

fn problem(name: &str) -> Problem {
    parse_scenario(builtin(name).unwrap())
        .unwrap()
        .build()
        .unwrap()
}

fn operators(c: &mut Criterion) {
    let grid = Grid::new(GridSpec::uniform([24, 24, 24], [1e-3; 3], [0.0; 3])).unwrap();
    c.bench_function("incidence 24^3", |b| {
        b.iter(|| build_incidence(black_box(&grid)))
    });
}

fn assembly(c: &mut Criterion) {
    let p = problem("coil");
    let o = AssemblyOptions::default();
    let mut g = c.benchmark_group("assemble coil");
    for id in [
        FormulationId::Regularized,
        FormulationId::Symmetric,
        FormulationId::Tsm,
    ] {
        g.bench_function(id.as_str(), |b| {
            b.iter(|| assemble(&p.model, &p.excitation, id, OMEGA, &o).unwrap())
        });
    }
    g.finish();
}

fn direct(c: &mut Criterion) {
    let p = problem("coil");
    let sys = assemble(
        &p.model,
        &p.excitation,
        FormulationId::Symmetric,
        OMEGA,
        &AssemblyOptions::default(),
    )
    .unwrap();
    let opts = SolverOptions::default();
    c.bench_function("nested dissection coil symmetric", |b| {
        b.iter(|| nested_dissection(black_box(&sys.matrix)))
    });
    let p = problem("mixed_cube");
    let sys = assemble(
        &p.model,
        &p.excitation,
        FormulationId::Symmetric,
        OMEGA,
        &AssemblyOptions::default(),
    )
    .unwrap();
    c.bench_function("lu mixed_cube symmetric", |b| {
        b.iter(|| {
            SparseLu::factor(&sys.matrix, &opts)
                .unwrap()
                .solve(&sys.rhs)
        })
    });
}

fn iterative(c: &mut Criterion) {
    let p = problem("coil");
    let sys = assemble(
        &p.model,
        &p.excitation,
        FormulationId::Symmetric,
        OMEGA,
        &AssemblyOptions::default(),
    )
    .unwrap();
    let opts = SolverOptions {
        method: SolverMethod::Iterative,
        tol: 1e-300,
        max_iter: 200,
        ..SolverOptions::default()
    };
    c.bench_function("cocg 200 iterations coil symmetric", |b| {
        b.iter(|| cocg(&sys.matrix, &sys.rhs, &opts))
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = operators, assembly, direct, iterative
}
criterion_main!(kernels);
