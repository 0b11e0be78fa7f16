mod common;

use common::*;
use emqs_core::formulations::{
    fd_darwin_regularized, fd_eqs_gauge, fd_full_maxwell_two_step, fd_monolithic_darwin,
    fd_symmetric_full_continuity,
};
use emqs_core::solvers::{cocg, direct_solve, relative_residual};
use emqs_core::{
    block_back_substitute, solve, solve_monolithic, Error, Excitation, MaterialOptions,
    Preconditioner, SolverMethod, SolverOptions, TripletBuilder, C64,
};

const W: f64 = 6.283185307179586e7;

#[test]
fn regularized_direct_residual() {
    let p = mixed_cube();
    let sys = fd_darwin_regularized(&p.model, &p.excitation, W, 1e-3, false).unwrap();
    let sol = solve(&sys, &SolverOptions::default()).unwrap();
    assert!(sol.report.relative_residual <= 1e-10);
    assert_eq!(
        sol.report.relative_residual,
        relative_residual(&sys.matrix, &sol.x, &sys.rhs)
    );
    assert!(sol.report.fill.is_some());
}

#[test]
fn monolithic_raises_singular_matrix() {
    let grid = uniform_grid([2, 2, 2], 1.0);
    let model = model_with(
        grid.clone(),
        &[copper([0.0; 3], [1.0; 3])],
        &MaterialOptions::default(),
    );
    let sys = fd_monolithic_darwin(&model, &Excitation::unconstrained(&grid), W).unwrap();
    match solve(&sys, &SolverOptions::default()) {
        Err(Error::SingularMatrix { .. }) => {}
        other => panic!("expected a singular matrix, got {other:?}"),
    }
}

#[test]
fn identity_gives_the_rhs_back() {
    let n = 7;
    let mut t = TripletBuilder::new(n, n);
    for i in 0..n {
        t.push(i, i, C64::new(1.0, 0.0));
    }
    let a = t.build();
    let b: Vec<C64> = (0..n)
        .map(|i| C64::new(i as f64 * 0.3 - 1.0, 1.0 / (i as f64 + 1.0)))
        .collect();
    let out = direct_solve(&a, &b, &SolverOptions::default()).unwrap();
    assert_eq!(out.x, b);
}

fn iterative(tol: f64, max_iter: usize) -> SolverOptions {
    SolverOptions {
        method: SolverMethod::Iterative,
        tol,
        max_iter,
        preconditioner: Preconditioner::Jacobi,
        ..SolverOptions::default()
    }
}

#[test]
fn cocg_converges_on_the_symmetric_system() {
    let p = mixed_cube();
    let sys = fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap();
    let it = solve(&sys, &iterative(1e-8, 20_000)).unwrap();
    assert!(it.report.iterations > 0);
    assert!(it.report.relative_residual <= 1e-7);
    let lu = solve(&sys, &SolverOptions::default()).unwrap();
    // solutions agree to the accuracy the residual allows
    let err = rel_diff(&it.x, &lu.x);
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn cocg_and_lu_agree_on_a_well_conditioned_system() {
    let n = 40;
    let mut t = TripletBuilder::new(n, n);
    for i in 0..n {
        t.push(i, i, C64::new(4.0, 0.5));
        if i + 1 < n {
            t.push(i, i + 1, C64::new(-1.0, 0.1));
            t.push(i + 1, i, C64::new(-1.0, 0.1));
        }
    }
    let a = t.build();
    let b: Vec<C64> = (0..n).map(|i| C64::new((i as f64).sin(), 0.2)).collect();
    let tol = 1e-10;
    let it = cocg(&a, &b, &iterative(tol, 1000)).unwrap();
    let lu = direct_solve(&a, &b, &SolverOptions::default()).unwrap();
    assert!(rel_diff(&it.x, &lu.x) <= 10.0 * tol);
}

#[test]
fn forced_non_convergence_returns_best_iterate() {
    let p = mixed_cube();
    let sys = fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap();
    match solve(&sys, &iterative(1e-30, 5)) {
        Err(Error::MaxIterations {
            iterations, best, ..
        }) => {
            assert!(iterations >= 5);
            assert_eq!(best.len(), sys.dim());
        }
        other => panic!("expected MaxIterations, got {other:?}"),
    }
}

#[test]
fn back_substitution_matches_monolithic_solve() {
    let p = mixed_cube();
    let opts = SolverOptions::default();
    for sys in [
        fd_eqs_gauge(&p.model, &p.excitation, W, 1e-3).unwrap(),
        fd_full_maxwell_two_step(&p.model, &p.excitation, W).unwrap(),
    ] {
        let blocks = block_back_substitute(&sys, &opts).unwrap();
        let mono = solve_monolithic(&sys, &opts).unwrap();
        assert!(rel_diff(&blocks.x, &mono.x) <= 1e-12, "{}", sys.formulation);
    }
}

#[test]
fn back_substitution_rejects_coupled_systems() {
    let p = mixed_cube();
    let sys = fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap();
    assert!(matches!(
        block_back_substitute(&sys, &SolverOptions::default()),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn any_column_order_gives_the_same_solution() {
    use emqs_core::solvers::SparseLu;
    let p = mixed_cube();
    let sys = fd_darwin_regularized(&p.model, &p.excitation, W, 1e-3, false).unwrap();
    let opts = SolverOptions::default();
    let n = sys.dim();
    let nd = SparseLu::factor(&sys.matrix, &opts)
        .unwrap()
        .solve(&sys.rhs);
    let natural = SparseLu::factor_ordered(&sys.matrix, (0..n).collect(), &opts)
        .unwrap()
        .solve(&sys.rhs);
    let reversed = SparseLu::factor_ordered(&sys.matrix, (0..n).rev().collect(), &opts)
        .unwrap()
        .solve(&sys.rhs);
    assert!(rel_diff(&natural, &nd) <= 1e-10);
    assert!(rel_diff(&reversed, &nd) <= 1e-10);
}

#[test]
fn column_order_must_be_a_permutation() {
    use emqs_core::solvers::SparseLu;
    let p = mixed_cube();
    let sys = fd_darwin_regularized(&p.model, &p.excitation, W, 1e-3, false).unwrap();
    let n = sys.dim();
    let mut q: Vec<usize> = (0..n).collect();
    q[1] = 0;
    let opts = SolverOptions::default();
    assert!(matches!(
        SparseLu::factor_ordered(&sys.matrix, q, &opts),
        Err(Error::InvalidParameter(_))
    ));
    assert!(SparseLu::factor_ordered(&sys.matrix, vec![0], &opts).is_err());
}
