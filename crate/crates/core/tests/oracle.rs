mod common;

use common::*;
use emqs_core::formulations::{
    fd_darwin_regularized, fd_eqs_gauge, fd_graddiv_schur, fd_monolithic_darwin,
    fd_symmetric_full_continuity,
};
use emqs_core::oracle::{
    condition_sweep, dense_diagnostics, eps_divergence_drift, fit_phasor, gauge_residual,
    td_eps_divergence_drift, td_fd_consistency, td_fixed_point, GaugeKind,
};
use emqs_core::{
    solve, AssemblyOptions, Error, Excitation, FormulationId, MaterialOptions, NodeWeights,
    SolverOptions, C64,
};

const W: f64 = 6.283185307179586e7;

#[test]
fn conductive_unit_cube_monolithic_is_singular() {
    let grid = uniform_grid([1, 1, 1], 1.0);
    let model = model_with(
        grid.clone(),
        &[copper([0.0; 3], [1.0; 3])],
        &MaterialOptions::default(),
    );
    let sys = fd_monolithic_darwin(&model, &Excitation::unconstrained(&grid), W).unwrap();
    let d = dense_diagnostics(&sys, 100).unwrap();
    assert_eq!(d.dim, 12 + 8);
    assert!(d.nullity > 0);
}

#[test]
fn symmetric_has_zero_defect_and_graddiv_full_rank() {
    let p = mixed_cube();
    let sym = fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap();
    assert_eq!(dense_diagnostics(&sym, 3000).unwrap().symmetry_defect, 0.0);
    let gd = fd_graddiv_schur(&p.model, &p.excitation, W, &NodeWeights::Auto(1.0)).unwrap();
    let d = dense_diagnostics(&gd, 3000).unwrap();
    assert_eq!(d.nullity, 0);
    assert_eq!(d.symmetry_defect, 0.0);
}

#[test]
fn diagnostics_refuse_large_systems() {
    let p = mixed_cube();
    let sym = fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap();
    assert!(matches!(
        dense_diagnostics(&sym, 10),
        Err(Error::TooLarge { .. })
    ));
}

#[test]
fn symmetric_condition_grows_towards_dc() {
    let p = mixed_cube();
    let omegas = [omega(1e7), omega(1e5), omega(1e3)];
    let t = condition_sweep(
        &p.model,
        &p.excitation,
        FormulationId::Symmetric,
        &omegas,
        &AssemblyOptions::default(),
        3000,
    )
    .unwrap();
    assert_eq!(t.rows.len(), 3);
    assert_eq!(t.increases_towards_static(), Some(true));
}

#[test]
fn psi_scaling_does_not_worsen_the_condition() {
    let p = mixed_cube();
    let o = AssemblyOptions::default();
    let cond = |id| {
        condition_sweep(&p.model, &p.excitation, id, &[W], &o, 3000)
            .unwrap()
            .rows[0]
            .clone()
    };
    let plain = cond(FormulationId::Regularized);
    let psi = cond(FormulationId::RegularizedPsi);
    assert!(psi.raw_condition <= plain.raw_condition);
    assert!(psi.raw_condition.is_finite());
}

#[test]
fn single_frequency_sweep_has_no_trend() {
    let p = mixed_cube();
    let t = condition_sweep(
        &p.model,
        &p.excitation,
        FormulationId::Symmetric,
        &[W],
        &AssemblyOptions::default(),
        3000,
    )
    .unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.increases_towards_static(), None);
}

#[test]
fn zero_potential_has_zero_gauge_residual() {
    let p = mixed_cube();
    let sys = fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap();
    let a = vec![C64::new(0.0, 0.0); p.model.grid.n_edges()];
    for kind in [
        GaugeKind::CoulombKappaHat(1e-3),
        GaugeKind::CoulombEps,
        GaugeKind::MqsKappa,
    ] {
        assert_eq!(
            gauge_residual(&p.model, &sys.partition, &a, W, kind).unwrap(),
            0.0
        );
    }
}

#[test]
fn regularized_solution_satisfies_the_kappa_hat_gauge() {
    let p = mixed_cube();
    let kh = 1e-3;
    let sys = fd_darwin_regularized(&p.model, &p.excitation, W, kh, false).unwrap();
    let pot = sys
        .expand(&solve(&sys, &SolverOptions::default()).unwrap().x)
        .unwrap();
    let r = gauge_residual(
        &p.model,
        &sys.partition,
        &pot.a,
        W,
        GaugeKind::CoulombKappaHat(kh),
    )
    .unwrap();
    assert!(r <= 1e-8, "{r}");
}

#[test]
fn unregularized_eqs_gauge_satisfies_mqs_continuity() {
    let p = mixed_cube();
    let sys = fd_eqs_gauge(&p.model, &p.excitation, W, 0.0).unwrap();
    let pot = sys
        .expand(&solve(&sys, &SolverOptions::default()).unwrap().x)
        .unwrap();
    let r = gauge_residual(&p.model, &sys.partition, &pot.a, W, GaugeKind::MqsKappa).unwrap();
    assert!(r <= 1e-8, "{r}");
}

#[test]
fn phasor_fit_recovers_a_sinusoid() {
    let w = 3.0;
    let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.05).collect();
    let x = C64::from_polar(2.0, 0.4);
    let v: Vec<f64> = t
        .iter()
        .map(|&t| (x * C64::from_polar(1.0, w * t)).re + 0.5)
        .collect();
    let (ph, res) = fit_phasor(&t, &v, w);
    assert!((ph - x).norm() <= 1e-12);
    assert!(res <= 1e-12);
}

#[test]
fn td_reproduces_the_fd_phasor_and_converges() {
    let p = mixed_cube();
    let f = 1e7;
    let period = 1.0 / f;
    let opts = SolverOptions::default();
    let coarse =
        td_fd_consistency(&p.model, &p.excitation, omega(f), period / 200.0, 10, &opts).unwrap();
    assert!(!coarse.rows.is_empty());
    assert!(coarse.max_amplitude_error <= 0.02);
    assert!(coarse.max_phase_error_deg <= 2.0);
    assert!(!coarse.transient_flag);
    let fine =
        td_fd_consistency(&p.model, &p.excitation, omega(f), period / 400.0, 10, &opts).unwrap();
    assert!(fine.max_amplitude_error < coarse.max_amplitude_error);
    assert!(fine.max_phase_error_deg < coarse.max_phase_error_deg);
}

#[test]
fn dc_drive_reaches_a_fixed_point() {
    let p = mixed_cube();
    let change = td_fixed_point(
        &p.model,
        &p.excitation,
        1e-9,
        400,
        &SolverOptions::default(),
    )
    .unwrap();
    assert!(change <= 1e-10, "{change}");
}

/// Copper column through a 4×4×4 box, leaving void gauge nodes.
fn column_box() -> emqs_core::scenario::Problem {
    use serde_json::json;
    let mut v: serde_json::Value =
        serde_json::from_str(emqs_core::scenario::builtin("mixed_cube").unwrap()).unwrap();
    v["grid"]["cells"] = json!([4, 4, 4]);
    v["materials"][0]["boxes"][0] = json!({ "lo": [0.0, 0.0, 0.0], "hi": [0.01, 0.01, 0.04] });
    v["terminals"]["source"] =
        json!({ "lo": [0.0, 0.0, 0.04], "hi": [0.01, 0.01, 0.04], "potential": 1.0 });
    v["terminals"]["ground"] = json!({ "lo": [0.0, 0.0, 0.0], "hi": [0.01, 0.01, 0.0] });
    emqs_core::scenario::parse_scenario(&v.to_string())
        .unwrap()
        .build()
        .unwrap()
}

#[test]
fn eps_divergence_of_a_gradient_is_detected() {
    let p = column_box();
    let sys = fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap();
    let zero = vec![C64::new(0.0, 0.0); p.model.grid.n_edges()];
    let chi: Vec<C64> = (0..p.model.grid.n_nodes())
        .map(|v| C64::new((v * v) as f64, 0.0))
        .collect();
    let a = p.model.incidence.grad.to_complex().mul_vec(&chi);
    assert!(eps_divergence_drift(&p.model, &sys.partition, &a, &zero, norm(&a)) > 1e-3);
    assert_eq!(
        eps_divergence_drift(&p.model, &sys.partition, &a, &a, norm(&a)),
        0.0
    );
}

#[test]
fn td_steps_conserve_the_eps_divergence() {
    let p = column_box();
    let drift = td_eps_divergence_drift(
        &p.model,
        &p.excitation,
        W,
        5e-10,
        100,
        &SolverOptions::default(),
    )
    .unwrap();
    assert!(drift <= 1e-10, "{drift}");
}
