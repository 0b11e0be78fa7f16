mod common;

use common::*;
use emqs_core::formulations::{
    combined_gauge_system, fd_darwin_regularized, fd_dd_combined_gauge, fd_eqs_gauge,
    fd_full_maxwell_two_step, fd_graddiv_schur, fd_lagrange_coulomb, fd_monolithic_darwin,
    fd_symmetric_full_continuity, graddiv_term, td_symmetric_step,
};
use emqs_core::oracle::dense_diagnostics;
use emqs_core::solvers::direct_solve;
use emqs_core::{
    assemble, AssemblyOptions, Block, Excitation, FormulationId, MaterialOptions, NodeWeights,
    SolverOptions, C64,
};

const W: f64 = 6.283185307179586e7;

#[test]
fn vacuum_monolithic_upper_left_is_curlcurl() {
    let model = vacuum_model([2, 2, 2], 1.0);
    let exc = Excitation::unconstrained(&model.grid);
    let sys = fd_monolithic_darwin(&model, &exc, W).unwrap();
    let ul = dense(&sys.block(Block::A, Block::A));
    let n = model.grid.n_edges();
    let mut expect = vec![vec![0.0f64; n]; n];
    let nu = &model.hodges.nu;
    let curl = &model.incidence.curl;
    for (f, &nu_f) in nu.iter().enumerate().take(curl.nrows()) {
        let (cols, vals) = curl.row(f);
        for (&i, &ci) in cols.iter().zip(vals) {
            for (&j, &cj) in cols.iter().zip(vals) {
                expect[i][j] += f64::from(ci) * nu_f * f64::from(cj);
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            let d = (ul[i][j] - C64::new(expect[i][j], 0.0)).norm();
            assert!(d <= 1e-12 * expect[i][i].abs().max(1.0), "entry ({i},{j})");
        }
    }
}

#[test]
fn monolithic_with_one_conductive_cell_is_rank_deficient() {
    let grid = uniform_grid([2, 2, 2], 1.0);
    let model = model_with(
        grid.clone(),
        &[copper([0.0; 3], [1.0; 3])],
        &MaterialOptions::default(),
    );
    let sys = fd_monolithic_darwin(&model, &Excitation::unconstrained(&grid), W).unwrap();
    let d = dense_diagnostics(&sys, 3000).unwrap();
    assert!(d.nullity > 0);
    assert!(sys.flags.expected_singular);
}

#[test]
fn terminal_rhs_is_local_to_the_terminals() {
    let p = mixed_cube();
    let sys = fd_monolithic_darwin(&p.model, &p.excitation, W).unwrap();
    let grid = &p.model.grid;
    let mut terminal = vec![false; grid.n_nodes()];
    for &v in p
        .excitation
        .source_nodes
        .iter()
        .chain(&p.excitation.ground_nodes)
    {
        terminal[v] = true;
    }
    let part = &sys.partition;
    assert!(sys.rhs.iter().any(|v| v.norm() > 0.0));
    for (k, v) in sys.rhs.iter().enumerate() {
        if v.norm() == 0.0 {
            continue;
        }
        if k < part.n_a() {
            let (s, t) = grid.edge_nodes(part.free_edges[k]);
            assert!(
                terminal[s] || terminal[t],
                "edge row {k} away from the terminals"
            );
        } else {
            let node = part.free_nodes[k - part.n_a()];
            let near = (0..grid.n_edges()).any(|e| {
                let (s, t) = grid.edge_nodes(e);
                (s == node && terminal[t]) || (t == node && terminal[s])
            });
            assert!(near, "node row {k} away from the terminals");
        }
    }
}

#[test]
fn zero_kappa_hat_reproduces_monolithic() {
    let p = mixed_cube();
    let mono = fd_monolithic_darwin(&p.model, &p.excitation, W).unwrap();
    let reg = fd_darwin_regularized(&p.model, &p.excitation, W, 0.0, false).unwrap();
    assert_eq!(mono.matrix, reg.matrix);
    assert_eq!(mono.rhs, reg.rhs);
}

#[test]
fn regularized_has_full_rank() {
    let p = mixed_cube();
    let sys = fd_darwin_regularized(&p.model, &p.excitation, W, 1e-3, false).unwrap();
    assert_eq!(dense_diagnostics(&sys, 3000).unwrap().nullity, 0);
    assert!(!sys.flags.expected_singular);
    assert!(!sys.flags.is_symmetric);
    assert!(!sys.matrix.is_symmetric());
}

#[test]
fn psi_scaling_is_equivalent() {
    let p = mixed_cube();
    let opts = SolverOptions::default();
    let plain = fd_darwin_regularized(&p.model, &p.excitation, W, 1e-3, false).unwrap();
    let psi = fd_darwin_regularized(&p.model, &p.excitation, W, 1e-3, true).unwrap();
    let x0 = plain
        .expand(&direct_solve(&plain.matrix, &plain.rhs, &opts).unwrap().x)
        .unwrap();
    let x1 = psi
        .expand(&direct_solve(&psi.matrix, &psi.rhs, &opts).unwrap().x)
        .unwrap();
    assert!(rel_diff(&x1.phi, &x0.phi) <= 1e-10);
    assert!(rel_diff(&x1.a, &x0.a) <= 1e-10);
}

#[test]
fn symmetric_matrix_equals_its_transpose() {
    let p = mixed_cube();
    let sys = fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap();
    assert!(sys.matrix.is_symmetric());
    assert_eq!(sys.matrix.symmetry_defect(), 0.0);
}

#[test]
fn vacuum_symmetric_lower_right_is_permittivity_laplacian() {
    let model = vacuum_model([2, 2, 2], 0.5);
    let exc = Excitation::unconstrained(&model.grid);
    for w in [W, 2.0 * W] {
        let sys = fd_symmetric_full_continuity(&model, &exc, w).unwrap();
        let lr = dense(&sys.block(Block::Node, Block::Node));
        let n = model.grid.n_nodes();
        let mut expect = vec![vec![0.0f64; n]; n];
        for e in 0..model.grid.n_edges() {
            let (s, t) = model.grid.edge_nodes(e);
            let m = model.hodges.eps[e];
            expect[s][s] += m;
            expect[t][t] += m;
            expect[s][t] -= m;
            expect[t][s] -= m;
        }
        for i in 0..n {
            for j in 0..n {
                let d = (lr[i][j] - C64::new(expect[i][j], 0.0)).norm();
                assert!(d <= 1e-12 * expect[i][i], "entry ({i},{j}) at ω = {w}");
            }
        }
    }
}

#[test]
fn symmetric_and_regularized_agree_on_b() {
    let p = mixed_cube();
    let opts = SolverOptions::default();
    let b_of = |sys: &emqs_core::AssembledSystem| {
        let x = direct_solve(&sys.matrix, &sys.rhs, &opts).unwrap().x;
        let pot = sys.expand(&x).unwrap();
        p.model.incidence.curl.to_complex().mul_vec(&pot.a)
    };
    let sym = b_of(&fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap());
    let reg = b_of(&fd_darwin_regularized(&p.model, &p.excitation, W, 1e-3, false).unwrap());
    assert!(rel_diff(&sym, &reg) <= 1e-6, "{}", rel_diff(&sym, &reg));
}

#[test]
fn lagrange_multiplier_vanishes_and_matches_graddiv() {
    let p = mixed_cube();
    let opts = SolverOptions::default();
    let n = NodeWeights::Auto(1.0);
    let lag = fd_lagrange_coulomb(&p.model, &p.excitation, W, &n).unwrap();
    let gd = fd_graddiv_schur(&p.model, &p.excitation, W, &n).unwrap();
    assert!(lag.matrix.is_symmetric() && gd.matrix.is_symmetric());
    let xl = lag
        .expand(&direct_solve(&lag.matrix, &lag.rhs, &opts).unwrap().x)
        .unwrap();
    let xg = gd
        .expand(&direct_solve(&gd.matrix, &gd.rhs, &opts).unwrap().x)
        .unwrap();
    assert!(norm(&xl.multipliers) <= 1e-8 * norm(&xl.phi));
    assert!(rel_diff(&xl.a, &xg.a) <= 1e-10);
    assert!(rel_diff(&xl.phi, &xg.phi) <= 1e-10);
}

#[test]
fn lagrange_without_node_weights_matches_dense_rank() {
    let p = mixed_cube();
    let sys = fd_lagrange_coulomb(&p.model, &p.excitation, W, &NodeWeights::Zero).unwrap();
    let d = dense_diagnostics(&sys, 3000).unwrap();
    assert_eq!(d.nullity > 0, sys.flags.expected_singular);
}

#[test]
fn graddiv_is_nonsingular_on_vacuum_free_edges() {
    let model = vacuum_model([2, 2, 2], 1.0);
    let grid = &model.grid;
    let src: Vec<usize> = (0..grid.n_nodes())
        .filter(|&v| grid.node_coords(v)[2] == 0)
        .collect();
    let gnd: Vec<usize> = (0..grid.n_nodes())
        .filter(|&v| grid.node_coords(v)[2] == 2)
        .collect();
    let exc = Excitation::voltage(grid, src, gnd, 1.0);
    let sys = fd_graddiv_schur(&model, &exc, W, &NodeWeights::Auto(1.0)).unwrap();
    let a_block = emqs_core::oracle::matrix_diagnostics(
        "graddiv a",
        &sys.block(Block::A, Block::A),
        3000,
        64.0,
    )
    .unwrap();
    assert_eq!(a_block.nullity, 0);
    assert_eq!(dense_diagnostics(&sys, 3000).unwrap().nullity, 0);
}

#[test]
fn graddiv_term_scales_with_omega_squared() {
    let model = vacuum_model([2, 2, 2], 1.0);
    let exc = Excitation::unconstrained(&model.grid);
    let part = emqs_core::DofPartition::new(&model.grid, &exc);
    let n = vec![2.0; part.gauge_nodes.len()];
    let t1 = graddiv_term(&model, &part, W, &n);
    let t2 = graddiv_term(&model, &part, 2.0 * W, &n);
    assert!(t1.nnz() > 0);
    assert_eq!(t1.indices(), t2.indices());
    let big = t1.values().iter().map(|v| v.norm()).fold(0.0, f64::max);
    for (a, b) in t1.values().iter().zip(t2.values()) {
        assert!((b - a * 4.0).norm() <= 1e-14 * big);
    }
    // and it is what the grad-div system adds to the curl-curl block
    let nw = NodeWeights::Diagonal(vec![2.0; model.grid.n_nodes()]);
    let g = dense(
        &fd_graddiv_schur(&model, &exc, W, &nw)
            .unwrap()
            .block(Block::A, Block::A),
    );
    let s = dense(
        &fd_symmetric_full_continuity(&model, &exc, W)
            .unwrap()
            .block(Block::A, Block::A),
    );
    let t = dense(&t1);
    for i in 0..g.len() {
        for j in 0..g.len() {
            assert!((g[i][j] - s[i][j] - t[i][j]).norm() <= 1e-15 * s[i][i].norm());
        }
    }
}

#[test]
fn graddiv_rejects_zero_weights() {
    let p = mixed_cube();
    assert!(fd_graddiv_schur(&p.model, &p.excitation, W, &NodeWeights::Zero).is_err());
}

#[test]
fn eqs_gauge_is_block_triangular() {
    let p = mixed_cube();
    let sys = fd_eqs_gauge(&p.model, &p.excitation, W, 1e-3).unwrap();
    assert!(sys.flags.block_triangular);
    assert_eq!(sys.block(Block::Node, Block::A).nnz(), 0);
}

#[test]
fn eqs_gauge_potential_equals_standalone_eqs_solve() {
    let p = mixed_cube();
    let opts = SolverOptions::default();
    let sys = fd_eqs_gauge(&p.model, &p.excitation, W, 1e-3).unwrap();
    let full = direct_solve(&sys.matrix, &sys.rhs, &opts).unwrap().x;
    let r = sys.partition.node_range();
    let eqs = direct_solve(
        &sys.block(Block::Node, Block::Node),
        &sys.rhs[r.clone()],
        &opts,
    )
    .unwrap()
    .x;
    assert!(rel_diff(&full[r], &eqs) <= 1e-12);
}

#[test]
fn unregularized_eqs_gauge_kernel_is_the_void_gradient_space() {
    // the centre node of a 4³ vacuum box with a conducting slab at the
    // bottom only sees non-conductive, free edges
    let grid = uniform_grid([4, 4, 4], 1.0);
    let model = model_with(
        grid.clone(),
        &[copper([0.0, 0.0, 0.0], [4.0, 4.0, 1.0])],
        &MaterialOptions {
            kappa_hat: Some(0.0),
            ..MaterialOptions::default()
        },
    );
    let src: Vec<usize> = (0..grid.n_nodes())
        .filter(|&v| {
            let p = grid.node_coords(v);
            p[0] == 0 && p[2] <= 1
        })
        .collect();
    let gnd: Vec<usize> = (0..grid.n_nodes())
        .filter(|&v| {
            let p = grid.node_coords(v);
            p[0] == 4 && p[2] <= 1
        })
        .collect();
    let exc = Excitation::voltage(&grid, src, gnd, 1.0);
    let sys = fd_eqs_gauge(&model, &exc, W, 0.0).unwrap();
    let a = emqs_core::oracle::matrix_diagnostics("a", &sys.block(Block::A, Block::A), 3000, 64.0)
        .unwrap();
    // free nodes whose incident edges are all free and non-conductive
    let free_edge: Vec<bool> = {
        let mut f = vec![true; grid.n_edges()];
        for &e in &exc.boundary_edges {
            f[e] = false;
        }
        f
    };
    let expected = (0..grid.n_nodes())
        .filter(|&v| {
            (0..grid.n_edges())
                .filter(|&e| {
                    let (s, t) = grid.edge_nodes(e);
                    s == v || t == v
                })
                .all(|e| free_edge[e] && model.hodges.kappa[e] == 0.0)
        })
        .count();
    assert!(expected > 0);
    assert_eq!(a.nullity, expected);
    assert!(sys.flags.expected_singular);
}

#[test]
fn tsm_shares_the_eqs_block() {
    let p = mixed_cube();
    let eqs = fd_eqs_gauge(&p.model, &p.excitation, W, 1e-3).unwrap();
    let tsm = fd_full_maxwell_two_step(&p.model, &p.excitation, W).unwrap();
    assert_eq!(
        eqs.block(Block::Node, Block::Node),
        tsm.block(Block::Node, Block::Node)
    );
    let r = eqs.partition.node_range();
    assert_eq!(eqs.rhs[r.clone()], tsm.rhs[r]);
}

#[test]
fn tsm_solves_a_small_vacuum_cavity() {
    let model = vacuum_model([2, 2, 2], 0.01);
    let grid = &model.grid;
    let src: Vec<usize> = (0..grid.n_nodes())
        .filter(|&v| grid.node_coords(v)[2] == 0)
        .collect();
    let gnd: Vec<usize> = (0..grid.n_nodes())
        .filter(|&v| grid.node_coords(v)[2] == 2)
        .collect();
    let exc = Excitation::voltage(grid, src, gnd, 1.0);
    let sys = fd_full_maxwell_two_step(&model, &exc, W).unwrap();
    let sol = emqs_core::solve(&sys, &SolverOptions::default()).unwrap();
    assert!(sol.report.relative_residual <= 1e-10);
}

#[test]
fn dd_combined_with_jw_is_the_symmetric_matrix() {
    let p = mixed_cube();
    let dd = fd_dd_combined_gauge(&p.model, &p.excitation, W, C64::new(0.0, W)).unwrap();
    let sym = fd_symmetric_full_continuity(&p.model, &p.excitation, W).unwrap();
    assert_eq!(dd.matrix, sym.matrix);
    assert!(dd.flags.is_symmetric);
}

#[test]
fn dd_combined_charge_enters_one_row() {
    let p = mixed_cube();
    let beta = C64::new(0.0, W);
    let base = fd_dd_combined_gauge(&p.model, &p.excitation, W, beta).unwrap();
    let node = base.partition.free_nodes[3];
    let mut exc = p.excitation.clone();
    exc.charge[node] = C64::new(1e-12, 0.0);
    let charged = fd_dd_combined_gauge(&p.model, &exc, W, beta).unwrap();
    let row = base.partition.n_a() + 3;
    let s = C64::new(0.0, W);
    for (k, (a, b)) in base.rhs.iter().zip(&charged.rhs).enumerate() {
        if k == row {
            let expect = beta * exc.charge[node] / s;
            assert!((b - a - expect).norm() <= 1e-12 * expect.norm());
        } else {
            assert_eq!(a, b, "row {k}");
        }
    }
}

#[test]
fn real_beta_gives_a_symmetric_system() {
    let p = mixed_cube();
    let beta = C64::new(1e9, 0.0);
    let sys = combined_gauge_system(&p.model, &p.excitation, beta, beta).unwrap();
    assert!(sys.matrix.is_symmetric());
    // off-diagonal blocks carry M_κ + β M_ε
    let ur = sys.block(Block::A, Block::Node);
    let lu = sys.block(Block::Node, Block::A);
    assert_eq!(ur.transpose(), lu);
    let part = &sys.partition;
    let grid = &p.model.grid;
    for (r, c, v) in ur.iter() {
        let e = part.free_edges[r];
        let node = part.free_nodes[c];
        let (s, _) = grid.edge_nodes(e);
        let sign = if s == node { -1.0 } else { 1.0 };
        let w = p.model.hodges.kappa[e] + beta.re * p.model.hodges.eps[e];
        assert!((v - C64::new(sign * w, 0.0)).norm() <= 1e-15 * w.abs());
    }
}

#[test]
fn td_step_matrix_is_symmetric() {
    let p = mixed_cube();
    let step = td_symmetric_step(&p.model, &p.excitation, 1e-10, 1.0).unwrap();
    assert!(step.system.matrix.is_symmetric());
    assert!(step.system.flags.is_symmetric);
}

#[test]
fn assemble_dispatches_every_frequency_domain_id() {
    let p = mixed_cube();
    for id in FormulationId::ALL
        .into_iter()
        .filter(|id| !id.is_time_domain())
    {
        let sys = assemble(&p.model, &p.excitation, id, W, &AssemblyOptions::default()).unwrap();
        assert_eq!(sys.formulation, id);
        assert_eq!(sys.flags.is_symmetric, sys.matrix.is_symmetric(), "{id}");
    }
    assert!(assemble(
        &p.model,
        &p.excitation,
        FormulationId::Symmetric,
        0.0,
        &AssemblyOptions::default()
    )
    .is_err());
}
