//! Dense-algebra checks on small systems: rank, symmetry, conditioning,
//! gauge residuals and time/frequency-domain consistency.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::formulations::{
    assemble, fd_symmetric_full_continuity, td_symmetric_step, AssemblyOptions, DofPartition,
    Excitation, FormulationId,
};
use crate::operators::FitModel;
use crate::solvers::{direct_solve, equilibrate, norm, SolverOptions};
use crate::sparse::CsrMatrix;

pub const DEFAULT_MAX_DOFS: usize = 3000;
/// Safety factor on the standard `ε·dim·σ_max` rank threshold.
pub const RANK_FACTOR: f64 = 64.0;
const EQUILIBRATION_SWEEPS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub id: String,
    pub dim: usize,
    pub rank: usize,
    pub nullity: usize,
    pub symmetry_defect: f64,
    /// Extreme singular values of the equilibrated matrix `D_r M D_c`.
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `σ_max / σ_min` of the equilibrated matrix; infinite for an exactly
    /// singular one.
    pub condition: f64,
    /// `σ_max / σ_min` of the matrix as assembled. Loses meaning once it
    /// approaches `1/ε`.
    pub raw_condition: f64,
    pub rank_threshold: f64,
}

pub fn singular_values(m: &CsrMatrix<C64>) -> Vec<f64> {
    let dense: DMatrix<C64> = m.to_dense();
    let mut sv: Vec<f64> = dense.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn matrix_diagnostics(
    id: &str,
    m: &CsrMatrix<C64>,
    max_dofs: usize,
    rank_factor: f64,
) -> Result<DiagnosticsReport> {
    let dim = m.nrows();
    if dim > max_dofs || m.ncols() > max_dofs {
        return Err(Error::TooLarge {
            dofs: dim,
            max: max_dofs,
        });
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("empty system".into()));
    }
    // Rank is invariant under diagonal scaling, and the raw blocks can be
    // twenty decades apart.
    let (dr, dc) = equilibrate(m, EQUILIBRATION_SWEEPS);
    let scaled = m.scale_both(&dr, &dc);
    let sv = singular_values(&scaled);
    let sigma_max = sv[0];
    let sigma_min = *sv.last().unwrap();
    let rank_threshold = sigma_max * dim as f64 * f64::EPSILON * rank_factor;
    let rank = sv.iter().filter(|&&s| s > rank_threshold).count();
    let raw = singular_values(m);
    let raw_min = *raw.last().unwrap();
    Ok(DiagnosticsReport {
        id: id.to_string(),
        dim,
        rank,
        nullity: dim - rank,
        symmetry_defect: m.symmetry_defect(),
        sigma_max,
        sigma_min,
        condition: if sigma_min > 0.0 {
            sigma_max / sigma_min
        } else {
            f64::INFINITY
        },
        raw_condition: if raw_min > 0.0 {
            raw[0] / raw_min
        } else {
            f64::INFINITY
        },
        rank_threshold,
    })
}

pub fn dense_diagnostics(
    system: &crate::formulations::AssembledSystem,
    max_dofs: usize,
) -> Result<DiagnosticsReport> {
    matrix_diagnostics(
        system.formulation.as_str(),
        &system.matrix,
        max_dofs,
        RANK_FACTOR,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub omega: f64,
    pub dim: usize,
    pub condition: f64,
    pub raw_condition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTable {
    pub formulation: FormulationId,
    pub rows: Vec<ConditionRow>,
}

impl ConditionTable {
    /// Whether the condition number grows strictly as ω decreases; `None`
    /// for fewer than two frequencies.
    pub fn increases_towards_static(&self) -> Option<bool> {
        if self.rows.len() < 2 {
            return None;
        }
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| b.omega.total_cmp(&a.omega));
        Some(rows.windows(2).all(|w| w[1].condition > w[0].condition))
    }
}

pub fn condition_sweep(
    model: &FitModel,
    exc: &Excitation,
    id: FormulationId,
    omegas: &[f64],
    options: &AssemblyOptions,
    max_dofs: usize,
) -> Result<ConditionTable> {
    let rows = omegas
        .iter()
        .map(|&omega| {
            let sys = assemble(model, exc, id, omega, options)?;
            let d = dense_diagnostics(&sys, max_dofs)?;
            Ok(ConditionRow {
                omega,
                dim: d.dim,
                condition: d.condition,
                raw_condition: d.raw_condition,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionTable {
        formulation: id,
        rows,
    })
}

/// Weight of a gauge residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GaugeKind {
    /// `Gᵀ M_κ̂` with the given κ̂ and the material field's placement.
    CoulombKappaHat(f64),
    /// `Gᵀ M_ε`.
    CoulombEps,
    /// `Gᵀ M_κ`, restricted to nodes touching a conductive edge.
    MqsKappa,
}

/// `‖B(jωa)‖ / (‖B‖_F ‖jωa‖)` with `B = GᵀM_α` restricted to the gauge
/// nodes of the partition, where the implicit gauge holds exactly.
pub fn gauge_residual(
    model: &FitModel,
    partition: &DofPartition,
    a: &[C64],
    omega: f64,
    kind: GaugeKind,
) -> Result<f64> {
    let grid = &model.grid;
    if a.len() != grid.n_edges() {
        return Err(Error::DimensionMismatch(format!(
            "vector potential has {} entries, grid has {} edges",
            a.len(),
            grid.n_edges()
        )));
    }
    let weights: Vec<f64> = match kind {
        GaugeKind::CoulombKappaHat(v) => {
            model.kappa_hat_hodge(v, model.materials.kappa_hat().placement)
        }
        GaugeKind::CoulombEps => model.hodges.eps.clone(),
        GaugeKind::MqsKappa => model.hodges.kappa.clone(),
    };
    let mut use_node = vec![false; grid.n_nodes()];
    for &v in &partition.gauge_nodes {
        use_node[v] = true;
    }
    if kind == GaugeKind::MqsKappa {
        let mut touches = vec![false; grid.n_nodes()];
        for e in (0..grid.n_edges()).filter(|&e| weights[e] > 0.0) {
            let (s, t) = grid.edge_nodes(e);
            touches[s] = true;
            touches[t] = true;
        }
        for (u, t) in use_node.iter_mut().zip(touches) {
            *u &= t;
        }
    }
    let s = C64::new(0.0, omega);
    let ja: Vec<C64> = a.iter().map(|&v| s * v).collect();
    let ja_norm = norm(&ja);
    if ja_norm == 0.0 {
        return Ok(0.0);
    }
    let mut r = vec![C64::new(0.0, 0.0); grid.n_nodes()];
    let mut frob = 0.0;
    for (e, v, g) in model.incidence.grad.iter() {
        if use_node[v] {
            let b = f64::from(g) * weights[e];
            r[v] += ja[e] * b;
            frob += b * b;
        }
    }
    if frob == 0.0 {
        return Ok(0.0);
    }
    Ok(norm(&r) / (frob.sqrt() * ja_norm))
}

/// `‖Gᵀ M_ε (a − a_ref)‖ / (‖Gᵀ M_ε‖_F · scale)` over gauge nodes whose
/// incident edges are all non-conductive. For an oscillating potential pass
/// the peak `‖a‖` of the run as `scale`; the instantaneous norm passes
/// through zero.
pub fn eps_divergence_drift(
    model: &FitModel,
    partition: &DofPartition,
    a: &[C64],
    a_ref: &[C64],
    scale: f64,
) -> f64 {
    let grid = &model.grid;
    let mut use_node = vec![false; grid.n_nodes()];
    for &v in &partition.gauge_nodes {
        use_node[v] = true;
    }
    for e in (0..grid.n_edges()).filter(|&e| model.hodges.kappa[e] > 0.0) {
        let (s, t) = grid.edge_nodes(e);
        use_node[s] = false;
        use_node[t] = false;
    }
    let eps = &model.hodges.eps;
    let mut r = vec![C64::new(0.0, 0.0); grid.n_nodes()];
    let mut frob = 0.0;
    for (e, v, g) in model.incidence.grad.iter() {
        if use_node[v] {
            let b = f64::from(g) * eps[e];
            r[v] += (a[e] - a_ref[e]) * b;
            frob += b * b;
        }
    }
    if frob == 0.0 || scale == 0.0 {
        return 0.0;
    }
    norm(&r) / (frob.sqrt() * scale)
}

/// Least-squares fit `c0 + c1 cos ωt + c2 sin ωt`; returns the phasor
/// `c1 − j c2` and the fit residual relative to the fitted amplitude.
pub fn fit_phasor(times: &[f64], values: &[f64], omega: f64) -> (C64, f64) {
    let n = times.len();
    let a = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => (omega * times[i]).cos(),
        _ => (omega * times[i]).sin(),
    });
    let b = nalgebra::DVector::from_column_slice(values);
    let svd = a.clone().svd(true, true);
    let c = svd.solve(&b, 1e-14).expect("SVD with both factors");
    let fit = &a * &c;
    let res = (&b - fit).norm() / (n as f64).sqrt();
    let amp = (c[1] * c[1] + c[2] * c[2]).sqrt();
    let rel = if amp > 0.0 {
        res / amp
    } else if res == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    (C64::new(c[1], -c[2]), rel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DofError {
    pub dof: usize,
    pub fd: C64,
    pub td: C64,
    pub amplitude_error: f64,
    pub phase_error_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdFdReport {
    pub omega: f64,
    pub dt: f64,
    pub steps: usize,
    /// Compared DOFs: those with `|X_fd| ≥ significance × (block maximum)`.
    pub rows: Vec<DofError>,
    pub max_amplitude_error: f64,
    pub max_phase_error_deg: f64,
    pub max_fit_residual: f64,
    /// Set when some fit residual exceeds 5 %: the transient has not died
    /// out or the response is not sinusoidal.
    pub transient_flag: bool,
}

/// Relative FD magnitude below which a DOF is excluded from the TD/FD
/// comparison.
pub const TD_FD_SIGNIFICANCE: f64 = 1e-6;

/// Drives the template's terminals with `φ_S cos ωt`, steps the symmetric
/// TD scheme for `periods` periods and compares the phasors extracted over
/// the last period with the symmetric FD solution.
pub fn td_fd_consistency(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
    dt: f64,
    periods: usize,
    opts: &SolverOptions,
) -> Result<TdFdReport> {
    let period = 2.0 * PI / omega;
    let steps = (periods as f64 * period / dt).round() as usize;
    let per_period = (period / dt).round() as usize;
    if per_period < 4 || steps < per_period {
        return Err(Error::InvalidParameter(
            "time step too coarse for the TD/FD check".into(),
        ));
    }
    let fd = fd_symmetric_full_continuity(model, exc, omega)?;
    let fd_x = direct_solve(&fd.matrix, &fd.rhs, opts)?.x;

    let td = td_symmetric_step(model, exc, dt, 1.0)?;
    let lu = crate::solvers::SparseLu::factor(&td.system.matrix, opts)?;
    let zero_js = vec![C64::new(0.0, 0.0); model.grid.n_edges()];
    let mut state = td.initial_state(1.0);
    let n = td.system.dim();
    let first = steps - per_period;
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(per_period); n];
    let mut times = Vec::with_capacity(per_period);
    for k in 1..=steps {
        let t = k as f64 * dt;
        let scale = (omega * t).cos();
        let rhs = td.rhs(&state, &zero_js, scale);
        let x = lu.solve(&rhs);
        state = td.state_from(&x, scale)?;
        if k > first {
            times.push(t);
            for (i, xi) in x.iter().enumerate() {
                samples[i].push(xi.re);
            }
        }
    }
    let p = &fd.partition;
    let block_max =
        |r: std::ops::Range<usize>| fd_x[r].iter().map(|v| v.norm()).fold(0.0, f64::max);
    let a_max = block_max(p.a_range());
    let n_max = block_max(p.node_range());
    let mut rows = Vec::new();
    let mut max_fit: f64 = 0.0;
    for i in 0..n {
        let scale = if i < p.n_a() { a_max } else { n_max };
        if fd_x[i].norm() < TD_FD_SIGNIFICANCE * scale || scale == 0.0 {
            continue;
        }
        let (ph, fit) = fit_phasor(&times, &samples[i], omega);
        max_fit = max_fit.max(fit);
        let amp = (ph.norm() - fd_x[i].norm()).abs() / fd_x[i].norm();
        let phase = (ph / fd_x[i]).arg().to_degrees().abs();
        rows.push(DofError {
            dof: i,
            fd: fd_x[i],
            td: ph,
            amplitude_error: amp,
            phase_error_deg: phase,
        });
    }
    Ok(TdFdReport {
        omega,
        dt,
        steps,
        max_amplitude_error: rows.iter().map(|r| r.amplitude_error).fold(0.0, f64::max),
        max_phase_error_deg: rows.iter().map(|r| r.phase_error_deg).fold(0.0, f64::max),
        rows,
        max_fit_residual: max_fit,
        transient_flag: max_fit > 0.05,
    })
}

/// Steps a constant drive and returns `‖aⁿ⁺¹ − aⁿ‖ / ‖aⁿ⁺¹‖` after `steps`
/// steps.
pub fn td_fixed_point(
    model: &FitModel,
    exc: &Excitation,
    dt: f64,
    steps: usize,
    opts: &SolverOptions,
) -> Result<f64> {
    let td = td_symmetric_step(model, exc, dt, 1.0)?;
    let lu = crate::solvers::SparseLu::factor(&td.system.matrix, opts)?;
    let mut state = td.initial_state(1.0);
    let mut change = f64::INFINITY;
    for _ in 0..steps {
        let rhs = td.rhs(&state, &exc.source_current, 1.0);
        let x = lu.solve(&rhs);
        let next = td.state_from(&x, 1.0)?;
        let diff: Vec<C64> = next.a.iter().zip(&state.a).map(|(p, q)| p - q).collect();
        let an = norm(&next.a);
        change = if an > 0.0 {
            norm(&diff) / an
        } else {
            norm(&diff)
        };
        state = next;
    }
    Ok(change)
}

/// Steps the drive `φ_S cos ωt` with zero source current and returns the
/// largest [`eps_divergence_drift`] of `aⁿ` against the initial state,
/// scaled by the peak `‖aⁿ‖` of the run.
pub fn td_eps_divergence_drift(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
    dt: f64,
    steps: usize,
    opts: &SolverOptions,
) -> Result<f64> {
    let td = td_symmetric_step(model, exc, dt, 1.0)?;
    let lu = crate::solvers::SparseLu::factor(&td.system.matrix, opts)?;
    let zero_js = vec![C64::new(0.0, 0.0); model.grid.n_edges()];
    let mut state = td.initial_state(1.0);
    let a0 = state.a.clone();
    let mut history = Vec::with_capacity(steps);
    for k in 1..=steps {
        let scale = (omega * k as f64 * dt).cos();
        let rhs = td.rhs(&state, &zero_js, scale);
        state = td.state_from(&lu.solve(&rhs), scale)?;
        history.push(state.a.clone());
    }
    let peak = history.iter().map(|a| norm(a)).fold(0.0, f64::max);
    Ok(history
        .iter()
        .map(|a| eps_divergence_drift(model, &td.system.partition, a, &a0, peak))
        .fold(0.0, f64::max))
}
