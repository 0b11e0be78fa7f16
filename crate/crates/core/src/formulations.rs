//! Block systems of the frequency- and time-domain potential formulations.
//!
//! Unknowns are ordered `[a | φ (or ψ) | γ]`: edge line integrals of the
//! vector potential on free edges, nodal potentials on free nodes, and
//! Lagrange multipliers where a formulation has them. Dirichlet values are
//! eliminated by row/column reduction and folded into the right-hand side,
//! which preserves exact symmetry of symmetric formulations.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::materials::KappaHatPlacement;
use crate::operators::FitModel;
use crate::sparse::{congruence, CsrMatrix, TripletBuilder};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Formulation identifiers as used on the command line and in scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FormulationId {
    Monolithic,
    Regularized,
    RegularizedPsi,
    Symmetric,
    Lagrange,
    GradDiv,
    EqsGauge,
    Tsm,
    DdCombined,
    TdSymmetric,
}

impl FormulationId {
    pub const ALL: [FormulationId; 10] = [
        FormulationId::Monolithic,
        FormulationId::Regularized,
        FormulationId::RegularizedPsi,
        FormulationId::Symmetric,
        FormulationId::Lagrange,
        FormulationId::GradDiv,
        FormulationId::EqsGauge,
        FormulationId::Tsm,
        FormulationId::DdCombined,
        FormulationId::TdSymmetric,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FormulationId::Monolithic => "monolithic",
            FormulationId::Regularized => "regularized",
            FormulationId::RegularizedPsi => "regularized-psi",
            FormulationId::Symmetric => "symmetric",
            FormulationId::Lagrange => "lagrange",
            FormulationId::GradDiv => "graddiv",
            FormulationId::EqsGauge => "eqs-gauge",
            FormulationId::Tsm => "tsm",
            FormulationId::DdCombined => "dd-combined",
            FormulationId::TdSymmetric => "td-symmetric",
        }
    }

    pub fn is_time_domain(self) -> bool {
        self == FormulationId::TdSymmetric
    }
}

impl fmt::Display for FormulationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FormulationId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FormulationId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown formulation `{s}`")))
    }
}

/// Sources and Dirichlet data.
#[derive(Debug, Clone)]
pub struct Excitation {
    /// Source current per edge, A.
    pub source_current: Vec<C64>,
    /// Γ_S nodes and their potential.
    pub source_nodes: Vec<usize>,
    pub source_potential: C64,
    /// Γ_G nodes and their potential.
    pub ground_nodes: Vec<usize>,
    pub ground_potential: C64,
    /// Edges with `a = 0`.
    pub boundary_edges: Vec<usize>,
    /// Nodal charge source, C.
    pub charge: Vec<C64>,
}

impl Excitation {
    /// Voltage drive between two terminals with `n × A = 0` on all of ∂Ω.
    pub fn voltage(
        grid: &Grid,
        source_nodes: Vec<usize>,
        ground_nodes: Vec<usize>,
        potential: f64,
    ) -> Self {
        Self {
            source_current: vec![ZERO; grid.n_edges()],
            source_nodes,
            source_potential: C64::new(potential, 0.0),
            ground_nodes,
            ground_potential: ZERO,
            boundary_edges: grid.boundary_edges(),
            charge: vec![ZERO; grid.n_nodes()],
        }
    }

    /// No sources and no Dirichlet constraints at all; the raw operator
    /// structure used by algebraic diagnostics.
    pub fn unconstrained(grid: &Grid) -> Self {
        Self {
            source_current: vec![ZERO; grid.n_edges()],
            source_nodes: Vec::new(),
            source_potential: ZERO,
            ground_nodes: Vec::new(),
            ground_potential: ZERO,
            boundary_edges: Vec::new(),
            charge: vec![ZERO; grid.n_nodes()],
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidExcitation(m));
        if self.source_current.len() != grid.n_edges() {
            return bad(format!(
                "source current has {} entries, grid has {} edges",
                self.source_current.len(),
                grid.n_edges()
            ));
        }
        if self.charge.len() != grid.n_nodes() {
            return bad(format!(
                "charge has {} entries, grid has {} nodes",
                self.charge.len(),
                grid.n_nodes()
            ));
        }
        let nn = grid.n_nodes();
        let mut seen = vec![0u8; nn];
        for &v in &self.source_nodes {
            if v >= nn {
                return bad(format!("source node {v} out of range"));
            }
            seen[v] |= 1;
        }
        for &v in &self.ground_nodes {
            if v >= nn {
                return bad(format!("ground node {v} out of range"));
            }
            seen[v] |= 2;
        }
        if seen.contains(&3) {
            return bad("source and ground terminals overlap".into());
        }
        if let Some(&e) = self.boundary_edges.iter().find(|&&e| e >= grid.n_edges()) {
            return bad(format!("boundary edge {e} out of range"));
        }
        Ok(())
    }

    /// Whether every edge tangential to ∂Ω carries `a = 0`.
    pub fn covers_boundary(&self, grid: &Grid) -> bool {
        let mut fixed = vec![false; grid.n_edges()];
        for &e in &self.boundary_edges {
            fixed[e] = true;
        }
        grid.boundary_edges().into_iter().all(|e| fixed[e])
    }
}

/// Which nodal unknown a system carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeUnknown {
    /// Electric scalar potential φ, V.
    Phi,
    /// Time-integrated potential ψ with φ = jωψ, V·s.
    Psi,
}

/// Free/fixed split of all entities and block layout of the reduced system.
#[derive(Debug, Clone)]
pub struct DofPartition {
    pub n_edges: usize,
    pub n_nodes: usize,
    pub free_edges: Vec<usize>,
    pub fixed_edges: Vec<usize>,
    pub free_nodes: Vec<usize>,
    pub fixed_nodes: Vec<usize>,
    /// Free nodes whose incident edges are all free. The implicit gauge
    /// relations hold exactly here; Lagrange multipliers live here.
    pub gauge_nodes: Vec<usize>,
    /// Nodes carrying a multiplier in this system (empty unless Lagrange).
    pub multiplier_nodes: Vec<usize>,
}

impl DofPartition {
    pub fn new(grid: &Grid, exc: &Excitation) -> Self {
        let ne = grid.n_edges();
        let nn = grid.n_nodes();
        let mut edge_fixed = vec![false; ne];
        for &e in &exc.boundary_edges {
            edge_fixed[e] = true;
        }
        let mut node_fixed = vec![false; nn];
        for &v in exc.source_nodes.iter().chain(&exc.ground_nodes) {
            node_fixed[v] = true;
        }
        let mut node_touches_fixed_edge = vec![false; nn];
        for e in (0..ne).filter(|&e| edge_fixed[e]) {
            let (s, t) = grid.edge_nodes(e);
            node_touches_fixed_edge[s] = true;
            node_touches_fixed_edge[t] = true;
        }
        Self {
            n_edges: ne,
            n_nodes: nn,
            free_edges: (0..ne).filter(|&e| !edge_fixed[e]).collect(),
            fixed_edges: (0..ne).filter(|&e| edge_fixed[e]).collect(),
            free_nodes: (0..nn).filter(|&v| !node_fixed[v]).collect(),
            fixed_nodes: (0..nn).filter(|&v| node_fixed[v]).collect(),
            gauge_nodes: (0..nn)
                .filter(|&v| !node_fixed[v] && !node_touches_fixed_edge[v])
                .collect(),
            multiplier_nodes: Vec::new(),
        }
    }

    pub fn n_a(&self) -> usize {
        self.free_edges.len()
    }

    pub fn n_node_dofs(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn n_multipliers(&self) -> usize {
        self.multiplier_nodes.len()
    }

    pub fn n_free(&self) -> usize {
        self.n_a() + self.n_node_dofs() + self.n_multipliers()
    }

    pub fn a_range(&self) -> std::ops::Range<usize> {
        0..self.n_a()
    }

    pub fn node_range(&self) -> std::ops::Range<usize> {
        self.n_a()..self.n_a() + self.n_node_dofs()
    }

    pub fn multiplier_range(&self) -> std::ops::Range<usize> {
        let s = self.n_a() + self.n_node_dofs();
        s..s + self.n_multipliers()
    }

    /// Whether no nodal potential is prescribed.
    pub fn is_floating(&self) -> bool {
        self.fixed_nodes.is_empty()
    }
}

/// Structural claims attached to an assembled system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StructureFlags {
    pub is_symmetric: bool,
    pub expected_singular: bool,
    pub block_triangular: bool,
}

/// Frequency or time-step the system was assembled for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drive {
    Frequency { omega: f64 },
    TimeStep { dt: f64, gamma: f64 },
}

/// Blocks of a reduced system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    A,
    Node,
    Multiplier,
}

/// A reduced block system ready for solving.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub formulation: FormulationId,
    pub matrix: CsrMatrix<C64>,
    pub rhs: Vec<C64>,
    pub partition: DofPartition,
    pub flags: StructureFlags,
    pub drive: Drive,
    pub node_unknown: NodeUnknown,
    /// Columns of the unreduced matrix belonging to fixed unknowns,
    /// restricted to free rows; ordered `[fixed edges | fixed nodes]`.
    pub lift: CsrMatrix<C64>,
    /// Values of the fixed unknowns in the same order.
    pub fixed_values: Vec<C64>,
}

/// Potentials on all entities, with Dirichlet values filled in.
#[derive(Debug, Clone)]
pub struct Potentials {
    /// Vector-potential line integrals on every edge, Wb.
    pub a: Vec<C64>,
    /// Scalar potential φ on every node, V.
    pub phi: Vec<C64>,
    /// Multipliers on `partition.multiplier_nodes`.
    pub multipliers: Vec<C64>,
}

impl AssembledSystem {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn omega(&self) -> Option<f64> {
        match self.drive {
            Drive::Frequency { omega } => Some(omega),
            Drive::TimeStep { .. } => None,
        }
    }

    fn range(&self, b: Block) -> std::ops::Range<usize> {
        match b {
            Block::A => self.partition.a_range(),
            Block::Node => self.partition.node_range(),
            Block::Multiplier => self.partition.multiplier_range(),
        }
    }

    /// Extracts one block of the reduced matrix.
    pub fn block(&self, rows: Block, cols: Block) -> CsrMatrix<C64> {
        let r: Vec<usize> = self.range(rows).collect();
        let c: Vec<usize> = self.range(cols).collect();
        self.matrix.submatrix(&r, &c)
    }

    /// Scatters a reduced solution onto all entities. A ψ solution is
    /// converted to φ = jωψ.
    pub fn expand(&self, x: &[C64]) -> Result<Potentials> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "solution has {} entries, system has {}",
                x.len(),
                self.dim()
            )));
        }
        let p = &self.partition;
        let mut a = vec![ZERO; p.n_edges];
        let mut node = vec![ZERO; p.n_nodes];
        for (k, &e) in p.free_edges.iter().enumerate() {
            a[e] = x[k];
        }
        for (k, &e) in p.fixed_edges.iter().enumerate() {
            a[e] = self.fixed_values[k];
        }
        let off = p.n_a();
        for (k, &v) in p.free_nodes.iter().enumerate() {
            node[v] = x[off + k];
        }
        let nfe = p.fixed_edges.len();
        for (k, &v) in p.fixed_nodes.iter().enumerate() {
            node[v] = self.fixed_values[nfe + k];
        }
        let phi = match self.node_unknown {
            NodeUnknown::Phi => node,
            NodeUnknown::Psi => {
                let s = C64::new(0.0, self.omega().expect("ψ systems are frequency-domain"));
                node.into_iter().map(|v| s * v).collect()
            }
        };
        Ok(Potentials {
            a,
            phi,
            multipliers: x[p.multiplier_range()].to_vec(),
        })
    }

    /// Recomputes the reduced right-hand side for a full unreduced
    /// right-hand side and new Dirichlet values.
    pub fn reduce_rhs(&self, full_rhs: &[C64], fixed_values: &[C64]) -> Vec<C64> {
        let free = free_global_indices(&self.partition);
        let lifted = self.lift.mul_vec(fixed_values);
        free.iter()
            .zip(lifted)
            .map(|(&g, l)| full_rhs[g] - l)
            .collect()
    }
}

/// Global (unreduced) index of every free unknown, in reduced order.
fn free_global_indices(p: &DofPartition) -> Vec<usize> {
    let ne = p.n_edges;
    let nn = p.n_nodes;
    p.free_edges
        .iter()
        .copied()
        .chain(p.free_nodes.iter().map(|&v| ne + v))
        .chain((0..p.multiplier_nodes.len()).map(|k| ne + nn + k))
        .collect()
}

fn fixed_global_indices(p: &DofPartition) -> Vec<usize> {
    let ne = p.n_edges;
    p.fixed_edges
        .iter()
        .copied()
        .chain(p.fixed_nodes.iter().map(|&v| ne + v))
        .collect()
}

/// Full unreduced system over `[all edges | all nodes | multipliers]`.
struct FullSystem {
    matrix: CsrMatrix<C64>,
    rhs: Vec<C64>,
}

fn reduce(
    full: FullSystem,
    partition: DofPartition,
    fixed_node_value: impl Fn(usize) -> C64,
    meta: (FormulationId, StructureFlags, Drive, NodeUnknown),
) -> AssembledSystem {
    let free = free_global_indices(&partition);
    let fixed = fixed_global_indices(&partition);
    let fixed_values: Vec<C64> = partition
        .fixed_edges
        .iter()
        .map(|_| ZERO)
        .chain(partition.fixed_nodes.iter().map(|&v| fixed_node_value(v)))
        .collect();
    let matrix = full.matrix.submatrix(&free, &free);
    let lift = full.matrix.submatrix(&free, &fixed);
    let lifted = lift.mul_vec(&fixed_values);
    let rhs = free
        .iter()
        .zip(lifted)
        .map(|(&g, l)| full.rhs[g] - l)
        .collect();
    let (formulation, flags, drive, node_unknown) = meta;
    AssembledSystem {
        formulation,
        matrix,
        rhs,
        partition,
        flags,
        drive,
        node_unknown,
        lift,
        fixed_values,
    }
}

/// Edge weights `κ + s ε`.
pub fn sigma_weights(model: &FitModel, s: C64) -> Vec<C64> {
    model
        .hodges
        .kappa
        .iter()
        .zip(&model.hodges.eps)
        .map(|(&k, &e)| C64::new(k, 0.0) + s * e)
        .collect()
}

fn real_weights(w: &[f64]) -> Vec<C64> {
    w.iter().map(|&v| C64::new(v, 0.0)).collect()
}

fn scaled(s: C64, w: &[C64]) -> Vec<C64> {
    w.iter().map(|&v| s * v).collect()
}

/// Description of a `[a | φ]` block system:
///
/// ```text
/// [ CᵀM_νC + X + diag(ul) ,  diag(ur) G          ] [a]   [ j_s                    ]
/// [ Gᵀ diag(ll)           ,  lr_scale·Gᵀdiag(lr)G ] [φ] = [ node_scale (Gᵀj_s + q) ]
/// ```
struct TwoByTwo {
    ul: Vec<C64>,
    ul_extra: Option<CsrMatrix<C64>>,
    ur: Vec<C64>,
    ll: Option<Vec<C64>>,
    lr: Vec<C64>,
    lr_scale: Option<C64>,
    node_scale: C64,
    node_source: Option<Vec<C64>>,
}

struct Pieces {
    curlcurl: CsrMatrix<C64>,
    grad: CsrMatrix<C64>,
}

impl Pieces {
    fn new(model: &FitModel) -> Self {
        let curl = model.incidence.curl.to_complex();
        Self {
            curlcurl: congruence(&curl, &real_weights(&model.hodges.nu)),
            grad: model.incidence.grad.to_complex(),
        }
    }
}

/// `diag(w) G` as an edge × node matrix.
fn weighted_grad(grad: &CsrMatrix<C64>, w: &[C64]) -> CsrMatrix<C64> {
    let mut b = TripletBuilder::with_capacity(grad.nrows(), grad.ncols(), grad.nnz());
    for (e, v, g) in grad.iter() {
        b.push(e, v, w[e] * g);
    }
    b.build()
}

fn assemble_two_by_two(
    model: &FitModel,
    exc: &Excitation,
    pieces: &Pieces,
    spec: TwoByTwo,
    extra_dim: usize,
) -> (TripletBuilder<C64>, Vec<C64>) {
    let ne = model.grid.n_edges();
    let nn = model.grid.n_nodes();
    let dim = ne + nn + extra_dim;
    let mut t = TripletBuilder::with_capacity(dim, dim, pieces.curlcurl.nnz() + 8 * ne + 8 * nn);

    t.push_block(0, 0, &pieces.curlcurl);
    if let Some(x) = &spec.ul_extra {
        t.push_block(0, 0, x);
    }
    for (e, &w) in spec.ul.iter().enumerate() {
        t.push(e, e, w);
    }
    t.push_block(0, ne, &weighted_grad(&pieces.grad, &spec.ur));
    if let Some(ll) = &spec.ll {
        t.push_block_transposed(ne, 0, &weighted_grad(&pieces.grad, ll));
    }
    let lap = congruence(&pieces.grad, &spec.lr);
    match spec.lr_scale {
        Some(f) => t.push_block(ne, ne, &lap.map(|v| f * v)),
        None => t.push_block(ne, ne, &lap),
    }

    let mut rhs = vec![ZERO; dim];
    rhs[..ne].copy_from_slice(&exc.source_current);
    let div_js = pieces.grad.transpose().mul_vec(&exc.source_current);
    for v in 0..nn {
        let q = spec.node_source.as_ref().map_or(ZERO, |q| q[v]);
        rhs[ne + v] = spec.node_scale * (div_js[v] + q);
    }
    (t, rhs)
}

/// Number of independent discrete gradients on free edges that the edge
/// weight `w` does not see: components of the node graph linked by fixed
/// edges and by edges with `w > 0`, minus one.
pub fn gradient_kernel_dim(model: &FitModel, partition: &DofPartition, w: &[f64]) -> usize {
    let grid = &model.grid;
    let mut parent: Vec<usize> = (0..grid.n_nodes()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut link = |e: usize| {
        let (s, t) = grid.edge_nodes(e);
        let (rs, rt) = (find(&mut parent, s), find(&mut parent, t));
        if rs != rt {
            parent[rs.max(rt)] = rs.min(rt);
        }
    };
    for &e in &partition.fixed_edges {
        link(e);
    }
    for &e in &partition.free_edges {
        if w[e] > 0.0 {
            link(e);
        }
    }
    let roots = (0..grid.n_nodes())
        .filter(|&v| find(&mut parent, v) == v)
        .count();
    roots - 1
}

fn check_omega(omega: f64) -> Result<C64> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::StaticLimit { omega });
    }
    Ok(C64::new(0.0, omega))
}

fn setup(model: &FitModel, exc: &Excitation) -> Result<(Pieces, DofPartition)> {
    exc.validate(&model.grid)?;
    Ok((Pieces::new(model), DofPartition::new(&model.grid, exc)))
}

fn terminal_value(exc: &Excitation) -> impl Fn(usize) -> C64 + '_ {
    move |v| {
        if exc.ground_nodes.contains(&v) {
            exc.ground_potential
        } else {
            exc.source_potential
        }
    }
}

fn positive_sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Discrete Darwin-Ampère plus Darwin continuity. Singular by construction.
pub fn fd_monolithic_darwin(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
) -> Result<AssembledSystem> {
    let s = check_omega(omega)?;
    let (pieces, partition) = setup(model, exc)?;
    let sigma = sigma_weights(model, s);
    let spec = TwoByTwo {
        ul: scaled(s, &real_weights(&model.hodges.kappa)),
        ul_extra: None,
        ur: sigma.clone(),
        ll: Some(real_weights(&model.hodges.kappa)),
        lr: sigma,
        lr_scale: Some(ONE / s),
        node_scale: ONE / s,
        node_source: None,
    };
    let (t, rhs) = assemble_two_by_two(model, exc, &pieces, spec, 0);
    let flags = StructureFlags {
        is_symmetric: false,
        expected_singular: true,
        block_triangular: false,
    };
    Ok(reduce(
        FullSystem {
            matrix: t.build(),
            rhs,
        },
        partition,
        terminal_value(exc),
        (
            FormulationId::Monolithic,
            flags,
            Drive::Frequency { omega },
            NodeUnknown::Phi,
        ),
    ))
}

/// Darwin system with κ + κ̂ in the continuity row. With `scaled_psi` the
/// nodal unknown is ψ (φ = jωψ).
pub fn fd_darwin_regularized(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
    kappa_hat: f64,
    scaled_psi: bool,
) -> Result<AssembledSystem> {
    let s = check_omega(omega)?;
    if !(kappa_hat >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "kappa_hat {kappa_hat} must be non-negative"
        )));
    }
    let (pieces, partition) = setup(model, exc)?;
    let sigma = sigma_weights(model, s);
    let kh = model.kappa_hat_hodge(kappa_hat, model.materials.kappa_hat().placement);
    let gauge = positive_sum(&model.hodges.kappa, &kh);
    let kkh = real_weights(&gauge);
    let ul = scaled(s, &real_weights(&model.hodges.kappa));
    let spec = if scaled_psi {
        TwoByTwo {
            ul,
            ul_extra: None,
            ur: scaled(s, &sigma),
            ll: Some(scaled(s, &kkh)),
            lr: sigma,
            lr_scale: Some(s),
            node_scale: ONE,
            node_source: None,
        }
    } else {
        TwoByTwo {
            ul,
            ul_extra: None,
            ur: sigma.clone(),
            ll: Some(kkh),
            lr: sigma,
            lr_scale: Some(ONE / s),
            node_scale: ONE / s,
            node_source: None,
        }
    };
    let (t, rhs) = assemble_two_by_two(model, exc, &pieces, spec, 0);
    let flags = StructureFlags {
        is_symmetric: false,
        expected_singular: partition.is_floating()
            || gradient_kernel_dim(model, &partition, &kh) > 0,
        block_triangular: false,
    };
    let (id, unknown) = if scaled_psi {
        (FormulationId::RegularizedPsi, NodeUnknown::Psi)
    } else {
        (FormulationId::Regularized, NodeUnknown::Phi)
    };
    let tv = terminal_value(exc);
    Ok(reduce(
        FullSystem {
            matrix: t.build(),
            rhs,
        },
        partition,
        move |v| if scaled_psi { tv(v) / s } else { tv(v) },
        (id, flags, Drive::Frequency { omega }, unknown),
    ))
}

/// Darwin-Ampère with the full-Maxwell continuity equation: complex
/// symmetric.
pub fn fd_symmetric_full_continuity(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
) -> Result<AssembledSystem> {
    let s = check_omega(omega)?;
    let (pieces, partition) = setup(model, exc)?;
    let sigma = sigma_weights(model, s);
    let spec = TwoByTwo {
        ul: scaled(s, &real_weights(&model.hodges.kappa)),
        ul_extra: None,
        ur: sigma.clone(),
        ll: Some(sigma.clone()),
        lr: sigma,
        lr_scale: Some(ONE / s),
        node_scale: ONE / s,
        node_source: None,
    };
    let (t, rhs) = assemble_two_by_two(model, exc, &pieces, spec, 0);
    let flags = StructureFlags {
        is_symmetric: true,
        expected_singular: partition.is_floating()
            || gradient_kernel_dim(model, &partition, &model.hodges.eps) > 0,
        block_triangular: false,
    };
    Ok(reduce(
        FullSystem {
            matrix: t.build(),
            rhs,
        },
        partition,
        terminal_value(exc),
        (
            FormulationId::Symmetric,
            flags,
            Drive::Frequency { omega },
            NodeUnknown::Phi,
        ),
    ))
}

/// Diagonal node matrix `N` of the Lagrange and grad-div formulations.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeWeights {
    /// `N = 0`: the plain saddle-point system.
    Zero,
    /// Automatic diagonal scaled by the given factor; a factor of 1 matches
    /// the largest grad-div diagonal to the largest curl-curl diagonal.
    Auto(f64),
    /// Explicit diagonal, one value per gauge node.
    Diagonal(Vec<f64>),
}

impl Default for NodeWeights {
    fn default() -> Self {
        NodeWeights::Auto(1.0)
    }
}

/// Resolves `N` on the partition's gauge nodes.
pub fn resolve_node_weights(
    model: &FitModel,
    partition: &DofPartition,
    omega: f64,
    n: &NodeWeights,
) -> Result<Vec<f64>> {
    let nodes = &partition.gauge_nodes;
    match n {
        NodeWeights::Zero => Ok(vec![0.0; nodes.len()]),
        NodeWeights::Diagonal(d) => {
            if d.len() != nodes.len() {
                return Err(Error::DimensionMismatch(format!(
                    "N has {} entries, expected {} gauge nodes",
                    d.len(),
                    nodes.len()
                )));
            }
            if d.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidParameter(
                    "diagonal N must be positive".into(),
                ));
            }
            Ok(d.clone())
        }
        NodeWeights::Auto(factor) => {
            if !(*factor > 0.0 && factor.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "N scale {factor} must be positive"
                )));
            }
            let grid = &model.grid;
            let eps = &model.hodges.eps;
            let len = grid.edge_lengths();
            let mut sum = vec![0.0; grid.n_nodes()];
            let mut count = vec![0usize; grid.n_nodes()];
            for e in 0..grid.n_edges() {
                let w = omega * omega * eps[e] * eps[e] * len[e] * len[e];
                let (a, b) = grid.edge_nodes(e);
                for v in [a, b] {
                    sum[v] += w;
                    count[v] += 1;
                }
            }
            let mut raw: Vec<f64> = nodes.iter().map(|&v| sum[v] / count[v] as f64).collect();
            let positive: Vec<f64> = raw.iter().copied().filter(|&x| x > 0.0).collect();
            if positive.is_empty() {
                return Err(Error::InvalidParameter(
                    "automatic N needs a nonzero permittivity near the gauge nodes".into(),
                ));
            }
            let fallback = positive.iter().sum::<f64>() / positive.len() as f64;
            for r in raw.iter_mut().filter(|r| **r <= 0.0) {
                *r = fallback;
            }
            // normalise: max grad-div diagonal = max curl-curl diagonal on free edges
            let mut is_gauge = vec![usize::MAX; grid.n_nodes()];
            for (k, &v) in nodes.iter().enumerate() {
                is_gauge[v] = k;
            }
            let curl = &model.incidence.curl;
            let mut cc = vec![0.0; grid.n_edges()];
            for (f, e, c) in curl.iter() {
                cc[e] += model.hodges.nu[f] * f64::from(c * c);
            }
            let mut gd_max = 0.0f64;
            let mut cc_max = 0.0f64;
            for &e in &partition.free_edges {
                let (a, b) = grid.edge_nodes(e);
                let inv: f64 = [a, b]
                    .iter()
                    .filter(|&&v| is_gauge[v] != usize::MAX)
                    .map(|&v| 1.0 / raw[is_gauge[v]])
                    .sum();
                gd_max = gd_max.max(omega * omega * eps[e] * eps[e] * inv);
                cc_max = cc_max.max(cc[e]);
            }
            let t = if cc_max > 0.0 && gd_max > 0.0 {
                gd_max / cc_max
            } else {
                1.0
            };
            Ok(raw.into_iter().map(|r| r * t * factor).collect())
        }
    }
}

/// `ω² M_ε G N⁻¹ Gᵀ M_ε` over all edges, `N` given on the gauge nodes.
pub fn graddiv_term(
    model: &FitModel,
    partition: &DofPartition,
    omega: f64,
    n: &[f64],
) -> CsrMatrix<C64> {
    let grid = &model.grid;
    let eps = &model.hodges.eps;
    let mut row_of = vec![usize::MAX; grid.n_nodes()];
    for (k, &v) in partition.gauge_nodes.iter().enumerate() {
        row_of[v] = k;
    }
    // B = Gᵀ M_ε restricted to gauge-node rows
    let mut b = TripletBuilder::new(partition.gauge_nodes.len(), grid.n_edges());
    for (e, v, g) in model.incidence.grad.iter() {
        if row_of[v] != usize::MAX {
            b.push(row_of[v], e, C64::new(f64::from(g) * eps[e], 0.0));
        }
    }
    let w: Vec<C64> = n
        .iter()
        .map(|&d| C64::new(omega * omega / d, 0.0))
        .collect();
    congruence(&b.build(), &w)
}

/// Coulomb gauge on ε enforced with Lagrange multipliers on the gauge nodes.
pub fn fd_lagrange_coulomb(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
    n: &NodeWeights,
) -> Result<AssembledSystem> {
    let s = check_omega(omega)?;
    let (pieces, mut partition) = setup(model, exc)?;
    let nvals = resolve_node_weights(model, &partition, omega, n)?;
    partition.multiplier_nodes = partition.gauge_nodes.clone();
    let nm = partition.multiplier_nodes.len();
    let ne = model.grid.n_edges();
    let nn = model.grid.n_nodes();
    let sigma = sigma_weights(model, s);
    let spec = TwoByTwo {
        ul: scaled(s, &real_weights(&model.hodges.kappa)),
        ul_extra: None,
        ur: sigma.clone(),
        ll: Some(sigma.clone()),
        lr: sigma,
        lr_scale: Some(ONE / s),
        node_scale: ONE / s,
        node_source: None,
    };
    let (mut t, rhs) = assemble_two_by_two(model, exc, &pieces, spec, nm);
    let mut col_of = vec![usize::MAX; nn];
    for (k, &v) in partition.multiplier_nodes.iter().enumerate() {
        col_of[v] = k;
    }
    for (e, v, g) in model.incidence.grad.iter() {
        if col_of[v] != usize::MAX {
            let val = (s * model.hodges.eps[e]) * f64::from(g);
            t.push(e, ne + nn + col_of[v], val);
            t.push(ne + nn + col_of[v], e, val);
        }
    }
    for (k, &d) in nvals.iter().enumerate() {
        if d != 0.0 {
            t.push(ne + nn + k, ne + nn + k, C64::new(d, 0.0));
        }
    }
    // G restricted to free edges has full column rank on the gauge nodes, so
    // even N = 0 keeps the constraint rows independent.
    let flags = StructureFlags {
        is_symmetric: true,
        expected_singular: partition.is_floating(),
        block_triangular: false,
    };
    Ok(reduce(
        FullSystem {
            matrix: t.build(),
            rhs,
        },
        partition,
        terminal_value(exc),
        (
            FormulationId::Lagrange,
            flags,
            Drive::Frequency { omega },
            NodeUnknown::Phi,
        ),
    ))
}

/// Schur complement of the Lagrange system: grad-div augmented curl-curl.
pub fn fd_graddiv_schur(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
    n: &NodeWeights,
) -> Result<AssembledSystem> {
    let s = check_omega(omega)?;
    if *n == NodeWeights::Zero {
        return Err(Error::InvalidParameter(
            "the grad-div formulation needs an invertible N".into(),
        ));
    }
    let (pieces, partition) = setup(model, exc)?;
    let nvals = resolve_node_weights(model, &partition, omega, n)?;
    let sigma = sigma_weights(model, s);
    let spec = TwoByTwo {
        ul: scaled(s, &real_weights(&model.hodges.kappa)),
        ul_extra: Some(graddiv_term(model, &partition, omega, &nvals)),
        ur: sigma.clone(),
        ll: Some(sigma.clone()),
        lr: sigma,
        lr_scale: Some(ONE / s),
        node_scale: ONE / s,
        node_source: None,
    };
    let (t, rhs) = assemble_two_by_two(model, exc, &pieces, spec, 0);
    let flags = StructureFlags {
        is_symmetric: true,
        expected_singular: partition.is_floating()
            || gradient_kernel_dim(model, &partition, &model.hodges.eps) > 0,
        block_triangular: false,
    };
    Ok(reduce(
        FullSystem {
            matrix: t.build(),
            rhs,
        },
        partition,
        terminal_value(exc),
        (
            FormulationId::GradDiv,
            flags,
            Drive::Frequency { omega },
            NodeUnknown::Phi,
        ),
    ))
}

/// Two-step Darwin: EQS continuity for φ, then the curl-curl equation with
/// κ in conductors and κ̂ in non-conductors. Block upper triangular.
pub fn fd_eqs_gauge(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
    kappa_hat: f64,
) -> Result<AssembledSystem> {
    let s = check_omega(omega)?;
    if !(kappa_hat >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "kappa_hat {kappa_hat} must be non-negative"
        )));
    }
    let (pieces, partition) = setup(model, exc)?;
    let kh = model.kappa_hat_hodge(kappa_hat, KappaHatPlacement::NonConductive);
    let weight = positive_sum(&model.hodges.kappa, &kh);
    let spec = TwoByTwo {
        ul: scaled(s, &real_weights(&weight)),
        ul_extra: None,
        ur: sigma_weights(model, s),
        ll: None,
        lr: sigma_weights(model, s),
        lr_scale: None,
        node_scale: ONE,
        node_source: None,
    };
    let (t, rhs) = assemble_two_by_two(model, exc, &pieces, spec, 0);
    let flags = StructureFlags {
        is_symmetric: false,
        expected_singular: partition.is_floating()
            || gradient_kernel_dim(model, &partition, &weight) > 0,
        block_triangular: true,
    };
    Ok(reduce(
        FullSystem {
            matrix: t.build(),
            rhs,
        },
        partition,
        terminal_value(exc),
        (
            FormulationId::EqsGauge,
            flags,
            Drive::Frequency { omega },
            NodeUnknown::Phi,
        ),
    ))
}

/// Two-step full-Maxwell reference: EQS continuity for φ, then the full
/// Maxwell-Ampère equation (with the `−ω²M_ε` term) for `a`.
pub fn fd_full_maxwell_two_step(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
) -> Result<AssembledSystem> {
    let s = check_omega(omega)?;
    let (pieces, partition) = setup(model, exc)?;
    let sigma = sigma_weights(model, s);
    let spec = TwoByTwo {
        ul: scaled(s, &sigma),
        ul_extra: None,
        ur: sigma.clone(),
        ll: None,
        lr: sigma,
        lr_scale: None,
        node_scale: ONE,
        node_source: None,
    };
    let (t, rhs) = assemble_two_by_two(model, exc, &pieces, spec, 0);
    let positive: Vec<f64> = positive_sum(&model.hodges.kappa, &model.hodges.eps);
    let flags = StructureFlags {
        is_symmetric: false,
        expected_singular: partition.is_floating()
            || gradient_kernel_dim(model, &partition, &positive) > 0,
        block_triangular: true,
    };
    Ok(reduce(
        FullSystem {
            matrix: t.build(),
            rhs,
        },
        partition,
        terminal_value(exc),
        (
            FormulationId::Tsm,
            flags,
            Drive::Frequency { omega },
            NodeUnknown::Phi,
        ),
    ))
}

/// Darwin-Ampère coupled with the combined conductive/Gauss gauge
/// `Gᵀ(M_κ + βM_ε)(s a + Gφ) = Gᵀj_s + βρ_S`, where `s` replaces the time
/// derivative (`jω` in frequency domain, `γ/Δt` for a one-step scheme).
/// The continuity row is scaled by `1/s`; the matrix is symmetric iff
/// `β = s`.
pub fn combined_gauge_system(
    model: &FitModel,
    exc: &Excitation,
    s: C64,
    beta: C64,
) -> Result<AssembledSystem> {
    if s == ZERO || !s.is_finite() {
        return Err(Error::StaticLimit { omega: s.norm() });
    }
    let (pieces, partition) = setup(model, exc)?;
    let sigma_s = sigma_weights(model, s);
    let sigma_b = sigma_weights(model, beta);
    let charge: Vec<C64> = exc.charge.iter().map(|&q| beta * q).collect();
    let spec = TwoByTwo {
        ul: scaled(s, &real_weights(&model.hodges.kappa)),
        ul_extra: None,
        ur: sigma_s,
        ll: Some(sigma_b.clone()),
        lr: sigma_b,
        lr_scale: Some(ONE / s),
        node_scale: ONE / s,
        node_source: Some(charge),
    };
    let (t, rhs) = assemble_two_by_two(model, exc, &pieces, spec, 0);
    let gauge: Vec<f64> = model
        .hodges
        .kappa
        .iter()
        .zip(&model.hodges.eps)
        .map(|(&k, &e)| k + beta.norm() * e)
        .collect();
    let flags = StructureFlags {
        is_symmetric: s == beta,
        expected_singular: partition.is_floating()
            || gradient_kernel_dim(model, &partition, &gauge) > 0,
        block_triangular: false,
    };
    let drive = if s.re == 0.0 {
        Drive::Frequency { omega: s.im }
    } else {
        Drive::TimeStep {
            dt: 1.0 / s.re,
            gamma: 1.0,
        }
    };
    Ok(reduce(
        FullSystem {
            matrix: t.build(),
            rhs,
        },
        partition,
        terminal_value(exc),
        (FormulationId::DdCombined, flags, drive, NodeUnknown::Phi),
    ))
}

/// Frequency-domain combined gauge with `s = jω`.
pub fn fd_dd_combined_gauge(
    model: &FitModel,
    exc: &Excitation,
    omega: f64,
    beta: C64,
) -> Result<AssembledSystem> {
    let s = check_omega(omega)?;
    combined_gauge_system(model, exc, s, beta)
}

/// Symmetric one-step time-domain system with `β = γ/Δt`.
#[derive(Debug, Clone)]
pub struct TdSymmetricStep {
    pub system: AssembledSystem,
    pub beta: f64,
    kappa: Vec<C64>,
    eps: Vec<C64>,
    sigma: Vec<C64>,
    grad: CsrMatrix<C64>,
    grad_t: CsrMatrix<C64>,
    exc_template: Excitation,
}

/// Full (unreduced) state of the time-domain scheme.
#[derive(Debug, Clone)]
pub struct TdState {
    /// On every edge.
    pub a: Vec<C64>,
    /// On every node, Dirichlet values included.
    pub phi: Vec<C64>,
}

pub fn td_symmetric_step(
    model: &FitModel,
    exc: &Excitation,
    dt: f64,
    gamma: f64,
) -> Result<TdSymmetricStep> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "time step {dt} must be positive"
        )));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma {gamma} must be positive"
        )));
    }
    let beta = gamma / dt;
    let b = C64::new(beta, 0.0);
    let mut system = combined_gauge_system(model, exc, b, b)?;
    system.formulation = FormulationId::TdSymmetric;
    system.drive = Drive::TimeStep { dt, gamma };
    let grad = model.incidence.grad.to_complex();
    Ok(TdSymmetricStep {
        system,
        beta,
        kappa: real_weights(&model.hodges.kappa),
        eps: real_weights(&model.hodges.eps),
        sigma: sigma_weights(model, b),
        grad_t: grad.transpose(),
        grad,
        exc_template: exc.clone(),
    })
}

impl TdSymmetricStep {
    /// Zero fields with the Dirichlet potentials of the excitation template
    /// scaled by `terminal_scale`.
    pub fn initial_state(&self, terminal_scale: f64) -> TdState {
        let p = &self.system.partition;
        let mut phi = vec![ZERO; p.n_nodes];
        for &v in &self.exc_template.source_nodes {
            phi[v] = self.exc_template.source_potential * terminal_scale;
        }
        for &v in &self.exc_template.ground_nodes {
            phi[v] = self.exc_template.ground_potential * terminal_scale;
        }
        TdState {
            a: vec![ZERO; p.n_edges],
            phi,
        }
    }

    /// Reduced right-hand side of step `n → n+1` for the implicit Euler
    /// discretisation of the Darwin-Ampère and semi-discrete continuity
    /// equations. `terminal_scale` multiplies the template's terminal
    /// potentials at `t^{n+1}`.
    pub fn rhs(
        &self,
        prev: &TdState,
        source_current_next: &[C64],
        terminal_scale: f64,
    ) -> Vec<C64> {
        let p = &self.system.partition;
        let ne = p.n_edges;
        let b = C64::new(self.beta, 0.0);
        let grad_phi = self.grad.mul_vec(&prev.phi);
        // edge rows: j_s + β M_κ aⁿ + β M_ε G φⁿ
        let mut full = vec![ZERO; ne + p.n_nodes];
        for e in 0..ne {
            full[e] = source_current_next[e]
                + b * (self.kappa[e] * prev.a[e])
                + b * (self.eps[e] * grad_phi[e]);
        }
        // node rows: (1/β) Gᵀ j_s + Gᵀ M_σβ aⁿ + Gᵀ M_ε G φⁿ
        let mut edge_term = vec![ZERO; ne];
        for e in 0..ne {
            edge_term[e] =
                source_current_next[e] / b + self.sigma[e] * prev.a[e] + self.eps[e] * grad_phi[e];
        }
        let node_rows = self.grad_t.mul_vec(&edge_term);
        full[ne..].copy_from_slice(&node_rows);

        let nfe = p.fixed_edges.len();
        let mut fixed = vec![ZERO; nfe + p.fixed_nodes.len()];
        for (k, &v) in p.fixed_nodes.iter().enumerate() {
            let base = if self.exc_template.ground_nodes.contains(&v) {
                self.exc_template.ground_potential
            } else {
                self.exc_template.source_potential
            };
            fixed[nfe + k] = base * terminal_scale;
        }
        self.system.reduce_rhs(&full, &fixed)
    }

    /// Full state from a reduced step solution.
    pub fn state_from(&self, x: &[C64], terminal_scale: f64) -> Result<TdState> {
        let mut sys = self.system.clone();
        for v in sys
            .fixed_values
            .iter_mut()
            .skip(sys.partition.fixed_edges.len())
        {
            *v *= terminal_scale;
        }
        let pot = sys.expand(x)?;
        Ok(TdState {
            a: pot.a,
            phi: pot.phi,
        })
    }
}

/// Assembles a frequency-domain formulation with default parameters:
/// κ̂ from the material field, automatic `N`, `β = jω`.
pub fn assemble(
    model: &FitModel,
    exc: &Excitation,
    id: FormulationId,
    omega: f64,
    options: &AssemblyOptions,
) -> Result<AssembledSystem> {
    let kh = options
        .kappa_hat
        .unwrap_or(model.materials.kappa_hat().value);
    match id {
        FormulationId::Monolithic => fd_monolithic_darwin(model, exc, omega),
        FormulationId::Regularized => fd_darwin_regularized(model, exc, omega, kh, false),
        FormulationId::RegularizedPsi => fd_darwin_regularized(model, exc, omega, kh, true),
        FormulationId::Symmetric => fd_symmetric_full_continuity(model, exc, omega),
        FormulationId::Lagrange => fd_lagrange_coulomb(model, exc, omega, &options.node_weights),
        FormulationId::GradDiv => fd_graddiv_schur(model, exc, omega, &options.node_weights),
        FormulationId::EqsGauge => fd_eqs_gauge(model, exc, omega, kh),
        FormulationId::Tsm => fd_full_maxwell_two_step(model, exc, omega),
        FormulationId::DdCombined => {
            let beta = options.beta.unwrap_or(C64::new(0.0, omega));
            fd_dd_combined_gauge(model, exc, omega, beta)
        }
        FormulationId::TdSymmetric => Err(Error::InvalidParameter(
            "td-symmetric is a time-stepping formulation; use td_symmetric_step".into(),
        )),
    }
}

/// Optional parameters of [`assemble`].
#[derive(Debug, Clone, Default)]
pub struct AssemblyOptions {
    pub kappa_hat: Option<f64>,
    pub node_weights: NodeWeights,
    pub beta: Option<C64>,
}
