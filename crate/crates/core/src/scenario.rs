//! Scenario files and the run pipeline behind the command-line tool.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    compare_fields, export_fields, flux_divergence, reconstruct_fields, reconstruct_time_fields,
    ComparisonReport, ExportFormat, FieldSolution, Part,
};
use crate::formulations::{
    assemble, td_symmetric_step, AssembledSystem, AssemblyOptions, Block, Excitation,
    FormulationId, StructureFlags,
};
use crate::grid::{Grid, GridSpec};
use crate::materials::{
    KappaHatPlacement, Material, MaterialBox, MaterialField, MaterialOptions, C0,
};
use crate::operators::FitModel;
use crate::oracle::{
    condition_sweep, dense_diagnostics, td_fd_consistency, td_fixed_point, TdFdReport,
    DEFAULT_MAX_DOFS,
};
use crate::solvers::{solve, Preconditioner, SolveReport, SolverMethod, SolverOptions, SparseLu};
use crate::sparse::{fmt_f64, write_matrix_market, MmSymmetry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub grid: GridConfig,
    #[serde(default = "MaterialConfig::void")]
    pub background: MaterialConfig,
    #[serde(default)]
    pub materials: Vec<MaterialRegion>,
    #[serde(default)]
    pub restrict_permittivity: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_hat: Option<KappaHatConfig>,
    pub terminals: Terminals,
    pub drive: DriveConfig,
    pub formulations: Vec<String>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Compare the time-domain run against the frequency-domain phasor.
    #[serde(default)]
    pub fd_check: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub cells: [usize; 3],
    /// Uniform spacing per axis, m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    /// Per-cell spacings per axis, m; replaces `spacing`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacings: Option<[Vec<f64>; 3]>,
    #[serde(default)]
    pub origin: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub tag: String,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "one")]
    pub eps_r: f64,
    #[serde(default = "one")]
    pub mu_r: f64,
}

fn one() -> f64 {
    1.0
}

impl MaterialConfig {
    fn void() -> Self {
        Self {
            tag: "void".into(),
            kappa: 0.0,
            eps_r: 1.0,
            mu_r: 1.0,
        }
    }

    fn material(&self) -> Material {
        Material {
            kappa: self.kappa,
            eps_r: self.eps_r,
            mu_r: self.mu_r,
            tag: self.tag.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialRegion {
    pub tag: String,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "one")]
    pub eps_r: f64,
    #[serde(default = "one")]
    pub mu_r: f64,
    pub boxes: Vec<BoxConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementConfig {
    #[default]
    Everywhere,
    NonConductive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KappaHatConfig {
    pub value: f64,
    #[serde(default)]
    pub placement: PlacementConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Terminals {
    pub source: SourceTerminal,
    pub ground: GroundTerminal,
}

/// Nodes inside the box `[lo, hi]` (inclusive) form the terminal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTerminal {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    /// V.
    pub potential: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTerminal {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveConfig {
    #[serde(default)]
    pub frequencies_hz: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_domain: Option<TimeDomainConfig>,
}

/// Terminal potential `φ_S cos(2πft)`; `frequency_hz = 0` is a DC step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeDomainConfig {
    pub frequency_hz: f64,
    pub dt: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodConfig {
    #[default]
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreconditionerConfig {
    None,
    #[default]
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub preconditioner: PreconditionerConfig,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    20_000
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: MethodConfig::Direct,
            tol: default_tol(),
            max_iter: default_max_iter(),
            preconditioner: PreconditionerConfig::Jacobi,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            method: match self.method {
                MethodConfig::Direct => SolverMethod::Direct,
                MethodConfig::Iterative => SolverMethod::Iterative,
            },
            tol: self.tol,
            max_iter: self.max_iter,
            preconditioner: match self.preconditioner {
                PreconditionerConfig::None => Preconditioner::None,
                PreconditionerConfig::Jacobi => Preconditioner::Jacobi,
            },
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    /// Write VTK and CSV field files.
    #[serde(default = "yes")]
    pub fields: bool,
}

fn default_out_dir() -> String {
    "out".into()
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            fields: true,
        }
    }
}

const BUILTINS: [(&str, &str); 3] = [
    ("coil", include_str!("../scenarios/coil.json")),
    (
        "transformer_toy",
        include_str!("../scenarios/transformer_toy.json"),
    ),
    ("mixed_cube", include_str!("../scenarios/mixed_cube.json")),
];

/// JSON text of a built-in scenario, by name with or without `.json`.
pub fn builtin(name: &str) -> Option<&'static str> {
    let stem = name.strip_suffix(".json").unwrap_or(name);
    BUILTINS.iter().find(|(n, _)| *n == stem).map(|(_, t)| *t)
}

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _)| *n)
}

fn scenario_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Scenario {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates a scenario document. Unknown keys are rejected.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        scenario_err(path, e.into_inner().to_string())
    })?;
    sc.validate()?;
    Ok(sc)
}

/// Reads a scenario file; a path that is not a file but names a built-in
/// scenario loads the built-in.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    if !path.is_file() {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if let Some(text) = builtin(name) {
            info!("using built-in scenario `{name}`");
            return parse_scenario(text);
        }
    }
    parse_scenario(&fs::read_to_string(path)?)
}

/// A scenario turned into a discretised model and its excitation.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: FitModel,
    pub excitation: Excitation,
}

impl Scenario {
    pub fn formulation_ids(&self) -> Result<Vec<FormulationId>> {
        self.formulations
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.parse::<FormulationId>()
                    .map_err(|e| scenario_err(format!("formulations[{i}]"), e.to_string()))
            })
            .collect()
    }

    fn grid_spec(&self) -> Result<GridSpec> {
        let g = &self.grid;
        let spec = match (&g.spacings, &g.spacing) {
            (Some(s), _) => GridSpec {
                spacings: s.clone(),
                origin: g.origin,
            },
            (None, Some(h)) => GridSpec::uniform(g.cells, *h, g.origin),
            (None, None) => {
                return Err(scenario_err(
                    "grid",
                    "either `spacing` or `spacings` is required",
                ))
            }
        };
        if spec.cells() != g.cells {
            return Err(scenario_err(
                "grid.spacings",
                "spacing lists must match `cells`",
            ));
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(scenario_err("name", "use letters, digits, `_` or `-`"));
        }
        let ids = self.formulation_ids()?;
        if ids.is_empty() {
            return Err(scenario_err(
                "formulations",
                "at least one formulation is required",
            ));
        }
        for (i, &f) in self.drive.frequencies_hz.iter().enumerate() {
            if !(f > 0.0 && f.is_finite()) {
                return Err(scenario_err(
                    format!("drive.frequencies_hz[{i}]"),
                    "frequencies must be positive",
                ));
            }
        }
        let fd = ids.iter().any(|id| !id.is_time_domain());
        if fd && self.drive.frequencies_hz.is_empty() {
            return Err(scenario_err(
                "drive.frequencies_hz",
                "frequency-domain formulations need a frequency",
            ));
        }
        if ids.contains(&FormulationId::TdSymmetric) {
            match &self.drive.time_domain {
                None => {
                    return Err(scenario_err(
                        "drive.time_domain",
                        "td-symmetric needs a time-domain drive",
                    ))
                }
                Some(td) => {
                    if !(td.dt > 0.0 && td.dt.is_finite()) {
                        return Err(scenario_err("drive.time_domain.dt", "must be positive"));
                    }
                    if td.steps == 0 {
                        return Err(scenario_err("drive.time_domain.steps", "must be positive"));
                    }
                    if !(td.frequency_hz >= 0.0 && td.frequency_hz.is_finite()) {
                        return Err(scenario_err(
                            "drive.time_domain.frequency_hz",
                            "must be non-negative",
                        ));
                    }
                }
            }
        }
        if !(self.solver.tol > 0.0) {
            return Err(scenario_err("solver.tol", "must be positive"));
        }
        if let Some(k) = &self.kappa_hat {
            if !(k.value >= 0.0 && k.value.is_finite()) {
                return Err(scenario_err("kappa_hat.value", "must be non-negative"));
            }
        }
        self.build().map(|_| ())
    }

    /// Discretises the scenario and checks the geometry.
    pub fn build(&self) -> Result<Problem> {
        let grid = Grid::new(self.grid_spec()?).map_err(|e| scenario_err("grid", e.to_string()))?;
        let (dom_lo, dom_hi) = grid.bounds();
        let mut boxes = Vec::new();
        for (i, region) in self.materials.iter().enumerate() {
            let material = Material {
                kappa: region.kappa,
                eps_r: region.eps_r,
                mu_r: region.mu_r,
                tag: region.tag.clone(),
            };
            for (j, b) in region.boxes.iter().enumerate() {
                let inside = (0..3).all(|a| b.hi[a] > dom_lo[a] && b.lo[a] < dom_hi[a]);
                if !inside {
                    return Err(scenario_err(
                        format!("materials[{i}].boxes[{j}]"),
                        "box lies outside the grid",
                    ));
                }
                boxes.push(MaterialBox {
                    lo: b.lo,
                    hi: b.hi,
                    material: material.clone(),
                });
            }
        }
        let options = MaterialOptions {
            kappa_hat: self.kappa_hat.map(|k| k.value),
            placement: match self.kappa_hat.map(|k| k.placement).unwrap_or_default() {
                PlacementConfig::Everywhere => KappaHatPlacement::Everywhere,
                PlacementConfig::NonConductive => KappaHatPlacement::NonConductive,
            },
            restrict_permittivity: self.restrict_permittivity,
        };
        let materials = MaterialField::build(&grid, &self.background.material(), &boxes, &options)
            .map_err(|e| scenario_err("materials", e.to_string()))?;

        let t = &self.terminals;
        let source = terminal_nodes(
            &grid,
            &materials,
            t.source.lo,
            t.source.hi,
            "terminals.source",
        )?;
        let ground = terminal_nodes(
            &grid,
            &materials,
            t.ground.lo,
            t.ground.hi,
            "terminals.ground",
        )?;
        let excitation = Excitation::voltage(&grid, source, ground, t.source.potential);
        excitation
            .validate(&grid)
            .map_err(|e| scenario_err("terminals", e.to_string()))?;
        let model = FitModel::new(grid, materials)?;
        Ok(Problem { model, excitation })
    }

    /// Warnings about the electromagnetic validity of the setup.
    pub fn warnings(&self) -> Vec<String> {
        let Ok(spec) = self.grid_spec() else {
            return Vec::new();
        };
        let extent = spec
            .spacings
            .iter()
            .map(|h| h.iter().sum::<f64>())
            .fold(0.0, f64::max);
        let mut out = Vec::new();
        let mut freqs = self.drive.frequencies_hz.clone();
        if let Some(td) = &self.drive.time_domain {
            freqs.push(td.frequency_hz);
        }
        for f in freqs.into_iter().filter(|&f| f > 0.0) {
            let lambda = C0 / f;
            if extent > lambda / 10.0 {
                out.push(format!(
                    "domain size {} m exceeds a tenth of the wavelength {} m at {} Hz; quasistatic models may be inaccurate",
                    fmt_f64(extent),
                    fmt_f64(lambda),
                    fmt_f64(f)
                ));
            }
        }
        out
    }

    fn assembly_options(&self) -> AssemblyOptions {
        AssemblyOptions::default()
    }
}

fn terminal_nodes(
    grid: &Grid,
    mat: &MaterialField,
    lo: [f64; 3],
    hi: [f64; 3],
    path: &str,
) -> Result<Vec<usize>> {
    let (dlo, dhi) = grid.bounds();
    let tol = 1e-9 * (0..3).map(|a| dhi[a] - dlo[a]).fold(0.0, f64::max);
    let nodes: Vec<usize> = (0..grid.n_nodes())
        .filter(|&v| {
            let x = grid.node_position(v);
            (0..3).all(|a| x[a] >= lo[a] - tol && x[a] <= hi[a] + tol)
        })
        .collect();
    if nodes.is_empty() {
        return Err(scenario_err(path, "terminal box contains no grid node"));
    }
    for &v in &nodes {
        if !grid.node_on_boundary(v) {
            return Err(scenario_err(
                path,
                format!("node {v} is not on the domain boundary"),
            ));
        }
        let p = grid.node_coords(v);
        let n = grid.cells_per_axis();
        let mut touches = false;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let d = [dx, dy, dz];
                    if (0..3).all(|a| p[a] >= d[a] && p[a] - d[a] < n[a]) {
                        let c = grid.cell_index([p[0] - dx, p[1] - dy, p[2] - dz]);
                        touches |= mat.is_conductive(c);
                    }
                }
            }
        }
        if !touches {
            return Err(scenario_err(
                path,
                format!("node {v} does not touch a conductor"),
            ));
        }
    }
    Ok(nodes)
}

/// Command-line overrides of scenario settings.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub solver: Option<SolverMethod>,
    pub tol: Option<f64>,
    pub kappa_hat: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub frequencies_hz: Option<Vec<f64>>,
}

impl Overrides {
    pub fn apply(&self, sc: &mut Scenario) -> Result<()> {
        if let Some(m) = self.solver {
            sc.solver.method = match m {
                SolverMethod::Direct => MethodConfig::Direct,
                SolverMethod::Iterative => MethodConfig::Iterative,
            };
        }
        if let Some(t) = self.tol {
            sc.solver.tol = t;
        }
        if let Some(k) = self.kappa_hat {
            let placement = sc.kappa_hat.map(|k| k.placement).unwrap_or_default();
            sc.kappa_hat = Some(KappaHatConfig {
                value: k,
                placement,
            });
        }
        if let Some(d) = &self.out_dir {
            sc.output.dir = d.to_string_lossy().into_owned();
        }
        if let Some(f) = &self.frequencies_hz {
            sc.drive.frequencies_hz = f.clone();
        }
        sc.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobStatus {
    Ok,
    /// A solve failed on a system flagged singular by construction.
    ExpectedSingular(String),
    Failed(String),
}

impl JobStatus {
    pub fn label(&self) -> &'static str {
        match self {
            JobStatus::Ok => "ok",
            JobStatus::ExpectedSingular(_) => "expected-singular",
            JobStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub formulation: FormulationId,
    /// Hz; the drive frequency for time-domain runs.
    pub frequency_hz: f64,
    pub dofs: usize,
    pub flags: StructureFlags,
    pub status: JobStatus,
    pub report: Option<SolveReport>,
    pub fields: Option<FieldSolution>,
    pub max_div_b: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub formulation: FormulationId,
    pub frequency_hz: f64,
    pub report: ComparisonReport,
}

#[derive(Debug, Clone)]
pub struct TdOutcome {
    pub fd_check: Option<TdFdReport>,
    /// `‖aⁿ⁺¹ − aⁿ‖/‖aⁿ⁺¹‖` at the end of a DC run.
    pub fixed_point_change: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub jobs: Vec<JobResult>,
    pub comparisons: Vec<ComparisonRow>,
    pub td: Option<TdOutcome>,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    /// False if any solve failed other than on a system singular by design.
    pub fn success(&self) -> bool {
        self.jobs
            .iter()
            .all(|j| !matches!(j.status, JobStatus::Failed(_)))
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {}", self.scenario);
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>8} {:<18} {:<16} {:>6} {:>10}",
            "formulation", "freq [Hz]", "dofs", "status", "solver", "iters", "residual"
        );
        for j in &self.jobs {
            let (solver, iters, res) = match &j.report {
                Some(r) => (
                    r.solver.as_str(),
                    r.iterations.to_string(),
                    format!("{:.2e}", r.relative_residual),
                ),
                None => ("-", "-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>8} {:<18} {:<16} {:>6} {:>10}",
                j.formulation.as_str(),
                fmt_f64(j.frequency_hz).to_string(),
                j.dofs,
                j.status.label(),
                solver,
                iters,
                res
            );
            if let JobStatus::Failed(m) | JobStatus::ExpectedSingular(m) = &j.status {
                let _ = writeln!(s, "    {m}");
            }
        }
        if !self.comparisons.is_empty() {
            let _ = writeln!(s, "relative difference against tsm (max over cells):");
            for c in &self.comparisons {
                let _ = writeln!(
                    s,
                    "  {:<16} E re {:.2e} im {:.2e}   B re {:.2e} im {:.2e}",
                    c.formulation.as_str(),
                    c.report.e.real.max,
                    c.report.e.imag.max,
                    c.report.b.real.max,
                    c.report.b.imag.max
                );
            }
        }
        if let Some(td) = &self.td {
            if let Some(r) = &td.fd_check {
                let _ = writeln!(
                    s,
                    "td/fd check: max amplitude error {:.3e}, max phase error {:.3e} deg over {} dofs{}",
                    r.max_amplitude_error,
                    r.max_phase_error_deg,
                    r.rows.len(),
                    if r.transient_flag { " (transient not decayed)" } else { "" }
                );
            }
            if let Some(c) = td.fixed_point_change {
                let _ = writeln!(s, "td fixed point: last relative change {c:.3e}");
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

fn solve_job(
    problem: &Problem,
    id: FormulationId,
    f: f64,
    options: &AssemblyOptions,
    solver: &SolverOptions,
) -> JobResult {
    let omega = 2.0 * PI * f;
    let mut job = JobResult {
        formulation: id,
        frequency_hz: f,
        dofs: 0,
        flags: StructureFlags::default(),
        status: JobStatus::Ok,
        report: None,
        fields: None,
        max_div_b: 0.0,
    };
    let sys = match assemble(&problem.model, &problem.excitation, id, omega, options) {
        Ok(s) => s,
        Err(e) => {
            job.status = JobStatus::Failed(e.to_string());
            return job;
        }
    };
    job.dofs = sys.dim();
    job.flags = sys.flags;
    match solve(&sys, solver) {
        Ok(sol) => {
            let fields = sys
                .expand(&sol.x)
                .and_then(|pot| reconstruct_fields(&problem.model, &pot, omega));
            match fields {
                Ok(fs) => {
                    job.max_div_b = flux_divergence(&problem.model, &fs)
                        .iter()
                        .map(|v| v.norm())
                        .fold(0.0, f64::max);
                    job.fields = Some(fs);
                }
                Err(e) => job.status = JobStatus::Failed(e.to_string()),
            }
            let limit = match solver.method {
                SolverMethod::Direct => solver.direct_residual_limit,
                SolverMethod::Iterative => 10.0 * solver.tol,
            };
            if sol.report.relative_residual > limit {
                job.status = JobStatus::Failed(format!(
                    "recomputed residual {:.3e} exceeds {:.1e}",
                    sol.report.relative_residual, limit
                ));
            }
            job.report = Some(sol.report);
        }
        Err(e) if sys.flags.expected_singular => {
            job.status = JobStatus::ExpectedSingular(e.to_string())
        }
        Err(e) => job.status = JobStatus::Failed(e.to_string()),
    }
    job
}

fn run_td(
    problem: &Problem,
    sc: &Scenario,
    solver: &SolverOptions,
) -> (JobResult, Option<TdOutcome>) {
    let td = sc.drive.time_domain.expect("validated");
    let mut job = JobResult {
        formulation: FormulationId::TdSymmetric,
        frequency_hz: td.frequency_hz,
        dofs: 0,
        flags: StructureFlags::default(),
        status: JobStatus::Ok,
        report: None,
        fields: None,
        max_div_b: 0.0,
    };
    let result = (|| -> Result<(FieldSolution, TdOutcome)> {
        let model = &problem.model;
        let step = td_symmetric_step(model, &problem.excitation, td.dt, 1.0)?;
        job.dofs = step.system.dim();
        job.flags = step.system.flags;
        let t0 = std::time::Instant::now();
        let lu = SparseLu::factor(&step.system.matrix, solver)?;
        let omega = 2.0 * PI * td.frequency_hz;
        let drive = |t: f64| {
            if td.frequency_hz > 0.0 {
                (omega * t).cos()
            } else {
                1.0
            }
        };
        let mut state = step.initial_state(drive(0.0));
        let js = vec![C64::new(0.0, 0.0); model.grid.n_edges()];
        let mut worst: f64 = 0.0;
        let mut prev_a = state.a.clone();
        for k in 1..=td.steps {
            let scale = drive(k as f64 * td.dt);
            let rhs = step.rhs(&state, &js, scale);
            let x = lu.solve(&rhs);
            worst = worst.max(crate::solvers::relative_residual(
                &step.system.matrix,
                &x,
                &rhs,
            ));
            prev_a = std::mem::take(&mut state.a);
            state = step.state_from(&x, scale)?;
        }
        job.report = Some(SolveReport {
            solver: "lu".into(),
            iterations: td.steps,
            relative_residual: worst,
            fill: Some(lu.fill()),
            breakdown: false,
            seconds: t0.elapsed().as_secs_f64(),
        });
        let t_end = td.steps as f64 * td.dt;
        let fields = reconstruct_time_fields(model, &state.a, &prev_a, &state.phi, td.dt, t_end)?;
        let mut outcome = TdOutcome {
            fd_check: None,
            fixed_point_change: None,
        };
        if sc.fd_check {
            if td.frequency_hz > 0.0 {
                let periods = (t_end * td.frequency_hz).floor() as usize;
                outcome.fd_check = Some(td_fd_consistency(
                    model,
                    &problem.excitation,
                    omega,
                    td.dt,
                    periods,
                    solver,
                )?);
            } else {
                outcome.fixed_point_change = Some(td_fixed_point(
                    model,
                    &problem.excitation,
                    td.dt,
                    td.steps,
                    solver,
                )?);
            }
        }
        Ok((fields, outcome))
    })();
    match result {
        Ok((fields, outcome)) => {
            job.max_div_b = flux_divergence(&problem.model, &fields)
                .iter()
                .map(|v| v.norm())
                .fold(0.0, f64::max);
            if let Some(r) = &job.report {
                if r.relative_residual > solver.direct_residual_limit {
                    job.status =
                        JobStatus::Failed(format!("step residual {:.3e}", r.relative_residual));
                }
            }
            job.fields = Some(fields);
            (job, Some(outcome))
        }
        Err(e) => {
            job.status = JobStatus::Failed(e.to_string());
            (job, None)
        }
    }
}

fn freq_label(f: f64) -> String {
    fmt_f64(f).to_string()
}

/// Runs every formulation at every frequency, compares against `tsm` when
/// present, and writes the artefacts to `out_dir`.
pub fn run_scenario(sc: &Scenario, out_dir: &Path) -> Result<RunReport> {
    let problem = sc.build()?;
    let ids = sc.formulation_ids()?;
    let solver = sc.solver.options();
    let options = sc.assembly_options();
    let warnings = sc.warnings();
    for w in &warnings {
        warn!("{w}");
    }

    let fd_jobs: Vec<(FormulationId, f64)> = ids
        .iter()
        .filter(|id| !id.is_time_domain())
        .flat_map(|&id| sc.drive.frequencies_hz.iter().map(move |&f| (id, f)))
        .collect();
    let mut jobs: Vec<JobResult> = fd_jobs
        .par_iter()
        .map(|&(id, f)| solve_job(&problem, id, f, &options, &solver))
        .collect();
    let mut td_outcome = None;
    if ids.contains(&FormulationId::TdSymmetric) {
        let (job, outcome) = run_td(&problem, sc, &solver);
        jobs.push(job);
        td_outcome = outcome;
    }

    let mut comparisons = Vec::new();
    if ids.contains(&FormulationId::Tsm) {
        for &f in &sc.drive.frequencies_hz {
            let Some(reference) = jobs
                .iter()
                .find(|j| j.formulation == FormulationId::Tsm && j.frequency_hz == f)
                .and_then(|j| j.fields.as_ref())
            else {
                continue;
            };
            for j in jobs.iter().filter(|j| {
                j.frequency_hz == f
                    && j.formulation != FormulationId::Tsm
                    && !j.formulation.is_time_domain()
            }) {
                if let Some(fs) = &j.fields {
                    comparisons.push(ComparisonRow {
                        formulation: j.formulation,
                        frequency_hz: f,
                        report: compare_fields(&problem.model.grid, fs, reference)?,
                    });
                }
            }
        }
    }

    let mut report = RunReport {
        scenario: sc.name.clone(),
        jobs,
        comparisons,
        td: td_outcome,
        warnings,
        files: Vec::new(),
    };
    write_outputs(sc, &problem, &mut report, out_dir)?;
    Ok(report)
}

fn write_outputs(
    sc: &Scenario,
    problem: &Problem,
    report: &mut RunReport,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let grid = &problem.model.grid;
    if sc.output.fields {
        for j in &report.jobs {
            if let Some(fs) = &j.fields {
                let stem = if j.formulation.is_time_domain() {
                    format!(
                        "{}_{}_t{}",
                        sc.name,
                        j.formulation,
                        sc.drive.time_domain.map_or(0, |t| t.steps)
                    )
                } else {
                    format!(
                        "{}_{}_{}",
                        sc.name,
                        j.formulation,
                        freq_label(j.frequency_hz)
                    )
                };
                for (fmt, ext) in [(ExportFormat::Vtk, "vtk"), (ExportFormat::Csv, "csv")] {
                    let path = out_dir.join(format!("{stem}.{ext}"));
                    export_fields(fs, grid, fmt, &path)?;
                    report.files.push(path);
                }
            }
        }
    }

    let summary = out_dir.join(format!("{}_summary.csv", sc.name));
    let mut s = String::from(
        "formulation,frequency_hz,dofs,status,solver,iterations,relative_residual,is_symmetric,expected_singular,block_triangular,max_abs_div_b\n",
    );
    for j in &report.jobs {
        let (solver, iters, res) = match &j.report {
            Some(r) => (
                r.solver.clone(),
                r.iterations.to_string(),
                fmt_f64(r.relative_residual).to_string(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            j.formulation,
            freq_label(j.frequency_hz),
            j.dofs,
            j.status.label(),
            solver,
            iters,
            res,
            j.flags.is_symmetric,
            j.flags.expected_singular,
            j.flags.block_triangular,
            fmt_f64(j.max_div_b)
        );
    }
    fs::write(&summary, s)?;
    report.files.push(summary);

    if !report.comparisons.is_empty() {
        let path = out_dir.join(format!("{}_comparison.csv", sc.name));
        let mut s =
            String::from("formulation,frequency_hz,quantity,part,max,mean,argmax_cell,x,y,z\n");
        for c in &report.comparisons {
            for (q, qc) in [("E", &c.report.e), ("B", &c.report.b)] {
                for p in Part::ALL {
                    let st = qc.part(p);
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{},{},{}",
                        c.formulation,
                        freq_label(c.frequency_hz),
                        q,
                        p.as_str(),
                        fmt_f64(st.max),
                        fmt_f64(st.mean),
                        st.argmax_cell,
                        fmt_f64(st.location[0]),
                        fmt_f64(st.location[1]),
                        fmt_f64(st.location[2])
                    );
                }
            }
        }
        fs::write(&path, s)?;
        report.files.push(path);
    }

    if let Some(r) = report.td.as_ref().and_then(|t| t.fd_check.as_ref()) {
        let path = out_dir.join(format!("{}_td_fd.csv", sc.name));
        let mut s = String::from("dof,fd_re,fd_im,td_re,td_im,amplitude_error,phase_error_deg\n");
        for row in &r.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                row.dof,
                fmt_f64(row.fd.re),
                fmt_f64(row.fd.im),
                fmt_f64(row.td.re),
                fmt_f64(row.td.im),
                fmt_f64(row.amplitude_error),
                fmt_f64(row.phase_error_deg)
            );
        }
        fs::write(&path, s)?;
        report.files.push(path);
    }
    Ok(())
}

/// One row of the `verify` table.
#[derive(Debug, Clone)]
pub struct VerifyRow {
    pub formulation: FormulationId,
    pub frequency_hz: f64,
    pub dofs: usize,
    pub flags: StructureFlags,
    pub outcome: std::result::Result<crate::oracle::DiagnosticsReport, String>,
}

impl VerifyRow {
    /// Whether the dense rank and exact symmetry agree with the flags.
    pub fn consistent(&self) -> Option<bool> {
        let d = self.outcome.as_ref().ok()?;
        Some(
            (d.nullity > 0) == self.flags.expected_singular
                && (d.symmetry_defect == 0.0) == self.flags.is_symmetric,
        )
    }
}

fn system_for(
    problem: &Problem,
    sc: &Scenario,
    id: FormulationId,
    f: f64,
) -> Result<AssembledSystem> {
    if id.is_time_domain() {
        let td = sc.drive.time_domain.ok_or_else(|| {
            scenario_err(
                "drive.time_domain",
                "td-symmetric needs a time-domain drive",
            )
        })?;
        Ok(td_symmetric_step(&problem.model, &problem.excitation, td.dt, 1.0)?.system)
    } else {
        assemble(
            &problem.model,
            &problem.excitation,
            id,
            2.0 * PI * f,
            &sc.assembly_options(),
        )
    }
}

/// Dense diagnostics of every formulation at the first frequency.
pub fn verify_scenario(
    sc: &Scenario,
    max_dofs: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<VerifyRow>> {
    let problem = sc.build()?;
    let f = sc.drive.frequencies_hz.first().copied().unwrap_or(0.0);
    let ids = sc.formulation_ids()?;
    let rows: Vec<VerifyRow> = ids
        .par_iter()
        .map(|&id| match system_for(&problem, sc, id, f) {
            Ok(sys) => VerifyRow {
                formulation: id,
                frequency_hz: f,
                dofs: sys.dim(),
                flags: sys.flags,
                outcome: dense_diagnostics(&sys, max_dofs).map_err(|e| e.to_string()),
            },
            Err(e) => VerifyRow {
                formulation: id,
                frequency_hz: f,
                dofs: 0,
                flags: StructureFlags::default(),
                outcome: Err(e.to_string()),
            },
        })
        .collect();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut s = String::from(
            "formulation,frequency_hz,dofs,rank,nullity,symmetry_defect,sigma_min,sigma_max,condition,raw_condition,expected_singular,is_symmetric,consistent,note\n",
        );
        for r in &rows {
            match &r.outcome {
                Ok(d) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{},{},{},{},{},{},",
                        r.formulation,
                        freq_label(r.frequency_hz),
                        r.dofs,
                        d.rank,
                        d.nullity,
                        fmt_f64(d.symmetry_defect),
                        fmt_f64(d.sigma_min),
                        fmt_f64(d.sigma_max),
                        fmt_f64(d.condition),
                        fmt_f64(d.raw_condition),
                        r.flags.expected_singular,
                        r.flags.is_symmetric,
                        r.consistent().unwrap_or(false)
                    );
                }
                Err(m) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},,,,,,,,{},{},,\"{}\"",
                        r.formulation,
                        freq_label(r.frequency_hz),
                        r.dofs,
                        r.flags.expected_singular,
                        r.flags.is_symmetric,
                        m.replace('"', "'")
                    );
                }
            }
        }
        fs::write(dir.join(format!("{}_diagnostics.csv", sc.name)), s)?;
    }
    Ok(rows)
}

/// Runs the scenario at the given frequencies and adds a dense condition
/// table for systems small enough.
pub fn sweep_scenario(sc: &Scenario, freqs: &[f64], out_dir: &Path) -> Result<RunReport> {
    let mut sc = sc.clone();
    sc.drive.frequencies_hz = freqs.to_vec();
    sc.validate()?;
    let report = run_scenario(&sc, out_dir)?;
    let problem = sc.build()?;
    let omegas: Vec<f64> = freqs.iter().map(|f| 2.0 * PI * f).collect();
    let mut s = String::from("formulation,frequency_hz,dofs,condition,raw_condition\n");
    for id in sc
        .formulation_ids()?
        .into_iter()
        .filter(|id| !id.is_time_domain())
    {
        match condition_sweep(
            &problem.model,
            &problem.excitation,
            id,
            &omegas,
            &sc.assembly_options(),
            DEFAULT_MAX_DOFS,
        ) {
            Ok(table) => {
                for (row, &f) in table.rows.iter().zip(freqs) {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        id,
                        freq_label(f),
                        row.dim,
                        fmt_f64(row.condition),
                        fmt_f64(row.raw_condition)
                    );
                }
            }
            Err(Error::TooLarge { .. }) => info!("{id}: too large for the dense condition table"),
            Err(e) => return Err(e),
        }
    }
    fs::write(out_dir.join(format!("{}_conditions.csv", sc.name)), s)?;
    Ok(report)
}

/// Writes the assembled matrix, or one block of it, in Matrix Market format.
pub fn export_matrix(
    sc: &Scenario,
    id: FormulationId,
    block: Option<(Block, Block)>,
    path: &Path,
) -> Result<()> {
    let problem = sc.build()?;
    let f = sc.drive.frequencies_hz.first().copied().unwrap_or(0.0);
    let sys = system_for(&problem, sc, id, f)?;
    let m = match block {
        Some((r, c)) => sys.block(r, c),
        None => sys.matrix.clone(),
    };
    let sym = if m.nrows() == m.ncols() && m.is_symmetric() {
        MmSymmetry::Symmetric
    } else {
        MmSymmetry::General
    };
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    write_matrix_market(&mut w, &m, sym, &format!("{} {}", sc.name, id))?;
    w.flush()?;
    Ok(())
}
