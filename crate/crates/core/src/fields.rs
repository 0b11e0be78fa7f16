//! Field reconstruction from potentials, field comparison and export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::formulations::Potentials;
use crate::grid::{Axis, Grid, AXES};
use crate::operators::FitModel;
use crate::sparse::fmt_f64;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Phasor (frequency domain) or snapshot (time domain) tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldTag {
    Frequency { omega: f64 },
    Time { t: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSolution {
    /// Edge voltages ê, V.
    pub edge_voltage: Vec<C64>,
    /// Facet fluxes b̂, Wb.
    pub facet_flux: Vec<C64>,
    /// Cell-centred E, V/m.
    pub e_cell: Vec<[C64; 3]>,
    /// Cell-centred B, T.
    pub b_cell: Vec<[C64; 3]>,
    pub tag: FieldTag,
}

/// `ê = −jωa − Gφ`, `b̂ = Ca`, then cell averages.
pub fn reconstruct_fields(model: &FitModel, pot: &Potentials, omega: f64) -> Result<FieldSolution> {
    let grid = &model.grid;
    check_len("vector potential", pot.a.len(), grid.n_edges())?;
    check_len("scalar potential", pot.phi.len(), grid.n_nodes())?;
    let s = C64::new(0.0, omega);
    let grad_phi = model.incidence.grad.to_complex().mul_vec(&pot.phi);
    let edge_voltage: Vec<C64> = pot
        .a
        .iter()
        .zip(&grad_phi)
        .map(|(&a, &g)| -s * a - g)
        .collect();
    Ok(from_edge_quantities(
        model,
        edge_voltage,
        &pot.a,
        FieldTag::Frequency { omega },
    ))
}

/// Time-domain snapshot with `ê = −(aⁿ⁺¹ − aⁿ)/Δt − Gφⁿ⁺¹`.
pub fn reconstruct_time_fields(
    model: &FitModel,
    a: &[C64],
    a_prev: &[C64],
    phi: &[C64],
    dt: f64,
    t: f64,
) -> Result<FieldSolution> {
    let grid = &model.grid;
    check_len("vector potential", a.len(), grid.n_edges())?;
    check_len("previous vector potential", a_prev.len(), grid.n_edges())?;
    check_len("scalar potential", phi.len(), grid.n_nodes())?;
    let grad_phi = model.incidence.grad.to_complex().mul_vec(phi);
    let edge_voltage = (0..grid.n_edges())
        .map(|e| -(a[e] - a_prev[e]) / dt - grad_phi[e])
        .collect();
    Ok(from_edge_quantities(
        model,
        edge_voltage,
        a,
        FieldTag::Time { t },
    ))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!(
            "{what} has {got} entries, expected {want}"
        )));
    }
    Ok(())
}

fn from_edge_quantities(
    model: &FitModel,
    edge_voltage: Vec<C64>,
    a: &[C64],
    tag: FieldTag,
) -> FieldSolution {
    let grid = &model.grid;
    let facet_flux = model.incidence.curl.to_complex().mul_vec(a);
    let mut e_cell = Vec::with_capacity(grid.n_cells());
    let mut b_cell = Vec::with_capacity(grid.n_cells());
    for c in 0..grid.n_cells() {
        let p = grid.cell_coords(c);
        let h = [
            grid.spacing(Axis::X, p[0]),
            grid.spacing(Axis::Y, p[1]),
            grid.spacing(Axis::Z, p[2]),
        ];
        let mut e = [ZERO; 3];
        let mut b = [ZERO; 3];
        for axis in AXES {
            let a_i = axis.index();
            let (u, v) = axis.transverse();
            let mut sum = ZERO;
            for du in 0..2 {
                for dv in 0..2 {
                    let mut q = p;
                    q[u.index()] += du;
                    q[v.index()] += dv;
                    sum += edge_voltage[grid.edge_index(axis, q)];
                }
            }
            e[a_i] = sum / (4.0 * h[a_i]);
            let mut q = p;
            q[a_i] += 1;
            let area = h[u.index()] * h[v.index()];
            b[a_i] = (facet_flux[grid.face_index(axis, p)] + facet_flux[grid.face_index(axis, q)])
                / (2.0 * area);
        }
        e_cell.push(e);
        b_cell.push(b);
    }
    FieldSolution {
        edge_voltage,
        facet_flux,
        e_cell,
        b_cell,
        tag,
    }
}

/// `D b̂`, which vanishes up to the rounding of the sums.
pub fn flux_divergence(model: &FitModel, fields: &FieldSolution) -> Vec<C64> {
    model.incidence.div.to_complex().mul_vec(&fields.facet_flux)
}

/// Statistics of the cell-wise relative difference of one part.
#[derive(Debug, Clone, PartialEq)]
pub struct PartStats {
    pub max: f64,
    pub mean: f64,
    pub argmax_cell: usize,
    pub location: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Real,
    Imag,
    /// Magnitude of the complex difference vector.
    Complex,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Real, Part::Imag, Part::Complex];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::Real => "re",
            Part::Imag => "im",
            Part::Complex => "abs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantityComparison {
    /// Global maximum of `|X_ref|` over cells.
    pub normalization: f64,
    pub real: PartStats,
    pub imag: PartStats,
    pub complex: PartStats,
}

impl QuantityComparison {
    pub fn part(&self, p: Part) -> &PartStats {
        match p {
            Part::Real => &self.real,
            Part::Imag => &self.imag,
            Part::Complex => &self.complex,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub e: QuantityComparison,
    pub b: QuantityComparison,
}

fn vec_norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn compare_quantity(grid: &Grid, cand: &[[C64; 3]], refv: &[[C64; 3]]) -> QuantityComparison {
    let cmag = |x: &[C64; 3]| (x.iter().map(|c| c.norm_sqr()).sum::<f64>()).sqrt();
    let normalization = refv.iter().map(cmag).fold(0.0, f64::max);
    let scale = if normalization > 0.0 {
        1.0 / normalization
    } else {
        1.0
    };
    let stats = |f: &dyn Fn(&[C64; 3], &[C64; 3]) -> f64| {
        let mut max = 0.0;
        let mut sum = 0.0;
        let mut arg = 0;
        for (c, (x, y)) in cand.iter().zip(refv).enumerate() {
            let d = f(x, y) * scale;
            sum += d;
            if d > max {
                max = d;
                arg = c;
            }
        }
        PartStats {
            max,
            mean: if cand.is_empty() {
                0.0
            } else {
                sum / cand.len() as f64
            },
            argmax_cell: arg,
            location: grid.cell_center(arg),
        }
    };
    QuantityComparison {
        normalization,
        real: stats(&|x, y| vec_norm([x[0].re - y[0].re, x[1].re - y[1].re, x[2].re - y[2].re])),
        imag: stats(&|x, y| vec_norm([x[0].im - y[0].im, x[1].im - y[1].im, x[2].im - y[2].im])),
        complex: stats(&|x, y| cmag(&[x[0] - y[0], x[1] - y[1], x[2] - y[2]])),
    }
}

/// Cell-wise relative differences normalised by the global maximum
/// magnitude of the reference field.
pub fn compare_fields(
    grid: &Grid,
    candidate: &FieldSolution,
    reference: &FieldSolution,
) -> Result<ComparisonReport> {
    if candidate.e_cell.len() != grid.n_cells() || reference.e_cell.len() != grid.n_cells() {
        return Err(Error::DimensionMismatch(
            "field solutions live on different grids".into(),
        ));
    }
    Ok(ComparisonReport {
        e: compare_quantity(grid, &candidate.e_cell, &reference.e_cell),
        b: compare_quantity(grid, &candidate.b_cell, &reference.b_cell),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Vtk,
    Csv,
}

pub fn export_fields(
    fields: &FieldSolution,
    grid: &Grid,
    format: ExportFormat,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        ExportFormat::Vtk => write_vtk(fields, grid, &mut w)?,
        ExportFormat::Csv => write_csv(fields, grid, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

pub fn write_vtk<W: Write>(fields: &FieldSolution, grid: &Grid, w: &mut W) -> Result<()> {
    let n = grid.cells_per_axis();
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "emqs fields")?;
    writeln!(w, "ASCII")?;
    if grid.is_uniform() {
        let o = grid.bounds().0;
        writeln!(w, "DATASET STRUCTURED_POINTS")?;
        writeln!(w, "DIMENSIONS {} {} {}", n[0] + 1, n[1] + 1, n[2] + 1)?;
        writeln!(
            w,
            "ORIGIN {} {} {}",
            fmt_f64(o[0]),
            fmt_f64(o[1]),
            fmt_f64(o[2])
        )?;
        let h = [
            grid.spacing(Axis::X, 0),
            grid.spacing(Axis::Y, 0),
            grid.spacing(Axis::Z, 0),
        ];
        writeln!(
            w,
            "SPACING {} {} {}",
            fmt_f64(h[0]),
            fmt_f64(h[1]),
            fmt_f64(h[2])
        )?;
    } else {
        writeln!(w, "DATASET RECTILINEAR_GRID")?;
        writeln!(w, "DIMENSIONS {} {} {}", n[0] + 1, n[1] + 1, n[2] + 1)?;
        for (axis, name) in AXES.iter().zip(["X", "Y", "Z"]) {
            let lines = grid.node_lines(*axis);
            writeln!(w, "{}_COORDINATES {} double", name, lines.len())?;
            let s: Vec<String> = lines.iter().map(|&x| fmt_f64(x).to_string()).collect();
            writeln!(w, "{}", s.join(" "))?;
        }
    }
    writeln!(w, "CELL_DATA {}", grid.n_cells())?;
    let parts: [(&str, &Vec<[C64; 3]>, bool); 4] = [
        ("E_re", &fields.e_cell, true),
        ("E_im", &fields.e_cell, false),
        ("B_re", &fields.b_cell, true),
        ("B_im", &fields.b_cell, false),
    ];
    for (name, data, re) in parts {
        writeln!(w, "VECTORS {name} double")?;
        for v in data.iter() {
            let c: Vec<String> = v
                .iter()
                .map(|x| fmt_f64(if re { x.re } else { x.im }).to_string())
                .collect();
            writeln!(w, "{}", c.join(" "))?;
        }
    }
    Ok(())
}

pub const CSV_HEADER: &str =
    "cell,x,y,z,Ex_re,Ex_im,Ey_re,Ey_im,Ez_re,Ez_im,Bx_re,Bx_im,By_re,By_im,Bz_re,Bz_im";

pub fn write_csv<W: Write>(fields: &FieldSolution, grid: &Grid, w: &mut W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for c in 0..grid.n_cells() {
        let x = grid.cell_center(c);
        let mut row = vec![
            c.to_string(),
            fmt_f64(x[0]).to_string(),
            fmt_f64(x[1]).to_string(),
            fmt_f64(x[2]).to_string(),
        ];
        for v in fields.e_cell[c].iter().chain(fields.b_cell[c].iter()) {
            row.push(fmt_f64(v.re).to_string());
            row.push(fmt_f64(v.im).to_string());
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// One row of a field CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell: usize,
    pub center: [f64; 3],
    pub e: [C64; 3],
    pub b: [C64; 3],
}

pub fn read_fields_csv(path: &Path) -> Result<Vec<CellRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != CSV_HEADER {
        return Err(Error::Parse(format!(
            "unexpected field CSV header `{header}`"
        )));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 16 {
            return Err(Error::Parse(format!(
                "line {}: expected 16 columns, got {}",
                k + 2,
                cols.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            cols[i]
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}, column {}: {e}", k + 2, i + 1)))
        };
        let cell = cols[0]
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", k + 2)))?;
        let mut vals = [ZERO; 6];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = C64::new(num(4 + 2 * j)?, num(5 + 2 * j)?);
        }
        out.push(CellRecord {
            cell,
            center: [num(1)?, num(2)?, num(3)?],
            e: [vals[0], vals[1], vals[2]],
            b: [vals[3], vals[4], vals[5]],
        });
    }
    Ok(out)
}
