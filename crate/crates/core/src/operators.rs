//! Topological incidence matrices and diagonal material (Hodge) matrices.

use crate::error::{Error, Result};
use crate::grid::{Axis, Grid, AXES};
use crate::materials::{KappaHat, KappaHatPlacement, MaterialField};
use crate::sparse::{CsrMatrix, TripletBuilder};

/// Discrete gradient (edges × nodes), curl (faces × edges) and divergence
/// (cells × faces).
#[derive(Debug, Clone)]
pub struct Incidence {
    pub grad: CsrMatrix<i8>,
    pub curl: CsrMatrix<i8>,
    pub div: CsrMatrix<i8>,
}

pub fn build_incidence(grid: &Grid) -> Incidence {
    let ne = grid.n_edges();
    let nf = grid.n_faces();
    let nc = grid.n_cells();

    let mut g = TripletBuilder::with_capacity(ne, grid.n_nodes(), 2 * ne);
    for e in 0..ne {
        let (start, end) = grid.edge_nodes(e);
        g.push(e, start, -1i8);
        g.push(e, end, 1);
    }

    let mut c = TripletBuilder::with_capacity(nf, ne, 4 * nf);
    for f in 0..nf {
        let (axis, p) = grid.face_coords(f);
        let (u, v) = axis.transverse();
        let mut pu = p;
        pu[u.index()] += 1;
        let mut pv = p;
        pv[v.index()] += 1;
        // counter-clockwise loop seen from +axis
        c.push(f, grid.edge_index(u, p), 1i8);
        c.push(f, grid.edge_index(v, pu), 1);
        c.push(f, grid.edge_index(u, pv), -1);
        c.push(f, grid.edge_index(v, p), -1);
    }

    let mut d = TripletBuilder::with_capacity(nc, nf, 6 * nc);
    for cell in 0..nc {
        let p = grid.cell_coords(cell);
        for axis in AXES {
            let mut q = p;
            q[axis.index()] += 1;
            d.push(cell, grid.face_index(axis, p), -1i8);
            d.push(cell, grid.face_index(axis, q), 1);
        }
    }

    Incidence {
        grad: g.build(),
        curl: c.build(),
        div: d.build(),
    }
}

/// Integer product of two incidence matrices.
pub fn incidence_product(a: &CsrMatrix<i8>, b: &CsrMatrix<i8>) -> CsrMatrix<i64> {
    a.map(i64::from).mul_mat(&b.map(i64::from))
}

/// Edge Hodge diagonal for a cell parameter: the parameter is averaged over
/// the dual face with area weights, then scaled by dual area over length.
pub fn edge_hodge(grid: &Grid, param: impl Fn(usize) -> f64) -> Vec<f64> {
    let lengths = grid.edge_lengths();
    (0..grid.n_edges())
        .map(|e| {
            let flux: f64 = grid.edge_cells(e).map(|(c, area)| param(c) * area).sum();
            flux / lengths[e]
        })
        .collect()
}

/// Face reluctance diagonal: reluctivity is summed in series along the dual
/// edge (harmonic averaging of permeability), then divided by face area.
pub fn face_hodge(grid: &Grid, nu: &[f64]) -> Vec<f64> {
    let areas = grid.face_areas();
    (0..grid.n_faces())
        .map(|f| {
            let reluct: f64 = grid.face_cells(f).map(|(c, len)| nu[c] * len).sum();
            reluct / areas[f]
        })
        .collect()
}

/// Diagonal material matrices.
#[derive(Debug, Clone)]
pub struct Hodges {
    /// Face reluctances, 1/H.
    pub nu: Vec<f64>,
    /// Edge conductances, S.
    pub kappa: Vec<f64>,
    /// Edge capacitances, F.
    pub eps: Vec<f64>,
    /// Edge conductances of κ̂ with the material field's placement, S.
    pub kappa_hat: Vec<f64>,
}

pub fn build_hodges(grid: &Grid, mat: &MaterialField) -> Result<Hodges> {
    if mat.n_cells() != grid.n_cells() {
        return Err(Error::DimensionMismatch(format!(
            "material field has {} cells, grid has {}",
            mat.n_cells(),
            grid.n_cells()
        )));
    }
    let kh = mat.kappa_hat();
    Ok(Hodges {
        nu: face_hodge(grid, mat.nu()),
        kappa: edge_hodge(grid, |c| mat.kappa()[c]),
        eps: edge_hodge(grid, |c| mat.effective_eps(c)),
        kappa_hat: edge_hodge(grid, |c| mat.kappa_hat_in(c, kh)),
    })
}

/// Grid, materials, incidence and Hodge matrices of one discretized problem.
#[derive(Debug, Clone)]
pub struct FitModel {
    pub grid: Grid,
    pub materials: MaterialField,
    pub incidence: Incidence,
    pub hodges: Hodges,
}

impl FitModel {
    pub fn new(grid: Grid, materials: MaterialField) -> Result<Self> {
        let hodges = build_hodges(&grid, &materials)?;
        let incidence = build_incidence(&grid);
        Ok(Self {
            grid,
            materials,
            incidence,
            hodges,
        })
    }

    /// κ̂ edge conductances for an explicit value and placement.
    pub fn kappa_hat_hodge(&self, value: f64, placement: KappaHatPlacement) -> Vec<f64> {
        let kh = KappaHat { value, placement };
        edge_hodge(&self.grid, |c| self.materials.kappa_hat_in(c, kh))
    }

    /// Edges with nonzero conductance.
    pub fn conductive_edges(&self) -> Vec<bool> {
        self.hodges.kappa.iter().map(|&k| k > 0.0).collect()
    }

    pub fn axis_of_edge(&self, e: usize) -> Axis {
        self.grid.edge_coords(e).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::materials::{Material, MaterialBox, MaterialOptions, EPS0, MU0};

    fn unit(n: [usize; 3]) -> Grid {
        Grid::new(GridSpec::uniform(n, [1.0; 3], [0.0; 3])).unwrap()
    }

    #[test]
    fn shapes_and_row_counts() {
        let g = unit([1, 1, 1]);
        let ops = build_incidence(&g);
        assert_eq!((ops.curl.nrows(), ops.curl.ncols()), (6, 12));
        assert_eq!((ops.grad.nrows(), ops.grad.ncols()), (12, 8));
        assert_eq!((ops.div.nrows(), ops.div.ncols()), (1, 6));
        for r in 0..6 {
            assert_eq!(ops.curl.row(r).0.len(), 4);
        }
        for r in 0..12 {
            assert_eq!(ops.grad.row(r).0.len(), 2);
        }
        assert_eq!(ops.div.row(0).0.len(), 6);
    }

    #[test]
    fn exactness_small() {
        for n in [[1, 1, 1], [2, 2, 2], [3, 1, 2]] {
            let g = unit(n);
            let ops = build_incidence(&g);
            assert!(incidence_product(&ops.curl, &ops.grad)
                .values()
                .iter()
                .all(|&v| v == 0));
            assert!(incidence_product(&ops.div, &ops.curl)
                .values()
                .iter()
                .all(|&v| v == 0));
        }
    }

    #[test]
    fn x_face_loop_orientation() {
        let g = unit([1, 1, 1]);
        let ops = build_incidence(&g);
        let f = g.face_index(Axis::X, [0, 0, 0]);
        // hand enumeration: loop y(0,0,0) -> z(0,1,0) -> -y(0,0,1) -> -z(0,0,0)
        let expect = [
            (g.edge_index(Axis::Y, [0, 0, 0]), 1i8),
            (g.edge_index(Axis::Z, [0, 1, 0]), 1),
            (g.edge_index(Axis::Y, [0, 0, 1]), -1),
            (g.edge_index(Axis::Z, [0, 0, 0]), -1),
        ];
        for (e, s) in expect {
            assert_eq!(ops.curl.get(f, e), Some(s), "edge {e}");
        }
        assert_eq!(ops.curl.row(f).0.len(), 4);
    }

    #[test]
    fn vacuum_permittivity_on_interior_edge() {
        let g = unit([2, 2, 2]);
        let m = MaterialField::vacuum(&g);
        let h = build_hodges(&g, &m).unwrap();
        let e = g.edge_index(Axis::Z, [1, 1, 0]);
        assert!((h.eps[e] - EPS0).abs() <= 1e-30);
        let f = g.face_index(Axis::Z, [0, 0, 1]);
        assert!((h.nu[f] - 1.0 / MU0).abs() / (1.0 / MU0) < 1e-15);
    }

    #[test]
    fn permeable_interior_face() {
        let g = unit([2, 2, 2]);
        let yoke = Material {
            kappa: 2e-3,
            eps_r: 1.0,
            mu_r: 4000.0,
            tag: "yoke".into(),
        };
        let m = MaterialField::build(&g, &yoke, &[], &MaterialOptions::default()).unwrap();
        let h = build_hodges(&g, &m).unwrap();
        let f = g.face_index(Axis::X, [1, 0, 1]);
        let want = 1.0 / (4000.0 * MU0);
        assert!((h.nu[f] - want).abs() / want < 1e-15);
    }

    #[test]
    fn half_conductive_dual_face() {
        let g = unit([2, 2, 2]);
        // z-edge at (1,1,0): its four cells are (0|1, 0|1, 0); paint x < 1
        let cond = MaterialBox {
            lo: [0.0, 0.0, 0.0],
            hi: [1.0, 2.0, 2.0],
            material: Material {
                kappa: 5.96e7,
                eps_r: 1.0,
                mu_r: 1.0,
                tag: "conductor".into(),
            },
        };
        let m = MaterialField::build(
            &g,
            &Material::vacuum(),
            &[cond],
            &MaterialOptions::default(),
        )
        .unwrap();
        let h = build_hodges(&g, &m).unwrap();
        let e = g.edge_index(Axis::Z, [1, 1, 0]);
        assert_eq!(h.kappa[e], 5.96e7 * 0.5);
    }

    #[test]
    fn series_reluctance_across_interface() {
        let g = unit([2, 1, 1]);
        let yoke = MaterialBox {
            lo: [1.0, 0.0, 0.0],
            hi: [2.0, 1.0, 1.0],
            material: Material {
                kappa: 0.0,
                eps_r: 1.0,
                mu_r: 4.0,
                tag: "yoke".into(),
            },
        };
        let m = MaterialField::build(
            &g,
            &Material::vacuum(),
            &[yoke],
            &MaterialOptions::default(),
        )
        .unwrap();
        let h = build_hodges(&g, &m).unwrap();
        let f = g.face_index(Axis::X, [1, 0, 0]);
        let want = 0.5 / MU0 + 0.5 / (4.0 * MU0);
        assert!((h.nu[f] - want).abs() / want < 1e-15);
    }
}
