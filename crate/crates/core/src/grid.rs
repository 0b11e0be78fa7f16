//! Tensor-product hexahedral primal grid and its barycentric dual.
//!
//! Entities are numbered axis-major: all x-directed entities first, then y,
//! then z, each block lexicographic with `i` fastest. Faces are grouped by
//! their normal axis.

use crate::error::{Error, Result};

pub const AXES: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Axis {
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn from_index(i: usize) -> Axis {
        AXES[i]
    }

    /// The two transverse axes `(u, v)` such that `(self, u, v)` is a cyclic
    /// (right-handed) permutation of `(x, y, z)`.
    #[inline]
    pub fn transverse(self) -> (Axis, Axis) {
        let a = self.index();
        (AXES[(a + 1) % 3], AXES[(a + 2) % 3])
    }
}

/// Cell counts, per-axis spacings (meters) and the grid origin.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub spacings: [Vec<f64>; 3],
    pub origin: [f64; 3],
}

impl GridSpec {
    /// Uniform spacing `d[axis]` with `n[axis]` cells per axis.
    pub fn uniform(n: [usize; 3], d: [f64; 3], origin: [f64; 3]) -> Self {
        Self {
            spacings: [vec![d[0]; n[0]], vec![d[1]; n[1]], vec![d[2]; n[2]]],
            origin,
        }
    }

    pub fn cells(&self) -> [usize; 3] {
        [
            self.spacings[0].len(),
            self.spacings[1].len(),
            self.spacings[2].len(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for axis in AXES {
            let h = &self.spacings[axis.index()];
            if h.is_empty() {
                return Err(Error::InvalidGrid(format!(
                    "{axis:?}: at least one cell required"
                )));
            }
            if let Some(bad) = h.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
                return Err(Error::InvalidGrid(format!(
                    "{axis:?}: spacing {bad} is not positive"
                )));
            }
            if !self.origin[axis.index()].is_finite() {
                return Err(Error::InvalidGrid("origin must be finite".into()));
            }
        }
        Ok(())
    }
}

/// The four kinds of grid entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Node,
    Edge,
    Face,
    Cell,
}

/// Structured grid with index maps and primal/dual metrics.
#[derive(Debug, Clone)]
pub struct Grid {
    spec: GridSpec,
    n: [usize; 3],
    /// Node coordinates along each axis.
    coords: [Vec<f64>; 3],
    /// Dual (cell-center to cell-center) lengths attached to each node line,
    /// halved at the boundary.
    dual_len: [Vec<f64>; 3],
    edge_offset: [usize; 4],
    face_offset: [usize; 4],
    edge_length: Vec<f64>,
    dual_face_area: Vec<f64>,
    face_area: Vec<f64>,
    dual_edge_length: Vec<f64>,
    cell_volume: Vec<f64>,
}

impl Grid {
    /// Builds all index maps and metrics.
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.cells();
        let coords: [Vec<f64>; 3] = std::array::from_fn(|a| {
            let mut x = Vec::with_capacity(n[a] + 1);
            let mut acc = spec.origin[a];
            x.push(acc);
            for &h in &spec.spacings[a] {
                acc += h;
                x.push(acc);
            }
            x
        });
        let dual_len: [Vec<f64>; 3] = std::array::from_fn(|a| {
            let h = &spec.spacings[a];
            (0..=n[a])
                .map(|p| {
                    let lo = if p > 0 { h[p - 1] } else { 0.0 };
                    let hi = if p < n[a] { h[p] } else { 0.0 };
                    0.5 * (lo + hi)
                })
                .collect()
        });

        let mut edge_offset = [0usize; 4];
        let mut face_offset = [0usize; 4];
        for axis in AXES {
            let a = axis.index();
            edge_offset[a + 1] = edge_offset[a] + product(edge_dims(n, axis));
            face_offset[a + 1] = face_offset[a] + product(face_dims(n, axis));
        }

        let mut grid = Grid {
            spec,
            n,
            coords,
            dual_len,
            edge_offset,
            face_offset,
            edge_length: Vec::new(),
            dual_face_area: Vec::new(),
            face_area: Vec::new(),
            dual_edge_length: Vec::new(),
            cell_volume: Vec::new(),
        };
        grid.fill_metrics();
        Ok(grid)
    }

    fn fill_metrics(&mut self) {
        let ne = self.n_edges();
        let nf = self.n_faces();
        let mut edge_length = Vec::with_capacity(ne);
        let mut dual_face_area = Vec::with_capacity(ne);
        for e in 0..ne {
            let (axis, p) = self.edge_coords(e);
            let (u, v) = axis.transverse();
            edge_length.push(self.spacing(axis, p[axis.index()]));
            dual_face_area.push(
                self.dual_len[u.index()][p[u.index()]] * self.dual_len[v.index()][p[v.index()]],
            );
        }
        let mut face_area = Vec::with_capacity(nf);
        let mut dual_edge_length = Vec::with_capacity(nf);
        for f in 0..nf {
            let (axis, p) = self.face_coords(f);
            let (u, v) = axis.transverse();
            face_area.push(self.spacing(u, p[u.index()]) * self.spacing(v, p[v.index()]));
            dual_edge_length.push(self.dual_len[axis.index()][p[axis.index()]]);
        }
        let cell_volume = (0..self.n_cells())
            .map(|c| {
                let p = self.cell_coords(c);
                self.spacing(Axis::X, p[0])
                    * self.spacing(Axis::Y, p[1])
                    * self.spacing(Axis::Z, p[2])
            })
            .collect();
        self.edge_length = edge_length;
        self.dual_face_area = dual_face_area;
        self.face_area = face_area;
        self.dual_edge_length = dual_edge_length;
        self.cell_volume = cell_volume;
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Cell counts per axis.
    pub fn cells_per_axis(&self) -> [usize; 3] {
        self.n
    }

    pub fn spacing(&self, axis: Axis, cell: usize) -> f64 {
        self.spec.spacings[axis.index()][cell]
    }

    /// Node coordinates along one axis.
    pub fn node_lines(&self, axis: Axis) -> &[f64] {
        &self.coords[axis.index()]
    }

    /// Whether every axis has constant spacing.
    pub fn is_uniform(&self) -> bool {
        self.spec
            .spacings
            .iter()
            .all(|h| h.iter().all(|&d| d == h[0]))
    }

    pub fn n_nodes(&self) -> usize {
        product(node_dims(self.n))
    }

    pub fn n_edges(&self) -> usize {
        self.edge_offset[3]
    }

    pub fn n_faces(&self) -> usize {
        self.face_offset[3]
    }

    pub fn n_cells(&self) -> usize {
        product(self.n)
    }

    pub fn count(&self, kind: EntityKind) -> usize {
        match kind {
            EntityKind::Node => self.n_nodes(),
            EntityKind::Edge => self.n_edges(),
            EntityKind::Face => self.n_faces(),
            EntityKind::Cell => self.n_cells(),
        }
    }

    // ---- index maps -------------------------------------------------------

    pub fn node_index(&self, p: [usize; 3]) -> usize {
        flat(node_dims(self.n), p)
    }

    pub fn node_coords(&self, node: usize) -> [usize; 3] {
        unflat(node_dims(self.n), node)
    }

    /// Edge along `axis` starting at node `p`.
    pub fn edge_index(&self, axis: Axis, p: [usize; 3]) -> usize {
        self.edge_offset[axis.index()] + flat(edge_dims(self.n, axis), p)
    }

    pub fn edge_coords(&self, edge: usize) -> (Axis, [usize; 3]) {
        let a = block_of(&self.edge_offset, edge);
        let axis = Axis::from_index(a);
        (
            axis,
            unflat(edge_dims(self.n, axis), edge - self.edge_offset[a]),
        )
    }

    /// Face with normal `axis` whose lowest corner is node `p`.
    pub fn face_index(&self, axis: Axis, p: [usize; 3]) -> usize {
        self.face_offset[axis.index()] + flat(face_dims(self.n, axis), p)
    }

    pub fn face_coords(&self, face: usize) -> (Axis, [usize; 3]) {
        let a = block_of(&self.face_offset, face);
        let axis = Axis::from_index(a);
        (
            axis,
            unflat(face_dims(self.n, axis), face - self.face_offset[a]),
        )
    }

    pub fn cell_index(&self, p: [usize; 3]) -> usize {
        flat(self.n, p)
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        unflat(self.n, cell)
    }

    /// Entity counts along each axis for edges oriented along `axis`.
    pub fn edge_dims(&self, axis: Axis) -> [usize; 3] {
        edge_dims(self.n, axis)
    }

    /// Entity counts along each axis for faces normal to `axis`.
    pub fn face_dims(&self, axis: Axis) -> [usize; 3] {
        face_dims(self.n, axis)
    }

    // ---- metrics ----------------------------------------------------------

    pub fn edge_lengths(&self) -> &[f64] {
        &self.edge_length
    }

    pub fn dual_face_areas(&self) -> &[f64] {
        &self.dual_face_area
    }

    pub fn face_areas(&self) -> &[f64] {
        &self.face_area
    }

    pub fn dual_edge_lengths(&self) -> &[f64] {
        &self.dual_edge_length
    }

    pub fn cell_volumes(&self) -> &[f64] {
        &self.cell_volume
    }

    /// Dual length attached to node line `p` along `axis`.
    pub fn dual_length(&self, axis: Axis, p: usize) -> f64 {
        self.dual_len[axis.index()][p]
    }

    // ---- geometry ---------------------------------------------------------

    pub fn node_position(&self, node: usize) -> [f64; 3] {
        let p = self.node_coords(node);
        std::array::from_fn(|a| self.coords[a][p[a]])
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 3] {
        let p = self.cell_coords(cell);
        std::array::from_fn(|a| 0.5 * (self.coords[a][p[a]] + self.coords[a][p[a] + 1]))
    }

    pub fn edge_midpoint(&self, edge: usize) -> [f64; 3] {
        let (axis, p) = self.edge_coords(edge);
        std::array::from_fn(|a| {
            if a == axis.index() {
                0.5 * (self.coords[a][p[a]] + self.coords[a][p[a] + 1])
            } else {
                self.coords[a][p[a]]
            }
        })
    }

    /// Lower and upper corner of the domain.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = std::array::from_fn(|a| self.coords[a][0]);
        let hi = std::array::from_fn(|a| self.coords[a][self.n[a]]);
        (lo, hi)
    }

    // ---- adjacency --------------------------------------------------------

    /// Start and end node of an edge (edges point along +axis).
    pub fn edge_nodes(&self, edge: usize) -> (usize, usize) {
        let (axis, p) = self.edge_coords(edge);
        let mut q = p;
        q[axis.index()] += 1;
        (self.node_index(p), self.node_index(q))
    }

    /// Cells sharing an edge, each with the part of the edge's dual face
    /// area that lies inside it.
    pub fn edge_cells(&self, edge: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (axis, p) = self.edge_coords(edge);
        let (u, v) = axis.transverse();
        let (ui, vi) = (u.index(), v.index());
        [(0usize, 0usize), (1, 0), (0, 1), (1, 1)]
            .into_iter()
            .filter_map(move |(du, dv)| {
                if p[ui] < du || p[vi] < dv {
                    return None;
                }
                let mut c = p;
                c[ui] -= du;
                c[vi] -= dv;
                if c[ui] >= self.n[ui] || c[vi] >= self.n[vi] {
                    return None;
                }
                let area = 0.25 * self.spacing(u, c[ui]) * self.spacing(v, c[vi]);
                Some((self.cell_index(c), area))
            })
    }

    /// Cells sharing a face, each with the part of the face's dual edge that
    /// lies inside it.
    pub fn face_cells(&self, face: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (axis, p) = self.face_coords(face);
        let a = axis.index();
        [1usize, 0].into_iter().filter_map(move |back| {
            if p[a] < back {
                return None;
            }
            let mut c = p;
            c[a] -= back;
            if c[a] >= self.n[a] {
                return None;
            }
            Some((self.cell_index(c), 0.5 * self.spacing(axis, c[a])))
        })
    }

    /// Node lies on the domain boundary.
    pub fn node_on_boundary(&self, node: usize) -> bool {
        let p = self.node_coords(node);
        (0..3).any(|a| p[a] == 0 || p[a] == self.n[a])
    }

    /// Edge lies in a boundary face of the domain (tangential to ∂Ω).
    pub fn edge_on_boundary(&self, edge: usize) -> bool {
        let (axis, p) = self.edge_coords(edge);
        let (u, v) = axis.transverse();
        [u, v]
            .iter()
            .any(|t| p[t.index()] == 0 || p[t.index()] == self.n[t.index()])
    }

    pub fn face_on_boundary(&self, face: usize) -> bool {
        let (axis, p) = self.face_coords(face);
        p[axis.index()] == 0 || p[axis.index()] == self.n[axis.index()]
    }

    /// All edges tangential to ∂Ω, ascending.
    pub fn boundary_edges(&self) -> Vec<usize> {
        (0..self.n_edges())
            .filter(|&e| self.edge_on_boundary(e))
            .collect()
    }

    /// Nodes not on ∂Ω, ascending.
    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&v| !self.node_on_boundary(v))
            .collect()
    }
}

#[inline]
fn product(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

#[inline]
fn node_dims(n: [usize; 3]) -> [usize; 3] {
    [n[0] + 1, n[1] + 1, n[2] + 1]
}

#[inline]
fn edge_dims(n: [usize; 3], axis: Axis) -> [usize; 3] {
    let mut d = node_dims(n);
    d[axis.index()] -= 1;
    d
}

#[inline]
fn face_dims(n: [usize; 3], axis: Axis) -> [usize; 3] {
    let mut d = n;
    d[axis.index()] += 1;
    d
}

#[inline]
fn flat(d: [usize; 3], p: [usize; 3]) -> usize {
    debug_assert!(
        p[0] < d[0] && p[1] < d[1] && p[2] < d[2],
        "{p:?} outside {d:?}"
    );
    p[0] + d[0] * (p[1] + d[1] * p[2])
}

#[inline]
fn unflat(d: [usize; 3], idx: usize) -> [usize; 3] {
    [idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])]
}

#[inline]
fn block_of(offsets: &[usize; 4], idx: usize) -> usize {
    debug_assert!(idx < offsets[3]);
    if idx < offsets[1] {
        0
    } else if idx < offsets[2] {
        1
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: [usize; 3]) -> Grid {
        Grid::new(GridSpec::uniform(n, [1.0; 3], [0.0; 3])).unwrap()
    }

    #[test]
    fn counts_two_cubed() {
        let g = unit([2, 2, 2]);
        assert_eq!(g.n_nodes(), 27);
        assert_eq!(g.n_edges(), 54);
        assert_eq!(g.n_faces(), 36);
        assert_eq!(g.n_cells(), 8);
    }

    #[test]
    fn counts_unit_cube() {
        let g = unit([1, 1, 1]);
        assert_eq!(g.n_nodes(), 8);
        assert_eq!(g.n_edges(), 12);
        assert_eq!(g.n_faces(), 6);
        assert_eq!(g.n_cells(), 1);
    }

    #[test]
    fn counts_by_enumeration() {
        // enumerate entity lattices directly
        let (nx, ny, nz) = (3usize, 2usize, 1usize);
        let mut nodes = 0;
        let mut edges = 0;
        let mut faces = 0;
        let mut cells = 0;
        for k in 0..=nz {
            for j in 0..=ny {
                for i in 0..=nx {
                    nodes += 1;
                    edges += (i < nx) as usize + (j < ny) as usize + (k < nz) as usize;
                    faces += (j < ny && k < nz) as usize
                        + (i < nx && k < nz) as usize
                        + (i < nx && j < ny) as usize;
                    cells += (i < nx && j < ny && k < nz) as usize;
                }
            }
        }
        let g = unit([nx, ny, nz]);
        assert_eq!(nodes, 24);
        assert_eq!(g.n_nodes(), nodes);
        assert_eq!(g.n_edges(), edges);
        assert_eq!(g.n_faces(), faces);
        assert_eq!(g.n_cells(), cells);
        assert_eq!(nodes as i64 - edges as i64 + faces as i64 - cells as i64, 1);
    }

    #[test]
    fn rejects_bad_spacing() {
        assert!(Grid::new(GridSpec::uniform([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3])).is_err());
        assert!(Grid::new(GridSpec::uniform([1, 0, 1], [1.0; 3], [0.0; 3])).is_err());
        assert!(Grid::new(GridSpec::uniform([1, 1, 1], [1.0, -2.0, 1.0], [0.0; 3])).is_err());
    }

    #[test]
    fn dual_areas_uniform() {
        let g = unit([2, 2, 2]);
        let interior = g.edge_index(Axis::X, [0, 1, 1]);
        assert_eq!(g.dual_face_areas()[interior], 1.0);
        let corner = g.edge_index(Axis::X, [0, 0, 0]);
        assert_eq!(g.dual_face_areas()[corner], 0.25);
        let side = g.edge_index(Axis::X, [1, 0, 1]);
        assert_eq!(g.dual_face_areas()[side], 0.5);
        let f = g.face_index(Axis::Y, [1, 1, 1]);
        assert_eq!(g.dual_edge_lengths()[f], 1.0);
        let fb = g.face_index(Axis::Y, [1, 0, 1]);
        assert_eq!(g.dual_edge_lengths()[fb], 0.5);
    }

    #[test]
    fn dual_area_anisotropic() {
        let g = Grid::new(GridSpec::uniform([2, 2, 2], [1.0, 2.0, 4.0], [0.0; 3])).unwrap();
        let e = g.edge_index(Axis::X, [0, 1, 1]);
        assert_eq!(g.dual_face_areas()[e], 8.0);
        assert_eq!(g.edge_lengths()[e], 1.0);
    }

    #[test]
    fn edge_cell_areas_sum_to_dual_area() {
        let spec = GridSpec {
            spacings: [vec![1.0, 0.5, 2.0], vec![0.3, 0.7], vec![1.5, 0.25]],
            origin: [0.0; 3],
        };
        let g = Grid::new(spec).unwrap();
        for e in 0..g.n_edges() {
            let s: f64 = g.edge_cells(e).map(|(_, a)| a).sum();
            assert!((s - g.dual_face_areas()[e]).abs() < 1e-14);
        }
        for f in 0..g.n_faces() {
            let s: f64 = g.face_cells(f).map(|(_, l)| l).sum();
            assert!((s - g.dual_edge_lengths()[f]).abs() < 1e-14);
        }
    }

    #[test]
    fn boundary_classification() {
        let g = unit([2, 2, 2]);
        assert_eq!(g.interior_nodes(), vec![g.node_index([1, 1, 1])]);
        // 6 interior edges touch the central node
        assert_eq!(g.n_edges() - g.boundary_edges().len(), 6);
    }
}
