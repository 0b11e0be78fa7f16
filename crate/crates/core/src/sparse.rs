//! Compressed sparse row storage shared by the incidence operators, the
//! assembled block systems and the solvers.

use std::collections::HashMap;
use std::fmt::Display;
use std::io::{BufRead, Write};
use std::ops::{AddAssign, Mul};

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// Row-major sparse matrix. Column indices are sorted within each row and
/// free of duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

/// Coordinate-format accumulator. Duplicate entries are summed in insertion
/// order, so two assemblies issuing the same sequence of pushes produce
/// bit-identical values.
#[derive(Debug, Clone)]
pub struct TripletBuilder<T> {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, T)>,
}

impl<T: Copy + Default + AddAssign> TripletBuilder<T> {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: T) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    /// Adds every entry of `m` shifted by the given block offsets.
    pub fn push_block(&mut self, row_offset: usize, col_offset: usize, m: &CsrMatrix<T>) {
        for (r, c, v) in m.iter() {
            self.push(row_offset + r, col_offset + c, v);
        }
    }

    /// Adds the transpose of `m` at the given block offsets.
    pub fn push_block_transposed(
        &mut self,
        row_offset: usize,
        col_offset: usize,
        m: &CsrMatrix<T>,
    ) {
        for (r, c, v) in m.iter() {
            self.push(row_offset + c, col_offset + r, v);
        }
    }

    pub fn build(self) -> CsrMatrix<T> {
        let TripletBuilder {
            nrows,
            ncols,
            mut entries,
        } = self;
        // stable: duplicates keep insertion order
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<T> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }
}

impl<T: Copy> CsrMatrix<T> {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    /// Iterates `(row, col, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> Option<T> {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).ok().map(|k| vals[k])
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> CsrMatrix<U> {
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> CsrMatrix<T> {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.ncols {
            counts[c + 1] += counts[c];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0usize; self.nnz()];
        let mut values: Vec<Option<T>> = vec![None; self.nnz()];
        for (r, c, v) in self.iter() {
            let slot = next[c];
            indices[slot] = r;
            values[slot] = Some(v);
            next[c] += 1;
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr,
            indices,
            values: values
                .into_iter()
                .map(|v| v.expect("slot filled"))
                .collect(),
        }
    }

    /// Extracts the submatrix on the given rows and columns. `cols` must hold
    /// distinct indices; the new column order follows `cols`.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix<T>
    where
        T: Default + AddAssign,
    {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut b = TripletBuilder::new(rows.len(), cols.len());
        for (k, &r) in rows.iter().enumerate() {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                if col_map[c] != usize::MAX {
                    b.push(k, col_map[c], v);
                }
            }
        }
        b.build()
    }

    /// Diagonal entries (zero where absent).
    pub fn diagonal(&self) -> Vec<T>
    where
        T: Default,
    {
        (0..self.nrows.min(self.ncols))
            .map(|r| self.get(r, r).unwrap_or_default())
            .collect()
    }
}

impl<T> CsrMatrix<T>
where
    T: Copy + Default + AddAssign + Mul<Output = T>,
{
    /// `y = A x`.
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.ncols, "dimension mismatch in mat-vec");
        (0..self.nrows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                let mut acc = T::default();
                for (&c, &v) in cols.iter().zip(vals) {
                    acc += v * x[c];
                }
                acc
            })
            .collect()
    }

    /// Sparse product `A B`.
    pub fn mul_mat(&self, other: &CsrMatrix<T>) -> CsrMatrix<T> {
        assert_eq!(self.ncols, other.nrows, "dimension mismatch in mat-mat");
        let mut b = TripletBuilder::new(self.nrows, other.ncols);
        let mut acc: HashMap<usize, T> = HashMap::new();
        let mut order: Vec<usize> = Vec::new();
        for r in 0..self.nrows {
            acc.clear();
            order.clear();
            let (cols, vals) = self.row(r);
            for (&k, &a) in cols.iter().zip(vals) {
                let (ocols, ovals) = other.row(k);
                for (&c, &v) in ocols.iter().zip(ovals) {
                    acc.entry(c).and_modify(|s| *s += a * v).or_insert_with(|| {
                        order.push(c);
                        a * v
                    });
                }
            }
            order.sort_unstable();
            for &c in &order {
                b.push(r, c, acc[&c]);
            }
        }
        b.build()
    }

    /// Scales row `r` by `d[r]`.
    pub fn scale_rows(&self, d: &[T]) -> CsrMatrix<T> {
        assert_eq!(d.len(), self.nrows);
        let mut out = self.clone();
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.values[k] = d[r] * self.values[k];
            }
        }
        out
    }
}

impl<T: Copy + PartialEq> CsrMatrix<T> {
    /// Exact (bitwise value) transpose equality.
    pub fn is_symmetric(&self) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let t = self.transpose();
        t.indptr == self.indptr && t.indices == self.indices && t.values == self.values
    }
}

impl CsrMatrix<C64> {
    /// `diag(dr) · A · diag(dc)`.
    pub fn scale_both(&self, dr: &[f64], dc: &[f64]) -> CsrMatrix<C64> {
        assert_eq!(dr.len(), self.nrows);
        assert_eq!(dc.len(), self.ncols);
        let mut out = self.clone();
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.values[k] = self.values[k] * (dr[r] * dc[self.indices[k]]);
            }
        }
        out
    }

    /// Largest entrywise modulus of `A - A^T`.
    pub fn symmetry_defect(&self) -> f64 {
        let t = self.transpose();
        let mut defect = 0.0f64;
        for r in 0..self.nrows {
            let (c1, v1) = self.row(r);
            let (c2, v2) = t.row(r);
            let (mut i, mut j) = (0, 0);
            while i < c1.len() || j < c2.len() {
                let d = match (c1.get(i), c2.get(j)) {
                    (Some(&a), Some(&b)) if a == b => {
                        i += 1;
                        j += 1;
                        v1[i - 1] - v2[j - 1]
                    }
                    (Some(&a), Some(&b)) if a < b => {
                        i += 1;
                        v1[i - 1]
                    }
                    (Some(_), None) => {
                        i += 1;
                        v1[i - 1]
                    }
                    _ => {
                        j += 1;
                        v2[j - 1]
                    }
                };
                defect = defect.max(d.norm());
            }
        }
        defect
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Whether every stored entry is exactly zero (or nothing is stored).
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == C64::new(0.0, 0.0))
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<C64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut b = TripletBuilder::with_capacity(n, n, n);
        for i in 0..n {
            b.push(i, i, C64::new(1.0, 0.0));
        }
        b.build()
    }
}

impl<T: Copy + Into<f64>> CsrMatrix<T> {
    /// Converts an integer/real matrix into a complex one.
    pub fn to_complex(&self) -> CsrMatrix<C64> {
        self.map(|v| C64::new(v.into(), 0.0))
    }
}

/// `B^T diag(w) B` accumulated row by row of `B`.
///
/// Each term is evaluated as `w_r * (B_ri * B_rj)` and summed in ascending
/// `r`, so entry `(i, j)` and entry `(j, i)` are bitwise identical.
pub fn congruence(b: &CsrMatrix<C64>, w: &[C64]) -> CsrMatrix<C64> {
    assert_eq!(w.len(), b.nrows());
    let mut out = TripletBuilder::new(b.ncols(), b.ncols());
    for r in 0..b.nrows() {
        let (cols, vals) = b.row(r);
        for (&i, &bi) in cols.iter().zip(vals) {
            for (&j, &bj) in cols.iter().zip(vals) {
                out.push(i, j, w[r] * (bi * bj));
            }
        }
    }
    out.build()
}

/// Symmetry qualifier for Matrix Market output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmSymmetry {
    General,
    Symmetric,
}

/// Writes a complex coordinate Matrix Market file. With
/// [`MmSymmetry::Symmetric`] only the lower triangle is emitted.
pub fn write_matrix_market<W: Write>(
    out: &mut W,
    m: &CsrMatrix<C64>,
    symmetry: MmSymmetry,
    comment: &str,
) -> Result<()> {
    let sym = match symmetry {
        MmSymmetry::General => "general",
        MmSymmetry::Symmetric => "symmetric",
    };
    writeln!(out, "%%MatrixMarket matrix coordinate complex {sym}")?;
    for line in comment.lines() {
        writeln!(out, "% {line}")?;
    }
    let entries: Vec<_> = m
        .iter()
        .filter(|&(r, c, _)| symmetry == MmSymmetry::General || r >= c)
        .collect();
    writeln!(out, "{} {} {}", m.nrows(), m.ncols(), entries.len())?;
    for (r, c, v) in entries {
        writeln!(
            out,
            "{} {} {} {}",
            r + 1,
            c + 1,
            fmt_f64(v.re),
            fmt_f64(v.im)
        )?;
    }
    Ok(())
}

/// Reads a coordinate Matrix Market file (real, integer or complex;
/// general or symmetric).
pub fn read_matrix_market<R: BufRead>(input: R) -> Result<CsrMatrix<C64>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty Matrix Market input".into()))??;
    let tokens: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[2] != "coordinate" {
        return Err(Error::Parse(format!(
            "unsupported Matrix Market header: {header}"
        )));
    }
    let complex = match tokens[3].as_str() {
        "complex" => true,
        "real" | "integer" => false,
        other => return Err(Error::Parse(format!("unsupported field type {other}"))),
    };
    let symmetric = match tokens[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(Error::Parse(format!("unsupported symmetry {other}"))),
    };
    let mut size: Option<(usize, usize)> = None;
    let mut builder: Option<TripletBuilder<C64>> = None;
    for line in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Parse(format!("malformed Matrix Market line: {line}"));
        match size {
            None => {
                if parts.len() != 3 {
                    return Err(bad());
                }
                let nr: usize = parts[0].parse().map_err(|_| bad())?;
                let nc: usize = parts[1].parse().map_err(|_| bad())?;
                size = Some((nr, nc));
                builder = Some(TripletBuilder::new(nr, nc));
            }
            Some((nr, nc)) => {
                let want = if complex { 4 } else { 3 };
                if parts.len() != want {
                    return Err(bad());
                }
                let r: usize = parts[0].parse().map_err(|_| bad())?;
                let c: usize = parts[1].parse().map_err(|_| bad())?;
                if r == 0 || c == 0 || r > nr || c > nc {
                    return Err(bad());
                }
                let re: f64 = parts[2].parse().map_err(|_| bad())?;
                let im: f64 = if complex {
                    parts[3].parse().map_err(|_| bad())?
                } else {
                    0.0
                };
                let b = builder.as_mut().expect("size line read first");
                b.push(r - 1, c - 1, C64::new(re, im));
                if symmetric && r != c {
                    b.push(c - 1, r - 1, C64::new(re, im));
                }
            }
        }
    }
    builder
        .map(TripletBuilder::build)
        .ok_or_else(|| Error::Parse("missing Matrix Market size line".into()))
}

/// Shortest round-tripping decimal representation.
pub(crate) fn fmt_f64(v: f64) -> impl Display {
    // `{:e}` prints the shortest digit string that parses back exactly
    struct Exact(f64);
    impl Display for Exact {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            if self.0 == 0.0 {
                write!(f, "0")
            } else {
                write!(f, "{:e}", self.0)
            }
        }
    }
    Exact(v)
}
