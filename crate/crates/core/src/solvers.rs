//! Linear solvers for the assembled block systems.
//!
//! The direct path is a left-looking sparse LU with threshold partial
//! pivoting and a nested-dissection column ordering; the iterative paths are
//! COCG for complex-symmetric systems and restarted GMRES otherwise, both
//! with an optional Jacobi preconditioner. Block upper-triangular systems
//! are solved by block back-substitution.

use std::collections::VecDeque;
use std::time::Instant;

use log::{debug, warn};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::formulations::AssembledSystem;
use crate::sparse::CsrMatrix;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    #[default]
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    None,
    #[default]
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub method: SolverMethod,
    /// Relative residual target of the iterative solvers.
    pub tol: f64,
    pub max_iter: usize,
    pub restart: usize,
    pub preconditioner: Preconditioner,
    /// Largest relative residual a direct solve may return.
    pub direct_residual_limit: f64,
    /// Pivots below this fraction of the largest entry of their
    /// equilibrated column, before or after elimination, count as zero.
    pub singular_tol: f64,
    /// Diagonal preference of the threshold pivoting.
    pub pivot_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::Direct,
            tol: 1e-10,
            max_iter: 20_000,
            restart: 100,
            preconditioner: Preconditioner::Jacobi,
            direct_residual_limit: 1e-10,
            singular_tol: 1e-13,
            pivot_tol: 0.1,
        }
    }
}

/// How a solution was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solver: String,
    pub iterations: usize,
    /// `‖b − Ax‖ / ‖b‖`, recomputed from the returned solution.
    pub relative_residual: f64,
    /// Stored entries of the LU factors, direct path only.
    pub fill: Option<usize>,
    /// Whether an iterative solver had to restart after a breakdown.
    pub breakdown: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<C64>,
    pub report: SolveReport,
}

pub fn norm(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Unconjugated bilinear form `xᵀy`.
fn dotu(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Hermitian inner product `xᴴy`.
fn dotc(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

pub fn residual(a: &CsrMatrix<C64>, x: &[C64], b: &[C64]) -> Vec<C64> {
    let ax = a.mul_vec(x);
    b.iter().zip(ax).map(|(bi, ai)| bi - ai).collect()
}

/// `‖b − Ax‖ / ‖b‖`, or the absolute residual when `b = 0`.
pub fn relative_residual(a: &CsrMatrix<C64>, x: &[C64], b: &[C64]) -> f64 {
    let r = norm(&residual(a, x, b));
    let nb = norm(b);
    if nb > 0.0 {
        r / nb
    } else {
        r
    }
}

/// Fill-reducing symmetric ordering of the `A + Aᵀ` pattern by recursive
/// level-structure bisection.
pub fn nested_dissection(a: &CsrMatrix<C64>) -> Vec<usize> {
    let n = a.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, c, _) in a.iter() {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }
    let mut order = Vec::with_capacity(n);
    let mut active = vec![true; n];
    let mut level = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    for s in 0..n {
        if !seen[s] {
            let comp = bfs_component(&adj, s, &active, &mut seen);
            dissect(&adj, comp, &mut active, &mut level, &mut order);
        }
    }
    debug_assert_eq!(order.len(), n);
    order
}

const ND_LEAF: usize = 64;

fn bfs_component(adj: &[Vec<usize>], s: usize, active: &[bool], seen: &mut [bool]) -> Vec<usize> {
    let mut comp = vec![s];
    seen[s] = true;
    let mut head = 0;
    while head < comp.len() {
        let v = comp[head];
        head += 1;
        for &w in &adj[v] {
            if active[w] && !seen[w] {
                seen[w] = true;
                comp.push(w);
            }
        }
    }
    comp
}

/// BFS levels from `s` within the active set; returns nodes in BFS order and
/// the number of levels.
fn level_structure(
    adj: &[Vec<usize>],
    s: usize,
    active: &[bool],
    level: &mut [usize],
) -> (Vec<usize>, usize) {
    let mut q = VecDeque::new();
    let mut out = Vec::new();
    level[s] = 0;
    q.push_back(s);
    let mut depth = 0;
    while let Some(v) = q.pop_front() {
        out.push(v);
        depth = depth.max(level[v] + 1);
        for &w in &adj[v] {
            if active[w] && level[w] == usize::MAX {
                level[w] = level[v] + 1;
                q.push_back(w);
            }
        }
    }
    (out, depth)
}

fn dissect(
    adj: &[Vec<usize>],
    nodes: Vec<usize>,
    active: &mut [bool],
    level: &mut [usize],
    order: &mut Vec<usize>,
) {
    // separators are emitted after both halves
    enum Work {
        Part(Vec<usize>),
        Emit(Vec<usize>),
    }
    let mut work = vec![Work::Part(nodes)];
    let mut in_set = vec![false; adj.len()];
    while let Some(w) = work.pop() {
        let nodes = match w {
            Work::Emit(sep) => {
                order.extend(sep);
                continue;
            }
            Work::Part(n) => n,
        };
        if nodes.len() <= ND_LEAF {
            // leaf: BFS order from a pseudo-peripheral node
            let start = pseudo_peripheral(adj, nodes[0], &nodes, active, level, &mut in_set);
            let (bfs, _) = restricted_bfs(adj, start, &nodes, level, &mut in_set);
            let mut covered = bfs;
            if covered.len() < nodes.len() {
                for &v in &nodes {
                    if !covered.contains(&v) {
                        covered.push(v);
                    }
                }
            }
            order.extend(covered);
            continue;
        }
        let start = pseudo_peripheral(adj, nodes[0], &nodes, active, level, &mut in_set);
        let (bfs, depth) = restricted_bfs(adj, start, &nodes, level, &mut in_set);
        if bfs.len() < nodes.len() {
            // disconnected: split off the reached component
            for &v in &nodes {
                in_set[v] = false;
            }
            for &v in &bfs {
                in_set[v] = true;
            }
            let rest: Vec<usize> = nodes.iter().copied().filter(|&v| !in_set[v]).collect();
            for &v in &bfs {
                in_set[v] = false;
            }
            work.push(Work::Part(rest));
            work.push(Work::Part(bfs));
            continue;
        }
        if depth < 3 {
            order.extend(bfs);
            continue;
        }
        let mut counts = vec![0usize; depth];
        for &v in &bfs {
            counts[level[v]] += 1;
        }
        // smallest level that keeps both sides within 30-70 %
        let total = bfs.len();
        let mut below = 0;
        let mut sep_level = usize::MAX;
        for l in 1..depth - 1 {
            below += counts[l - 1];
            let above = total - below - counts[l];
            if 10 * below.min(above) >= 3 * total
                && (sep_level == usize::MAX || counts[l] < counts[sep_level])
            {
                sep_level = l;
            }
        }
        if sep_level == usize::MAX {
            let mut acc = 0;
            sep_level = 1;
            for (l, &c) in counts.iter().enumerate() {
                acc += c;
                if acc >= total / 2 {
                    sep_level = l.clamp(1, depth - 2);
                    break;
                }
            }
        }
        // only level vertices touching the next level are needed to separate
        for &v in &bfs {
            in_set[v] = true;
        }
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut sep = Vec::new();
        for &v in &bfs {
            match level[v].cmp(&sep_level) {
                std::cmp::Ordering::Less => lower.push(v),
                std::cmp::Ordering::Equal => {
                    if adj[v]
                        .iter()
                        .any(|&w| in_set[w] && level[w] == sep_level + 1)
                    {
                        sep.push(v);
                    } else {
                        lower.push(v);
                    }
                }
                std::cmp::Ordering::Greater => upper.push(v),
            }
        }
        for &v in &bfs {
            in_set[v] = false;
        }
        for &v in &sep {
            active[v] = false;
        }
        work.push(Work::Emit(sep));
        work.push(Work::Part(upper));
        work.push(Work::Part(lower));
    }
}

fn restricted_bfs(
    adj: &[Vec<usize>],
    s: usize,
    nodes: &[usize],
    level: &mut [usize],
    in_set: &mut [bool],
) -> (Vec<usize>, usize) {
    for &v in nodes {
        in_set[v] = true;
        level[v] = usize::MAX;
    }
    let res = level_structure(adj, s, in_set, level);
    for &v in nodes {
        in_set[v] = false;
    }
    res
}

fn pseudo_peripheral(
    adj: &[Vec<usize>],
    s: usize,
    nodes: &[usize],
    _active: &[bool],
    level: &mut [usize],
    in_set: &mut [bool],
) -> usize {
    let mut start = s;
    let mut best_depth = 0;
    for _ in 0..4 {
        let (bfs, depth) = restricted_bfs(adj, start, nodes, level, in_set);
        if depth <= best_depth {
            break;
        }
        best_depth = depth;
        // farthest node with smallest degree
        let last = level[*bfs.last().unwrap()];
        let cand = bfs
            .iter()
            .copied()
            .filter(|&v| level[v] == last)
            .min_by_key(|&v| adj[v].len())
            .unwrap();
        if cand == start {
            break;
        }
        start = cand;
    }
    start
}

/// Sparse LU factors `P Dr A Dc Q = L U`.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    q: Vec<usize>,
    pinv: Vec<usize>,
    row_scale: Vec<f64>,
    col_scale: Vec<f64>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<C64>,
    up: Vec<usize>,
    ui: Vec<usize>,
    ux: Vec<C64>,
}

/// Row/column scaling making every row and column max-norm close to one.
pub(crate) fn equilibrate(a: &CsrMatrix<C64>, sweeps: usize) -> (Vec<f64>, Vec<f64>) {
    let n = a.nrows();
    let mut dr = vec![1.0; n];
    let mut dc = vec![1.0; a.ncols()];
    for _ in 0..sweeps {
        let mut rmax = vec![0.0f64; n];
        let mut cmax = vec![0.0f64; a.ncols()];
        for (r, c, v) in a.iter() {
            let m = v.norm() * dr[r] * dc[c];
            rmax[r] = rmax[r].max(m);
            cmax[c] = cmax[c].max(m);
        }
        let mut done = true;
        for (d, m) in dr.iter_mut().zip(&rmax) {
            if *m > 0.0 {
                *d /= m.sqrt();
                done &= (m - 1.0).abs() < 1e-3;
            }
        }
        for (d, m) in dc.iter_mut().zip(&cmax) {
            if *m > 0.0 {
                *d /= m.sqrt();
                done &= (m - 1.0).abs() < 1e-3;
            }
        }
        if done {
            break;
        }
    }
    (dr, dc)
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix<C64>, opts: &SolverOptions) -> Result<Self> {
        if a.ncols() != a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "LU needs a square matrix, got {}×{}",
                a.nrows(),
                a.ncols()
            )));
        }
        Self::factor_ordered(a, nested_dissection(a), opts)
    }

    /// Factors with the column order `q` instead of nested dissection.
    pub fn factor_ordered(a: &CsrMatrix<C64>, q: Vec<usize>, opts: &SolverOptions) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "LU needs a square matrix, got {}×{}",
                n,
                a.ncols()
            )));
        }
        let mut seen = vec![false; n];
        if q.len() != n
            || !q
                .iter()
                .all(|&c| c < n && !std::mem::replace(&mut seen[c], true))
        {
            return Err(Error::InvalidParameter(
                "column order is not a permutation".into(),
            ));
        }
        let (dr, dc) = equilibrate(a, 8);
        // CSC of the scaled matrix: columns of Aᵀ in CSR form
        let at = a.transpose();
        let (cp, ci, cx) = (at.indptr(), at.indices(), at.values());

        let mut pinv = vec![usize::MAX; n];
        let mut lp = vec![0usize; n + 1];
        let mut up = vec![0usize; n + 1];
        let cap = 4 * a.nnz() + n;
        let mut li = Vec::with_capacity(cap);
        let mut lx = Vec::with_capacity(cap);
        let mut ui = Vec::with_capacity(cap);
        let mut ux = Vec::with_capacity(cap);
        let mut x = vec![ZERO; n];
        let mut xi = vec![0usize; n];
        let mut mark = vec![usize::MAX; n];
        let mut stack = vec![0usize; n];
        let mut pstack = vec![0usize; n];
        let mut off_diagonal = 0usize;
        let mut flops = 0usize;

        for k in 0..n {
            lp[k] = li.len();
            up[k] = ui.len();
            let col = q[k];
            // reach: DFS over L's graph from the column pattern
            let mut top = n;
            for p in cp[col]..cp[col + 1] {
                let start = ci[p];
                if mark[start] == k {
                    continue;
                }
                let mut head: isize = 0;
                stack[0] = start;
                while head >= 0 {
                    let h = head as usize;
                    let j = stack[h];
                    let jj = pinv[j];
                    if mark[j] != k {
                        mark[j] = k;
                        pstack[h] = if jj == usize::MAX { 0 } else { lp[jj] + 1 };
                    }
                    let end = if jj == usize::MAX { 0 } else { lp[jj + 1] };
                    let mut done = true;
                    let mut pp = pstack[h];
                    while pp < end {
                        let i = li[pp];
                        pp += 1;
                        if mark[i] == k {
                            continue;
                        }
                        pstack[h] = pp;
                        head += 1;
                        stack[head as usize] = i;
                        done = false;
                        break;
                    }
                    if done {
                        head -= 1;
                        top -= 1;
                        xi[top] = j;
                    }
                }
            }
            for &i in &xi[top..n] {
                x[i] = ZERO;
            }
            let mut col_max = 0.0f64;
            for p in cp[col]..cp[col + 1] {
                let v = cx[p] * (dr[ci[p]] * dc[col]);
                col_max = col_max.max(v.norm());
                x[ci[p]] = v;
            }
            for idx in top..n {
                let j = xi[idx];
                let jj = pinv[j];
                if jj == usize::MAX {
                    continue;
                }
                let xj = x[j];
                if xj == ZERO {
                    continue;
                }
                flops += lp[jj + 1] - lp[jj] - 1;
                let range = lp[jj] + 1..lp[jj + 1];
                for (&i, &l) in li[range.clone()].iter().zip(&lx[range]) {
                    x[i] -= l * xj;
                }
            }
            let mut ipiv = usize::MAX;
            let mut amax = -1.0f64;
            // a pivot left over from cancellation against large U entries
            // is rounding noise, so those count towards the reference too
            let mut reference = col_max;
            for &i in &xi[top..n] {
                if pinv[i] == usize::MAX {
                    let t = x[i].norm();
                    if t > amax {
                        amax = t;
                        ipiv = i;
                    }
                } else {
                    reference = reference.max(x[i].norm());
                    ui.push(pinv[i]);
                    ux.push(x[i]);
                }
            }
            let threshold = opts.singular_tol * reference;
            if ipiv == usize::MAX || amax <= threshold {
                return Err(Error::SingularMatrix {
                    column: k,
                    pivot: amax.max(0.0),
                    threshold,
                });
            }
            if pinv[col] == usize::MAX && x[col].norm() >= opts.pivot_tol * amax {
                ipiv = col;
            } else {
                off_diagonal += 1;
            }
            let pivot = x[ipiv];
            ui.push(k);
            ux.push(pivot);
            pinv[ipiv] = k;
            li.push(ipiv);
            lx.push(C64::new(1.0, 0.0));
            for &i in &xi[top..n] {
                if pinv[i] == usize::MAX {
                    li.push(i);
                    lx.push(x[i] / pivot);
                }
                x[i] = ZERO;
            }
        }
        lp[n] = li.len();
        up[n] = ui.len();
        log::debug!(
            "lu: n {n}, fill {}, {off_diagonal} off-diagonal pivots, {flops} madds",
            li.len() + ui.len()
        );
        for i in li.iter_mut() {
            *i = pinv[*i];
        }
        Ok(Self {
            n,
            q,
            pinv,
            row_scale: dr,
            col_scale: dc,
            lp,
            li,
            lx,
            up,
            ui,
            ux,
        })
    }

    pub fn fill(&self) -> usize {
        self.li.len() + self.ui.len()
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let n = self.n;
        let mut y = vec![ZERO; n];
        for i in 0..n {
            y[self.pinv[i]] = b[i] * self.row_scale[i];
        }
        for k in 0..n {
            let yk = y[k];
            if yk != ZERO {
                for p in self.lp[k] + 1..self.lp[k + 1] {
                    y[self.li[p]] -= self.lx[p] * yk;
                }
            }
        }
        for k in (0..n).rev() {
            let last = self.up[k + 1] - 1;
            y[k] /= self.ux[last];
            let yk = y[k];
            if yk != ZERO {
                for p in self.up[k]..last {
                    y[self.ui[p]] -= self.ux[p] * yk;
                }
            }
        }
        let mut x = vec![ZERO; n];
        for k in 0..n {
            x[self.q[k]] = y[k] * self.col_scale[self.q[k]];
        }
        x
    }
}

/// Result of one linear solve.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<C64>,
    pub iterations: usize,
    pub residual: f64,
    pub fill: Option<usize>,
    pub breakdown: bool,
}

/// Direct solve with up to three steps of iterative refinement.
pub fn direct_solve(a: &CsrMatrix<C64>, b: &[C64], opts: &SolverOptions) -> Result<Outcome> {
    let lu = SparseLu::factor(a, opts)?;
    debug!("LU fill {} for nnz {}", lu.fill(), a.nnz());
    let mut x = lu.solve(b);
    let mut res = relative_residual(a, &x, b);
    for _ in 0..3 {
        if res <= opts.direct_residual_limit * 1e-2 {
            break;
        }
        let r = residual(a, &x, b);
        let d = lu.solve(&r);
        let cand: Vec<C64> = x.iter().zip(&d).map(|(u, v)| u + v).collect();
        let cres = relative_residual(a, &cand, b);
        if cres >= res {
            break;
        }
        x = cand;
        res = cres;
    }
    if !(res <= opts.direct_residual_limit) {
        return Err(Error::InaccurateSolve {
            residual: res,
            limit: opts.direct_residual_limit,
        });
    }
    Ok(Outcome {
        x,
        iterations: 0,
        residual: res,
        fill: Some(lu.fill()),
        breakdown: false,
    })
}

fn jacobi(a: &CsrMatrix<C64>, p: Preconditioner) -> Vec<C64> {
    let one = C64::new(1.0, 0.0);
    match p {
        Preconditioner::None => vec![one; a.nrows()],
        Preconditioner::Jacobi => a
            .diagonal()
            .into_iter()
            .map(|d| if d == ZERO { one } else { one / d })
            .collect(),
    }
}

/// Outcome of an iterative run before it is turned into a result.
struct IterOutcome {
    x: Vec<C64>,
    iterations: usize,
    residual: f64,
    breakdown: bool,
}

fn cocg_run(
    a: &CsrMatrix<C64>,
    b: &[C64],
    x0: Vec<C64>,
    m: &[C64],
    opts: &SolverOptions,
    budget: usize,
) -> IterOutcome {
    let nb = norm(b).max(f64::MIN_POSITIVE);
    let mut x = x0;
    let mut r = residual(a, &x, b);
    let mut best = (norm(&r) / nb, x.clone());
    if best.0 <= opts.tol {
        return IterOutcome {
            x,
            iterations: 0,
            residual: best.0,
            breakdown: false,
        };
    }
    let mut z: Vec<C64> = r.iter().zip(m).map(|(ri, mi)| ri * mi).collect();
    let mut p = z.clone();
    let mut rho = dotu(&r, &z);
    for it in 1..=budget {
        let q = a.mul_vec(&p);
        let mu = dotu(&p, &q);
        if mu.norm() <= 1e-300 || !mu.is_finite() {
            return IterOutcome {
                x: best.1,
                iterations: it,
                residual: best.0,
                breakdown: true,
            };
        }
        let alpha = rho / mu;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let rel = norm(&r) / nb;
        if rel < best.0 {
            best = (rel, x.clone());
        }
        if rel <= opts.tol {
            return IterOutcome {
                x,
                iterations: it,
                residual: rel,
                breakdown: false,
            };
        }
        for i in 0..z.len() {
            z[i] = r[i] * m[i];
        }
        let rho_new = dotu(&r, &z);
        if rho_new.norm() <= 1e-300 * norm(&r) * norm(&z) || !rho_new.is_finite() {
            return IterOutcome {
                x: best.1,
                iterations: it,
                residual: best.0,
                breakdown: true,
            };
        }
        let beta = rho_new / rho;
        rho = rho_new;
        for i in 0..p.len() {
            p[i] = z[i] + beta * p[i];
        }
    }
    IterOutcome {
        x: best.1,
        iterations: budget,
        residual: best.0,
        breakdown: false,
    }
}

/// Conjugate orthogonal CG for complex-symmetric systems. Restarts once
/// after a breakdown.
pub fn cocg(a: &CsrMatrix<C64>, b: &[C64], opts: &SolverOptions) -> Result<Outcome> {
    let m = jacobi(a, opts.preconditioner);
    let mut total = 0;
    let mut out = cocg_run(a, b, vec![ZERO; b.len()], &m, opts, opts.max_iter);
    total += out.iterations;
    let restarted = out.breakdown;
    if out.breakdown {
        warn!(
            "COCG breakdown after {} iterations at residual {:.3e}, restarting",
            out.iterations, out.residual
        );
        out = cocg_run(a, b, out.x, &m, opts, opts.max_iter.saturating_sub(total));
        total += out.iterations;
        if out.breakdown {
            let res = relative_residual(a, &out.x, b);
            return Err(Error::Breakdown {
                iterations: total,
                residual: res,
                best: out.x,
            });
        }
    }
    let res = relative_residual(a, &out.x, b);
    if res > opts.tol * 10.0 {
        return Err(Error::MaxIterations {
            iterations: total,
            residual: res,
            best: out.x,
        });
    }
    Ok(Outcome {
        x: out.x,
        iterations: total,
        residual: res,
        fill: None,
        breakdown: restarted,
    })
}

/// Restarted GMRES with right Jacobi preconditioning.
pub fn gmres(a: &CsrMatrix<C64>, b: &[C64], opts: &SolverOptions) -> Result<Outcome> {
    let n = b.len();
    let m = jacobi(a, opts.preconditioner);
    let restart = opts.restart.max(1).min(n.max(1));
    let nb = norm(b);
    let mut x = vec![ZERO; n];
    if nb == 0.0 {
        return Ok(Outcome {
            x,
            iterations: 0,
            residual: 0.0,
            fill: None,
            breakdown: false,
        });
    }
    let mut total = 0;
    while total < opts.max_iter {
        let r = residual(a, &x, b);
        let beta = norm(&r);
        if beta / nb <= opts.tol {
            break;
        }
        let mut v: Vec<Vec<C64>> = vec![r.iter().map(|&ri| ri / beta).collect()];
        let mut h = vec![vec![ZERO; restart]; restart + 1];
        let mut cs = vec![ZERO; restart];
        let mut sn = vec![ZERO; restart];
        let mut g = vec![ZERO; restart + 1];
        g[0] = C64::new(beta, 0.0);
        let mut k_used = 0;
        for k in 0..restart {
            total += 1;
            let zk: Vec<C64> = v[k].iter().zip(&m).map(|(vi, mi)| vi * mi).collect();
            let mut w = a.mul_vec(&zk);
            for (j, vj) in v.iter().enumerate() {
                let hij = dotc(vj, &w);
                h[j][k] = hij;
                for (wi, vji) in w.iter_mut().zip(vj) {
                    *wi -= hij * vji;
                }
            }
            let hn = norm(&w);
            h[k + 1][k] = C64::new(hn, 0.0);
            for j in 0..k {
                let t = cs[j].conj() * h[j][k] + sn[j].conj() * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let (c, s) = givens(h[k][k], h[k + 1][k]);
            cs[k] = c;
            sn[k] = s;
            h[k][k] = c.conj() * h[k][k] + s.conj() * h[k + 1][k];
            h[k + 1][k] = ZERO;
            g[k + 1] = -s * g[k];
            g[k] = c.conj() * g[k];
            k_used = k + 1;
            if g[k + 1].norm() / nb <= opts.tol || hn == 0.0 || total >= opts.max_iter {
                break;
            }
            v.push(w.into_iter().map(|wi| wi / hn).collect());
        }
        let mut y = vec![ZERO; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                x[i] += yj * v[j][i] * m[i];
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Breakdown {
                iterations: total,
                residual: f64::NAN,
                best: vec![ZERO; n],
            });
        }
    }
    let res = relative_residual(a, &x, b);
    if res > opts.tol * 10.0 {
        return Err(Error::MaxIterations {
            iterations: total,
            residual: res,
            best: x,
        });
    }
    Ok(Outcome {
        x,
        iterations: total,
        residual: res,
        fill: None,
        breakdown: false,
    })
}

fn givens(a: C64, b: C64) -> (C64, C64) {
    let na = a.norm();
    let nb = b.norm();
    if nb == 0.0 {
        return (C64::new(1.0, 0.0), ZERO);
    }
    if na == 0.0 {
        return (ZERO, C64::new(1.0, 0.0));
    }
    let r = (na * na + nb * nb).sqrt();
    let c = C64::new(na / r, 0.0);
    let s = (a / na) * b.conj() / r;
    (c, s.conj())
}

fn solve_matrix(
    a: &CsrMatrix<C64>,
    b: &[C64],
    symmetric: bool,
    opts: &SolverOptions,
) -> Result<(Outcome, &'static str)> {
    match opts.method {
        SolverMethod::Direct => direct_solve(a, b, opts).map(|o| (o, "lu")),
        SolverMethod::Iterative if symmetric => cocg(a, b, opts).map(|o| (o, "cocg")),
        SolverMethod::Iterative => gmres(a, b, opts).map(|o| (o, "gmres")),
    }
}

/// Solves an assembled system with the method selected in `opts`; block
/// upper-triangular systems go through block back-substitution.
pub fn solve(system: &AssembledSystem, opts: &SolverOptions) -> Result<Solution> {
    if system.flags.block_triangular {
        return block_back_substitute(system, opts);
    }
    let t0 = Instant::now();
    let (out, name) = solve_matrix(&system.matrix, &system.rhs, system.flags.is_symmetric, opts)?;
    Ok(finish(system, out, name.to_string(), t0))
}

/// Solves the whole matrix at once, ignoring block structure.
pub fn solve_monolithic(system: &AssembledSystem, opts: &SolverOptions) -> Result<Solution> {
    let t0 = Instant::now();
    let (out, name) = solve_matrix(&system.matrix, &system.rhs, system.flags.is_symmetric, opts)?;
    Ok(finish(system, out, name.to_string(), t0))
}

fn finish(system: &AssembledSystem, out: Outcome, solver: String, t0: Instant) -> Solution {
    let relative_residual = relative_residual(&system.matrix, &out.x, &system.rhs);
    Solution {
        report: SolveReport {
            solver,
            iterations: out.iterations,
            relative_residual,
            fill: out.fill,
            breakdown: out.breakdown,
            seconds: t0.elapsed().as_secs_f64(),
        },
        x: out.x,
    }
}

/// Solves `[A B; 0 D][a; φ] = [f; g]` as `Dφ = g`, then `Aa = f − Bφ`. Both
/// diagonal blocks are complex symmetric; a consistent singular `A` (no
/// regularization in non-conductors) falls back to COCG.
pub fn block_back_substitute(system: &AssembledSystem, opts: &SolverOptions) -> Result<Solution> {
    use crate::formulations::Block;
    if !system.flags.block_triangular || !system.block(Block::Node, Block::A).is_zero() {
        return Err(Error::Precondition(format!(
            "{} is not block upper-triangular",
            system.formulation
        )));
    }
    let t0 = Instant::now();
    let p = &system.partition;
    let a_blk = system.block(Block::A, Block::A);
    let b_blk = system.block(Block::A, Block::Node);
    let d_blk = system.block(Block::Node, Block::Node);
    let f = &system.rhs[p.a_range()];
    let g = &system.rhs[p.node_range()];
    let (phi, name_phi) = solve_matrix(&d_blk, g, true, opts)?;
    let bphi = b_blk.mul_vec(&phi.x);
    let rhs_a: Vec<C64> = f.iter().zip(bphi).map(|(fi, bi)| fi - bi).collect();
    let (a, name_a) = match solve_matrix(&a_blk, &rhs_a, true, opts) {
        Err(Error::SingularMatrix { .. }) | Err(Error::InaccurateSolve { .. })
            if opts.method == SolverMethod::Direct =>
        {
            warn!("vector-potential block is singular; solving the consistent system with COCG");
            (cocg(&a_blk, &rhs_a, opts)?, "cocg")
        }
        other => other?,
    };
    let mut x = a.x;
    x.extend(phi.x);
    let out = Outcome {
        x,
        iterations: phi.iterations + a.iterations,
        residual: 0.0,
        fill: match (phi.fill, a.fill) {
            (Some(p), Some(q)) => Some(p + q),
            (p, q) => p.or(q),
        },
        breakdown: phi.breakdown || a.breakdown,
    };
    Ok(finish(
        system,
        out,
        format!("block-{name_phi}-{name_a}"),
        t0,
    ))
}
