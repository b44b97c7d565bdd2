//! Symmetric sparse matrices on a fixed pattern and the linear solvers used
//! by the staggered driver.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{MatMut, Side};
use serde::{Deserialize, Serialize};

use crate::basis::DofLayout;
use crate::error::{Error, Result};

/// Row-compressed sparsity pattern with sorted columns. Symmetric patterns
/// are also valid column-compressed patterns of the same matrix.
#[derive(Debug, Clone)]
pub struct CsrPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    components: usize,
    /// Node-level adjacency (sorted) used for fast position lookup.
    node_ptr: Vec<usize>,
    node_adj: Vec<u32>,
}

impl CsrPattern {
    /// Pattern coupling every pair of DOFs that share a cell.
    pub fn from_layout(layout: &DofLayout) -> Self {
        let n_nodes = layout.num_nodes;
        let per_cell = layout.spec.local_count();
        let n_cells = layout.cell_nodes.len() / per_cell;

        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
        for c in 0..n_cells {
            let nodes = layout.nodes_of(c);
            for &a in nodes {
                adj[a as usize].extend_from_slice(nodes);
            }
        }
        let mut node_ptr = Vec::with_capacity(n_nodes + 1);
        let mut node_adj = Vec::new();
        node_ptr.push(0);
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            node_adj.extend_from_slice(list);
            node_ptr.push(node_adj.len());
            *list = Vec::new();
        }

        let comp = layout.components;
        let n = n_nodes * comp;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(node_adj.len() * comp * comp);
        row_ptr.push(0);
        for node in 0..n_nodes {
            let neigh = &node_adj[node_ptr[node]..node_ptr[node + 1]];
            for _ in 0..comp {
                for &m in neigh {
                    for cj in 0..comp {
                        col_idx.push(m as usize * comp + cj);
                    }
                }
                row_ptr.push(col_idx.len());
            }
        }
        CsrPattern {
            n,
            row_ptr,
            col_idx,
            components: comp,
            node_ptr,
            node_adj,
        }
    }

    /// Dense pattern for small test systems.
    pub fn dense(n: usize) -> Self {
        let row_ptr = (0..=n).map(|i| i * n).collect();
        let col_idx = (0..n * n).map(|k| k % n).collect();
        let node_ptr = (0..=n).map(|i| i * n).collect();
        let node_adj = (0..n * n).map(|k| (k % n) as u32).collect();
        CsrPattern {
            n,
            row_ptr,
            col_idx,
            components: 1,
            node_ptr,
            node_adj,
        }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// Position of node `b` in the adjacency of node `a`.
    #[inline]
    pub fn node_slot(&self, a: u32, b: u32) -> usize {
        let list = &self.node_adj[self.node_ptr[a as usize]..self.node_ptr[a as usize + 1]];
        list.binary_search(&b).expect("node pair outside the sparsity pattern")
    }

    /// Value index of (row dof of node a, component ci) and (node b, component cj)
    /// given the slot of b in a's adjacency.
    #[inline]
    pub fn value_index(&self, a: u32, ci: usize, slot: usize, cj: usize) -> usize {
        self.row_ptr[a as usize * self.components + ci] + slot * self.components + cj
    }

    pub fn find(&self, row: usize, col: usize) -> Option<usize> {
        let cols = &self.col_idx[self.row_ptr[row]..self.row_ptr[row + 1]];
        cols.binary_search(&col).ok().map(|k| self.row_ptr[row] + k)
    }
}

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub pattern: Arc<CsrPattern>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(pattern: Arc<CsrPattern>) -> Self {
        let nnz = pattern.nnz();
        CsrMatrix { pattern, values: vec![0.0; nnz] }
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let n = a.len();
        let pattern = Arc::new(CsrPattern::dense(n));
        let values = a.iter().flat_map(|r| r.iter().copied()).collect();
        CsrMatrix { pattern, values }
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pattern.find(row, col).map_or(0.0, |k| self.values[k])
    }

    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        let k = self.pattern.find(row, col).expect("entry outside the sparsity pattern");
        self.values[k] += v;
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pattern;
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                acc += self.values[k] * x[p.col_idx[k]];
            }
            *yr = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.get(i, i)).collect()
    }

    /// max |a_ij - a_ji| / max |a_ij|.
    pub fn asymmetry(&self) -> f64 {
        let p = &self.pattern;
        let mut max_diff: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for r in 0..p.n {
            for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                let c = p.col_idx[k];
                max_abs = max_abs.max(self.values[k].abs());
                max_diff = max_diff.max((self.values[k] - self.get(c, r)).abs());
            }
        }
        if max_abs == 0.0 {
            0.0
        } else {
            max_diff / max_abs
        }
    }

    /// ‖b - A x‖ / ‖b‖ (absolute residual if b = 0).
    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; b.len()];
        self.mul_vec(x, &mut ax);
        let r = ax.iter().zip(b).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
        let nb = norm2(b);
        if nb > 0.0 {
            r / nb
        } else {
            r
        }
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Sparse Cholesky with a cached symbolic factorization.
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    Pcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSolverConfig {
    pub kind: SolverKind,
    pub rtol: f64,
    pub max_iter: usize,
}

impl Default for LinearSolverConfig {
    fn default() -> Self {
        LinearSolverConfig {
            kind: SolverKind::Direct,
            rtol: 1e-8,
            max_iter: 20000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solver bound to one sparsity pattern; the symbolic Cholesky is reused
/// across numeric refactorizations.
pub struct LinearSolver {
    pub config: LinearSolverConfig,
    symbolic: Option<(Arc<CsrPattern>, SymbolicLlt<usize>)>,
}

impl std::fmt::Debug for LinearSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearSolver").field("config", &self.config).finish()
    }
}

impl LinearSolver {
    pub fn new(config: LinearSolverConfig) -> Self {
        LinearSolver { config, symbolic: None }
    }

    /// Solve `a x = b`. `x` holds the initial guess for iterative solves and
    /// receives the solution.
    pub fn solve(&mut self, a: &CsrMatrix, b: &[f64], x: &mut [f64]) -> Result<SolveStats> {
        assert_eq!(a.n(), b.len());
        assert_eq!(a.n(), x.len());
        if norm2(b) == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(SolveStats::default());
        }
        match self.config.kind {
            SolverKind::Direct => self.solve_direct(a, b, x),
            SolverKind::Pcg => pcg(a, b, x, self.config.rtol, self.config.max_iter),
        }
    }

    fn solve_direct(&mut self, a: &CsrMatrix, b: &[f64], x: &mut [f64]) -> Result<SolveStats> {
        let p = &a.pattern;
        let n = p.n;
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &p.row_ptr, None, &p.col_idx);
        let symbolic = match &self.symbolic {
            Some((k, s)) if Arc::ptr_eq(k, &a.pattern) => s.clone(),
            _ => {
                let s = SymbolicLlt::try_new(sym, Side::Lower)
                    .map_err(|e| Error::LinearSolver(format!("symbolic factorization failed: {e:?}")))?;
                self.symbolic = Some((Arc::clone(&a.pattern), s.clone()));
                s
            }
        };
        let mat = SparseColMatRef::new(sym, &a.values);
        let llt = Llt::try_new_with_symbolic(symbolic, mat, Side::Lower).map_err(|e| {
            let d = a.diagonal();
            let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let dmax = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Error::LinearSolver(format!(
                "Cholesky factorization failed ({e:?}); matrix is not positive definite \
                 (n = {n}, diagonal range [{dmin:.3e}, {dmax:.3e}])"
            ))
        })?;

        x.copy_from_slice(b);
        llt.solve_in_place(MatMut::from_column_major_slice_mut(x, n, 1));
        let mut rel = a.relative_residual(x, b);
        let mut refinements = 0;
        while rel > self.config.rtol && refinements < 3 {
            let mut ax = vec![0.0; n];
            a.mul_vec(x, &mut ax);
            let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            llt.solve_in_place(MatMut::from_column_major_slice_mut(&mut r, n, 1));
            x.iter_mut().zip(&r).for_each(|(x, d)| *x += d);
            rel = a.relative_residual(x, b);
            refinements += 1;
        }
        if !(rel <= self.config.rtol) {
            return Err(Error::LinearSolver(format!(
                "direct solve residual {rel:.3e} above tolerance {:.1e} after {refinements} refinements",
                self.config.rtol
            )));
        }
        Ok(SolveStats {
            iterations: refinements,
            relative_residual: rel,
        })
    }
}

/// Jacobi-preconditioned conjugate gradients.
pub fn pcg(a: &CsrMatrix, b: &[f64], x: &mut [f64], rtol: f64, max_iter: usize) -> Result<SolveStats> {
    let n = a.n();
    let diag = a.diagonal();
    if let Some(i) = diag.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::LinearSolver(format!(
            "PCG: non-positive diagonal entry {:.3e} at row {i}",
            diag[i]
        )));
    }
    let inv_d: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
    let nb = norm2(b);
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    r.iter_mut().zip(b).for_each(|(r, b)| *r = b - *r);
    let mut z: Vec<f64> = r.iter().zip(&inv_d).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rel = norm2(&r) / nb;
    let mut it = 0;
    while rel > rtol && it < max_iter {
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolver(format!(
                "PCG breakdown at iteration {it}: p^T A p = {pap:.3e} (matrix indefinite or singular)"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_d[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rel = norm2(&r) / nb;
        it += 1;
    }
    if rel > rtol {
        return Err(Error::LinearSolver(format!(
            "PCG did not converge: residual {rel:.3e} after {it} iterations"
        )));
    }
    Ok(SolveStats {
        iterations: it,
        relative_residual: rel,
    })
}
