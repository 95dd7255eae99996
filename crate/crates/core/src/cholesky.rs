//! Sparse Cholesky factorization for symmetric positive-definite systems
//! with a fixed sparsity pattern.
//!
//! The pattern is analysed once (minimum-degree ordering, elimination tree,
//! row patterns of the factor); each numeric factorization then only fills
//! values. Besides solves and log-determinants the factor supports selected
//! inversion: every entry of the inverse that lies on the factor's pattern,
//! computed with the Takahashi recursions.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Fill-reducing ordering and factor structure for one sparsity pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    /// `iperm[old] = new`.
    iperm: Vec<usize>,
    /// Upper triangle of the permuted matrix, by column.
    cp: Vec<usize>,
    ci: Vec<usize>,
    /// Slot in the permuted upper-triangle value array for each analysed entry.
    slots: Vec<usize>,
    /// Factor columns: diagonal first, then strictly lower rows ascending.
    lp: Vec<usize>,
    li: Vec<usize>,
    /// For row `k`: the columns `i < k` with `L(k, i) != 0` in topological order,
    /// and the position of `L(k, i)` inside `li`.
    rp: Vec<usize>,
    row_cols: Vec<usize>,
    row_slots: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyses the symmetric pattern spanned by `entries` (pairs of indices,
    /// either orientation, duplicates allowed). Every diagonal is included.
    pub fn analyze(n: usize, entries: &[(usize, usize)]) -> Self {
        let perm = minimum_degree(n, entries);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // Upper-triangle pattern of P A P' by column (diagonal always present).
        let mut cols: Vec<BTreeSet<usize>> = (0..n).map(|k| BTreeSet::from([k])).collect();
        for &(i, j) in entries {
            let (a, b) = (iperm[i], iperm[j]);
            cols[a.max(b)].insert(a.min(b));
        }
        let mut cp = vec![0; n + 1];
        let mut ci = Vec::new();
        for (k, set) in cols.iter().enumerate() {
            ci.extend(set.iter().copied());
            cp[k + 1] = ci.len();
        }
        let slots = entries
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (iperm[i], iperm[j]);
                let (r, c) = (a.min(b), a.max(b));
                cp[c] + ci[cp[c]..cp[c + 1]].binary_search(&r).expect("entry in pattern")
            })
            .collect();

        let parent = etree(n, &cp, &ci);

        // Row patterns of L via elimination-tree reach.
        let mut rp = vec![0; n + 1];
        let mut row_cols = Vec::new();
        let mut counts = vec![1usize; n];
        let mut mark = vec![false; n];
        let mut stack = vec![0usize; n];
        for k in 0..n {
            let top = ereach(k, &cp, &ci, &parent, &mut mark, &mut stack);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
            row_cols.extend_from_slice(&stack[top..]);
            rp[k + 1] = row_cols.len();
        }
        let mut lp = vec![0; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + counts[i];
        }
        let mut li = vec![0; lp[n]];
        let mut next: Vec<usize> = lp[..n].to_vec();
        for k in 0..n {
            li[next[k]] = k;
            next[k] += 1;
        }
        // Off-diagonals arrive in increasing row order, so columns stay sorted.
        let mut row_slots = vec![0; row_cols.len()];
        for k in 0..n {
            for p in rp[k]..rp[k + 1] {
                let i = row_cols[p];
                li[next[i]] = k;
                row_slots[p] = next[i];
                next[i] += 1;
            }
        }

        Self {
            n,
            perm,
            iperm,
            cp,
            ci,
            slots,
            lp,
            li,
            rp,
            row_cols,
            row_slots,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Length of the value array expected by [`SymbolicCholesky::factor`].
    pub fn n_values(&self) -> usize {
        self.ci.len()
    }

    /// Value-array slot of the `idx`-th analysed entry.
    pub fn slot(&self, idx: usize) -> usize {
        self.slots[idx]
    }

    pub fn factor_nnz(&self) -> usize {
        self.li.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Numeric factorization of the matrix whose upper-triangle values are
    /// given in slot order.
    pub fn factor(&self, values: &[f64]) -> Result<CholeskyFactor<'_>> {
        assert_eq!(values.len(), self.ci.len());
        let n = self.n;
        let mut lx = vec![0.0; self.li.len()];
        let mut x = vec![0.0; n];
        for k in 0..n {
            for p in self.cp[k]..self.cp[k + 1] {
                x[self.ci[p]] = values[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for p in self.rp[k]..self.rp[k + 1] {
                let i = self.row_cols[p];
                let slot = self.row_slots[p];
                let lki = x[i] / lx[self.lp[i]];
                x[i] = 0.0;
                for q in self.lp[i] + 1..slot {
                    x[self.li[q]] -= lx[q] * lki;
                }
                d -= lki * lki;
                lx[slot] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::fit(format!(
                    "matrix not positive definite at pivot {k} (value {d:.3e}); increase the jitter"
                )));
            }
            lx[self.lp[k]] = d.sqrt();
        }
        Ok(CholeskyFactor { sym: self, lx })
    }
}

/// Numeric factor `P A P' = L L'`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor<'a> {
    sym: &'a SymbolicCholesky,
    lx: Vec<f64>,
}

impl CholeskyFactor<'_> {
    pub fn log_det(&self) -> f64 {
        let s = self.sym;
        2.0 * (0..s.n).map(|k| self.lx[s.lp[k]].ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place (permuted coordinates).
    fn lsolve(&self, x: &mut [f64]) {
        let s = self.sym;
        for j in 0..s.n {
            x[j] /= self.lx[s.lp[j]];
            let xj = x[j];
            for p in s.lp[j] + 1..s.lp[j + 1] {
                x[s.li[p]] -= self.lx[p] * xj;
            }
        }
    }

    /// Solves `L' y = b` in place (permuted coordinates).
    fn ltsolve(&self, x: &mut [f64]) {
        let s = self.sym;
        for j in (0..s.n).rev() {
            let mut acc = x[j];
            for p in s.lp[j] + 1..s.lp[j + 1] {
                acc -= self.lx[p] * x[s.li[p]];
            }
            x[j] = acc / self.lx[s.lp[j]];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let s = self.sym;
        let mut w: Vec<f64> = s.perm.iter().map(|&old| b[old]).collect();
        self.lsolve(&mut w);
        self.ltsolve(&mut w);
        let mut out = vec![0.0; s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            out[old] = w[new];
        }
        out
    }

    /// Solves `A X = B` for `k` right-hand sides stored row-major
    /// (`b[i * k + r]` is row `i` of column `r`); returns `X` in the same layout.
    pub fn solve_many(&self, b: &[f64], k: usize) -> Vec<f64> {
        let s = self.sym;
        let n = s.n;
        assert_eq!(b.len(), n * k);
        let mut w = vec![0.0; n * k];
        let mut touched = vec![false; n];
        for (new, &old) in s.perm.iter().enumerate() {
            let row = &b[old * k..(old + 1) * k];
            touched[new] = row.iter().any(|&v| v != 0.0);
            w[new * k..(new + 1) * k].copy_from_slice(row);
        }
        let mut buf = vec![0.0; k];
        for j in 0..n {
            if !touched[j] {
                continue;
            }
            let d = self.lx[s.lp[j]];
            for v in &mut w[j * k..(j + 1) * k] {
                *v /= d;
            }
            buf.copy_from_slice(&w[j * k..(j + 1) * k]);
            for p in s.lp[j] + 1..s.lp[j + 1] {
                let i = s.li[p];
                let l = self.lx[p];
                touched[i] = true;
                for (t, &x) in w[i * k..(i + 1) * k].iter_mut().zip(&buf) {
                    *t -= l * x;
                }
            }
        }
        for j in (0..n).rev() {
            buf.copy_from_slice(&w[j * k..(j + 1) * k]);
            for p in s.lp[j] + 1..s.lp[j + 1] {
                let i = s.li[p];
                let l = self.lx[p];
                for (t, &x) in buf.iter_mut().zip(&w[i * k..(i + 1) * k]) {
                    *t -= l * x;
                }
            }
            let d = self.lx[s.lp[j]];
            for (t, &x) in w[j * k..(j + 1) * k].iter_mut().zip(&buf) {
                *t = x / d;
            }
        }
        let mut out = vec![0.0; n * k];
        for (new, &old) in s.perm.iter().enumerate() {
            out[old * k..(old + 1) * k].copy_from_slice(&w[new * k..(new + 1) * k]);
        }
        out
    }

    /// Maps a standard-normal vector `z` (permuted coordinates) to a draw
    /// with covariance `A^{-1}`: returns `P' L^{-T} z`.
    pub fn sample_transform(&self, z: &[f64]) -> Vec<f64> {
        let s = self.sym;
        let mut w = z.to_vec();
        self.ltsolve(&mut w);
        let mut out = vec![0.0; s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            out[old] = w[new];
        }
        out
    }

    /// Entries of `A^{-1}` on the pattern of the factor.
    pub fn selected_inverse(&self) -> SelectedInverse<'_> {
        let s = self.sym;
        let mut sx = vec![0.0; s.li.len()];
        let mut acc = Vec::new();
        for i in (0..s.n).rev() {
            let (start, end) = (s.lp[i], s.lp[i + 1]);
            let lii = self.lx[start];
            let rows = &s.li[start + 1..end];
            let lcol = &self.lx[start + 1..end];
            acc.clear();
            acc.resize(rows.len(), 0.0);
            // The pattern of column i below any of its rows k is contained in
            // the pattern of column k, so each pair is found by a merge walk.
            for (a, &k) in rows.iter().enumerate() {
                let lk = lcol[a];
                acc[a] += lk * sx[s.lp[k]];
                let mut q = s.lp[k] + 1;
                for b in a + 1..rows.len() {
                    let j = rows[b];
                    while s.li[q] < j {
                        q += 1;
                    }
                    debug_assert_eq!(s.li[q], j);
                    let v = sx[q];
                    acc[b] += lk * v;
                    acc[a] += lcol[b] * v;
                }
            }
            let mut diag = 0.0;
            for (a, v) in acc.iter().enumerate() {
                let val = -v / lii;
                sx[start + 1 + a] = val;
                diag += lcol[a] * val;
            }
            sx[start] = 1.0 / (lii * lii) - diag / lii;
        }
        SelectedInverse { sym: s, sx }
    }
}

/// Inverse entries restricted to the factor pattern.
#[derive(Debug, Clone)]
pub struct SelectedInverse<'a> {
    sym: &'a SymbolicCholesky,
    sx: Vec<f64>,
}

impl SelectedInverse<'_> {
    /// `(A^{-1})_{ij}` in original indices; `None` when outside the pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let s = self.sym;
        let (a, b) = (s.iperm[i], s.iperm[j]);
        let (row, col) = (a.max(b), a.min(b));
        let span = s.lp[col]..s.lp[col + 1];
        s.li[span]
            .binary_search(&row)
            .ok()
            .map(|p| self.sx[s.lp[col] + p])
    }

    pub fn diag(&self) -> Vec<f64> {
        let s = self.sym;
        (0..s.n).map(|i| self.sx[s.lp[s.iperm[i]]]).collect()
    }
}

fn etree(n: usize, cp: &[usize], ci: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for p in cp[k]..cp[k + 1] {
            let mut i = ci[p];
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal), written to
/// `stack[top..]` in topological order; returns `top`.
fn ereach(
    k: usize,
    cp: &[usize],
    ci: &[usize],
    parent: &[usize],
    mark: &mut [bool],
    stack: &mut [usize],
) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = true;
    let mut path = Vec::new();
    for p in cp[k]..cp[k + 1] {
        let mut i = ci[p];
        if i >= k {
            continue;
        }
        path.clear();
        while !mark[i] {
            path.push(i);
            mark[i] = true;
            i = parent[i];
        }
        while let Some(v) = path.pop() {
            top -= 1;
            stack[top] = v;
        }
    }
    for &v in &stack[top..] {
        mark[v] = false;
    }
    mark[k] = false;
    top
}

/// Greedy minimum-degree ordering on the explicit elimination graph. Ties
/// are broken by the smaller original index.
fn minimum_degree(n: usize, entries: &[(usize, usize)]) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(i, j) in entries {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((deg, v))) = heap.pop() {
        if done[v] || deg != adj[v].len() {
            continue;
        }
        done[v] = true;
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &a in &nbrs {
            adj[a].remove(&v);
        }
        for (ia, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[ia + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        for &a in &nbrs {
            heap.push(Reverse((adj[a].len(), a)));
        }
    }
    order
}
