//! Sparse symmetric matrices and a fill-reducing sparse Cholesky
//! factorization (minimum-degree ordering, elimination-tree symbolic analysis,
//! up-looking numeric factorization).

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("matrix is not positive definite (pivot {pivot} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("value array has length {got}, pattern has {expected} entries")]
    PatternMismatch { expected: usize, got: usize },
}

const NONE: usize = usize::MAX;

/// Symmetric matrix stored as its lower triangle (diagonal included) in
/// compressed-column form, rows sorted within each column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Builds from triplets in either orientation; duplicates are summed and
    /// every diagonal entry is present in the pattern.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets
            .iter()
            .map(|&(i, j, v)| if i >= j { (j, i, v) } else { (i, j, v) })
            .chain((0..n).map(|k| (k, k, 0.0)))
            .collect();
        entries.sort_by_key(|a| (a.0, a.1));
        let mut col_ptr = vec![0; n + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (col, row, v) in entries {
            assert!(row < n && col < n, "triplet ({row}, {col}) outside {n}x{n}");
            if last == Some((col, row)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((col, row));
            row_idx.push(row);
            values.push(v);
            col_ptr[col + 1] += 1;
        }
        for k in 0..n {
            col_ptr[k + 1] += col_ptr[k];
        }
        Self {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Zero-valued matrix with the given structural pairs (either orientation).
    pub fn pattern(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let triplets: Vec<_> = pairs.into_iter().map(|(i, j)| (i, j, 0.0)).collect();
        Self::from_triplets(n, &triplets)
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|k| (k, k, 1.0)).collect();
        Self::from_triplets(n, &t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Storage slot for `(i, j)` (either orientation), if structurally present.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (row, col) = if i >= j { (i, j) } else { (j, i) };
        let lo = self.col_ptr[col];
        let hi = self.col_ptr[col + 1];
        self.row_idx[lo..hi].binary_search(&row).ok().map(|p| lo + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.values[s])
    }

    /// Lower-triangle entries `(row, col, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |col| {
            (self.col_ptr[col]..self.col_ptr[col + 1])
                .map(move |p| (self.row_idx[p], col, self.values[p]))
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (i, j, v) in self.iter() {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, j, v) in self.iter() {
            let t = v * x[i] * x[j];
            s += if i == j { t } else { 2.0 * t };
        }
        s
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for j in 0..m.ncols() {
            for i in j..m.nrows() {
                if m[(i, j)] != 0.0 {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), &t)
    }

    /// Block-diagonal matrix with `copies` identical blocks.
    pub fn replicate(&self, copies: usize) -> Self {
        let mut t = Vec::with_capacity(self.nnz() * copies);
        for c in 0..copies {
            let off = c * self.n;
            t.extend(self.iter().map(|(i, j, v)| (i + off, j + off, v)));
        }
        Self::from_triplets(self.n * copies, &t)
    }

    /// Maximum asymmetry is zero by construction; exposed for structure checks.
    pub fn is_symmetric(&self) -> bool {
        true
    }
}

/// Minimum-degree elimination ordering on the graph of `a`, ties broken by
/// lowest index. Returns `perm` with `perm[k]` the original index eliminated
/// at step `k`.
pub fn minimum_degree(a: &SparseSym) -> Vec<usize> {
    let n = a.n;
    let words = n.div_ceil(64);
    let mut adj = vec![0u64; n * words];
    let set = |adj: &mut [u64], r: usize, c: usize| adj[r * words + c / 64] |= 1 << (c % 64);
    for (i, j, _) in a.iter() {
        if i != j {
            set(&mut adj, i, j);
            set(&mut adj, j, i);
        }
    }
    let degree_of = |adj: &[u64], r: usize| -> usize {
        adj[r * words..(r + 1) * words]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    };
    let mut degree: Vec<usize> = (0..n).map(|r| degree_of(&adj, r)).collect();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut nbrs = Vec::new();
    for _ in 0..n {
        let v = (0..n)
            .filter(|&k| !eliminated[k])
            .min_by_key(|&k| (degree[k], k))
            .expect("nodes remain");
        eliminated[v] = true;
        order.push(v);
        nbrs.clear();
        for w in 0..words {
            let mut bits = adj[v * words + w];
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                nbrs.push(w * 64 + b);
                bits &= bits - 1;
            }
        }
        let row_v: Vec<u64> = adj[v * words..(v + 1) * words].to_vec();
        for &u in &nbrs {
            for w in 0..words {
                adj[u * words + w] |= row_v[w];
            }
            adj[u * words + u / 64] &= !(1 << (u % 64));
            adj[u * words + v / 64] &= !(1 << (v % 64));
            degree[u] = degree_of(&adj, u);
        }
    }
    order
}

/// Symbolic Cholesky analysis of a fixed sparsity pattern.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    perm: Vec<usize>,
    /// Upper triangle of `P A P^T`, compressed by column.
    cp: Vec<usize>,
    ci: Vec<usize>,
    /// Slot of the source matrix -> slot in `ci`.
    slot_map: Vec<usize>,
    source_nnz: usize,
    parent: Vec<usize>,
    lp: Vec<usize>,
}

impl Symbolic {
    pub fn analyze(a: &SparseSym) -> Self {
        Self::with_ordering(a, minimum_degree(a))
    }

    pub fn with_ordering(a: &SparseSym, perm: Vec<usize>) -> Self {
        let n = a.n;
        assert_eq!(perm.len(), n);
        let mut pinv = vec![NONE; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }
        let mut counts = vec![0usize; n + 1];
        for (i, j, _) in a.iter() {
            counts[pinv[i].max(pinv[j]) + 1] += 1;
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let cp = counts.clone();
        let mut next = counts;
        let mut ci = vec![0; a.nnz()];
        let mut slot_map = vec![0; a.nnz()];
        for (slot, (i, j, _)) in a.iter().enumerate() {
            let (pi, pj) = (pinv[i], pinv[j]);
            let col = pi.max(pj);
            let pos = next[col];
            next[col] += 1;
            ci[pos] = pi.min(pj);
            slot_map[slot] = pos;
        }

        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &row in &ci[cp[k]..cp[k + 1]] {
                let mut i = row;
                while i != NONE && i < k {
                    let inext = ancestor[i];
                    ancestor[i] = k;
                    if inext == NONE {
                        parent[i] = k;
                    }
                    i = inext;
                }
            }
        }

        let mut me = Self {
            n,
            perm,
            cp,
            ci,
            slot_map,
            source_nnz: a.nnz(),
            parent,
            lp: Vec::new(),
        };
        let mut colcount = vec![1usize; n];
        let mut stack = vec![0; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = me.ereach(k, &mut stack, &mut mark);
            for &i in &stack[top..] {
                colcount[i] += 1;
            }
        }
        let mut lp = vec![0; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + colcount[k];
        }
        me.lp = lp;
        me
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz_factor(&self) -> usize {
        self.lp[self.n]
    }

    /// Nonzero pattern of row `k` of `L` (excluding the diagonal), written to
    /// `stack[top..]` in topological order.
    fn ereach(&self, k: usize, stack: &mut [usize], mark: &mut [usize]) -> usize {
        let mut top = self.n;
        mark[k] = k;
        let mut path = Vec::new();
        for &row in &self.ci[self.cp[k]..self.cp[k + 1]] {
            let mut i = row;
            if i > k {
                continue;
            }
            path.clear();
            while mark[i] != k {
                path.push(i);
                mark[i] = k;
                i = self.parent[i];
            }
            while let Some(p) = path.pop() {
                top -= 1;
                stack[top] = p;
            }
        }
        top
    }

    /// Numeric factorization of a matrix with the analyzed pattern, given its
    /// values in the source matrix's slot order.
    pub fn factor(&self, values: &[f64]) -> Result<Cholesky, SparseError> {
        if values.len() != self.source_nnz {
            return Err(SparseError::PatternMismatch {
                expected: self.source_nnz,
                got: values.len(),
            });
        }
        let n = self.n;
        let mut cx = vec![0.0; self.ci.len()];
        for (slot, &pos) in self.slot_map.iter().enumerate() {
            cx[pos] = values[slot];
        }
        let nnz = self.lp[n];
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut next: Vec<usize> = self.lp[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = self.ereach(k, &mut stack, &mut mark);
            x[k] = 0.0;
            for p in self.cp[k]..self.cp[k + 1] {
                if self.ci[p] <= k {
                    x[self.ci[p]] += cx[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / lx[self.lp[i]];
                x[i] = 0.0;
                for p in self.lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0 && d.is_finite()) {
                return Err(SparseError::NotPositiveDefinite {
                    column: self.perm[k],
                    pivot: d,
                });
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        Ok(Cholesky {
            n,
            perm: self.perm.clone(),
            lp: self.lp.clone(),
            li,
            lx,
        })
    }
}

/// `P A P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl Cholesky {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|k| self.lx[self.lp[k]].ln()).sum::<f64>()
    }

    fn lsolve(&self, y: &mut [f64]) {
        for j in 0..self.n {
            y[j] /= self.lx[self.lp[j]];
            let yj = y[j];
            for p in self.lp[j] + 1..self.lp[j + 1] {
                y[self.li[p]] -= self.lx[p] * yj;
            }
        }
    }

    fn ltsolve(&self, y: &mut [f64]) {
        for j in (0..self.n).rev() {
            let mut s = y[j];
            for p in self.lp[j] + 1..self.lp[j + 1] {
                s -= self.lx[p] * y[self.li[p]];
            }
            y[j] = s / self.lx[self.lp[j]];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        self.lsolve(&mut y);
        self.ltsolve(&mut y);
        let mut x = vec![0.0; self.n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        x
    }

    /// Maps standard-normal `z` to a draw from `N(0, A^{-1})`.
    pub fn sample_from_standard(&self, z: &[f64]) -> Vec<f64> {
        let mut w = z.to_vec();
        self.ltsolve(&mut w);
        let mut x = vec![0.0; self.n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = w[k];
        }
        x
    }
}
