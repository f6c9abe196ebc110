//! Compressed-column sparse matrices and a left-looking sparse LU.
//!
//! The LU follows the Gilbert-Peierls scheme: each column is obtained by a
//! sparse triangular solve whose nonzero pattern comes from a depth-first
//! reach over the columns of `L` built so far. Rows are pivoted partially with
//! a preference for the diagonal, columns are pre-ordered by minimum degree on
//! the symmetric pattern. Independent connected components of the pattern are
//! factored separately, so a block-diagonal matrix factors exactly like its
//! blocks do on their own.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix is numerically singular at column {column}")]
    Singular { column: usize },
}

/// Relative threshold for accepting the diagonal as pivot.
const DIAG_PREFERENCE: f64 = 0.01;
/// Pivot magnitude, relative to the original column, below which a column is singular.
const SINGULAR_RTOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Build from `(row, col, value)` triplets. Duplicates are summed and
    /// explicit zeros are kept, so the pattern is structural.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let p = next[c];
            rows[p] = r;
            vals[p] = v;
            next[c] += 1;
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for c in 0..ncols {
            scratch.clear();
            scratch.extend((counts[c]..counts[c + 1]).map(|p| (rows[p], vals[p])));
            // stable sort keeps summation order = triplet order
            scratch.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < scratch.len() {
                let r = scratch[k].0;
                let mut v = 0.0;
                while k < scratch.len() && scratch[k].0 == r {
                    v += scratch[k].1;
                    k += 1;
                }
                row_idx.push(r);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                if m[(r, c)] != 0.0 {
                    t.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &t)
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Entries of column `c` as `(row, value)`.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// All stored entries as `(row, col, value)` in column-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| self.col(c).map(move |(r, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        match self.row_idx[range.clone()].binary_search(&r) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]]
            .binary_search(&r)
            .is_ok()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for c in 0..self.ncols {
            let xc = x[c];
            for (r, v) in self.col(c) {
                y[r] += v * xc;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    /// Exact structural and numerical symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.nrows == self.ncols && *self == self.transpose()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter() {
            m[(r, c)] += v;
        }
        m
    }

    /// Extract `self[rows, cols]`; both index lists must be strictly increasing.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut local = vec![usize::MAX; self.nrows];
        for (k, &r) in rows.iter().enumerate() {
            local[r] = k;
        }
        let mut col_ptr = Vec::with_capacity(cols.len() + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for &c in cols {
            for (r, v) in self.col(c) {
                if local[r] != usize::MAX {
                    row_idx.push(local[r]);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix {
            nrows: rows.len(),
            ncols: cols.len(),
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Copy with `delta[i]` added on the diagonal (entries created if absent).
    pub fn add_diagonal(&self, delta: &[f64]) -> Self {
        assert_eq!(self.nrows, self.ncols);
        let mut t: Vec<_> = self.iter().collect();
        t.extend(
            delta
                .iter()
                .enumerate()
                .filter(|(_, d)| **d != 0.0)
                .map(|(i, &d)| (i, i, d)),
        );
        Self::from_triplets(self.nrows, self.ncols, &t)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rows holding at least one stored entry.
    pub fn nonzero_rows(&self) -> Vec<usize> {
        let mut seen = vec![false; self.nrows];
        for &r in &self.row_idx {
            seen[r] = true;
        }
        (0..self.nrows).filter(|&r| seen[r]).collect()
    }

    /// Columns holding at least one stored entry.
    pub fn nonzero_cols(&self) -> Vec<usize> {
        (0..self.ncols)
            .filter(|&c| self.col_ptr[c + 1] > self.col_ptr[c])
            .collect()
    }
}

/// Connected components of the symmetric pattern of a square matrix, each a
/// sorted index list, ordered by smallest member.
pub fn pattern_components(a: &CscMatrix) -> Vec<Vec<usize>> {
    let n = a.ncols();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (r, c, _) in a.iter() {
        let (ra, rb) = (find(&mut parent, r), find(&mut parent, c));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
    }
    let mut slot = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = comps.len();
            comps.push(Vec::new());
        }
        comps[slot[root]].push(i);
    }
    comps
}

/// Minimum-degree elimination order of the symmetric pattern `A + Aᵀ`.
/// Ties go to the lowest index.
pub fn minimum_degree_order(a: &CscMatrix) -> Vec<usize> {
    let n = a.ncols();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, c, _) in a.iter() {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    let mut merged = Vec::new();
    for _ in 0..n {
        let p = (0..n)
            .filter(|&i| alive[i])
            .min_by_key(|&i| (adj[i].len(), i))
            .expect("a live node remains");
        alive[p] = false;
        order.push(p);
        let nbrs = std::mem::take(&mut adj[p]);
        for &u in &nbrs {
            merged.clear();
            let (mut i, mut j) = (0, 0);
            let (au, an) = (&adj[u], &nbrs);
            while i < au.len() || j < an.len() {
                let next = match (au.get(i), an.get(j)) {
                    (Some(&x), Some(&y)) if x == y => {
                        i += 1;
                        j += 1;
                        x
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        i += 1;
                        x
                    }
                    (Some(_), Some(&y)) => {
                        j += 1;
                        y
                    }
                    (Some(&x), None) => {
                        i += 1;
                        x
                    }
                    (None, Some(&y)) => {
                        j += 1;
                        y
                    }
                    (None, None) => unreachable!(),
                };
                if next != u && next != p {
                    merged.push(next);
                }
            }
            std::mem::swap(&mut adj[u], &mut merged);
        }
    }
    order
}

#[derive(Debug, Clone)]
struct LuBlock {
    /// Global indices covered by this block, increasing.
    vars: Vec<usize>,
    /// Column pre-order: pivot step `k` eliminates local column `q[k]`.
    q: Vec<usize>,
    /// Local row -> pivot step.
    pinv: Vec<usize>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    u_ptr: Vec<usize>,
    u_idx: Vec<usize>,
    u_val: Vec<f64>,
}

/// Sparse LU factors of a square matrix.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    blocks: Vec<LuBlock>,
    /// Floating-point operations spent in the factorization.
    pub factor_flops: u64,
}

impl SparseLu {
    pub fn factor(a: &CscMatrix) -> Result<Self, FactorError> {
        if a.nrows() != a.ncols() {
            return Err(FactorError::NotSquare(a.nrows(), a.ncols()));
        }
        let mut blocks = Vec::new();
        let mut flops = 0u64;
        for vars in pattern_components(a) {
            let local = a.submatrix(&vars, &vars);
            let q = minimum_degree_order(&local);
            let (block, f) = factor_block(&local, q, vars.clone())
                .map_err(|col| FactorError::Singular { column: vars[col] })?;
            flops += f;
            blocks.push(block);
        }
        Ok(SparseLu {
            n: a.ncols(),
            blocks,
            factor_flops: flops,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries in `L` and `U`.
    pub fn fill(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.l_idx.len() + b.u_idx.len())
            .sum()
    }

    /// Solve `A x = b`; returns `x` and the operation count.
    pub fn solve(&self, b: &[f64]) -> (Vec<f64>, u64) {
        assert_eq!(b.len(), self.n);
        let mut x = vec![0.0; self.n];
        let mut flops = 0u64;
        for blk in &self.blocks {
            let m = blk.vars.len();
            let mut y = vec![0.0; m];
            for (i, &g) in blk.vars.iter().enumerate() {
                y[blk.pinv[i]] = b[g];
            }
            // unit lower: first entry of each column is the diagonal
            for k in 0..m {
                let yk = y[k];
                if yk != 0.0 {
                    for p in blk.l_ptr[k] + 1..blk.l_ptr[k + 1] {
                        y[blk.l_idx[p]] -= blk.l_val[p] * yk;
                    }
                }
                flops += 2 * (blk.l_ptr[k + 1] - blk.l_ptr[k] - 1) as u64;
            }
            // upper: diagonal is the last entry of each column
            for k in (0..m).rev() {
                let last = blk.u_ptr[k + 1] - 1;
                y[k] /= blk.u_val[last];
                let yk = y[k];
                for p in blk.u_ptr[k]..last {
                    y[blk.u_idx[p]] -= blk.u_val[p] * yk;
                }
                flops += 1 + 2 * (last - blk.u_ptr[k]) as u64;
            }
            for k in 0..m {
                x[blk.vars[blk.q[k]]] = y[k];
            }
        }
        (x, flops)
    }

    /// Solve with `steps` rounds of iterative refinement against `a`.
    pub fn solve_refined(&self, a: &CscMatrix, b: &[f64], steps: usize) -> (Vec<f64>, u64) {
        let (mut x, mut flops) = self.solve(b);
        for _ in 0..steps {
            let ax = a.mul_vec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            flops += 2 * a.nnz() as u64 + b.len() as u64;
            let (dx, f) = self.solve(&r);
            flops += f + x.len() as u64;
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        (x, flops)
    }
}

/// Factor one square block. On failure returns the local column that was singular.
fn factor_block(a: &CscMatrix, q: Vec<usize>, vars: Vec<usize>) -> Result<(LuBlock, u64), usize> {
    const NONE: usize = usize::MAX;
    let n = a.ncols();
    let mut pinv = vec![NONE; n];
    let mut x = vec![0.0; n];
    let mut xi = vec![0usize; n];
    let mut stack = vec![0usize; n];
    let mut pstack = vec![0usize; n];
    let mut mark = vec![usize::MAX; n];
    let mut l_ptr = Vec::with_capacity(n + 1);
    let mut l_idx: Vec<usize> = Vec::with_capacity(4 * a.nnz() + n);
    let mut l_val: Vec<f64> = Vec::with_capacity(4 * a.nnz() + n);
    let mut u_ptr = Vec::with_capacity(n + 1);
    let mut u_idx: Vec<usize> = Vec::with_capacity(4 * a.nnz() + n);
    let mut u_val: Vec<f64> = Vec::with_capacity(4 * a.nnz() + n);
    let mut flops = 0u64;

    for k in 0..n {
        l_ptr.push(l_idx.len());
        u_ptr.push(u_idx.len());
        let col = q[k];

        // Reach of A(:,col) in the graph of L: topological order in xi[top..n].
        let mut top = n;
        for (i, _) in a.col(col) {
            if mark[i] == k {
                continue;
            }
            // iterative DFS; the first entry of each L column is its own pivot row
            let mut head = 0usize;
            stack[0] = i;
            loop {
                let j = stack[head];
                let jl = pinv[j];
                if mark[j] != k {
                    mark[j] = k;
                    pstack[head] = if jl == NONE { 0 } else { l_ptr[jl] + 1 };
                }
                let end = if jl == NONE {
                    0
                } else {
                    l_ptr_end(&l_ptr, jl, l_idx.len())
                };
                let mut p = pstack[head];
                let mut descended = false;
                while p < end {
                    let child = l_idx[p];
                    p += 1;
                    if mark[child] != k {
                        pstack[head] = p;
                        head += 1;
                        stack[head] = child;
                        descended = true;
                        break;
                    }
                }
                if !descended {
                    top -= 1;
                    xi[top] = j;
                    if head == 0 {
                        break;
                    }
                    head -= 1;
                }
            }
        }

        // Sparse triangular solve x = L \ A(:,col).
        for &i in &xi[top..n] {
            x[i] = 0.0;
        }
        let mut col_max = 0.0f64;
        for (i, v) in a.col(col) {
            x[i] = v;
            col_max = col_max.max(v.abs());
        }
        for &j in &xi[top..n] {
            let jl = pinv[j];
            if jl == NONE {
                continue;
            }
            let xj = x[j];
            let start = l_ptr[jl] + 1;
            let end = l_ptr_end(&l_ptr, jl, l_idx.len());
            for p in start..end {
                x[l_idx[p]] -= l_val[p] * xj;
            }
            flops += 2 * (end - start) as u64;
        }

        // Pivot choice.
        let mut ipiv = NONE;
        let mut best = -1.0f64;
        for &i in &xi[top..n] {
            if pinv[i] == NONE {
                let t = x[i].abs();
                if t > best {
                    best = t;
                    ipiv = i;
                }
            } else {
                u_idx.push(pinv[i]);
                u_val.push(x[i]);
            }
        }
        if ipiv == NONE || best <= SINGULAR_RTOL * col_max || best == 0.0 {
            return Err(col);
        }
        if pinv[col] == NONE && mark[col] == k && x[col].abs() >= DIAG_PREFERENCE * best {
            ipiv = col;
        }
        let pivot = x[ipiv];
        u_idx.push(k);
        u_val.push(pivot);
        pinv[ipiv] = k;
        l_idx.push(ipiv);
        l_val.push(1.0);
        for &i in &xi[top..n] {
            if pinv[i] == NONE {
                l_idx.push(i);
                l_val.push(x[i] / pivot);
                flops += 1;
            }
            x[i] = 0.0;
        }
    }
    l_ptr.push(l_idx.len());
    u_ptr.push(u_idx.len());
    for r in &mut l_idx {
        *r = pinv[*r];
    }
    Ok((
        LuBlock {
            vars,
            q,
            pinv,
            l_ptr,
            l_idx,
            l_val,
            u_ptr,
            u_idx,
            u_val,
        },
        flops,
    ))
}

/// End of column `jl` of the partially built `L`.
#[inline]
fn l_ptr_end(l_ptr: &[usize], jl: usize, len: usize) -> usize {
    l_ptr.get(jl + 1).copied().unwrap_or(len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn residual_norm(a: &CscMatrix, x: &[f64], b: &[f64]) -> f64 {
        a.mul_vec(x)
            .iter()
            .zip(b)
            .fold(0.0, |m, (ax, bi)| m.max((ax - bi).abs()))
    }

    #[test]
    fn triplets_sum_duplicates_and_keep_zeros() {
        let m = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 0.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert!(m.contains(1, 0));
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn identity_solve() {
        let a = CscMatrix::identity(2);
        let lu = SparseLu::factor(&a).unwrap();
        assert_eq!(lu.solve(&[1.0, -1.0]).0, vec![1.0, -1.0]);
    }

    #[test]
    fn zero_diagonal_saddle_needs_offdiagonal_pivots() {
        // [[0,1],[1,0]]
        let a = CscMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let lu = SparseLu::factor(&a).unwrap();
        let (x, _) = lu.solve(&[2.0, 3.0]);
        assert_eq!(x, vec![3.0, 2.0]);
    }

    #[test]
    fn singular_is_reported() {
        let a =
            CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(matches!(
            SparseLu::factor(&a),
            Err(FactorError::Singular { .. })
        ));
    }

    #[test]
    fn components_are_factored_independently() {
        // two disjoint 2x2 blocks interleaved: {0,2} and {1,3}
        let a = CscMatrix::from_triplets(
            4,
            4,
            &[
                (0, 0, 4.0),
                (0, 2, 1.0),
                (2, 0, 1.0),
                (2, 2, 3.0),
                (1, 1, 2.0),
                (1, 3, -1.0),
                (3, 1, -1.0),
                (3, 3, 5.0),
            ],
        );
        assert_eq!(pattern_components(&a), vec![vec![0, 2], vec![1, 3]]);
        let b = [1.0, 2.0, 3.0, 4.0];
        let lu = SparseLu::factor(&a).unwrap();
        let (x, _) = lu.solve(&b);
        // blockwise on the extracted sub-system gives bit-identical answers
        let sub = a.submatrix(&[1, 3], &[1, 3]);
        let (xs, _) = SparseLu::factor(&sub).unwrap().solve(&[2.0, 4.0]);
        assert_eq!(x[1], xs[0]);
        assert_eq!(x[3], xs[1]);
    }

    #[test]
    fn minimum_degree_prefers_leaves_of_arrow() {
        // arrow matrix: node 0 connected to all others
        let mut t = vec![];
        for i in 0..5 {
            t.push((i, i, 1.0));
            if i > 0 {
                t.push((0, i, 1.0));
                t.push((i, 0, 1.0));
            }
        }
        let a = CscMatrix::from_triplets(5, 5, &t);
        let order = minimum_degree_order(&a);
        assert_eq!(order[0], 1);
        assert_ne!(order[0], 0);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    fn arb_system() -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(-1.0f64..1.0, n * n),
                proptest::collection::vec(0.0f64..1.0, n * n),
                proptest::collection::vec(-1.0f64..1.0, n),
            )
                .prop_map(move |(vals, mask, b)| {
                    let mut m = DMatrix::from_fn(n, n, |r, c| {
                        if mask[r * n + c] < 0.3 || r == c {
                            vals[r * n + c]
                        } else {
                            0.0
                        }
                    });
                    // symmetrize, indefinite but kept well away from singular
                    m = &m + m.transpose();
                    for i in 0..n {
                        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                        m[(i, i)] += s * (n as f64 + 1.0);
                    }
                    (m, b)
                })
        })
    }

    proptest! {
        #[test]
        fn lu_matches_dense_solution((m, b) in arb_system()) {
            let a = CscMatrix::from_dense(&m);
            let lu = SparseLu::factor(&a).unwrap();
            let (x, _) = lu.solve(&b);
            let dense = m.clone().lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
            for i in 0..b.len() {
                prop_assert!((x[i] - dense[i]).abs() < 1e-9 * (1.0 + dense[i].abs()));
            }
            prop_assert!(residual_norm(&a, &x, &b) < 1e-10);
        }

        #[test]
        fn transpose_is_involution((m, _b) in arb_system()) {
            let a = CscMatrix::from_dense(&m);
            prop_assert_eq!(a.transpose().transpose(), a.clone());
            prop_assert!(a.is_symmetric());
        }
    }
}
