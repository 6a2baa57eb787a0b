//! Compressed sparse row storage, bandwidth-reducing reordering, and a
//! profile (skyline) Cholesky factorization for symmetric positive definite
//! systems.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
}

/// Square CSR matrix with sorted column indices in every row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            indptr: vec![0; n + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Duplicates are summed in their input order after a stable sort, so
    /// the result only depends on the order of `triplets`.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut indptr = vec![0; n + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            assert!(i < n && j < n, "triplet ({i}, {j}) outside {n}x{n}");
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                values.push(v);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Self {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    t.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.indptr[i]..self.indptr[i + 1];
        match self.indices[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `uᵀ A v`.
    pub fn quad(&self, u: &[f64], v: &[f64]) -> f64 {
        let av = self.mul_vec(v);
        u.iter().zip(&av).map(|(a, b)| a * b).sum()
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n);
        let mut y = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            let col = x.column(c);
            for i in 0..self.n {
                y[(i, c)] = self.row(i).map(|(j, v)| v * col[j]).sum();
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                a[(i, j)] = v;
            }
        }
        a
    }

    /// Principal submatrix on `keep` (new index `k` is old index `keep[k]`).
    pub fn principal_submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut new_of = vec![usize::MAX; self.n];
        for (k, &old) in keep.iter().enumerate() {
            new_of[old] = k;
        }
        let mut t = Vec::new();
        for (k, &old) in keep.iter().enumerate() {
            for (j, v) in self.row(old) {
                if new_of[j] != usize::MAX {
                    t.push((k, new_of[j], v));
                }
            }
        }
        CsrMatrix::from_triplets(keep.len(), t)
    }

    /// `self + c·other`.
    pub fn add_scaled(&self, other: &CsrMatrix, c: f64) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let mut t = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.n {
            t.extend(self.row(i).map(|(j, v)| (i, j, v)));
            t.extend(other.row(i).map(|(j, v)| (i, j, c * v)));
        }
        CsrMatrix::from_triplets(self.n, t)
    }

    pub fn scaled(&self, c: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        self.add_scaled(other, -1.0).max_abs()
    }

    /// Largest `|A_ij − A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// One `row col value` line per stored entry, zero-based.
    pub fn to_coo_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                let _ = writeln!(s, "{i} {j} {v:.17e}");
            }
        }
        s
    }
}

/// Reverse Cuthill–McKee ordering of the symmetric sparsity graph; returns
/// `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| a.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize| -> (usize, usize) {
        let mut dist = vec![usize::MAX; n];
        let mut q = VecDeque::from([start]);
        dist[start] = 0;
        let mut far = (0, start);
        while let Some(u) = q.pop_front() {
            let key = (dist[u], usize::MAX - degree[u]);
            if key > (far.0, usize::MAX - degree[far.1]) {
                far = (dist[u], u);
            }
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    q.push_back(v);
                }
            }
        }
        far
    };

    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        // pseudo-peripheral start
        let mut start = seed;
        let mut ecc = 0;
        for _ in 0..4 {
            let (d, far) = bfs_levels(start);
            if d <= ecc && start != seed {
                break;
            }
            ecc = d;
            start = far;
        }
        visited[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(u) = q.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            next.sort_by_key(|&v| (degree[v], v));
            for v in next {
                visited[v] = true;
                q.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

fn profile_size(a: &CsrMatrix, perm: &[usize]) -> usize {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    (0..perm.len())
        .map(|i| {
            let first = a.row(perm[i]).map(|(j, _)| inv[j]).min().unwrap_or(i).min(i);
            i - first + 1
        })
        .sum()
}

/// `P A Pᵀ = L Lᵀ` with `L` stored row by row from its first nonzero column.
#[derive(Debug, Clone)]
pub struct ProfileCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl ProfileCholesky {
    /// Factors `a` under whichever of natural or RCM ordering gives the
    /// smaller profile.
    pub fn factor(a: &CsrMatrix) -> Result<Self, FactorError> {
        let natural: Vec<usize> = (0..a.n()).collect();
        let rcm = reverse_cuthill_mckee(a);
        let perm = if profile_size(a, &rcm) < profile_size(a, &natural) {
            rcm
        } else {
            natural
        };
        Self::factor_with(a, perm)
    }

    pub fn factor_with(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self, FactorError> {
        let n = a.n();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0; n];
        let mut offset = vec![0; n + 1];
        for i in 0..n {
            first[i] = a.row(perm[i]).map(|(j, _)| inv[j]).min().unwrap_or(i).min(i);
            offset[i + 1] = offset[i] + (i - first[i] + 1);
        }
        let mut data = vec![0.0; offset[n]];
        for i in 0..n {
            for (j, v) in a.row(perm[i]) {
                let jn = inv[j];
                if jn <= i {
                    data[offset[i] + jn - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let oi = offset[i];
            for j in fi..i {
                let fj = first[j];
                let oj = offset[j];
                let k0 = fi.max(fj);
                let mut s = data[oi + j - fi];
                let ri = &data[oi + k0 - fi..oi + j - fi];
                let rj = &data[oj + k0 - fj..oj + j - fj];
                s -= ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
                data[oi + j - fi] = s / data[oj + j - fj];
            }
            let row = &data[oi..oi + i - fi];
            let d = data[oi + i - fi] - row.iter().map(|x| x * x).sum::<f64>();
            if !(d > 0.0) {
                return Err(FactorError::NotPositiveDefinite { pivot: i, value: d });
            }
            data[oi + i - fi] = d.sqrt();
        }
        Ok(Self {
            perm,
            first,
            offset,
            data,
        })
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn profile(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(b.len(), n);
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let oi = self.offset[i];
            let s: f64 = self.data[oi..oi + i - fi]
                .iter()
                .zip(&y[fi..i])
                .map(|(l, v)| l * v)
                .sum();
            y[i] = (y[i] - s) / self.data[oi + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let oi = self.offset[i];
            y[i] /= self.data[oi + i - fi];
            let xi = y[i];
            for (k, l) in (fi..i).zip(&self.data[oi..oi + i - fi]) {
                y[k] -= l * xi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    pub fn solve_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col: Vec<f64> = b.column(c).iter().copied().collect();
            x.set_column(c, &nalgebra::DVector::from_vec(self.solve(&col)));
        }
        x
    }
}
