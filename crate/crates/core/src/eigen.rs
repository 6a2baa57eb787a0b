//! Lowest eigenpairs of `K φ = λ M φ`, cluster detection, and the
//! `M`-orthonormal eigenvector bases consumed by the variation formulas.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::assembly::{AssembledPair, DofMap};
use crate::sparse::{CsrMatrix, FactorError, ProfileCholesky};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EigenError {
    #[error("requested {requested} eigenpairs but the problem has {available} unknowns")]
    TooMany { requested: usize, available: usize },
    #[error("requested zero eigenpairs")]
    NoneRequested,
    #[error("mass matrix is not positive definite")]
    MassNotDefinite,
    #[error("stiffness factorization failed: {0}")]
    Stiffness(#[from] FactorError),
    #[error("no convergence after {iterations} iterations; residuals {residuals:?}")]
    NotConverged {
        iterations: usize,
        residuals: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Relative gap used to group eigenvalues into clusters.
    pub rel_gap: f64,
    /// Target relative residual for the iterative path.
    pub tol: f64,
    /// Residual accepted when the iteration stagnates.
    pub accept: f64,
    pub max_iter: usize,
    /// Interior dimension up to which the dense path is used.
    pub dense_limit: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rel_gap: 1e-3,
            tol: 1e-11,
            accept: 1e-9,
            max_iter: 2000,
            dense_limit: 400,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpectralSolution {
    pub eigenvalues: Vec<f64>,
    /// Columns are `M`-orthonormal eigenvectors over the interior unknowns.
    pub eigenvectors: DMatrix<f64>,
    pub clusters: Vec<Range<usize>>,
    pub dofs: DofMap,
    pub fingerprint: String,
}

impl SpectralSolution {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i).iter().copied().collect()
    }

    /// Eigenvector `i` extended by zero to every mesh vertex.
    pub fn global_vector(&self, i: usize) -> Vec<f64> {
        self.dofs.expand(&self.vector(i))
    }

    pub fn cluster_of(&self, i: usize) -> Range<usize> {
        self.clusters
            .iter()
            .find(|c| c.contains(&i))
            .cloned()
            .unwrap_or(i..i + 1)
    }

    pub fn cluster_mean(&self, cluster: &Range<usize>) -> f64 {
        self.eigenvalues[cluster.clone()].iter().sum::<f64>() / cluster.len() as f64
    }
}

/// Maximal runs where consecutive eigenvalues satisfy
/// `λ_{i+1} − λ_i ≤ rel_gap · max(λ_i, 1)`.
pub fn detect_clusters(eigenvalues: &[f64], rel_gap: f64) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..eigenvalues.len() {
        let last = i + 1 == eigenvalues.len();
        if last || eigenvalues[i + 1] - eigenvalues[i] > rel_gap * eigenvalues[i].max(1.0) {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    out
}

pub fn solve_lowest(ap: &AssembledPair, k: usize) -> Result<SpectralSolution, EigenError> {
    solve_lowest_with(ap, k, &SolverOptions::default())
}

pub fn solve_lowest_with(
    ap: &AssembledPair,
    k: usize,
    opts: &SolverOptions,
) -> Result<SpectralSolution, EigenError> {
    let (eigenvalues, eigenvectors) = solve_generalized(&ap.k, &ap.m, k, opts)?;
    let clusters = detect_clusters(&eigenvalues, opts.rel_gap);
    Ok(SpectralSolution {
        eigenvalues,
        eigenvectors,
        clusters,
        dofs: ap.dofs.clone(),
        fingerprint: ap.fingerprint.clone(),
    })
}

/// Lowest `count` eigenpairs of the pencil `(k, m)`, ascending, with
/// `M`-orthonormal eigenvector columns.
pub fn solve_generalized(
    k: &CsrMatrix,
    m: &CsrMatrix,
    count: usize,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, DMatrix<f64>), EigenError> {
    let n = k.n();
    if count == 0 {
        return Err(EigenError::NoneRequested);
    }
    if count > n {
        return Err(EigenError::TooMany {
            requested: count,
            available: n,
        });
    }
    if n <= opts.dense_limit {
        dense(k, m, count)
    } else {
        subspace(k, m, count, opts)
    }
}

fn dense(k: &CsrMatrix, m: &CsrMatrix, count: usize) -> Result<(Vec<f64>, DMatrix<f64>), EigenError> {
    let kd = k.to_dense();
    let md = m.to_dense();
    let chol = md.clone().cholesky().ok_or(EigenError::MassNotDefinite)?;
    let l = chol.l();
    // C = L⁻¹ K L⁻ᵀ
    let a = l
        .solve_lower_triangular(&kd)
        .ok_or(EigenError::MassNotDefinite)?;
    let c = l
        .solve_lower_triangular(&a.transpose())
        .ok_or(EigenError::MassNotDefinite)?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let n = kd.nrows();
    let mut y = DMatrix::zeros(n, count);
    for (c, &i) in order.iter().take(count).enumerate() {
        y.set_column(c, &eig.eigenvectors.column(i));
    }
    let x = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or(EigenError::MassNotDefinite)?;
    let x = m_orthonormalize(&x, &md).ok_or(EigenError::MassNotDefinite)?;
    rayleigh_ritz(&kd, &md, &x, count)
}

fn rayleigh_ritz(
    kd: &DMatrix<f64>,
    md: &DMatrix<f64>,
    x: &DMatrix<f64>,
    count: usize,
) -> Result<(Vec<f64>, DMatrix<f64>), EigenError> {
    let kx = kd * x;
    finish_ritz(x, &kx, md * x, count)
}

fn finish_ritz(
    x: &DMatrix<f64>,
    kx: &DMatrix<f64>,
    mx: DMatrix<f64>,
    count: usize,
) -> Result<(Vec<f64>, DMatrix<f64>), EigenError> {
    let a = x.transpose() * kx;
    let a = (&a + a.transpose()) * 0.5;
    let b = x.transpose() * &mx;
    let b = (&b + b.transpose()) * 0.5;
    // small generalized problem; B is close to the identity
    let lb = b.cholesky().ok_or(EigenError::MassNotDefinite)?.l();
    let t = lb.solve_lower_triangular(&a).ok_or(EigenError::MassNotDefinite)?;
    let c = lb
        .solve_lower_triangular(&t.transpose())
        .ok_or(EigenError::MassNotDefinite)?;
    let eig = SymmetricEigen::new((&c + c.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let p = x.ncols();
    let mut z = DMatrix::zeros(p, count);
    for (col, &i) in order.iter().take(count).enumerate() {
        z.set_column(col, &eig.eigenvectors.column(i));
    }
    let z = lb
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(EigenError::MassNotDefinite)?;
    let values = order.iter().take(count).map(|&i| eig.eigenvalues[i]).collect();
    Ok((values, x * z))
}

/// `X R⁻¹` with `Rᵀ R = Xᵀ M X`, applied twice for stability.
fn m_orthonormalize(x: &DMatrix<f64>, md: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut x = x.clone();
    for _ in 0..2 {
        let g = x.transpose() * md * &x;
        let l = ((&g + g.transpose()) * 0.5).cholesky()?.l();
        x = l.solve_lower_triangular(&x.transpose())?.transpose();
    }
    Some(x)
}

fn m_orthonormalize_sparse(x: &DMatrix<f64>, m: &CsrMatrix) -> Option<DMatrix<f64>> {
    let mut x = x.clone();
    for _ in 0..2 {
        let g = x.transpose() * m.mul_dense(&x);
        let l = ((&g + g.transpose()) * 0.5).cholesky()?.l();
        x = l.solve_lower_triangular(&x.transpose())?.transpose();
    }
    Some(x)
}

fn gram_schmidt(x: &DMatrix<f64>, m: &CsrMatrix) -> DMatrix<f64> {
    let mut x = x.clone();
    for c in 0..x.ncols() {
        for _ in 0..2 {
            for prev in 0..c {
                let mp = m.mul_vec(x.column(prev).as_slice());
                let d: f64 = x.column(c).iter().zip(&mp).map(|(a, b)| a * b).sum();
                let p = x.column(prev).clone_owned();
                x.column_mut(c).axpy(-d, &p, 1.0);
            }
        }
        let norm = m.quad(x.column(c).as_slice(), x.column(c).as_slice()).sqrt();
        x.column_mut(c).scale_mut(1.0 / norm);
    }
    x
}

/// `‖Kx − λMx‖₂ / (λ‖Mx‖₂)` for each column.
pub fn relative_residuals(
    k: &CsrMatrix,
    m: &CsrMatrix,
    eigenvalues: &[f64],
    vectors: &DMatrix<f64>,
) -> Vec<f64> {
    eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &lam)| {
            let x = vectors.column(i);
            let kx = DVector::from_vec(k.mul_vec(x.as_slice()));
            let mx = DVector::from_vec(m.mul_vec(x.as_slice()));
            (kx - &mx * lam).norm() / (lam.abs().max(f64::MIN_POSITIVE) * mx.norm())
        })
        .collect()
}

/// Shift-invert block subspace iteration with Rayleigh–Ritz on every step.
fn subspace(
    k: &CsrMatrix,
    m: &CsrMatrix,
    count: usize,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, DMatrix<f64>), EigenError> {
    let n = k.n();
    let p = (2 * count).max(count + 8).min(n);
    let chol = ProfileCholesky::factor(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x0 = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
    let mut x = m_orthonormalize_sparse(&x0, m).unwrap_or_else(|| gram_schmidt(&x0, m));
    let mut best = f64::INFINITY;
    let mut stall = 0;
    let mut last_res = Vec::new();
    for it in 0..opts.max_iter {
        let y = chol.solve_dense(&m.mul_dense(&x));
        let y = m_orthonormalize_sparse(&y, m).unwrap_or_else(|| gram_schmidt(&y, m));
        let ky = k.mul_dense(&y);
        let my = m.mul_dense(&y);
        let (vals, vecs) = finish_ritz(&y, &ky, my, p)?;
        x = vecs;
        let head = x.columns(0, count).clone_owned();
        let res = relative_residuals(k, m, &vals[..count], &head);
        let worst = res.iter().cloned().fold(0.0, f64::max);
        if worst < opts.tol {
            return Ok((vals[..count].to_vec(), head));
        }
        if worst < best * 0.9 {
            best = worst;
            stall = 0;
        } else {
            stall += 1;
        }
        if stall >= 8 && worst < opts.accept {
            return Ok((vals[..count].to_vec(), head));
        }
        last_res = res;
        if it + 1 == opts.max_iter && worst < opts.accept {
            return Ok((vals[..count].to_vec(), head));
        }
    }
    Err(EigenError::NotConverged {
        iterations: opts.max_iter,
        residuals: last_res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble, ProblemSpec};
    use crate::fieldexpr::ScalarField;
    use crate::geometry::WeightSpec;
    use crate::mesh::{generate, DomainSpec};
    use std::f64::consts::PI;

    fn problem(spec: DomainSpec, eta: &str) -> AssembledPair {
        let mesh = generate(&spec).unwrap();
        let ps = ProblemSpec::flat(mesh, WeightSpec::from_eta(ScalarField::parse(eta).unwrap()));
        assemble(&ps).unwrap()
    }

    fn check_invariants(ap: &AssembledPair, sol: &SpectralSolution) {
        let md = ap.m.to_dense();
        let gram = sol.eigenvectors.transpose() * md * &sol.eigenvectors;
        for i in 0..sol.len() {
            for j in 0..sol.len() {
                let d = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - d).abs() < 1e-10, "gram {i},{j}");
            }
        }
        for r in relative_residuals(&ap.k, &ap.m, &sol.eigenvalues, &sol.eigenvectors) {
            assert!(r < 1e-9, "residual {r:e}");
        }
        assert!(sol.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn diagonal_pencil() {
        let k = CsrMatrix::from_triplets(3, vec![(0, 0, 1.0), (1, 1, 2.0), (2, 2, 3.0)]);
        let m = CsrMatrix::from_triplets(3, vec![(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]);
        let (vals, vecs) = solve_generalized(&k, &m, 2, &SolverOptions::default()).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 2.0).abs() < 1e-14);
        assert!((vecs[(0, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((vecs[(1, 1)].abs() - 1.0).abs() < 1e-14);
        assert!(vecs[(2, 0)].abs() < 1e-14 && vecs[(2, 1)].abs() < 1e-14);
    }

    #[test]
    fn too_many_requested() {
        let ap = problem(DomainSpec::interval(0.0, 1.0, 4), "0");
        assert!(matches!(
            solve_lowest(&ap, 4),
            Err(EigenError::TooMany { requested: 4, available: 3 })
        ));
    }

    #[test]
    fn clusters() {
        assert_eq!(detect_clusters(&[1.0, 2.0, 3.0], 1e-3), vec![0..1, 1..2, 2..3]);
        assert_eq!(detect_clusters(&[1.0, 1.0 + 1e-12], 1e-3), vec![0..2]);
        let p2 = PI * PI;
        let jitter = [2.0, 5.0, 5.0 + 1e-4, 8.0, 10.0, 10.0 + 3e-4].map(|v| v * p2);
        assert_eq!(detect_clusters(&jitter, 1e-3), vec![0..1, 1..3, 3..4, 4..6]);
    }

    #[test]
    fn unit_interval_fine() {
        let ap = problem(DomainSpec::interval(0.0, 1.0, 1024), "0");
        let sol = solve_lowest(&ap, 3).unwrap();
        check_invariants(&ap, &sol);
        assert!((sol.eigenvalues[0] / (PI * PI) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn drifted_interval() {
        let ap = problem(DomainSpec::interval(0.0, 1.0, 1024), "4*x");
        let sol = solve_lowest(&ap, 2).unwrap();
        check_invariants(&ap, &sol);
        let exact = 4.0 + PI * PI;
        assert!((sol.eigenvalues[0] / exact - 1.0).abs() < 1e-3);
        let exact2 = 4.0 + 4.0 * PI * PI;
        assert!((sol.eigenvalues[1] / exact2 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn unit_square() {
        let ap = problem(DomainSpec::square(1.0, 64), "0");
        let sol = solve_lowest(&ap, 6).unwrap();
        check_invariants(&ap, &sol);
        let p2 = PI * PI;
        assert!((sol.eigenvalues[0] / (2.0 * p2) - 1.0).abs() < 5e-3);
        assert_eq!(sol.clusters[0], 0..1);
        assert_eq!(sol.clusters[1], 1..3);
        assert_eq!(sol.clusters[2], 3..4);
        assert_eq!(sol.clusters[3], 4..6);
    }

    #[test]
    fn dense_and_iterative_agree() {
        let ap = problem(DomainSpec::disk(1.0, 40), "0.5*x*y");
        let dense_opts = SolverOptions {
            dense_limit: usize::MAX,
            ..SolverOptions::default()
        };
        let iter_opts = SolverOptions {
            dense_limit: 0,
            ..SolverOptions::default()
        };
        let a = solve_lowest_with(&ap, 5, &dense_opts).unwrap();
        let b = solve_lowest_with(&ap, 5, &iter_opts).unwrap();
        check_invariants(&ap, &a);
        check_invariants(&ap, &b);
        for i in 0..5 {
            assert!((a.eigenvalues[i] / b.eigenvalues[i] - 1.0).abs() < 1e-11);
        }
    }

    #[test]
    fn deterministic() {
        let ap = problem(DomainSpec::square(1.0, 24), "x");
        let a = solve_lowest(&ap, 4).unwrap();
        let b = solve_lowest(&ap, 4).unwrap();
        for i in 0..4 {
            assert!((a.eigenvalues[i] / b.eigenvalues[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_by_mass() {
        for n in [10, 24] {
            let ap = problem(DomainSpec::square(1.0, n), "x - y");
            let c = 3.5;
            let shifted = AssembledPair {
                k: ap.k.add_scaled(&ap.m, c),
                ..ap.clone()
            };
            let a = solve_lowest(&ap, 4).unwrap();
            let b = solve_lowest(&shifted, 4).unwrap();
            for i in 0..4 {
                assert!(((b.eigenvalues[i] - c) / a.eigenvalues[i] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn converges_from_above() {
        let mut prev = f64::INFINITY;
        for n in [8, 16, 32, 64, 128] {
            let ap = problem(DomainSpec::interval(0.0, 1.0, n), "4*x");
            let l = solve_lowest(&ap, 1).unwrap().eigenvalues[0];
            assert!(l < prev && l > 4.0 + PI * PI);
            prev = l;
        }
    }
}
