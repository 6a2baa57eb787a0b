//! Independent checks of the variation formulas: finite differences of
//! re-solved eigenvalues, the discrete Hellmann–Feynman matrix, pointwise
//! residuals of the two differential identities, and random splitting runs.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::assembly::{assemble, AssembledDerivativePair, AssemblyError, ProblemSpec};
use crate::eigen::{solve_generalized, EigenError, SolverOptions, SpectralSolution};
use crate::fieldexpr::{EvalError, Expr, Func, Point, TensorField, Var, VectorField};
use crate::geometry::MetricSpec;
use crate::hadamard::{q_boundary, q_metric, HadamardError};
use crate::mesh::{DomainKind, MeshError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error(
        "cluster identity lost at t = {t:e}: the perturbed cluster meets its neighbours; use a smaller t"
    )]
    ClusterLost { t: f64 },
    #[error("{0}")]
    Precondition(String),
    #[error("perturbed metric is not positive definite at ({x}, {y}) for t = {t:e}")]
    NotPositiveDefinite { x: f64, y: f64, t: f64 },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Hadamard(#[from] HadamardError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Field(#[from] EvalError),
}

// ---------------------------------------------------------------- FD oracles

struct ClusterSample {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

/// Cluster eigenvalues must stay strictly inside the window halfway to the
/// neighbouring eigenvalues at the unperturbed parameter.
#[derive(Debug, Clone, Copy)]
struct Window {
    lo: f64,
    hi: f64,
}

fn cluster_window(
    ps: &ProblemSpec,
    cluster: &Range<usize>,
    opts: &SolverOptions,
) -> Result<Window, VerifyError> {
    let ap = assemble(ps)?;
    let count = (cluster.end + 1).min(ap.k.n());
    let (vals, _) = solve_generalized(&ap.k, &ap.m, count, opts)?;
    let first = vals[cluster.start];
    let last = vals[cluster.end - 1];
    let lo = if cluster.start > 0 {
        0.5 * (vals[cluster.start - 1] + first)
    } else {
        f64::NEG_INFINITY
    };
    let hi = if cluster.end < count {
        0.5 * (last + vals[cluster.end])
    } else {
        f64::INFINITY
    };
    Ok(Window { lo, hi })
}

fn solve_cluster(
    ps: &ProblemSpec,
    cluster: &Range<usize>,
    opts: &SolverOptions,
    window: Window,
    t: f64,
) -> Result<ClusterSample, VerifyError> {
    let ap = assemble(ps)?;
    let n = ap.k.n();
    let count = (cluster.end + 1).min(n);
    let (vals, vecs) = solve_generalized(&ap.k, &ap.m, count, opts)?;
    let inside = |v: f64| v > window.lo && v < window.hi;
    let lost = !vals[cluster.clone()].iter().all(|&v| inside(v))
        || (cluster.start > 0 && inside(vals[cluster.start - 1]))
        || (cluster.end < count && inside(vals[cluster.end]));
    if lost {
        return Err(VerifyError::ClusterLost { t });
    }
    // vertex-valued vectors so that deformed meshes stay comparable
    let mut vectors = DMatrix::zeros(ap.dofs.num_vertices(), cluster.len());
    for (c, i) in cluster.clone().enumerate() {
        let v: Vec<f64> = vecs.column(i).iter().copied().collect();
        vectors.set_column(c, &nalgebra::DVector::from_vec(ap.dofs.expand(&v)));
    }
    Ok(ClusterSample {
        values: vals[cluster.clone()].to_vec(),
        vectors,
    })
}

/// Pairs branches at `+t` and `−t` by largest total eigenvector overlap and
/// returns the central differences, ascending.
fn matched_slopes(plus: &ClusterSample, minus: &ClusterSample, t: f64) -> Vec<f64> {
    let m = plus.values.len();
    let overlap = plus.vectors.transpose() * &minus.vectors;
    let perm = best_permutation(&overlap.map(|v| v * v));
    let mut slopes: Vec<f64> = (0..m)
        .map(|i| (plus.values[i] - minus.values[perm[i]]) / (2.0 * t))
        .collect();
    slopes.sort_by(f64::total_cmp);
    slopes
}

fn best_permutation(score: &DMatrix<f64>) -> Vec<usize> {
    let m = score.nrows();
    if m > 7 {
        // greedy for large clusters
        let mut used = vec![false; m];
        return (0..m)
            .map(|i| {
                let j = (0..m)
                    .filter(|&j| !used[j])
                    .max_by(|&a, &b| score[(i, a)].total_cmp(&score[(i, b)]))
                    .unwrap();
                used[j] = true;
                j
            })
            .collect();
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut perm: Vec<usize> = (0..m).collect();
    permute(&mut perm, 0, &mut |p| {
        let s: f64 = p.iter().enumerate().map(|(i, &j)| score[(i, j)]).sum();
        if s > best.0 {
            best = (s, p.to_vec());
        }
    });
    best.1
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// Central-difference branch slopes along `g ± tH`, `η ± tη̇`.
pub fn fd_eigen_derivative_metric(
    ps: &ProblemSpec,
    cluster: Range<usize>,
    t: f64,
) -> Result<Vec<f64>, VerifyError> {
    fd_eigen_derivative_metric_with(ps, cluster, t, &SolverOptions::default())
}

pub fn fd_eigen_derivative_metric_with(
    ps: &ProblemSpec,
    cluster: Range<usize>,
    t: f64,
    opts: &SolverOptions,
) -> Result<Vec<f64>, VerifyError> {
    check_fd_args(&cluster, t)?;
    let base = ps.metric.t();
    let window = cluster_window(ps, &cluster, opts)?;
    let plus = solve_cluster(&ps.at(base + t), &cluster, opts, window, t)?;
    let minus = solve_cluster(&ps.at(base - t), &cluster, opts, window, -t)?;
    Ok(matched_slopes(&plus, &minus, t))
}

/// Central-difference branch slopes along the domain family `x + tV`; the
/// weight expression is evaluated on the moved vertices.
pub fn fd_eigen_derivative_boundary(
    ps: &ProblemSpec,
    cluster: Range<usize>,
    v: &VectorField,
    t: f64,
) -> Result<Vec<f64>, VerifyError> {
    fd_eigen_derivative_boundary_with(ps, cluster, v, t, &SolverOptions::default())
}

pub fn fd_eigen_derivative_boundary_with(
    ps: &ProblemSpec,
    cluster: Range<usize>,
    v: &VectorField,
    t: f64,
    opts: &SolverOptions,
) -> Result<Vec<f64>, VerifyError> {
    check_fd_args(&cluster, t)?;
    let moved = |s: f64| -> Result<ProblemSpec, VerifyError> {
        Ok(ps.with_mesh(ps.mesh.deform(v, s)?))
    };
    let window = cluster_window(ps, &cluster, opts)?;
    let plus = solve_cluster(&moved(t)?, &cluster, opts, window, t)?;
    let minus = solve_cluster(&moved(-t)?, &cluster, opts, window, -t)?;
    Ok(matched_slopes(&plus, &minus, t))
}

fn check_fd_args(cluster: &Range<usize>, t: f64) -> Result<(), VerifyError> {
    if cluster.is_empty() {
        return Err(VerifyError::Precondition("empty cluster".into()));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(VerifyError::Precondition(format!("step t = {t} must be positive")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub cluster: Range<usize>,
    pub steps: Vec<f64>,
    /// `fd_slopes[s][b]`: branch `b` at step `s`, ascending in `b`.
    pub fd_slopes: Vec<Vec<f64>>,
    pub hadamard_slopes: Vec<f64>,
    /// `|fd − had| / max(|fd|, ε)` per step and branch.
    pub deviations: Vec<Vec<f64>>,
    /// Richardson order per branch from the first three steps.
    pub observed_order: Option<Vec<f64>>,
}

pub const DEVIATION_EPS: f64 = 1e-12;

pub fn relative_deviation(fd: f64, had: f64) -> f64 {
    (fd - had).abs() / fd.abs().max(DEVIATION_EPS)
}

impl FdReport {
    pub fn new(
        cluster: Range<usize>,
        steps: Vec<f64>,
        fd_slopes: Vec<Vec<f64>>,
        hadamard_slopes: Vec<f64>,
    ) -> Self {
        let deviations = fd_slopes
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&hadamard_slopes)
                    .map(|(&f, &h)| relative_deviation(f, h))
                    .collect()
            })
            .collect();
        let observed_order = observed_order(&steps, &fd_slopes);
        Self {
            cluster,
            steps,
            fd_slopes,
            hadamard_slopes,
            deviations,
            observed_order,
        }
    }

    pub fn max_deviation_at(&self, step: usize) -> f64 {
        self.deviations[step].iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "eigen_index,step,branch,fd_slope,hadamard_slope,deviation,observed_order\n",
        );
        for (si, &t) in self.steps.iter().enumerate() {
            for b in 0..self.fd_slopes[si].len() {
                let order = self
                    .observed_order
                    .as_ref()
                    .map(|o| fmt17(o[b]))
                    .unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    self.cluster.start + b + 1,
                    fmt17(t),
                    b + 1,
                    fmt17(self.fd_slopes[si][b]),
                    fmt17(self.hadamard_slopes[b]),
                    fmt17(self.deviations[si][b]),
                    order
                );
            }
        }
        s
    }
}

/// `log(|s₁−s₂| / |s₂−s₃|) / log(t₁/t₂)`, branchwise.
pub fn observed_order(steps: &[f64], slopes: &[Vec<f64>]) -> Option<Vec<f64>> {
    if steps.len() < 3 {
        return None;
    }
    let ratio = (steps[0] / steps[1]).ln();
    Some(
        (0..slopes[0].len())
            .map(|b| {
                let e1 = (slopes[0][b] - slopes[1][b]).abs();
                let e2 = (slopes[1][b] - slopes[2][b]).abs();
                (e1 / e2).ln() / ratio
            })
            .collect(),
    )
}

pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

// ------------------------------------------------------ Hellmann–Feynman

/// `A_ij = ½[φ_iᵀ(K′ − λ_iM′)φ_j + φ_jᵀ(K′ − λ_jM′)φ_i]`.
pub fn hellmann_feynman(
    sol: &SpectralSolution,
    adp: &AssembledDerivativePair,
    cluster: Range<usize>,
) -> DMatrix<f64> {
    let vecs: Vec<Vec<f64>> = cluster.clone().map(|i| sol.vector(i)).collect();
    let lams: Vec<f64> = cluster.clone().map(|i| sol.eigenvalues[i]).collect();
    let kv: Vec<Vec<f64>> = vecs.iter().map(|v| adp.k_prime.mul_vec(v)).collect();
    let mv: Vec<Vec<f64>> = vecs.iter().map(|v| adp.m_prime.mul_vec(v)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let m = vecs.len();
    DMatrix::from_fn(m, m, |i, j| {
        let a = dot(&vecs[i], &kv[j]) - lams[i] * dot(&vecs[i], &mv[j]);
        let b = dot(&vecs[j], &kv[i]) - lams[j] * dot(&vecs[j], &mv[i]);
        0.5 * (a + b)
    })
}

// ------------------------------------------------------- pointwise identities

fn var(i: usize) -> Var {
    if i == 0 {
        Var::X
    } else {
        Var::Y
    }
}

fn d(e: &Expr, i: usize) -> Expr {
    e.differentiate(var(i))
}

fn sum(it: impl IntoIterator<Item = Expr>) -> Expr {
    it.into_iter().fold(Expr::zero(), Expr::add)
}

/// Max over `points` of `|div_η(T(φZ)) − φ⟨div_η T, Z⟩ − φ⟨∇Z, T⟩ − T(∇φ, Z)|`
/// in flat coordinates, with `div_η X = div X − ⟨∇η, X⟩`.
pub fn check_lemma1(
    t: &TensorField,
    z: &VectorField,
    phi: &Expr,
    eta: &Expr,
    points: &[Point],
) -> Result<f64, VerifyError> {
    if !t.is_symmetric() {
        return Err(VerifyError::Precondition("T must be symmetric".into()));
    }
    let n = t.dim();
    if z.dim() != n {
        return Err(VerifyError::Precondition("T and Z dimensions differ".into()));
    }
    let tij = |i: usize, j: usize| t.entry(i, j).clone();
    // W_i = T_ij φ Z_j
    let w: Vec<Expr> = (0..n)
        .map(|i| sum((0..n).map(|j| tij(i, j) * phi.clone() * z.component(j).clone())))
        .collect();
    let lhs = sum((0..n).map(|i| d(&w[i], i) - d(eta, i) * w[i].clone()));
    let div_t: Vec<Expr> = (0..n)
        .map(|j| sum((0..n).map(|i| d(&tij(i, j), i) - d(eta, i) * tij(i, j))))
        .collect();
    let term1 = phi.clone() * sum((0..n).map(|j| div_t[j].clone() * z.component(j).clone()));
    let term2 = phi.clone()
        * sum((0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| d(z.component(j), i) * tij(i, j)));
    let term3 = sum(
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| tij(i, j) * d(phi, i) * z.component(j).clone()),
    );
    let rhs = term1 + term2 + term3;
    max_abs_diff(&lhs, &rhs, points)
}

fn max_abs_diff(a: &Expr, b: &Expr, points: &[Point]) -> Result<f64, VerifyError> {
    let mut worst = 0.0_f64;
    for &p in points {
        worst = worst.max((a.eval_at(p)? - b.eval_at(p)?).abs());
    }
    Ok(worst)
}

/// Strong form `L_G f = (1/√det G) ∂_i(√det G G^{ij} ∂_j f) − G^{ij} ∂_iη ∂_j f`.
fn strong_operator(g: &[Vec<Expr>], eta: &Expr, f: &Expr) -> Expr {
    let n = g.len();
    let (inv, det) = if n == 1 {
        (vec![vec![Expr::one() / g[0][0].clone()]], g[0][0].clone())
    } else {
        let det = g[0][0].clone() * g[1][1].clone() - g[0][1].clone() * g[1][0].clone();
        let inv = vec![
            vec![g[1][1].clone() / det.clone(), -g[0][1].clone() / det.clone()],
            vec![-g[1][0].clone() / det.clone(), g[0][0].clone() / det.clone()],
        ];
        (inv, det)
    };
    let s = Expr::call(Func::Sqrt, det);
    let div = sum((0..n).map(|i| {
        d(
            &(s.clone() * sum((0..n).map(|j| inv[i][j].clone() * d(f, j)))),
            i,
        )
    }));
    let drift = sum(
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| inv[i][j].clone() * d(eta, i) * d(f, j)),
    );
    div / s - drift
}

/// Max over `points` of the difference between the central difference
/// `(L_{I+tH} f − L_{I−tH} f)/(2t)` and `⟨½dh − div_η H, df⟩ − ⟨H, ∇²f⟩`.
pub fn check_lemma2(
    h: &TensorField,
    eta: &Expr,
    f: &Expr,
    points: &[Point],
    t: f64,
) -> Result<f64, VerifyError> {
    if !h.is_symmetric() {
        return Err(VerifyError::Precondition("H must be symmetric".into()));
    }
    let n = h.dim();
    let metric = MetricSpec::flat(n)
        .with_perturbation(h.clone())
        .map_err(|e| VerifyError::Precondition(e.to_string()))?;
    for &p in points {
        for s in [t, -t] {
            let g = metric.base_at(p).map_err(|e| VerifyError::Precondition(e.to_string()))?
                + metric.perturbation_at(p).map_err(|e| VerifyError::Precondition(e.to_string()))? * s;
            let spd = if n == 1 {
                g[(0, 0)] > 0.0
            } else {
                g[(0, 0)] > 0.0 && g.determinant() > 0.0
            };
            if !spd {
                return Err(VerifyError::NotPositiveDefinite { x: p[0], y: p[1], t: s });
            }
        }
    }
    let family = |s: f64| -> Vec<Vec<Expr>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let id = if i == j { Expr::one() } else { Expr::zero() };
                        id + Expr::constant(s) * h.entry(i, j).clone()
                    })
                    .collect()
            })
            .collect()
    };
    let lp = strong_operator(&family(t), eta, f);
    let lm = strong_operator(&family(-t), eta, f);
    let hij = |i: usize, j: usize| h.entry(i, j).clone();
    let trace = sum((0..n).map(|i| hij(i, i)));
    let div_h: Vec<Expr> = (0..n)
        .map(|j| sum((0..n).map(|i| d(&hij(i, j), i) - d(eta, i) * hij(i, j))))
        .collect();
    let first = sum((0..n).map(|j| (Expr::constant(0.5) * d(&trace, j) - div_h[j].clone()) * d(f, j)));
    let hess = sum(
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| hij(i, j) * d(&d(f, i), j)),
    );
    let rhs = first - hess;
    let mut worst = 0.0_f64;
    for &p in points {
        let fd = (lp.eval_at(p)? - lm.eval_at(p)?) / (2.0 * t);
        worst = worst.max((fd - rhs.eval_at(p)?).abs());
    }
    Ok(worst)
}

// ------------------------------------------------------------ random fields

const MONOMIALS_2D: [(i32, i32); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];
const MONOMIALS_1D: [(i32, i32); 3] = [(0, 0), (1, 0), (2, 0)];

fn monomial(px: i32, py: i32) -> Expr {
    Expr::powi(Expr::x(), px) * Expr::powi(Expr::y(), py)
}

/// Polynomial of degree ≤ 2 with coefficients uniform in `[−1, 1]`.
pub fn random_polynomial(rng: &mut impl Rng, dim: usize) -> Expr {
    let monos: &[(i32, i32)] = if dim == 1 { &MONOMIALS_1D } else { &MONOMIALS_2D };
    sum(monos
        .iter()
        .map(|&(px, py)| Expr::constant(rng.random_range(-1.0..=1.0)) * monomial(px, py)))
}

/// Polynomial plus a random trigonometric mode.
pub fn random_smooth_field(rng: &mut impl Rng, dim: usize) -> Expr {
    let poly = random_polynomial(rng, dim);
    let a = Expr::constant(rng.random_range(-2.0..2.0));
    let b = Expr::constant(if dim == 1 { 0.0 } else { rng.random_range(-2.0..2.0) });
    let c = Expr::constant(rng.random_range(-1.0..1.0));
    let arg = a * Expr::x() + b * Expr::y();
    let f = if rng.random_bool(0.5) { Func::Sin } else { Func::Cos };
    poly + c * Expr::call(f, arg)
}

/// Symmetric tensor with independent random degree-2 polynomial entries.
pub fn random_metric_direction(seed: u64, dim: usize) -> TensorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upper = (0..dim)
        .map(|i| (i..dim).map(|_| random_polynomial(&mut rng, dim)).collect())
        .collect();
    TensorField::symmetric_from_upper(upper).expect("valid dimension")
}

/// Random velocity adapted to the domain: on the square each component
/// carries the factor that removes tangential motion along the edges, so
/// corners stay fixed.
pub fn random_boundary_velocity(seed: u64, domain: &DomainKind) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps = match domain {
        DomainKind::Interval { .. } => vec![random_polynomial(&mut rng, 1)],
        DomainKind::Square { side } => {
            let s = Expr::constant(*side);
            let p = random_polynomial(&mut rng, 2);
            let q = random_polynomial(&mut rng, 2);
            vec![
                p * Expr::y() * (s.clone() - Expr::y()),
                q * Expr::x() * (s - Expr::x()),
            ]
        }
        DomainKind::Disk { .. } | DomainKind::Annulus { .. } => {
            vec![random_polynomial(&mut rng, 2), random_polynomial(&mut rng, 2)]
        }
    };
    VectorField::new(comps).expect("valid dimension")
}

/// Symmetry centre of a generated domain.
pub fn domain_center(domain: &DomainKind) -> Point {
    match domain {
        DomainKind::Interval { a, b } => [0.5 * (a + b), 0.0],
        DomainKind::Square { side } => [0.5 * side, 0.5 * side],
        DomainKind::Disk { .. } | DomainKind::Annulus { .. } => [0.0, 0.0],
    }
}

/// `(1 + |x − c|²) g`: invariant under every symmetry of the domain, so the
/// cluster does not split to first order.
pub fn adversarial_metric_direction(domain: &DomainKind) -> TensorField {
    let c = domain_center(domain);
    let dx = Expr::x() - Expr::constant(c[0]);
    let dy = Expr::y() - Expr::constant(c[1]);
    let f = Expr::one() + Expr::powi(dx, 2) + Expr::powi(dy, 2);
    let dim = if matches!(domain, DomainKind::Interval { .. }) { 1 } else { 2 };
    TensorField::scalar_multiple(dim, f)
}

/// Whether `H(c + R(p − c)) = R H(p) Rᵀ` for the quarter turn `R`, checked
/// at sample points.
pub fn is_quarter_turn_invariant(h: &TensorField, center: Point) -> bool {
    if h.dim() != 2 {
        return false;
    }
    let r = Matrix2::new(0.0, -1.0, 1.0, 0.0);
    let samples = [[0.13, 0.71], [0.52, 0.29], [0.91, 0.44], [0.37, 0.06]];
    samples.iter().all(|s| {
        let p = Vector2::new(s[0] - center[0], s[1] - center[1]);
        let q = r * p;
        let (Ok(hp), Ok(hq)) = (
            h.eval([center[0] + p[0], center[1] + p[1]]),
            h.eval([center[0] + q[0], center[1] + q[1]]),
        ) else {
            return false;
        };
        (hq - r * hp * r.transpose()).amax() <= 1e-12 * (1.0 + hp.amax())
    })
}

// --------------------------------------------------------------- splitting

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Metric,
    Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    Random,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub mode: SplitMode,
    pub seed: u64,
    pub multiplicity: usize,
    pub slopes: Vec<f64>,
    pub min_gap: f64,
    pub threshold: f64,
    pub split: bool,
    pub adversarial: bool,
}

pub fn min_pairwise_gap(sorted: &[f64]) -> f64 {
    sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
}

fn split_report(
    mode: SplitMode,
    seed: u64,
    slopes: Vec<f64>,
    threshold: f64,
    adversarial: bool,
) -> SplitReport {
    let scale = slopes.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    let min_gap = min_pairwise_gap(&slopes);
    SplitReport {
        mode,
        seed,
        multiplicity: slopes.len(),
        split: min_gap > threshold * scale,
        min_gap,
        threshold,
        slopes,
        adversarial,
    }
}

/// Draws a perturbation per seed, evaluates the branch slopes on `cluster`
/// of `sol`, and reports whether the cluster splits at first order.
/// Seeds run in parallel; each result depends on its seed only.
pub fn splitting_experiment(
    mode: SplitMode,
    ps: &ProblemSpec,
    sol: &SpectralSolution,
    cluster: Range<usize>,
    domain: &DomainKind,
    seeds: &[u64],
    threshold: f64,
) -> Result<Vec<SplitReport>, VerifyError> {
    if cluster.len() < 2 {
        return Err(VerifyError::Precondition(format!(
            "splitting needs a cluster of multiplicity at least 2, got {}",
            cluster.len()
        )));
    }
    seeds
        .par_iter()
        .map(|&seed| {
            let slopes = match mode {
                SplitMode::Metric => {
                    let mut draw = seed;
                    let h = loop {
                        let h = random_metric_direction(draw, ps.mesh.dim());
                        if !is_quarter_turn_invariant(&h, domain_center(domain)) {
                            break h;
                        }
                        draw = draw.wrapping_add(1 << 32);
                    };
                    metric_slopes(ps, sol, cluster.clone(), h)?
                }
                SplitMode::Boundary => {
                    let v = random_boundary_velocity(seed, domain);
                    q_boundary(sol, cluster.clone(), &flat_of(ps), &v)?.branch_slopes
                }
            };
            Ok(split_report(mode, seed, slopes, threshold, false))
        })
        .collect()
}

/// The symmetric-perturbation control run.
pub fn adversarial_split(
    ps: &ProblemSpec,
    sol: &SpectralSolution,
    cluster: Range<usize>,
    domain: &DomainKind,
    threshold: f64,
) -> Result<SplitReport, VerifyError> {
    let h = adversarial_metric_direction(domain);
    let slopes = metric_slopes(ps, sol, cluster, h)?;
    Ok(split_report(SplitMode::Metric, 0, slopes, threshold, true))
}

fn metric_slopes(
    ps: &ProblemSpec,
    sol: &SpectralSolution,
    cluster: Range<usize>,
    h: TensorField,
) -> Result<Vec<f64>, VerifyError> {
    let metric = match ps.metric.base() {
        Some(b) => MetricSpec::flat(ps.mesh.dim()).with_base(b.clone()),
        None => Ok(MetricSpec::flat(ps.mesh.dim())),
    }
    .and_then(|m| m.with_perturbation(h))
    .map_err(|e| VerifyError::Precondition(e.to_string()))?;
    let weight = crate::geometry::WeightSpec::from_eta(ps.weight.eta.clone());
    let pert = ProblemSpec::new(ps.mesh.clone(), metric, weight)?;
    Ok(q_metric(sol, cluster, &pert)?.branch_slopes)
}

fn flat_of(ps: &ProblemSpec) -> ProblemSpec {
    ProblemSpec::flat(ps.mesh.clone(), ps.weight.clone())
}

pub fn split_csv(reports: &[SplitReport]) -> String {
    let mut s = String::from(
        "mode,seed,adversarial,multiplicity,min_gap,threshold,split,slopes\n",
    );
    for r in reports {
        let slopes: Vec<String> = r.slopes.iter().map(|&v| fmt17(v)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            match r.mode {
                SplitMode::Metric => "metric",
                SplitMode::Boundary => "boundary",
            },
            r.seed,
            u8::from(r.adversarial),
            r.multiplicity,
            fmt17(r.min_gap),
            fmt17(r.threshold),
            u8::from(r.split),
            slopes.join(";")
        );
    }
    s
}

/// Splitting summary with the observed fraction of split verdicts.
pub fn split_fraction(reports: &[SplitReport]) -> f64 {
    let random: Vec<_> = reports.iter().filter(|r| !r.adversarial).collect();
    if random.is_empty() {
        return 0.0;
    }
    random.iter().filter(|r| r.split).count() as f64 / random.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_derivative;
    use crate::eigen::solve_lowest;
    use crate::fieldexpr::{parse, ScalarField};
    use crate::geometry::WeightSpec;
    use crate::hadamard::{q_boundary, q_metric, relative_max_deviation, symmetric_eigenvalues};
    use crate::mesh::{generate, DomainSpec};

    fn pts(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn lemma1_identity_tensor_and_unit_phi() {
        let t = TensorField::identity(2);
        let z = VectorField::parse(&["x*y + sin(y)".into(), "exp(x) - y^2".into()]).unwrap();
        let phi = parse("cos(x*y) + x").unwrap();
        let eta = parse("x^2 - 0.5*y").unwrap();
        assert!(check_lemma1(&t, &z, &phi, &eta, &pts(50, 1)).unwrap() < 1e-10);
        let t = TensorField::parse_upper(&[vec!["1+x^2".into(), "x*y".into()], vec!["cos(y)".into()]])
            .unwrap();
        assert!(check_lemma1(&t, &z, &Expr::one(), &eta, &pts(50, 2)).unwrap() < 1e-10);
    }

    #[test]
    fn lemma1_rejects_asymmetric() {
        let t = TensorField::from_rows(vec![vec![Expr::one(), Expr::x()], vec![Expr::zero(), Expr::one()]])
            .unwrap();
        let z = VectorField::zeros(2);
        assert!(check_lemma1(&t, &z, &Expr::one(), &Expr::zero(), &pts(3, 0)).is_err());
    }

    #[test]
    fn lemma1_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let points = pts(100, 3);
        let mut worst = 0.0_f64;
        for _ in 0..100 {
            let upper = vec![
                vec![random_smooth_field(&mut rng, 2), random_smooth_field(&mut rng, 2)],
                vec![random_smooth_field(&mut rng, 2)],
            ];
            let t = TensorField::symmetric_from_upper(upper).unwrap();
            let z = VectorField::new(vec![random_smooth_field(&mut rng, 2), random_smooth_field(&mut rng, 2)])
                .unwrap();
            let phi = random_smooth_field(&mut rng, 2);
            let eta = random_smooth_field(&mut rng, 2);
            worst = worst.max(check_lemma1(&t, &z, &phi, &eta, &points).unwrap());
        }
        assert!(worst < 1e-8, "{worst:e}");
    }

    #[test]
    fn lemma2_trivial_cases() {
        let points = pts(20, 4);
        let eta = parse("x*y").unwrap();
        let f = parse("sin(x) + y^2").unwrap();
        assert!(check_lemma2(&TensorField::zeros(2), &eta, &f, &points, 1e-3).unwrap() < 1e-12);
        let h = random_metric_direction(1, 2);
        let small: Vec<Point> = points.iter().map(|p| [0.2 * p[0], 0.2 * p[1]]).collect();
        assert!(check_lemma2(&h, &eta, &Expr::constant(2.0), &small, 1e-3).unwrap() < 1e-12);
    }

    #[test]
    fn lemma2_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points = pts(30, 6);
        for dim in [1, 2] {
            for _ in 0..5 {
                let h = random_metric_direction(rng.random(), dim);
                let eta = random_smooth_field(&mut rng, dim);
                let f = random_smooth_field(&mut rng, dim);
                let e1 = check_lemma2(&h, &eta, &f, &points, 1e-3).unwrap();
                let e2 = check_lemma2(&h, &eta, &f, &points, 1e-4).unwrap();
                let order = (e1 / e2).log10();
                assert!(order >= 1.9, "dim {dim}: {e1:e} {e2:e}");
            }
        }
    }

    #[test]
    fn lemma2_non_spd() {
        let h = TensorField::identity(2).scaled(-10.0);
        assert!(matches!(
            check_lemma2(&h, &Expr::zero(), &Expr::x(), &pts(3, 0), 0.5),
            Err(VerifyError::NotPositiveDefinite { .. })
        ));
    }

    fn square(n: usize, h: Option<TensorField>, eta: &str) -> ProblemSpec {
        let mesh = generate(&DomainSpec::square(1.0, n)).unwrap();
        let mut metric = MetricSpec::flat(2);
        if let Some(h) = h {
            metric = metric.with_perturbation(h).unwrap();
        }
        ProblemSpec::new(mesh, metric, WeightSpec::from_eta(ScalarField::parse(eta).unwrap())).unwrap()
    }

    #[test]
    fn fd_zero_direction() {
        let ps = square(12, Some(TensorField::zeros(2)), "x");
        let l = solve_lowest(&assemble(&ps).unwrap(), 1).unwrap().eigenvalues[0];
        let s = fd_eigen_derivative_metric(&ps, 0..1, 1e-3).unwrap();
        assert!(s[0].abs() < 1e-9 * l);
        let v = VectorField::zeros(2);
        let s = fd_eigen_derivative_boundary(&ps, 0..1, &v, 1e-3).unwrap();
        assert!(s[0].abs() < 1e-9 * l);
    }

    #[test]
    fn fd_conformal_anchor() {
        let ps = square(16, Some(TensorField::identity(2).scaled(2.0)), "0");
        let l = solve_lowest(&assemble(&ps).unwrap(), 1).unwrap().eigenvalues[0];
        let t = 1e-4;
        let s = fd_eigen_derivative_metric(&ps, 0..1, t).unwrap();
        let exact = -2.0 * l / (1.0 - 4.0 * t * t);
        assert!((s[0] / exact - 1.0).abs() < 1e-8);
        assert!((s[0] / (-2.0 * l) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn fd_cluster_lost() {
        let h = TensorField::parse_upper(&[vec!["3".into(), "0".into()], vec!["0".into()]]).unwrap();
        let ps = square(8, Some(h), "0");
        assert!(matches!(
            fd_eigen_derivative_metric(&ps, 1..3, 0.3),
            Err(VerifyError::ClusterLost { .. })
        ));
    }

    #[test]
    fn hf_examples() {
        let ps = square(10, Some(TensorField::identity(2).scaled(2.0)), "0");
        let ap = assemble(&ps).unwrap();
        let sol = solve_lowest(&ap, 3).unwrap();
        let adp = assemble_derivative(&ps).unwrap();
        let a = hellmann_feynman(&sol, &adp, 1..3);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { -2.0 * sol.eigenvalues[1 + i] } else { 0.0 };
                assert!((a[(i, j)] - e).abs() < 1e-9 * sol.eigenvalues[2]);
            }
        }
        let zero = AssembledDerivativePair {
            k_prime: adp.k_prime.scaled(0.0),
            m_prime: adp.m_prime.scaled(0.0),
            dofs: adp.dofs.clone(),
        };
        assert_eq!(hellmann_feynman(&sol, &zero, 0..3).amax(), 0.0);
    }

    #[test]
    fn hf_matches_fd_on_cluster() {
        // the FD slopes are the exact discrete derivative up to O(t²)
        let ps = square(16, Some(random_metric_direction(42, 2)), "0");
        let ap = assemble(&ps).unwrap();
        let sol = solve_lowest(&ap, 3).unwrap();
        let adp = assemble_derivative(&ps).unwrap();
        let hf = symmetric_eigenvalues(&hellmann_feynman(&sol, &adp, 1..3));
        let fd = fd_eigen_derivative_metric(&ps, 1..3, 1e-4).unwrap();
        for b in 0..2 {
            assert!(relative_deviation(fd[b], hf[b]) < 1e-5, "{fd:?} {hf:?}");
        }
    }

    #[test]
    fn hf_and_q_converge_together() {
        let devs: Vec<f64> = [16, 32]
            .iter()
            .map(|&n| {
                let mut ps = square(n, Some(random_metric_direction(42, 2)), "x*y");
                ps.weight.eta_dot = ScalarField::parse("x - y").unwrap();
                let sol = solve_lowest(&assemble(&ps).unwrap(), 3).unwrap();
                let adp = assemble_derivative(&ps).unwrap();
                let a = hellmann_feynman(&sol, &adp, 1..3);
                let q = q_metric(&sol, 1..3, &ps).unwrap().q;
                relative_max_deviation(&a, &q)
            })
            .collect();
        assert!(devs[0] / devs[1] >= 3.0, "{devs:?}");
    }

    #[test]
    fn boundary_fd_matches_q_with_weight() {
        // interior weight terms cancel: only the boundary integral remains
        let mesh = generate(&DomainSpec::disk(1.0, 48)).unwrap();
        let ps = ProblemSpec::flat(mesh, WeightSpec::from_eta(ScalarField::parse("0.8*x + 0.3*y^2").unwrap()));
        let sol = solve_lowest(&assemble(&ps).unwrap(), 1).unwrap();
        let v = VectorField::parse(&["1 + 0.5*x".into(), "x*y".into()]).unwrap();
        let q = q_boundary(&sol, 0..1, &ps, &v).unwrap().branch_slopes[0];
        let fd = fd_eigen_derivative_boundary(&ps, 0..1, &v, 1e-3).unwrap()[0];
        assert!(relative_deviation(fd, q) < 3e-2, "fd {fd} q {q}");
    }

    #[test]
    fn fd_order_on_simple_eigenvalues() {
        let steps = vec![1e-2, 1e-3, 1e-4];
        let h = random_metric_direction(42, 2);
        let mesh = generate(&DomainSpec::square(1.0, 16)).unwrap();
        let metric = MetricSpec::flat(2).with_perturbation(h).unwrap();
        let weight = WeightSpec::new(ScalarField::parse("x*y").unwrap(), ScalarField::parse("x - y").unwrap());
        let ps = ProblemSpec::new(mesh, metric, weight).unwrap();
        let fd: Vec<Vec<f64>> = steps
            .iter()
            .map(|&t| fd_eigen_derivative_metric(&ps, 0..1, t).unwrap())
            .collect();
        let o = observed_order(&steps, &fd).unwrap()[0];
        assert!(o >= 1.9, "metric order {o}");

        let mesh = generate(&DomainSpec::disk(1.0, 32)).unwrap();
        let ps = ProblemSpec::flat(mesh, WeightSpec::from_eta(ScalarField::parse("x^2 + y").unwrap()));
        let v = VectorField::parse(&["x + x*y".into(), "y - x^2".into()]).unwrap();
        let fd: Vec<Vec<f64>> = steps
            .iter()
            .map(|&t| fd_eigen_derivative_boundary(&ps, 0..1, &v, t).unwrap())
            .collect();
        let o = observed_order(&steps, &fd).unwrap()[0];
        assert!(o >= 1.9, "boundary order {o}");
    }

    #[test]
    fn fd_report_and_csv() {
        let steps = vec![1e-2, 1e-3, 1e-4];
        let slopes = vec![vec![1.0 + 1e-4], vec![1.0 + 1e-6], vec![1.0 + 1e-8]];
        let r = FdReport::new(0..1, steps, slopes, vec![1.0]);
        let o = r.observed_order.as_ref().unwrap()[0];
        assert!((o - 2.0).abs() < 1e-3);
        let csv = r.to_csv();
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
    }

    #[test]
    fn splitting_small_run() {
        let domain = DomainKind::Square { side: 1.0 };
        let ps = square(16, None, "0");
        let sol = solve_lowest(&assemble(&ps).unwrap(), 3).unwrap();
        let seeds: Vec<u64> = (0..6).collect();
        let reps = splitting_experiment(SplitMode::Metric, &ps, &sol, 1..3, &domain, &seeds, 1e-6).unwrap();
        assert!(reps.iter().all(|r| r.split && r.multiplicity == 2));
        let again = splitting_experiment(SplitMode::Metric, &ps, &sol, 1..3, &domain, &seeds, 1e-6).unwrap();
        assert_eq!(reps, again);
        let b = splitting_experiment(SplitMode::Boundary, &ps, &sol, 1..3, &domain, &seeds, 1e-6).unwrap();
        assert!(b.iter().all(|r| r.split));
        let adv = adversarial_split(&ps, &sol, 1..3, &domain, 1e-6).unwrap();
        assert!(!adv.split, "{adv:?}");
        assert!(splitting_experiment(SplitMode::Metric, &ps, &sol, 0..1, &domain, &seeds, 1e-6).is_err());
        assert_eq!(split_csv(&reps).lines().filter(|l| !l.starts_with('#')).count(), 7);
    }

    #[test]
    fn symmetry_detection() {
        let domain = DomainKind::Square { side: 1.0 };
        assert!(is_quarter_turn_invariant(&adversarial_metric_direction(&domain), [0.5, 0.5]));
        assert!(!is_quarter_turn_invariant(&random_metric_direction(42, 2), [0.5, 0.5]));
        let v = random_boundary_velocity(3, &domain);
        for corner in [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]] {
            assert_eq!(v.eval(corner).unwrap().norm(), 0.0);
        }
    }

    #[test]
    fn random_direction_is_reproducible() {
        let a = random_metric_direction(42, 2);
        let b = random_metric_direction(42, 2);
        let p = [0.3, 0.8];
        assert_eq!(a.eval(p).unwrap(), b.eval(p).unwrap());
        let ps = square(8, Some(a.clone()), "0");
        let ps2 = square(8, Some(b), "0");
        let s1 = solve_lowest(&assemble(&ps).unwrap(), 3).unwrap();
        let q1 = q_metric(&s1, 1..3, &ps).unwrap().q;
        let q2 = q_metric(&s1, 1..3, &ps2).unwrap().q;
        assert_eq!(relative_max_deviation(&q1, &q2), 0.0);
    }
}
