//! First-order variation of an eigenvalue cluster: the symmetric derivative
//! matrix `Q` on the cluster and its eigenvalues (the branch slopes), for
//! metric/weight directions `(H, η̇)` and for boundary velocities `V`.

use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::assembly::{assemble_boundary_mass, assemble_full, AssemblyError, FullPair, ProblemSpec};
use crate::eigen::SpectralSolution;
use crate::fieldexpr::{EvalError, VectorField};
use crate::geometry::{weighted_cell_measure, weighted_facet_measure, GeometryError};
use crate::sparse::ProfileCholesky;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HadamardError {
    #[error("cluster {start}..{end} outside the {available} computed eigenpairs")]
    ClusterOutOfRange {
        start: usize,
        end: usize,
        available: usize,
    },
    #[error("no metric perturbation H was given")]
    MissingPerturbation,
    #[error("mesh has no boundary facets")]
    NoBoundary,
    #[error("boundary variation needs a flat base metric at t = 0")]
    CurvedMetric,
    #[error("velocity field has dimension {field}, mesh has {mesh}")]
    DimensionMismatch { field: usize, mesh: usize },
    #[error("solution does not belong to this problem")]
    SolutionMismatch,
    #[error("boundary mass matrix is singular")]
    SingularBoundaryMass,
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HadamardKind {
    Metric,
    Boundary,
}

#[derive(Debug, Clone)]
pub struct HadamardMatrix {
    pub q: DMatrix<f64>,
    pub branch_slopes: Vec<f64>,
    pub cluster: Range<usize>,
    pub kind: HadamardKind,
}

impl HadamardMatrix {
    fn new(q: DMatrix<f64>, cluster: Range<usize>, kind: HadamardKind) -> Self {
        let branch_slopes = symmetric_eigenvalues(&q);
        Self {
            q,
            branch_slopes,
            cluster,
            kind,
        }
    }

    pub fn size(&self) -> usize {
        self.q.nrows()
    }
}

/// Eigenvalues of the symmetric part of `q`, ascending.
pub fn symmetric_eigenvalues(q: &DMatrix<f64>) -> Vec<f64> {
    if q.nrows() == 1 {
        return vec![q[(0, 0)]];
    }
    let s = (q + q.transpose()) * 0.5;
    let mut v: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn branch_derivatives(q: &HadamardMatrix) -> Vec<f64> {
    q.branch_slopes.clone()
}

fn check_cluster(sol: &SpectralSolution, cluster: &Range<usize>) -> Result<(), HadamardError> {
    if cluster.start >= cluster.end || cluster.end > sol.len() {
        return Err(HadamardError::ClusterOutOfRange {
            start: cluster.start,
            end: cluster.end,
            available: sol.len(),
        });
    }
    Ok(())
}

fn check_solution(sol: &SpectralSolution, ps: &ProblemSpec) -> Result<(), HadamardError> {
    if sol.dofs.num_vertices() != ps.mesh.num_vertices() {
        return Err(HadamardError::SolutionMismatch);
    }
    Ok(())
}

fn cluster_basis(sol: &SpectralSolution, cluster: &Range<usize>) -> Vec<Vec<f64>> {
    cluster.clone().map(|i| sol.global_vector(i)).collect()
}

/// Metric/weight variation on a cluster of `sol`.
pub fn q_metric(
    sol: &SpectralSolution,
    cluster: Range<usize>,
    ps: &ProblemSpec,
) -> Result<HadamardMatrix, HadamardError> {
    check_cluster(sol, &cluster)?;
    check_solution(sol, ps)?;
    if ps.metric.perturbation().is_none() {
        return Err(HadamardError::MissingPerturbation);
    }
    let basis = cluster_basis(sol, &cluster);
    let q = q_metric_in_basis(ps, &basis, sol.cluster_mean(&cluster))?;
    Ok(HadamardMatrix::new(q, cluster, HadamardKind::Metric))
}

/// `Q_ij = ½[∫((g(∇φ_i,∇φ_j) − λφ_iφ_j)h − 2H(∇φ_i,∇φ_j)) dm + ∫ g(∇η̇, ∇(φ_iφ_j)) dm]`
/// for vertex-valued P1 functions `basis`.
pub fn q_metric_in_basis(
    ps: &ProblemSpec,
    basis: &[Vec<f64>],
    lambda: f64,
) -> Result<DMatrix<f64>, HadamardError> {
    let mesh = &ps.mesh;
    let m = basis.len();
    let nloc = mesh.dim() + 1;
    let per_cell = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| -> Result<DMatrix<f64>, GeometryError> {
            let verts = mesh.cell(c);
            let grads = mesh.basis_gradients(c);
            let nodal: Vec<[f64; 3]> = basis
                .iter()
                .map(|u| {
                    let mut v = [0.0; 3];
                    for a in 0..nloc {
                        v[a] = u[verts[a]];
                    }
                    v
                })
                .collect();
            let du: Vec<Vector2<f64>> = nodal
                .iter()
                .map(|v| (0..nloc).map(|a| grads[a] * v[a]).sum())
                .collect();
            let mut out = DMatrix::zeros(m, m);
            for q in weighted_cell_measure(mesh, c, &ps.metric, &ps.weight)? {
                let f = &q.frame;
                let vals: Vec<f64> = nodal
                    .iter()
                    .map(|v| (0..nloc).map(|a| q.basis[a] * v[a]).sum())
                    .collect();
                for i in 0..m {
                    for j in i..m {
                        let metric = (f.cometric(&du[i], &du[j]) - lambda * vals[i] * vals[j]) * f.h
                            - 2.0 * f.h_of_gradients(&du[i], &du[j]);
                        let prod_grad = du[j] * vals[i] + du[i] * vals[j];
                        let weight = f.cometric(&f.grad_eta_dot, &prod_grad);
                        out[(i, j)] += 0.5 * q.weight * (metric + weight);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(symmetric_from_upper(per_cell.into_iter().fold(DMatrix::zeros(m, m), |a, b| a + b)))
}

fn symmetric_from_upper(mut q: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..q.nrows() {
        for j in 0..i {
            q[(i, j)] = q[(j, i)];
        }
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FluxMethod {
    /// Boundary-mass projection of the discrete residual.
    #[default]
    Variational,
    /// Gradient of the adjacent cell dotted with the normal.
    RawGradient,
}

/// Normal derivatives of Dirichlet P1 functions on the boundary.
pub struct FluxRecovery<'a> {
    ps: &'a ProblemSpec,
    method: FluxMethod,
    full: Option<FullPair>,
    boundary: Vec<usize>,
    slot: Vec<Option<usize>>,
    b_chol: Option<ProfileCholesky>,
}

impl<'a> FluxRecovery<'a> {
    pub fn new(ps: &'a ProblemSpec, method: FluxMethod) -> Result<Self, HadamardError> {
        let mesh = &ps.mesh;
        if mesh.boundary_facets().is_empty() {
            return Err(HadamardError::NoBoundary);
        }
        let boundary: Vec<usize> = (0..mesh.num_vertices())
            .filter(|&v| mesh.is_boundary_vertex(v))
            .collect();
        let mut slot = vec![None; mesh.num_vertices()];
        for (k, &v) in boundary.iter().enumerate() {
            slot[v] = Some(k);
        }
        let (full, b_chol) = match method {
            FluxMethod::Variational => {
                let full = assemble_full(ps)?;
                let b = assemble_boundary_mass(ps)?.principal_submatrix(&boundary);
                let chol = ProfileCholesky::factor(&b)
                    .map_err(|_| HadamardError::SingularBoundaryMass)?;
                (Some(full), Some(chol))
            }
            FluxMethod::RawGradient => (None, None),
        };
        Ok(Self {
            ps,
            method,
            full,
            boundary,
            slot,
            b_chol,
        })
    }

    pub fn method(&self) -> FluxMethod {
        self.method
    }

    /// Nodal boundary flux of a vertex-valued function (`None` for the raw
    /// method, which has no nodal representation).
    pub fn nodal(&self, u: &[f64], lambda: f64) -> Option<Vec<f64>> {
        let (full, chol) = (self.full.as_ref()?, self.b_chol.as_ref()?);
        let ku = full.k.mul_vec(u);
        let mu = full.m.mul_vec(u);
        let r: Vec<f64> = self.boundary.iter().map(|&v| ku[v] - lambda * mu[v]).collect();
        let q = chol.solve(&r);
        let mut out = vec![0.0; u.len()];
        for (k, &v) in self.boundary.iter().enumerate() {
            out[v] = q[k];
        }
        Some(out)
    }

    fn raw(&self, u: &[f64], facet: usize) -> f64 {
        let mesh = &self.ps.mesh;
        let f = &mesh.boundary_facets()[facet];
        let verts = mesh.cell(f.cell);
        let grads = mesh.basis_gradients(f.cell);
        let g: Vector2<f64> = verts.iter().enumerate().map(|(a, &v)| grads[a] * u[v]).sum();
        g.dot(&f.normal)
    }

    /// Flux of `u` at a facet: the midpoint value of the recovered boundary
    /// function, or the raw cell value.
    pub fn facet_flux(&self, u: &[f64], lambda: f64, facet: usize) -> f64 {
        match self.nodal(u, lambda) {
            Some(q) => self.facet_value(&q, facet),
            None => self.raw(u, facet),
        }
    }

    fn facet_value(&self, q: &[f64], facet: usize) -> f64 {
        let f = &self.ps.mesh.boundary_facets()[facet];
        if self.ps.mesh.dim() == 1 {
            q[f.vertices[0]]
        } else {
            0.5 * (q[f.vertices[0]] + q[f.vertices[1]])
        }
    }

    /// Flux values of `u` at the quadrature points of each facet.
    fn quadrature_values(&self, u: &[f64], lambda: f64) -> Result<Vec<Vec<f64>>, HadamardError> {
        let mesh = &self.ps.mesh;
        let nodal = self.nodal(u, lambda);
        (0..mesh.boundary_facets().len())
            .map(|f| {
                let verts = mesh.boundary_facets()[f].vertices;
                let pts = weighted_facet_measure(mesh, f, &self.ps.weight)?;
                Ok(match &nodal {
                    Some(q) => pts
                        .iter()
                        .map(|p| p.basis[0] * q[verts[0]] + p.basis[1] * q[verts[1]])
                        .collect(),
                    None => vec![self.raw(u, f); pts.len()],
                })
            })
            .collect()
    }

    pub fn boundary_vertices(&self) -> &[usize] {
        &self.boundary
    }

    pub fn slot(&self, vertex: usize) -> Option<usize> {
        self.slot[vertex]
    }
}

/// Flux of eigenfunction `index` at `facet` with the default recovery.
pub fn recover_normal_derivative(
    sol: &SpectralSolution,
    index: usize,
    facet: usize,
    ps: &ProblemSpec,
) -> Result<f64, HadamardError> {
    check_solution(sol, ps)?;
    let rec = FluxRecovery::new(ps, FluxMethod::Variational)?;
    let lambda = sol.cluster_mean(&sol.cluster_of(index));
    Ok(rec.facet_flux(&sol.global_vector(index), lambda, facet))
}

/// Boundary variation along velocity `v` on a cluster of `sol`.
pub fn q_boundary(
    sol: &SpectralSolution,
    cluster: Range<usize>,
    ps: &ProblemSpec,
    v: &VectorField,
) -> Result<HadamardMatrix, HadamardError> {
    q_boundary_with(sol, cluster, ps, v, FluxMethod::Variational)
}

pub fn q_boundary_with(
    sol: &SpectralSolution,
    cluster: Range<usize>,
    ps: &ProblemSpec,
    v: &VectorField,
    method: FluxMethod,
) -> Result<HadamardMatrix, HadamardError> {
    check_cluster(sol, &cluster)?;
    check_solution(sol, ps)?;
    let basis = cluster_basis(sol, &cluster);
    let q = q_boundary_in_basis(ps, &basis, sol.cluster_mean(&cluster), v, method)?;
    Ok(HadamardMatrix::new(q, cluster, HadamardKind::Boundary))
}

/// `Q_ij = −∫_∂ ⟨V,ν⟩ ∂_νφ_i ∂_νφ_j e^{-η}`.
pub fn q_boundary_in_basis(
    ps: &ProblemSpec,
    basis: &[Vec<f64>],
    lambda: f64,
    v: &VectorField,
    method: FluxMethod,
) -> Result<DMatrix<f64>, HadamardError> {
    let mesh = &ps.mesh;
    if v.dim() != mesh.dim() {
        return Err(HadamardError::DimensionMismatch {
            field: v.dim(),
            mesh: mesh.dim(),
        });
    }
    if ps.metric.base().is_some() || (ps.metric.t() != 0.0 && ps.metric.perturbation().is_some()) {
        return Err(HadamardError::CurvedMetric);
    }
    let rec = FluxRecovery::new(ps, method)?;
    let fluxes = basis
        .iter()
        .map(|u| rec.quadrature_values(u, lambda))
        .collect::<Result<Vec<_>, _>>()?;
    let m = basis.len();
    let mut q = DMatrix::zeros(m, m);
    for (f, facet) in mesh.boundary_facets().iter().enumerate() {
        for (k, p) in weighted_facet_measure(mesh, f, &ps.weight)?.iter().enumerate() {
            let vn = v.eval(p.point)?.dot(&facet.normal);
            if vn == 0.0 {
                continue;
            }
            for i in 0..m {
                for j in i..m {
                    q[(i, j)] -= p.weight * vn * fluxes[i][f][k] * fluxes[j][f][k];
                }
            }
        }
    }
    Ok(symmetric_from_upper(q))
}

/// `RᵀQR`-covariance helper: rotates a cluster basis by an orthogonal `r`.
pub fn rotate_basis(basis: &[Vec<f64>], r: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let m = basis.len();
    (0..m)
        .map(|j| {
            let mut out = vec![0.0; basis[0].len()];
            for i in 0..m {
                for (o, b) in out.iter_mut().zip(&basis[i]) {
                    *o += r[(i, j)] * b;
                }
            }
            out
        })
        .collect()
}

/// `max|a − b| / max(max|a|, max|b|)`.
pub fn relative_max_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(f64::MIN_POSITIVE);
    (a - b).amax() / scale
}
