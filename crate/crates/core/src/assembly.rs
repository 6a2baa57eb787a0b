//! Weighted P1 stiffness and mass matrices for the Dirichlet problem and
//! their exact derivatives along a metric/weight direction `(H, η̇)`.

use std::fmt::Write as _;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fieldexpr::TensorField;
use crate::geometry::{
    weighted_cell_measure, weighted_facet_measure, GeometryError, MetricSpec, WeightSpec,
};
use crate::mesh::Mesh;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssemblyError {
    #[error("mesh dimension {mesh} does not match field dimension {fields}")]
    DimensionMismatch { mesh: usize, fields: usize },
    #[error("mesh has no interior vertices ({vertices} vertices, all on the boundary)")]
    EmptyInterior { vertices: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub mesh: Mesh,
    pub metric: MetricSpec,
    pub weight: WeightSpec,
}

impl ProblemSpec {
    pub fn new(mesh: Mesh, metric: MetricSpec, weight: WeightSpec) -> Result<Self, AssemblyError> {
        if mesh.dim() != metric.dim() {
            return Err(AssemblyError::DimensionMismatch {
                mesh: mesh.dim(),
                fields: metric.dim(),
            });
        }
        Ok(Self {
            mesh,
            metric,
            weight,
        })
    }

    pub fn flat(mesh: Mesh, weight: WeightSpec) -> Self {
        let metric = MetricSpec::flat(mesh.dim());
        Self {
            mesh,
            metric,
            weight,
        }
    }

    /// Same problem at parameter `t` of `g + tH`, `η + tη̇`.
    pub fn at(&self, t: f64) -> Self {
        Self {
            mesh: self.mesh.clone(),
            metric: self.metric.at(t),
            weight: self.weight.clone(),
        }
    }

    pub fn with_mesh(&self, mesh: Mesh) -> Self {
        Self {
            mesh,
            metric: self.metric.clone(),
            weight: self.weight.clone(),
        }
    }

    /// SHA-256 over the mesh text and the printed fields.
    pub fn fingerprint(&self) -> String {
        let mut s = self.mesh.to_text();
        let tensor = |s: &mut String, name: &str, t: Option<&TensorField>| {
            let _ = write!(s, "{name}:");
            if let Some(t) = t {
                for i in 0..t.dim() {
                    for j in 0..t.dim() {
                        let _ = write!(s, "[{}]", t.entry(i, j));
                    }
                }
            }
            s.push('\n');
        };
        tensor(&mut s, "g", self.metric.base());
        tensor(&mut s, "H", self.metric.perturbation());
        let _ = writeln!(s, "t:{:?}", self.metric.t());
        let _ = writeln!(s, "eta:{}", self.weight.eta.expr());
        let _ = writeln!(s, "eta_dot:{}", self.weight.eta_dot.expr());
        let digest = Sha256::digest(s.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Interior (free) vertices and their position in the reduced system.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    interior: Vec<usize>,
    dof_of: Vec<Option<usize>>,
}

impl DofMap {
    pub fn from_mesh(mesh: &Mesh) -> Self {
        let interior: Vec<usize> = (0..mesh.num_vertices())
            .filter(|&v| !mesh.is_boundary_vertex(v))
            .collect();
        let mut dof_of = vec![None; mesh.num_vertices()];
        for (d, &v) in interior.iter().enumerate() {
            dof_of[v] = Some(d);
        }
        Self { interior, dof_of }
    }

    pub fn num_dofs(&self) -> usize {
        self.interior.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.dof_of.len()
    }

    pub fn global(&self, dof: usize) -> usize {
        self.interior[dof]
    }

    pub fn dof(&self, vertex: usize) -> Option<usize> {
        self.dof_of[vertex]
    }

    pub fn interior_vertices(&self) -> &[usize] {
        &self.interior
    }

    /// Extends a reduced vector by zero on boundary vertices.
    pub fn expand(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.num_dofs());
        let mut g = vec![0.0; self.num_vertices()];
        for (d, &v) in self.interior.iter().enumerate() {
            g[v] = u[d];
        }
        g
    }

    pub fn restrict(&self, g: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&v| g[v]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct AssembledPair {
    pub k: CsrMatrix,
    pub m: CsrMatrix,
    pub dofs: DofMap,
    pub fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct AssembledDerivativePair {
    pub k_prime: CsrMatrix,
    pub m_prime: CsrMatrix,
    pub dofs: DofMap,
}

/// Matrices over every vertex, before the Dirichlet rows are removed.
#[derive(Debug, Clone)]
pub struct FullPair {
    pub k: CsrMatrix,
    pub m: CsrMatrix,
}

type Local = [[f64; 3]; 3];

fn scatter(
    mesh: &Mesh,
    locals: Vec<(Local, Local)>,
) -> (CsrMatrix, CsrMatrix) {
    let nloc = mesh.dim() + 1;
    let mut tk = Vec::with_capacity(locals.len() * nloc * nloc);
    let mut tm = Vec::with_capacity(locals.len() * nloc * nloc);
    for (c, (ke, me)) in locals.iter().enumerate() {
        let verts = mesh.cell(c);
        for a in 0..nloc {
            for b in 0..nloc {
                tk.push((verts[a], verts[b], ke[a][b]));
                tm.push((verts[a], verts[b], me[a][b]));
            }
        }
    }
    let n = mesh.num_vertices();
    (CsrMatrix::from_triplets(n, tk), CsrMatrix::from_triplets(n, tm))
}

fn assemble_cells<F>(mesh: &Mesh, element: F) -> Result<(CsrMatrix, CsrMatrix), AssemblyError>
where
    F: Fn(usize) -> Result<(Local, Local), GeometryError> + Sync,
{
    let locals = (0..mesh.num_cells())
        .into_par_iter()
        .map(&element)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scatter(mesh, locals))
}

fn value_element(ps: &ProblemSpec, c: usize) -> Result<(Local, Local), GeometryError> {
    let nloc = ps.mesh.dim() + 1;
    let grads = ps.mesh.basis_gradients(c);
    let mut ke = [[0.0; 3]; 3];
    let mut me = [[0.0; 3]; 3];
    for q in weighted_cell_measure(&ps.mesh, c, &ps.metric, &ps.weight)? {
        for a in 0..nloc {
            for b in a..nloc {
                let k = q.weight * q.frame.cometric(&grads[a], &grads[b]);
                let m = q.weight * q.basis[a] * q.basis[b];
                ke[a][b] += k;
                me[a][b] += m;
            }
        }
    }
    symmetrize(&mut ke, nloc);
    symmetrize(&mut me, nloc);
    Ok((ke, me))
}

fn derivative_element(ps: &ProblemSpec, c: usize) -> Result<(Local, Local), GeometryError> {
    let nloc = ps.mesh.dim() + 1;
    let grads = ps.mesh.basis_gradients(c);
    let mut ke = [[0.0; 3]; 3];
    let mut me = [[0.0; 3]; 3];
    for q in weighted_cell_measure(&ps.mesh, c, &ps.metric, &ps.weight)? {
        let f = &q.frame;
        let rate = 0.5 * f.h - f.eta_dot_val;
        for a in 0..nloc {
            for b in a..nloc {
                let k = -f.h_of_gradients(&grads[a], &grads[b])
                    + rate * f.cometric(&grads[a], &grads[b]);
                ke[a][b] += q.weight * k;
                me[a][b] += q.weight * rate * q.basis[a] * q.basis[b];
            }
        }
    }
    symmetrize(&mut ke, nloc);
    symmetrize(&mut me, nloc);
    Ok((ke, me))
}

fn symmetrize(a: &mut Local, nloc: usize) {
    for i in 0..nloc {
        for j in 0..i {
            a[i][j] = a[j][i];
        }
    }
}

fn reduce(ps: &ProblemSpec, k: CsrMatrix, m: CsrMatrix) -> Result<(CsrMatrix, CsrMatrix, DofMap), AssemblyError> {
    let dofs = DofMap::from_mesh(&ps.mesh);
    if dofs.num_dofs() == 0 {
        return Err(AssemblyError::EmptyInterior {
            vertices: ps.mesh.num_vertices(),
        });
    }
    let keep = dofs.interior_vertices();
    Ok((k.principal_submatrix(keep), m.principal_submatrix(keep), dofs))
}

pub fn assemble_full(ps: &ProblemSpec) -> Result<FullPair, AssemblyError> {
    let (k, m) = assemble_cells(&ps.mesh, |c| value_element(ps, c))?;
    Ok(FullPair { k, m })
}

pub fn assemble(ps: &ProblemSpec) -> Result<AssembledPair, AssemblyError> {
    let FullPair { k, m } = assemble_full(ps)?;
    let (k, m, dofs) = reduce(ps, k, m)?;
    Ok(AssembledPair {
        k,
        m,
        dofs,
        fingerprint: ps.fingerprint(),
    })
}

/// Exact derivatives of `K`, `M` at the parameter stored in `ps.metric`.
pub fn assemble_derivative(ps: &ProblemSpec) -> Result<AssembledDerivativePair, AssemblyError> {
    let (k, m) = assemble_cells(&ps.mesh, |c| derivative_element(ps, c))?;
    let (k_prime, m_prime, dofs) = reduce(ps, k, m)?;
    Ok(AssembledDerivativePair {
        k_prime,
        m_prime,
        dofs,
    })
}

/// Weighted boundary mass over all vertices, `B_ab = ∫_∂ ψ_a ψ_b e^{-η}`.
/// Rows of interior vertices are empty.
pub fn assemble_boundary_mass(ps: &ProblemSpec) -> Result<CsrMatrix, AssemblyError> {
    let mesh = &ps.mesh;
    let mut t = Vec::new();
    for f in 0..mesh.boundary_facets().len() {
        let verts = mesh.boundary_facets()[f].vertices;
        let nloc = if mesh.dim() == 1 { 1 } else { 2 };
        for q in weighted_facet_measure(mesh, f, &ps.weight)? {
            for a in 0..nloc {
                for b in 0..nloc {
                    t.push((verts[a], verts[b], q.weight * q.basis[a] * q.basis[b]));
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(mesh.num_vertices(), t))
}
