//! Pointwise Riemannian quantities on a flat chart: the metric family
//! `g(t) = g + t·H`, the weight family `η(t) = η + t·η̇`, and the weighted
//! quadrature rules used by assembly and by the eigenvalue variation formulas.
//!
//! One-dimensional quantities are stored in the top-left entry of 2×2
//! matrices with the remaining entries zero; the stored "inverse" is the
//! pseudo-inverse, so traces and contractions need no dimension branches.

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::fieldexpr::{EvalError, Point, ScalarField, TensorField};
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("metric is not positive definite at ({x}, {y}): eigenvalues {eigenvalues:?}")]
    NotPositiveDefinite {
        x: f64,
        y: f64,
        eigenvalues: Vec<f64>,
    },
    #[error("field dimension {field} does not match dimension {expected}")]
    DimensionMismatch { field: usize, expected: usize },
    #[error("metric fields must be symmetric")]
    Asymmetric,
    #[error(transparent)]
    Field(#[from] EvalError),
}

/// `g(t) = base + t·H`. A missing base is the flat metric; a missing
/// perturbation is `H = 0`.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    dim: usize,
    base: Option<TensorField>,
    perturbation: Option<TensorField>,
    t: f64,
}

impl MetricSpec {
    pub fn flat(dim: usize) -> Self {
        Self {
            dim,
            base: None,
            perturbation: None,
            t: 0.0,
        }
    }

    pub fn with_base(mut self, base: TensorField) -> Result<Self, GeometryError> {
        check_tensor(&base, self.dim)?;
        self.base = (!base.is_identity()).then_some(base);
        Ok(self)
    }

    pub fn with_perturbation(mut self, h: TensorField) -> Result<Self, GeometryError> {
        check_tensor(&h, self.dim)?;
        self.perturbation = Some(h);
        Ok(self)
    }

    pub fn at(&self, t: f64) -> Self {
        Self { t, ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn base(&self) -> Option<&TensorField> {
        self.base.as_ref()
    }

    pub fn perturbation(&self) -> Option<&TensorField> {
        self.perturbation.as_ref()
    }

    pub fn is_flat(&self) -> bool {
        self.base.is_none() && (self.t == 0.0 || self.perturbation.as_ref().is_none_or(TensorField::is_zero))
    }

    pub fn base_at(&self, p: Point) -> Result<Matrix2<f64>, GeometryError> {
        Ok(match &self.base {
            Some(b) => b.eval(p)?,
            None => padded_identity(self.dim),
        })
    }

    pub fn perturbation_at(&self, p: Point) -> Result<Matrix2<f64>, GeometryError> {
        Ok(match &self.perturbation {
            Some(h) => h.eval(p)?,
            None => Matrix2::zeros(),
        })
    }
}

fn check_tensor(t: &TensorField, dim: usize) -> Result<(), GeometryError> {
    if t.dim() != dim {
        return Err(GeometryError::DimensionMismatch {
            field: t.dim(),
            expected: dim,
        });
    }
    if !t.is_symmetric() {
        return Err(GeometryError::Asymmetric);
    }
    Ok(())
}

fn padded_identity(dim: usize) -> Matrix2<f64> {
    if dim == 1 {
        Matrix2::new(1.0, 0.0, 0.0, 0.0)
    } else {
        Matrix2::identity()
    }
}

/// Weight `η` and its velocity `η̇`; the weight at parameter `t` is `η + t·η̇`.
#[derive(Debug, Clone)]
pub struct WeightSpec {
    pub eta: ScalarField,
    pub eta_dot: ScalarField,
}

impl WeightSpec {
    pub fn new(eta: ScalarField, eta_dot: ScalarField) -> Self {
        Self { eta, eta_dot }
    }

    pub fn unweighted() -> Self {
        Self::new(ScalarField::zero(), ScalarField::zero())
    }

    pub fn from_eta(eta: ScalarField) -> Self {
        Self::new(eta, ScalarField::zero())
    }
}

/// Everything the integrands need at one quadrature point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFrame {
    pub dim: usize,
    pub point: Point,
    pub g: Matrix2<f64>,
    pub g_inv: Matrix2<f64>,
    pub sqrt_det_g: f64,
    /// Metric velocity `H`.
    pub h_tensor: Matrix2<f64>,
    /// `h = tr(g⁻¹H)`.
    pub h: f64,
    pub eta_val: f64,
    pub grad_eta: Vector2<f64>,
    pub eta_dot_val: f64,
    pub grad_eta_dot: Vector2<f64>,
}

impl PointFrame {
    /// `g(u, v)` for covectors given in coordinates, i.e. `uᵀ g⁻¹ v`.
    pub fn cometric(&self, u: &Vector2<f64>, v: &Vector2<f64>) -> f64 {
        u.dot(&(self.g_inv * v))
    }

    /// `H(∇u, ∇v) = uᵀ g⁻¹ H g⁻¹ v` for differentials `u`, `v`.
    pub fn h_of_gradients(&self, u: &Vector2<f64>, v: &Vector2<f64>) -> f64 {
        (self.g_inv * u).dot(&(self.h_tensor * (self.g_inv * v)))
    }
}

pub fn frame_at(
    metric: &MetricSpec,
    weight: &WeightSpec,
    p: Point,
) -> Result<PointFrame, GeometryError> {
    let dim = metric.dim;
    let h_tensor = metric.perturbation_at(p)?;
    let g = metric.base_at(p)? + h_tensor * metric.t;
    let (g_inv, sqrt_det_g) = if dim == 1 {
        if !(g[(0, 0)] > 0.0) {
            return Err(GeometryError::NotPositiveDefinite {
                x: p[0],
                y: p[1],
                eigenvalues: vec![g[(0, 0)]],
            });
        }
        (
            Matrix2::new(1.0 / g[(0, 0)], 0.0, 0.0, 0.0),
            g[(0, 0)].sqrt(),
        )
    } else {
        let det = g.determinant();
        if !(g[(0, 0)] > 0.0 && det > 0.0) {
            let eig = g.symmetric_eigenvalues();
            let mut eigenvalues = vec![eig[0], eig[1]];
            eigenvalues.sort_by(f64::total_cmp);
            return Err(GeometryError::NotPositiveDefinite {
                x: p[0],
                y: p[1],
                eigenvalues,
            });
        }
        let inv = Matrix2::new(g[(1, 1)], -g[(0, 1)], -g[(1, 0)], g[(0, 0)]) / det;
        (inv, det.sqrt())
    };
    let mask = |v: Vector2<f64>| if dim == 1 { Vector2::new(v[0], 0.0) } else { v };
    let t = metric.t;
    let eta_val = weight.eta.value(p)? + t * weight.eta_dot.value(p)?;
    let grad_eta = mask(weight.eta.gradient(p)? + weight.eta_dot.gradient(p)? * t);
    Ok(PointFrame {
        dim,
        point: p,
        g,
        g_inv,
        sqrt_det_g,
        h: (g_inv * h_tensor).trace(),
        h_tensor,
        eta_val,
        grad_eta,
        eta_dot_val: weight.eta_dot.value(p)?,
        grad_eta_dot: mask(weight.eta_dot.gradient(p)?),
    })
}

/// `⟨A, B⟩ = Σ g^{ik} g^{jl} A_ij B_kl`.
pub fn tensor_inner(a: &Matrix2<f64>, b: &Matrix2<f64>, frame: &PointFrame) -> f64 {
    (frame.g_inv * a * frame.g_inv).component_mul(b).sum()
}

#[derive(Debug, Clone)]
pub struct QuadPoint {
    pub point: Point,
    /// Values of the cell's hat functions, in local vertex order.
    pub basis: [f64; 3],
    /// Weighted measure `e^{-η} √det g · dx` carried by this point.
    pub weight: f64,
    pub frame: PointFrame,
}

const GAUSS2: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Quadratic-exact rule on a cell: two Gauss points on segments, the three
/// edge midpoints on triangles.
pub fn weighted_cell_measure(
    mesh: &Mesh,
    cell: usize,
    metric: &MetricSpec,
    weight: &WeightSpec,
) -> Result<Vec<QuadPoint>, GeometryError> {
    let verts = mesh.cell(cell);
    let coords: Vec<Point> = verts.iter().map(|&v| mesh.vertices()[v]).collect();
    let volume = mesh.signed_volume(cell);
    let rule: Vec<([f64; 3], f64)> = if mesh.dim() == 1 {
        GAUSS2
            .iter()
            .map(|&s| ([1.0 - s, s, 0.0], 0.5 * volume))
            .collect()
    } else {
        let w = volume / 3.0;
        vec![
            ([0.5, 0.5, 0.0], w),
            ([0.0, 0.5, 0.5], w),
            ([0.5, 0.0, 0.5], w),
        ]
    };
    rule.into_iter()
        .map(|(basis, w)| {
            let mut p = [0.0; 2];
            for (i, c) in coords.iter().enumerate() {
                p[0] += basis[i] * c[0];
                p[1] += basis[i] * c[1];
            }
            let frame = frame_at(metric, weight, p)?;
            Ok(QuadPoint {
                point: p,
                basis,
                weight: w * (-frame.eta_val).exp() * frame.sqrt_det_g,
                frame,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FacetQuadPoint {
    pub point: Point,
    /// Values of the facet's vertex hat functions, in facet vertex order.
    pub basis: [f64; 2],
    /// Boundary measure `e^{-η} dν̃` (Euclidean arc length).
    pub weight: f64,
    pub eta_val: f64,
}

/// Two-point Gauss rule on a boundary edge (a single point in 1D) for the
/// weighted boundary measure of the flat chart.
pub fn weighted_facet_measure(
    mesh: &Mesh,
    facet: usize,
    weight: &WeightSpec,
) -> Result<Vec<FacetQuadPoint>, GeometryError> {
    let f = &mesh.boundary_facets()[facet];
    let pa = mesh.vertices()[f.vertices[0]];
    if mesh.dim() == 1 {
        let eta = weight.eta.value(pa)?;
        return Ok(vec![FacetQuadPoint {
            point: pa,
            basis: [1.0, 0.0],
            weight: (-eta).exp(),
            eta_val: eta,
        }]);
    }
    let pb = mesh.vertices()[f.vertices[1]];
    GAUSS2
        .iter()
        .map(|&s| {
            let p = [
                (1.0 - s) * pa[0] + s * pb[0],
                (1.0 - s) * pa[1] + s * pb[1],
            ];
            let eta = weight.eta.value(p)?;
            Ok(FacetQuadPoint {
                point: p,
                basis: [1.0 - s, s],
                weight: 0.5 * f.measure * (-eta).exp(),
                eta_val: eta,
            })
        })
        .collect()
}
