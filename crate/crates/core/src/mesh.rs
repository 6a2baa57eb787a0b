//! Simplicial meshes of intervals, squares, disks and annuli.
//!
//! Cells are positively oriented segments (1D) or triangles (2D). Boundary
//! facets are recomputed from the cell list whenever a mesh is built, so
//! generated, refined, deformed and imported meshes share one code path.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::Vector2;
use thiserror::Error;

use crate::fieldexpr::{EvalError, Point, VectorField};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("resolution {n} is too small (need at least {min})")]
    ResolutionTooSmall { n: usize, min: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("cell {cell} inverts under the deformation; largest admissible |t| is {max_t:.6e}")]
    Inverted { cell: usize, max_t: f64 },
    #[error("vector field dimension {field} does not match mesh dimension {mesh}")]
    DimensionMismatch { field: usize, mesh: usize },
    #[error("cell {cell} has non-positive volume {volume:e}")]
    NonPositiveCell { cell: usize, volume: f64 },
    #[error("facet shared by {count} cells")]
    NonManifold { count: usize },
    #[error("vertex index {index} out of range ({nv} vertices)")]
    VertexIndex { index: usize, nv: usize },
    #[error("mesh file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Field(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainKind {
    Interval { a: f64, b: f64 },
    Square { side: f64 },
    Disk { radius: f64 },
    Annulus { r_in: f64, r_out: f64 },
}

/// Domain plus resolution. For intervals and squares `n` is the number of
/// cells per side; for disks and annuli it is the number of segments on the
/// outer circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub n: usize,
}

impl DomainSpec {
    pub fn interval(a: f64, b: f64, n: usize) -> Self {
        Self {
            kind: DomainKind::Interval { a, b },
            n,
        }
    }

    pub fn square(side: f64, n: usize) -> Self {
        Self {
            kind: DomainKind::Square { side },
            n,
        }
    }

    pub fn disk(radius: f64, n: usize) -> Self {
        Self {
            kind: DomainKind::Disk { radius },
            n,
        }
    }

    pub fn annulus(r_in: f64, r_out: f64, n: usize) -> Self {
        Self {
            kind: DomainKind::Annulus { r_in, r_out },
            n,
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DomainKind::Interval { .. } => 1,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.n < 2 {
            return Err(MeshError::ResolutionTooSmall { n: self.n, min: 2 });
        }
        let bad = |msg: String| Err(MeshError::DegenerateGeometry(msg));
        match self.kind {
            DomainKind::Interval { a, b } if !(a < b) || !a.is_finite() || !b.is_finite() => {
                bad(format!("interval needs a < b, got ({a}, {b})"))
            }
            DomainKind::Square { side } if !(side > 0.0) || !side.is_finite() => {
                bad(format!("square side must be positive, got {side}"))
            }
            DomainKind::Disk { radius } if !(radius > 0.0) || !radius.is_finite() => {
                bad(format!("disk radius must be positive, got {radius}"))
            }
            DomainKind::Annulus { r_in, r_out }
                if !(r_in > 0.0) || !(r_in < r_out) || !r_out.is_finite() =>
            {
                bad(format!("annulus needs 0 < r_in < r_out, got ({r_in}, {r_out})"))
            }
            DomainKind::Disk { .. } | DomainKind::Annulus { .. } if self.n < 3 => {
                bad(format!("a circle needs at least 3 segments, got {}", self.n))
            }
            _ => Ok(()),
        }
    }
}

/// Curves the boundary vertices are known to lie on.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryShape {
    Polygonal,
    Circles { center: Point, radii: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFacet {
    /// Facet vertices in boundary orientation; 1D facets repeat the vertex.
    pub vertices: [usize; 2],
    pub cell: usize,
    /// Outward unit normal.
    pub normal: Vector2<f64>,
    /// Length of the facet (1 for point facets).
    pub measure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    vertices: Vec<Point>,
    cells: Vec<[usize; 3]>,
    boundary_facets: Vec<BoundaryFacet>,
    on_boundary: Vec<bool>,
    shape: BoundaryShape,
}

impl Mesh {
    /// Builds a mesh from raw connectivity, checking orientation and
    /// recomputing boundary facets. 1D cells use the first two slots.
    pub fn new(
        dim: usize,
        vertices: Vec<Point>,
        cells: Vec<[usize; 3]>,
        shape: BoundaryShape,
    ) -> Result<Self, MeshError> {
        if !(1..=2).contains(&dim) {
            return Err(MeshError::DegenerateGeometry(format!("dimension {dim}")));
        }
        let nv = vertices.len();
        for cell in &cells {
            for &v in &cell[..=dim] {
                if v >= nv {
                    return Err(MeshError::VertexIndex { index: v, nv });
                }
            }
        }
        let mut mesh = Self {
            dim,
            vertices,
            cells,
            boundary_facets: Vec::new(),
            on_boundary: vec![false; nv],
            shape,
        };
        for c in 0..mesh.cells.len() {
            let volume = mesh.signed_volume(c);
            if !(volume > 0.0) {
                return Err(MeshError::NonPositiveCell { cell: c, volume });
            }
        }
        mesh.build_boundary()?;
        Ok(mesh)
    }

    fn facet_key(&self, c: usize, local: usize) -> (usize, usize) {
        let cell = &self.cells[c];
        if self.dim == 1 {
            let v = cell[local];
            (v, v)
        } else {
            let a = cell[local];
            let b = cell[(local + 1) % 3];
            (a.min(b), a.max(b))
        }
    }

    fn build_boundary(&mut self) -> Result<(), MeshError> {
        let nlocal = self.dim + 1;
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for c in 0..self.cells.len() {
            for l in 0..nlocal {
                *counts.entry(self.facet_key(c, l)).or_default() += 1;
            }
        }
        if let Some(&count) = counts.values().find(|&&n| n > 2) {
            return Err(MeshError::NonManifold { count });
        }
        self.boundary_facets.clear();
        self.on_boundary.iter_mut().for_each(|b| *b = false);
        for c in 0..self.cells.len() {
            for l in 0..nlocal {
                if counts[&self.facet_key(c, l)] != 1 {
                    continue;
                }
                let cell = self.cells[c];
                let facet = if self.dim == 1 {
                    let v = cell[l];
                    let sign = if l == 0 { -1.0 } else { 1.0 };
                    BoundaryFacet {
                        vertices: [v, v],
                        cell: c,
                        normal: Vector2::new(sign, 0.0),
                        measure: 1.0,
                    }
                } else {
                    // CCW edge (p, q): outward normal is the tangent turned clockwise
                    let p = cell[l];
                    let q = cell[(l + 1) % 3];
                    let d = Vector2::new(
                        self.vertices[q][0] - self.vertices[p][0],
                        self.vertices[q][1] - self.vertices[p][1],
                    );
                    let len = d.norm();
                    BoundaryFacet {
                        vertices: [p, q],
                        cell: c,
                        normal: Vector2::new(d[1], -d[0]) / len,
                        measure: len,
                    }
                };
                for &v in &facet.vertices {
                    self.on_boundary[v] = true;
                }
                self.boundary_facets.push(facet);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Vertex ids of cell `c` (`dim + 1` of them).
    pub fn cell(&self, c: usize) -> &[usize] {
        &self.cells[c][..=self.dim]
    }

    pub fn boundary_facets(&self) -> &[BoundaryFacet] {
        &self.boundary_facets
    }

    pub fn facet_vertices(&self, f: usize) -> &[usize] {
        &self.boundary_facets[f].vertices[..self.dim]
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.on_boundary[v]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.on_boundary
    }

    pub fn shape(&self) -> &BoundaryShape {
        &self.shape
    }

    pub fn signed_volume(&self, c: usize) -> f64 {
        let cell = &self.cells[c];
        let p = |i: usize| self.vertices[cell[i]];
        if self.dim == 1 {
            p(1)[0] - p(0)[0]
        } else {
            let (a, b, cc) = (p(0), p(1), p(2));
            0.5 * ((b[0] - a[0]) * (cc[1] - a[1]) - (cc[0] - a[0]) * (b[1] - a[1]))
        }
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.cells.len()).map(|c| self.signed_volume(c)).sum()
    }

    pub fn cell_centroid(&self, c: usize) -> Point {
        let verts = self.cell(c);
        let k = verts.len() as f64;
        let mut s = [0.0; 2];
        for &v in verts {
            s[0] += self.vertices[v][0];
            s[1] += self.vertices[v][1];
        }
        [s[0] / k, s[1] / k]
    }

    /// Gradients of the P1 hat functions of cell `c`, in local vertex order.
    pub fn basis_gradients(&self, c: usize) -> [Vector2<f64>; 3] {
        let cell = &self.cells[c];
        let p = |i: usize| self.vertices[cell[i]];
        if self.dim == 1 {
            let h = p(1)[0] - p(0)[0];
            [
                Vector2::new(-1.0 / h, 0.0),
                Vector2::new(1.0 / h, 0.0),
                Vector2::zeros(),
            ]
        } else {
            let (a, b, cc) = (p(0), p(1), p(2));
            let two_area = (b[0] - a[0]) * (cc[1] - a[1]) - (cc[0] - a[0]) * (b[1] - a[1]);
            // gradient of λ_i is the rotated opposite edge over twice the area
            let g = |q: Point, r: Point| Vector2::new(q[1] - r[1], r[0] - q[0]) / two_area;
            [g(b, cc), g(cc, a), g(a, b)]
        }
    }

    /// Number of distinct edges (2D) or cells (1D).
    pub fn num_edges(&self) -> usize {
        if self.dim == 1 {
            return self.cells.len();
        }
        let mut edges = std::collections::HashSet::new();
        for c in 0..self.cells.len() {
            for l in 0..3 {
                edges.insert(self.facet_key(c, l));
            }
        }
        edges.len()
    }

    /// V − E + F for 2D meshes, V − E for 1D meshes.
    pub fn euler_characteristic(&self) -> i64 {
        if self.dim == 1 {
            self.vertices.len() as i64 - self.cells.len() as i64
        } else {
            self.vertices.len() as i64 - self.num_edges() as i64 + self.cells.len() as i64
        }
    }

    /// Checks orientation, facet topology and normals.
    pub fn check_invariants(&self) -> Result<(), String> {
        for c in 0..self.cells.len() {
            let v = self.signed_volume(c);
            if !(v > 0.0) {
                return Err(format!("cell {c} has volume {v}"));
            }
        }
        let nlocal = self.dim + 1;
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for c in 0..self.cells.len() {
            for l in 0..nlocal {
                *counts.entry(self.facet_key(c, l)).or_default() += 1;
            }
        }
        let boundary = counts.values().filter(|&&n| n == 1).count();
        if boundary != self.boundary_facets.len() {
            return Err(format!(
                "{} single-cell facets but {} boundary facets",
                boundary,
                self.boundary_facets.len()
            ));
        }
        if counts.values().any(|&n| n > 2) {
            return Err("facet shared by more than two cells".into());
        }
        for (i, f) in self.boundary_facets.iter().enumerate() {
            if (f.normal.norm() - 1.0).abs() > 1e-12 {
                return Err(format!("facet {i} normal has norm {}", f.normal.norm()));
            }
            let verts = &f.vertices[..self.dim];
            let k = verts.len() as f64;
            let fc = verts.iter().fold([0.0, 0.0], |acc, &v| {
                [acc[0] + self.vertices[v][0] / k, acc[1] + self.vertices[v][1] / k]
            });
            let cc = self.cell_centroid(f.cell);
            let out = f.normal[0] * (fc[0] - cc[0]) + f.normal[1] * (fc[1] - cc[1]);
            if !(out > 0.0) {
                return Err(format!("facet {i} normal points inward"));
            }
        }
        Ok(())
    }

    /// Uniform refinement: bisection in 1D, red refinement in 2D. New
    /// vertices on circular boundaries are projected back onto the circle.
    pub fn refine(&self) -> Mesh {
        let mut vertices = self.vertices.clone();
        let mut cells = Vec::with_capacity(self.cells.len() * (1 << self.dim));
        if self.dim == 1 {
            for cell in &self.cells {
                let (a, b) = (cell[0], cell[1]);
                let m = vertices.len();
                vertices.push([0.5 * (self.vertices[a][0] + self.vertices[b][0]), 0.0]);
                cells.push([a, m, m]);
                cells.push([m, b, b]);
            }
        } else {
            let boundary_edges: std::collections::HashSet<(usize, usize)> = self
                .boundary_facets
                .iter()
                .map(|f| {
                    let [p, q] = f.vertices;
                    (p.min(q), p.max(q))
                })
                .collect();
            let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
            let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point>| -> usize {
                let key = (a.min(b), a.max(b));
                if let Some(&m) = midpoint.get(&key) {
                    return m;
                }
                let pa = vertices[a];
                let pb = vertices[b];
                let mut p = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
                if boundary_edges.contains(&key) {
                    p = self.project_to_boundary(p, pa, pb);
                }
                vertices.push(p);
                midpoint.insert(key, vertices.len() - 1);
                vertices.len() - 1
            };
            for cell in &self.cells {
                let [a, b, c] = *cell;
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                cells.push([a, ab, ca]);
                cells.push([ab, b, bc]);
                cells.push([ca, bc, c]);
                cells.push([ab, bc, ca]);
            }
        }
        Mesh::new(self.dim, vertices, cells, self.shape.clone())
            .expect("refinement of a valid mesh is valid")
    }

    fn project_to_boundary(&self, p: Point, pa: Point, pb: Point) -> Point {
        let BoundaryShape::Circles { center, radii } = &self.shape else {
            return p;
        };
        let radius_of = |q: Point| ((q[0] - center[0]).powi(2) + (q[1] - center[1]).powi(2)).sqrt();
        let target = 0.5 * (radius_of(pa) + radius_of(pb));
        let Some(&r) = radii
            .iter()
            .min_by(|x, y| (*x - target).abs().total_cmp(&(*y - target).abs()))
        else {
            return p;
        };
        let d = [p[0] - center[0], p[1] - center[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        [center[0] + r * d[0] / len, center[1] + r * d[1] / len]
    }

    /// Moves every vertex to `x + t·V(x)`. Connectivity is unchanged.
    pub fn deform(&self, field: &VectorField, t: f64) -> Result<Mesh, MeshError> {
        if field.dim() != self.dim {
            return Err(MeshError::DimensionMismatch {
                field: field.dim(),
                mesh: self.dim,
            });
        }
        if t == 0.0 {
            return Ok(self.clone());
        }
        let velocity: Vec<Vector2<f64>> = self
            .vertices
            .iter()
            .map(|&p| field.eval(p))
            .collect::<Result<_, _>>()?;
        let moved = |s: f64| -> Vec<Point> {
            self.vertices
                .iter()
                .zip(&velocity)
                .map(|(p, v)| [p[0] + s * v[0], p[1] + s * v[1]])
                .collect()
        };
        let first_inverted = |verts: &[Point]| -> Option<usize> {
            (0..self.cells.len()).find(|&c| !(signed_volume_of(self.dim, verts, &self.cells[c]) > 0.0))
        };
        let vertices = moved(t);
        if let Some(cell) = first_inverted(&vertices) {
            let (mut lo, mut hi) = (0.0, t.abs());
            for _ in 0..60 {
                let s = 0.5 * (lo + hi);
                if first_inverted(&moved(s * t.signum())).is_none() {
                    lo = s;
                } else {
                    hi = s;
                }
            }
            return Err(MeshError::Inverted { cell, max_t: lo });
        }
        let shape = if field.is_zero() {
            self.shape.clone()
        } else {
            BoundaryShape::Polygonal
        };
        Mesh::new(self.dim, vertices, self.cells.clone(), shape)
    }

    /// Plain-text export: header `dim nv nc nbf`, vertex coordinates, cell
    /// vertex ids, then boundary facets as vertex ids followed by the cell id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.dim,
            self.vertices.len(),
            self.cells.len(),
            self.boundary_facets.len()
        );
        for p in &self.vertices {
            if self.dim == 1 {
                let _ = writeln!(out, "{:.16e}", p[0]);
            } else {
                let _ = writeln!(out, "{:.16e} {:.16e}", p[0], p[1]);
            }
        }
        for c in 0..self.cells.len() {
            let ids: Vec<String> = self.cell(c).iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}", ids.join(" "));
        }
        for f in 0..self.boundary_facets.len() {
            let mut ids: Vec<String> = self.facet_vertices(f).iter().map(usize::to_string).collect();
            ids.push(self.boundary_facets[f].cell.to_string());
            let _ = writeln!(out, "{}", ids.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Mesh, MeshError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let fmt_err = |line: usize, msg: &str| MeshError::Format {
            line,
            msg: msg.to_string(),
        };
        let (hl, header) = lines.next().ok_or_else(|| fmt_err(1, "missing header"))?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| fmt_err(hl, "header must be `dim nv nc nbf`"))?;
        let [dim, nv, nc, nbf] = head[..] else {
            return Err(fmt_err(hl, "header must be `dim nv nc nbf`"));
        };
        if !(1..=2).contains(&dim) {
            return Err(fmt_err(hl, "dimension must be 1 or 2"));
        }
        let mut next_numbers = |count: usize, what: &str| -> Result<(usize, Vec<String>), MeshError> {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| fmt_err(0, &format!("unexpected end of file reading {what}")))?;
            let toks: Vec<String> = l.split_whitespace().map(str::to_string).collect();
            if toks.len() != count {
                return Err(fmt_err(ln, &format!("expected {count} fields for {what}")));
            }
            Ok((ln, toks))
        };
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, toks) = next_numbers(dim, "a vertex")?;
            let mut p = [0.0; 2];
            for (i, t) in toks.iter().enumerate() {
                p[i] = t.parse().map_err(|_| fmt_err(ln, "bad coordinate"))?;
            }
            vertices.push(p);
        }
        let mut cells = Vec::with_capacity(nc);
        for _ in 0..nc {
            let (ln, toks) = next_numbers(dim + 1, "a cell")?;
            let mut cell = [0usize; 3];
            for (i, t) in toks.iter().enumerate() {
                cell[i] = t.parse().map_err(|_| fmt_err(ln, "bad vertex id"))?;
            }
            if dim == 1 {
                cell[2] = cell[1];
            }
            cells.push(cell);
        }
        let mut facets = Vec::with_capacity(nbf);
        for _ in 0..nbf {
            let (ln, toks) = next_numbers(dim + 1, "a boundary facet")?;
            let ids: Vec<usize> = toks
                .iter()
                .map(|t| t.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| fmt_err(ln, "bad facet record"))?;
            facets.push((ln, ids));
        }
        let mesh = Mesh::new(dim, vertices, cells, BoundaryShape::Polygonal)?;
        if facets.len() != mesh.boundary_facets.len() {
            return Err(fmt_err(
                hl,
                &format!(
                    "file lists {} boundary facets, connectivity implies {}",
                    facets.len(),
                    mesh.boundary_facets.len()
                ),
            ));
        }
        let known: HashMap<(Vec<usize>, usize), ()> = (0..mesh.boundary_facets.len())
            .map(|f| {
                let mut v = mesh.facet_vertices(f).to_vec();
                v.sort_unstable();
                ((v, mesh.boundary_facets[f].cell), ())
            })
            .collect();
        for (ln, ids) in facets {
            let mut v = ids[..dim].to_vec();
            v.sort_unstable();
            if !known.contains_key(&(v, ids[dim])) {
                return Err(fmt_err(ln, "facet is not on the boundary of the given cell"));
            }
        }
        Ok(mesh)
    }
}

fn signed_volume_of(dim: usize, verts: &[Point], cell: &[usize; 3]) -> f64 {
    let p = |i: usize| verts[cell[i]];
    if dim == 1 {
        p(1)[0] - p(0)[0]
    } else {
        let (a, b, c) = (p(0), p(1), p(2));
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }
}

/// Generates the structured mesh for `spec`.
pub fn generate(spec: &DomainSpec) -> Result<Mesh, MeshError> {
    spec.validate()?;
    let n = spec.n;
    match spec.kind {
        DomainKind::Interval { a, b } => {
            let h = (b - a) / n as f64;
            let vertices = (0..=n)
                .map(|i| [if i == n { b } else { a + i as f64 * h }, 0.0])
                .collect();
            let cells = (0..n).map(|i| [i, i + 1, i + 1]).collect();
            Mesh::new(1, vertices, cells, BoundaryShape::Polygonal)
        }
        DomainKind::Square { side } => {
            let h = side / n as f64;
            let coord = |i: usize| if i == n { side } else { i as f64 * h };
            let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
            for j in 0..=n {
                for i in 0..=n {
                    vertices.push([coord(i), coord(j)]);
                }
            }
            let id = |i: usize, j: usize| j * (n + 1) + i;
            let mut cells = Vec::with_capacity(2 * n * n);
            // alternating diagonals: for even n the pattern has all symmetries of the square
            for j in 0..n {
                for i in 0..n {
                    let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
                    if (i + j) % 2 == 0 {
                        cells.push([v00, v10, v11]);
                        cells.push([v00, v11, v01]);
                    } else {
                        cells.push([v00, v10, v01]);
                        cells.push([v10, v11, v01]);
                    }
                }
            }
            Mesh::new(2, vertices, cells, BoundaryShape::Polygonal)
        }
        DomainKind::Disk { radius } => {
            let layers = ((n as f64 / (2.0 * PI)).round() as usize).max(1);
            let mut vertices = vec![[0.0, 0.0]];
            let mut rings: Vec<Vec<usize>> = Vec::with_capacity(layers);
            for k in 1..=layers {
                let count = if k == layers {
                    n
                } else {
                    ((n * k) as f64 / layers as f64).round().max(3.0) as usize
                };
                let r = radius * k as f64 / layers as f64;
                rings.push(push_ring(&mut vertices, r, count));
            }
            let mut cells = Vec::new();
            let first = &rings[0];
            for i in 0..first.len() {
                cells.push([0, first[i], first[(i + 1) % first.len()]]);
            }
            for w in rings.windows(2) {
                zip_rings(&vertices, &w[0], &w[1], &mut cells);
            }
            orient(&vertices, &mut cells);
            Mesh::new(
                2,
                vertices,
                cells,
                BoundaryShape::Circles {
                    center: [0.0, 0.0],
                    radii: vec![radius],
                },
            )
        }
        DomainKind::Annulus { r_in, r_out } => {
            let spacing = 2.0 * PI * r_out / n as f64;
            let layers = (((r_out - r_in) / spacing).round() as usize).max(1);
            let mut vertices = Vec::new();
            let mut rings = Vec::with_capacity(layers + 1);
            for k in 0..=layers {
                let r = r_in + (r_out - r_in) * k as f64 / layers as f64;
                let count = if k == layers {
                    n
                } else {
                    ((n as f64 * r / r_out).round() as usize).max(3)
                };
                rings.push(push_ring(&mut vertices, r, count));
            }
            let mut cells = Vec::new();
            for w in rings.windows(2) {
                zip_rings(&vertices, &w[0], &w[1], &mut cells);
            }
            orient(&vertices, &mut cells);
            Mesh::new(
                2,
                vertices,
                cells,
                BoundaryShape::Circles {
                    center: [0.0, 0.0],
                    radii: vec![r_in, r_out],
                },
            )
        }
    }
}

fn push_ring(vertices: &mut Vec<Point>, r: f64, count: usize) -> Vec<usize> {
    (0..count)
        .map(|j| {
            let theta = 2.0 * PI * j as f64 / count as f64;
            vertices.push([r * theta.cos(), r * theta.sin()]);
            vertices.len() - 1
        })
        .collect()
}

/// Triangulates the strip between two concentric rings by advancing along
/// whichever ring has the smaller next angle.
fn zip_rings(vertices: &[Point], inner: &[usize], outer: &[usize], cells: &mut Vec<[usize; 3]>) {
    let (na, nb) = (inner.len(), outer.len());
    let angle = |ring: &[usize], i: usize| -> f64 {
        if i == ring.len() {
            2.0 * PI
        } else {
            let p = vertices[ring[i]];
            let a = p[1].atan2(p[0]);
            if a < -1e-14 {
                a + 2.0 * PI
            } else {
                a.max(0.0)
            }
        }
    };
    let (mut i, mut j) = (0, 0);
    while i < na || j < nb {
        let advance_inner = j == nb || (i < na && angle(inner, i + 1) <= angle(outer, j + 1));
        if advance_inner {
            cells.push([inner[i], inner[(i + 1) % na], outer[j % nb]]);
            i += 1;
        } else {
            cells.push([inner[i % na], outer[(j + 1) % nb], outer[j]]);
            j += 1;
        }
    }
}

fn orient(vertices: &[Point], cells: &mut [[usize; 3]]) {
    for cell in cells.iter_mut() {
        if signed_volume_of(2, vertices, cell) < 0.0 {
            cell.swap(1, 2);
        }
    }
}
