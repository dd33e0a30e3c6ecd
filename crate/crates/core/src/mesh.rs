//! Triangulated closed surfaces with piecewise-linear continuous nodal basis.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::quadrature::PairKind;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("cannot read mesh file: {0}")]
    Io(#[from] std::io::Error),
    #[error("mesh parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid mesh: {0}")]
    Invalid(String),
}

/// Triangulated surface with outward unit normals.
///
/// Immutable after construction. The spatial basis is the nodal hat basis,
/// one function per vertex, so dof `j` is vertex `j`.
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
    areas: Vec<f64>,
    vertex_triangles: Vec<Vec<usize>>,
    diameter: f64,
}

impl SurfaceMesh {
    /// Loads and validates a closed mesh from an OFF-style file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path)?;
        let (v, t) = parse_off(&text)?;
        Self::new(v, t)
    }

    /// Loads a mesh without the closed-surface checks (index range and
    /// non-degeneracy are still enforced). Meant for small open fixtures.
    pub fn load_unchecked(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path)?;
        let (v, t) = parse_off(&text)?;
        Self::new_unchecked(v, t)
    }

    /// Builds a validated closed mesh. A mesh with negative signed volume
    /// is re-oriented so that the normals point outward.
    pub fn new(vertices: Vec<Vec3>, mut triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        check_indices_and_areas(&vertices, &triangles)?;
        check_closed_orientable(&triangles)?;
        let volume: f64 = triangles
            .iter()
            .map(|t| vertices[t[0]].dot(&vertices[t[1]].cross(&vertices[t[2]])) / 6.0)
            .sum();
        if volume < 0.0 {
            log::warn!("mesh has inward orientation (signed volume {volume:.3e}); flipping triangles");
            for t in &mut triangles {
                t.swap(1, 2);
            }
        }
        Ok(Self::build(vertices, triangles))
    }

    pub fn new_unchecked(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        check_indices_and_areas(&vertices, &triangles)?;
        Ok(Self::build(vertices, triangles))
    }

    fn build(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Self {
        let mut normals = Vec::with_capacity(triangles.len());
        let mut areas = Vec::with_capacity(triangles.len());
        let mut vertex_triangles = vec![Vec::new(); vertices.len()];
        for (e, t) in triangles.iter().enumerate() {
            let c = (vertices[t[1]] - vertices[t[0]]).cross(&(vertices[t[2]] - vertices[t[0]]));
            let twice = c.norm();
            normals.push(c / twice);
            areas.push(0.5 * twice);
            for &v in t {
                vertex_triangles[v].push(e);
            }
        }
        let mut diameter: f64 = 0.0;
        for (i, a) in vertices.iter().enumerate() {
            for b in &vertices[i + 1..] {
                diameter = diameter.max((a - b).norm());
            }
        }
        Self {
            vertices,
            triangles,
            normals,
            areas,
            vertex_triangles,
            diameter,
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn normal(&self, e: usize) -> Vec3 {
        self.normals[e]
    }

    pub fn area(&self, e: usize) -> f64 {
        self.areas[e]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Number of spatial basis functions (one hat per vertex).
    pub fn dof_count(&self) -> usize {
        self.vertices.len()
    }

    /// Triangles forming the support of the hat function at vertex `j`.
    pub fn support(&self, j: usize) -> &[usize] {
        &self.vertex_triangles[j]
    }

    pub fn corners(&self, e: usize) -> [Vec3; 3] {
        let t = self.triangles[e];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    /// Largest distance between two vertices.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Longest edge of triangle `e`.
    pub fn triangle_diameter(&self, e: usize) -> f64 {
        let [a, b, c] = self.corners(e);
        (a - b).norm().max((b - c).norm()).max((c - a).norm())
    }

    /// `n × ∇φ` for the hat function of local vertex `local` on triangle `e`.
    pub fn surface_curl(&self, e: usize, local: usize) -> Vec3 {
        let p = self.corners(e);
        let n = self.normals[e];
        let opposite = p[(local + 2) % 3] - p[(local + 1) % 3];
        let grad = n.cross(&opposite) / (2.0 * self.areas[e]);
        n.cross(&grad)
    }

    /// Minimum and maximum distance between two triangles.
    pub fn triangle_distance(&self, a: usize, b: usize) -> (f64, f64) {
        let ta = self.corners(a);
        let tb = self.corners(b);
        let mut max: f64 = 0.0;
        for p in &ta {
            for q in &tb {
                max = max.max((p - q).norm());
            }
        }
        let shared = self.triangles[a]
            .iter()
            .any(|v| self.triangles[b].contains(v));
        let min = if shared { 0.0 } else { triangle_triangle_distance(&ta, &tb) };
        (min, max)
    }

    /// `(mindist, maxdist)` between the supports of the hat functions `j` and `l`.
    pub fn support_distances(&self, j: usize, l: usize) -> (f64, f64) {
        let (j, l) = if j <= l { (j, l) } else { (l, j) };
        let mut min = f64::INFINITY;
        for &a in self.support(j) {
            for &b in self.support(l) {
                min = min.min(self.triangle_distance(a, b).0);
            }
        }
        let mut max: f64 = 0.0;
        for &a in self.support(j) {
            for &b in self.support(l) {
                for &p in &self.triangles[a] {
                    for &q in &self.triangles[b] {
                        max = max.max((self.vertices[p] - self.vertices[q]).norm());
                    }
                }
            }
        }
        (min, max)
    }

    /// Classifies a triangle pair and returns local vertex orderings
    /// `(order_a, order_b)` that put the shared vertices first, in matching
    /// order on both triangles.
    pub fn pair_kind(&self, a: usize, b: usize) -> (PairKind, [usize; 3], [usize; 3]) {
        let ta = self.triangles[a];
        let tb = self.triangles[b];
        let mut shared = Vec::with_capacity(3);
        for (ia, va) in ta.iter().enumerate() {
            if let Some(ib) = tb.iter().position(|vb| vb == va) {
                shared.push((ia, ib));
            }
        }
        match shared.len() {
            3 => (PairKind::Coincident, [0, 1, 2], [0, 1, 2]),
            2 => {
                let (a0, b0) = shared[0];
                let (a1, b1) = shared[1];
                (
                    PairKind::Edge,
                    [a0, a1, 3 - a0 - a1],
                    [b0, b1, 3 - b0 - b1],
                )
            }
            1 => {
                let (a0, b0) = shared[0];
                (
                    PairKind::Vertex,
                    [a0, (a0 + 1) % 3, (a0 + 2) % 3],
                    [b0, (b0 + 1) % 3, (b0 + 2) % 3],
                )
            }
            _ => (PairKind::Regular, [0, 1, 2], [0, 1, 2]),
        }
    }

    /// Shortest distance from a point to the surface.
    pub fn distance_to_point(&self, x: &Vec3) -> f64 {
        (0..self.triangles.len())
            .map(|e| {
                let [a, b, c] = self.corners(e);
                (closest_point_on_triangle(x, &a, &b, &c) - x).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Applies `x -> R x + shift`.
    pub fn transformed(&self, rotation: &nalgebra::Matrix3<f64>, shift: &Vec3) -> Self {
        let v = self.vertices.iter().map(|p| rotation * p + shift).collect();
        Self::build(v, self.triangles.clone())
    }
}

fn check_indices_and_areas(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Result<(), MeshError> {
    if triangles.is_empty() {
        return Err(MeshError::Invalid("mesh has no triangles".into()));
    }
    for (e, t) in triangles.iter().enumerate() {
        if let Some(&bad) = t.iter().find(|&&i| i >= vertices.len()) {
            return Err(MeshError::Invalid(format!(
                "triangle {e} references vertex {bad} but the mesh has {} vertices",
                vertices.len()
            )));
        }
        let c = (vertices[t[1]] - vertices[t[0]]).cross(&(vertices[t[2]] - vertices[t[0]]));
        let scale = (vertices[t[1]] - vertices[t[0]])
            .norm()
            .max((vertices[t[2]] - vertices[t[0]]).norm());
        if !(c.norm() > 1e-14 * scale * scale) {
            return Err(MeshError::Invalid(format!("triangle {e} is degenerate")));
        }
    }
    Ok(())
}

fn check_closed_orientable(triangles: &[[usize; 3]]) -> Result<(), MeshError> {
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for (e, t) in triangles.iter().enumerate() {
        for k in 0..3 {
            let edge = (t[k], t[(k + 1) % 3]);
            if directed.insert(edge, e).is_some() {
                return Err(MeshError::Invalid(format!(
                    "edge {}-{} is traversed twice in the same direction (inconsistent orientation or non-manifold edge)",
                    edge.0, edge.1
                )));
            }
        }
    }
    for &(a, b) in directed.keys() {
        if !directed.contains_key(&(b, a)) {
            return Err(MeshError::Invalid(format!(
                "edge {a}-{b} belongs to a single triangle (open surface)"
            )));
        }
    }
    Ok(())
}

/// Parses the OFF-style text format: `OFF`, then `nv ne 0`, then vertex
/// lines `x y z` and triangle lines `3 i j k` (0-based). `#` starts a comment.
pub fn parse_off(text: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>), MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let err = |line: usize, msg: &str| MeshError::Parse {
        line,
        msg: msg.to_string(),
    };
    let (ln, header) = lines.next().ok_or_else(|| err(0, "empty file"))?;
    if header != "OFF" {
        return Err(err(ln, "expected `OFF` header"));
    }
    let (ln, counts) = lines.next().ok_or_else(|| err(ln, "missing counts line"))?;
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| err(ln, "bad count")))
        .collect::<Result<_, _>>()?;
    if counts.len() < 2 {
        return Err(err(ln, "counts line needs vertex and face counts"));
    }
    let (nv, ne) = (counts[0], counts[1]);
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| err(0, "unexpected end of file in vertices"))?;
        let c: Vec<f64> = l
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| err(ln, "bad coordinate")))
            .collect::<Result<_, _>>()?;
        if c.len() != 3 {
            return Err(err(ln, "vertex line needs three coordinates"));
        }
        vertices.push(Vec3::new(c[0], c[1], c[2]));
    }
    let mut triangles = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (ln, l) = lines.next().ok_or_else(|| err(0, "unexpected end of file in faces"))?;
        let c: Vec<usize> = l
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| err(ln, "bad index")))
            .collect::<Result<_, _>>()?;
        if c.len() != 4 || c[0] != 3 {
            return Err(err(ln, "only triangles (`3 i j k`) are supported"));
        }
        triangles.push([c[1], c[2], c[3]]);
    }
    Ok((vertices, triangles))
}

pub fn write_off(mesh: &SurfaceMesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertex_count(), mesh.triangle_count());
    for v in mesh.vertices() {
        s.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", v.x, v.y, v.z));
    }
    for t in mesh.triangles() {
        s.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    s
}

pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

fn segment_segment_distance(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let c = d1.dot(&r);
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    let mut s = if denom > 1e-300 {
        ((b * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

fn segment_hits_triangle(p: &Vec3, q: &Vec3, t: &[Vec3; 3]) -> bool {
    let dir = q - p;
    let e1 = t[1] - t[0];
    let e2 = t[2] - t[0];
    let h = dir.cross(&e2);
    let det = e1.dot(&h);
    if det.abs() < 1e-300 {
        return false;
    }
    let inv = 1.0 / det;
    let s = p - t[0];
    let u = inv * s.dot(&h);
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let qv = s.cross(&e1);
    let v = inv * dir.dot(&qv);
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    let w = inv * e2.dot(&qv);
    (0.0..=1.0).contains(&w)
}

/// Exact distance between two triangles (0 when they intersect).
pub fn triangle_triangle_distance(a: &[Vec3; 3], b: &[Vec3; 3]) -> f64 {
    for k in 0..3 {
        if segment_hits_triangle(&a[k], &a[(k + 1) % 3], b)
            || segment_hits_triangle(&b[k], &b[(k + 1) % 3], a)
        {
            return 0.0;
        }
    }
    let mut d = f64::INFINITY;
    for p in a {
        d = d.min((closest_point_on_triangle(p, &b[0], &b[1], &b[2]) - p).norm());
    }
    for p in b {
        d = d.min((closest_point_on_triangle(p, &a[0], &a[1], &a[2]) - p).norm());
    }
    for i in 0..3 {
        for j in 0..3 {
            d = d.min(segment_segment_distance(
                &a[i],
                &a[(i + 1) % 3],
                &b[j],
                &b[(j + 1) % 3],
            ));
        }
    }
    d
}
