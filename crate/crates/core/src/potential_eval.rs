//! Retarded double layer potential of a discrete density at field points
//! off the boundary, and the total field `u^inc + Dφ`.

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{SurfaceMesh, Vec3};
use crate::quadrature::TriangleRule;
use crate::reference::IncidentWave;
use crate::temporal_basis::{basis_b, TemporalBasisIndex, TimeGrid};

/// Minimum distance between a field point and the surface.
pub const MIN_DISTANCE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("field point {index} is at distance {distance:e} from the surface")]
    OnSurface { index: usize, distance: f64 },
    #[error("evaluation time {0} is not finite")]
    BadTime(f64),
    #[error("grid dimensions {nu}x{nv} do not match {points} points")]
    Dimensions { nu: usize, nv: usize, points: usize },
}

/// Per-triangle rule: order `far_order`, raised to `near_order` when the
/// point is closer than `near_factor` triangle diameters. Both grow by
/// `per_step · h/Δt` since the density varies on the scale Δt.
#[derive(Debug, Clone)]
pub struct FieldRule {
    pub far_order: usize,
    pub near_order: usize,
    pub near_factor: f64,
    pub per_step: f64,
    rules: Vec<TriangleRule>,
}

const MAX_FIELD_ORDER: usize = 24;

impl FieldRule {
    pub fn new(far_order: usize, near_order: usize, near_factor: f64) -> Self {
        Self {
            far_order,
            near_order,
            near_factor,
            per_step: 4.0,
            rules: (0..=MAX_FIELD_ORDER).map(TriangleRule::with_order).collect(),
        }
    }

    /// Rule for a triangle of diameter `h` at distance `d`.
    pub fn select(&self, h: f64, d: f64, dt: f64) -> &TriangleRule {
        let base = if d < self.near_factor * h {
            self.near_order
        } else {
            self.far_order
        };
        let q = base + (self.per_step * h / dt).ceil() as usize;
        &self.rules[q.min(MAX_FIELD_ORDER)]
    }
}

impl Default for FieldRule {
    fn default() -> Self {
        Self::new(4, 7, 2.0)
    }
}

/// Field points with evaluation times. `dims` is set for structured
/// `nu × nv` slices (point `(i, j)` at index `j * nu + i`).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub points: Vec<Vec3>,
    pub times: Vec<f64>,
    pub dims: Option<(usize, usize)>,
}

impl FieldGrid {
    pub fn new(mesh: &SurfaceMesh, points: Vec<Vec3>, times: Vec<f64>) -> Result<Self, FieldError> {
        if let Some(&t) = times.iter().find(|t| !t.is_finite()) {
            return Err(FieldError::BadTime(t));
        }
        for (index, x) in points.iter().enumerate() {
            let distance = mesh.distance_to_point(x);
            if !(distance >= MIN_DISTANCE) {
                return Err(FieldError::OnSurface { index, distance });
            }
        }
        Ok(Self {
            points,
            times,
            dims: None,
        })
    }

    /// `nu × nv` points `origin + s e1 + r e2`, `s, r ∈ [0, 1]`.
    pub fn plane(
        mesh: &SurfaceMesh,
        origin: Vec3,
        e1: Vec3,
        e2: Vec3,
        (nu, nv): (usize, usize),
        times: Vec<f64>,
    ) -> Result<Self, FieldError> {
        if nu < 2 || nv < 2 {
            return Err(FieldError::Dimensions {
                nu,
                nv,
                points: nu * nv,
            });
        }
        let mut points = Vec::with_capacity(nu * nv);
        for j in 0..nv {
            for i in 0..nu {
                let s = i as f64 / (nu - 1) as f64;
                let r = j as f64 / (nv - 1) as f64;
                points.push(origin + e1 * s + e2 * r);
            }
        }
        let mut g = Self::new(mesh, points, times)?;
        g.dims = Some((nu, nv));
        Ok(g)
    }
}

/// `u(x, t)` and `∂_t u` of the temporal expansion at one vertex set.
struct Density<'a> {
    grid: &'a TimeGrid,
    m: usize,
    coeffs: &'a [f64],
}

impl Density<'_> {
    /// `(φ, ∂_t φ)` at time `tau` for the three vertices `v`, weighted by `lam`.
    fn eval(&self, v: [usize; 3], lam: [f64; 3], tau: f64) -> (f64, f64) {
        if tau <= 0.0 {
            return (0.0, 0.0);
        }
        let grid = self.grid;
        let j0 = (tau / grid.dt).floor() as usize;
        let (mut phi, mut dphi) = (0.0, 0.0);
        for step in j0.max(1)..=(j0 + 2).min(grid.n) {
            for order in 0..=grid.p {
                let idx = TemporalBasisIndex::new(step, order, grid.p);
                let b = basis_b(grid, idx, tau, 0);
                let db = basis_b(grid, idx, tau, 1);
                if b == 0.0 && db == 0.0 {
                    continue;
                }
                let off = (idx.flat - 1) * self.m;
                let c: f64 = (0..3).map(|a| lam[a] * self.coeffs[off + v[a]]).sum();
                phi += b * c;
                dphi += db * c;
            }
        }
        (phi, dphi)
    }
}

/// Discrete retarded double layer potential
///
/// ```text
/// Dφ(x,t) = -1/(4π) ∫_Γ n_y·(x-y)/|x-y|² (φ(y,τ)/|x-y| + ∂_t φ(y,τ)) dΓ_y,  τ = t - |x-y|
/// ```
///
/// The point must lie off the surface.
pub fn eval_double_layer(
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    coeffs: &[f64],
    x: &Vec3,
    t: f64,
    rule: &FieldRule,
) -> f64 {
    let m = mesh.dof_count();
    assert_eq!(coeffs.len(), grid.basis_count() * m, "coefficient vector length");
    let density = Density { grid, m, coeffs };
    let mut sum = 0.0;
    for e in 0..mesh.triangle_count() {
        let c = mesh.corners(e);
        let centroid = (c[0] + c[1] + c[2]) / 3.0;
        let h = mesh.triangle_diameter(e);
        // cheap causality cut: the whole triangle is still in the future
        if t <= (x - centroid).norm() - h {
            continue;
        }
        let d = if (x - centroid).norm() < (rule.near_factor + 1.0) * h {
            triangle_point_distance(&c, x)
        } else {
            f64::INFINITY
        };
        let tri = rule.select(h, d, grid.dt);
        let n = mesh.normal(e);
        let v = mesh.triangles()[e];
        let jac = 2.0 * mesh.area(e);
        let mut acc = 0.0;
        for (&[s, r], &w) in tri.points.iter().zip(&tri.weights) {
            let y = c[0] + (c[1] - c[0]) * s + (c[2] - c[0]) * r;
            let d = x - y;
            let dist = d.norm();
            let (phi, dphi) = density.eval(v, [1.0 - s - r, s, r], t - dist);
            if phi == 0.0 && dphi == 0.0 {
                continue;
            }
            acc += w * n.dot(&d) / (dist * dist) * (phi / dist + dphi);
        }
        sum += jac * acc;
    }
    -sum / (4.0 * PI)
}

fn triangle_point_distance(c: &[Vec3; 3], x: &Vec3) -> f64 {
    (crate::mesh::closest_point_on_triangle(x, &c[0], &c[1], &c[2]) - x).norm()
}

/// `values[time][point]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTable {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// `u^inc(x, t) + Dφ(x, t)` over the grid, parallel over points.
pub fn eval_total_field(
    wave: &IncidentWave,
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    coeffs: &[f64],
    field: &FieldGrid,
    rule: &FieldRule,
) -> FieldTable {
    let values = field
        .times
        .iter()
        .map(|&t| {
            field
                .points
                .par_iter()
                .map(|x| wave.value(x, t) + eval_double_layer(mesh, grid, coeffs, x, t, rule))
                .collect()
        })
        .collect();
    FieldTable {
        times: field.times.clone(),
        values,
    }
}
