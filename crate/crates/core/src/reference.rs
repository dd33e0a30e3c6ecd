//! Analytic solutions on the unit sphere for right-hand sides
//! `g(t) Y_n^m(x)`, `n ∈ {0, 1}`, the windowed plane wave, and the
//! space-time L2 error of a discrete solution.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{SurfaceMesh, Vec3};
use crate::quadrature::{AdaptiveGauss, GaussLegendre, TriangleRule};
use crate::temporal_basis::{basis_b, TemporalBasisIndex, TimeGrid};

#[derive(Debug, Error, PartialEq)]
pub enum ReferenceError {
    #[error("spherical harmonic of degree {0} is not available (n must be 0 or 1)")]
    Degree(usize),
    #[error("order {m} out of range for degree {n}")]
    Order { n: usize, m: i32 },
    #[error("the n = 1 reference is valid for t < 2 only, got t = {0}")]
    Domain(f64),
    #[error("incident wave window needs m_f < m_t, got {0} and {1}")]
    Window(f64, f64),
}

/// Real, L2-normalized spherical harmonic of degree 0 or 1, evaluated at the
/// direction of its argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SphericalHarmonic {
    pub n: usize,
    pub m: i32,
}

impl SphericalHarmonic {
    pub fn new(n: usize, m: i32) -> Result<Self, ReferenceError> {
        if n > 1 {
            return Err(ReferenceError::Degree(n));
        }
        if m.unsigned_abs() as usize > n {
            return Err(ReferenceError::Order { n, m });
        }
        Ok(Self { n, m })
    }

    pub fn eval(&self, x: &Vec3) -> f64 {
        if self.n == 0 {
            return 0.5 / PI.sqrt();
        }
        let c = (3.0 / (4.0 * PI)).sqrt();
        let u = x / x.norm();
        match self.m {
            -1 => c * u.y,
            0 => c * u.z,
            _ => c * u.x,
        }
    }
}

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Causal time signal with its derivative.
#[derive(Clone)]
pub struct TimeSignal {
    pub name: String,
    f: Scalar,
    df: Scalar,
}

impl std::fmt::Debug for TimeSignal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TimeSignal").field("name", &self.name).finish()
    }
}

impl TimeSignal {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
            df: Arc::new(df),
        }
    }

    /// `sin(3t) t² e^{-t}`
    pub fn sin3t() -> Self {
        Self::new(
            "sin(3t)t^2exp(-t)",
            |t| (3.0 * t).sin() * t * t * (-t).exp(),
            |t| (-t).exp() * (3.0 * (3.0 * t).cos() * t * t + (3.0 * t).sin() * (2.0 * t - t * t)),
        )
    }

    /// `sin(2πt) t³ e^{-2t}`
    pub fn sin2pit() -> Self {
        let w = 2.0 * PI;
        Self::new(
            "sin(2pi t)t^3exp(-2t)",
            move |t| (w * t).sin() * t.powi(3) * (-2.0 * t).exp(),
            move |t| {
                (-2.0 * t).exp()
                    * (w * (w * t).cos() * t.powi(3) + (w * t).sin() * (3.0 * t * t - 2.0 * t.powi(3)))
            },
        )
    }

    pub fn value(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            (self.f)(t)
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            (self.df)(t)
        }
    }
}

/// `c_{k,l} = binom(k-1, l-1) 2^{k-l} / (k-l+1)!`
pub fn c_kl(k: usize, l: usize) -> f64 {
    assert!(l >= 1 && l <= k);
    let mut binom = 1.0;
    for j in 0..(l - 1) {
        binom = binom * (k - 1 - j) as f64 / (j + 1) as f64;
    }
    let fact: f64 = (1..=(k - l + 1)).map(|j| j as f64).product();
    binom * 2f64.powi((k - l) as i32) / fact
}

pub const QUAD_TOL: f64 = 1e-10;

/// Time factor of the `n = 0` solution on the unit sphere.
pub fn reference_n0(g: &TimeSignal, t: f64, tol: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let quad = AdaptiveGauss::default();
    let mut phi = -2.0 * quad.integrate(0.0, t, tol, &|tau: f64| g.value(t - tau) * tau.cosh());
    let kmax = (t / 2.0).floor() as usize;
    for k in 1..=kmax {
        let s = 2.0 * k as f64;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        for l in 1..=k {
            let c = c_kl(k, l);
            let e = (k - l + 1) as i32;
            let v = quad.integrate(s, t, tol, &|tau: f64| {
                (tau - s).powi(e) * (tau - s).exp() * g.derivative(t - tau)
            });
            phi += 2.0 * sign * c * v;
        }
    }
    phi
}

/// Time factor of the `n = 1` solution, valid for `t < 2`.
pub fn reference_n1(g: &TimeSignal, t: f64, tol: f64) -> Result<f64, ReferenceError> {
    if t >= 2.0 {
        return Err(ReferenceError::Domain(t));
    }
    if t <= 0.0 {
        return Ok(0.0);
    }
    let quad = AdaptiveGauss::default();
    Ok(-2.0 * quad.integrate(0.0, t, tol, &|tau: f64| g.value(t - tau) * tau.cosh() * tau.cos()))
}

/// Windowed plane wave `A cos(k·x + φ₀ − ωt)`, active while
/// `ωt − m_t ≤ k·x ≤ ωt − m_f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncidentWave {
    pub amplitude: f64,
    pub k: Vec3,
    pub omega: f64,
    pub phase: f64,
    pub m_f: f64,
    pub m_t: f64,
}

impl IncidentWave {
    pub fn new(amplitude: f64, k: Vec3, omega: f64, phase: f64, m_f: f64, m_t: f64) -> Result<Self, ReferenceError> {
        if !(m_f < m_t) {
            return Err(ReferenceError::Window(m_f, m_t));
        }
        Ok(Self {
            amplitude,
            k,
            omega,
            phase,
            m_f,
            m_t,
        })
    }

    /// `A = 0.02`, `k = (−π/√2, 0, −π/√2)`, `ω = π`, `m_f = 6π`, `m_t = 8π`.
    pub fn submarine() -> Self {
        let s = PI / 2f64.sqrt();
        Self::new(0.02, Vec3::new(-s, 0.0, -s), PI, 0.0, 6.0 * PI, 8.0 * PI).expect("valid window")
    }

    pub fn active(&self, x: &Vec3, t: f64) -> bool {
        let kx = self.k.dot(x);
        let wt = self.omega * t;
        wt - self.m_t <= kx && kx <= wt - self.m_f
    }

    pub fn value(&self, x: &Vec3, t: f64) -> f64 {
        if !self.active(x, t) {
            return 0.0;
        }
        self.amplitude * (self.k.dot(x) + self.phase - self.omega * t).cos()
    }
}

/// Neumann data `−∂u^inc/∂n`.
pub fn incident_neumann(wave: &IncidentWave, x: &Vec3, n: &Vec3, t: f64) -> f64 {
    if !wave.active(x, t) {
        return 0.0;
    }
    wave.amplitude * (wave.k.dot(x) + wave.phase - wave.omega * t).sin() * wave.k.dot(n)
}

/// Reference function for the error norm.
pub enum Reference<'a> {
    General(&'a (dyn Fn(&Vec3, f64) -> f64 + Sync)),
    /// `time(t) · space(x)`; the time factor is evaluated once per node.
    Separable {
        time: &'a (dyn Fn(f64) -> f64 + Sync),
        space: &'a (dyn Fn(&Vec3) -> f64 + Sync),
    },
}

/// Quadrature for [`l2_spacetime_error`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorQuadrature {
    /// Gauss points per time step.
    pub time_points: usize,
    /// Triangle rule order.
    pub space_order: usize,
}

impl Default for ErrorQuadrature {
    fn default() -> Self {
        Self {
            time_points: 16,
            space_order: 4,
        }
    }
}

/// Discrete solution `Σ α_i^j φ_j(x) b_i(t)` at the mesh vertices.
pub fn nodal_values(grid: &TimeGrid, m: usize, coeffs: &[f64], t: f64) -> Vec<f64> {
    let mut c = vec![0.0; m];
    for step in 1..=grid.n {
        let (lo, hi) = grid.support(step);
        if t < lo || t > hi {
            continue;
        }
        for order in 0..=grid.p {
            let idx = TemporalBasisIndex::new(step, order, grid.p);
            let b = basis_b(grid, idx, t, 0);
            if b == 0.0 {
                continue;
            }
            let off = (idx.flat - 1) * m;
            for (cj, a) in c.iter_mut().zip(&coeffs[off..off + m]) {
                *cj += b * a;
            }
        }
    }
    c
}

/// `‖φ_h − φ_ref‖` in `L2(Γ × [0, T])`.
pub fn l2_spacetime_error(
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    coeffs: &[f64],
    reference: &Reference,
    quad: ErrorQuadrature,
) -> f64 {
    let m = mesh.dof_count();
    assert_eq!(coeffs.len(), grid.basis_count() * m, "coefficient vector length");
    let gl = GaussLegendre::new(quad.time_points);
    let rule = TriangleRule::with_order(quad.space_order);
    let nodes: Vec<(f64, f64)> = (0..grid.n - 1)
        .flat_map(|i| gl.mapped(grid.t(i as i64), grid.t(i as i64 + 1)).collect::<Vec<_>>())
        .collect();
    let parts: Vec<f64> = nodes
        .par_iter()
        .map(|&(t, wt)| {
            let c = nodal_values(grid, m, coeffs, t);
            let tf = match reference {
                Reference::Separable { time, .. } => time(t),
                Reference::General(_) => 0.0,
            };
            let mut acc = 0.0;
            for e in 0..mesh.triangle_count() {
                let corners = mesh.corners(e);
                let tri = mesh.triangles()[e];
                let jac = 2.0 * mesh.area(e);
                for (&[s, r], &w) in rule.points.iter().zip(&rule.weights) {
                    let lam = [1.0 - s - r, s, r];
                    let x = corners[0] + (corners[1] - corners[0]) * s + (corners[2] - corners[0]) * r;
                    let uh: f64 = (0..3).map(|a| lam[a] * c[tri[a]]).sum();
                    let uref = match reference {
                        Reference::Separable { space, .. } => tf * space(&x),
                        Reference::General(f) => f(&x, t),
                    };
                    acc += w * jac * (uh - uref).powi(2);
                }
            }
            wt * acc
        })
        .collect();
    parts.iter().sum::<f64>().sqrt()
}

/// CSV `t,phi` of a reference curve.
pub fn write_curve_csv<W: Write>(mut w: W, points: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "t,phi")?;
    for (t, v) in points {
        writeln!(w, "{t},{v:.12e}")?;
    }
    Ok(())
}
