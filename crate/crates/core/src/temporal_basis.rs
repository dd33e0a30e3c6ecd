//! Smooth, compactly supported temporal basis functions.
//!
//! Each timestep index `ĩ ∈ 1..=N` carries `p+1` functions `b_{ĩ,m}`, the
//! product of a partition-of-unity bump `μ_ĩ` and a scaled Legendre
//! polynomial. Flat indices run over `1..=L` with `L = N(p+1)`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("time grid needs N >= 3 timesteps, got {0}")]
    TooFewSteps(usize),
    #[error("final time must be positive and finite, got {0}")]
    BadFinalTime(f64),
}

/// Equidistant time grid `t_i = i Δt`, `i = 0..N-1`, `Δt = T/(N-1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub n: usize,
    pub dt: f64,
    pub p: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, n: usize, p: usize) -> Result<Self, GridError> {
        if n < 3 {
            return Err(GridError::TooFewSteps(n));
        }
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(GridError::BadFinalTime(t_final));
        }
        Ok(Self {
            t_final,
            n,
            dt: t_final / (n - 1) as f64,
            p,
        })
    }

    /// `t_i` for a 0-based grid point; negative indices are allowed.
    pub fn t(&self, i: i64) -> f64 {
        i as f64 * self.dt
    }

    /// Number of temporal basis functions, `N(p+1)`.
    pub fn basis_count(&self) -> usize {
        self.n * (self.p + 1)
    }

    pub fn class(&self, timestep: usize) -> StepClass {
        if timestep == 1 {
            StepClass::First
        } else if timestep == self.n {
            StepClass::Last
        } else {
            StepClass::Inner
        }
    }

    /// Grid point index at which the support of `b_{ĩ,·}` starts.
    pub fn anchor_index(&self, timestep: usize) -> usize {
        timestep.saturating_sub(2)
    }

    /// Closed support `[lo, hi]` of `b_{ĩ,·}` as grid point indices.
    pub fn support_indices(&self, timestep: usize) -> (usize, usize) {
        (timestep.saturating_sub(2), timestep.min(self.n - 1))
    }

    pub fn support(&self, timestep: usize) -> (f64, f64) {
        let (lo, hi) = self.support_indices(timestep);
        (self.t(lo as i64), self.t(hi as i64))
    }
}

/// Position class of a timestep; selects the basis formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StepClass {
    First,
    Inner,
    Last,
}

impl StepClass {
    pub const ALL: [StepClass; 3] = [StepClass::First, StepClass::Inner, StepClass::Last];

    /// Support length in units of Δt.
    pub fn width(self) -> f64 {
        match self {
            StepClass::Inner => 2.0,
            _ => 1.0,
        }
    }
}

/// Flat basis index together with its (timestep, order) decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TemporalBasisIndex {
    pub flat: usize,
    pub timestep: usize,
    pub order: usize,
}

impl TemporalBasisIndex {
    pub fn from_flat(flat: usize, p: usize) -> Self {
        assert!(flat >= 1, "flat temporal index is 1-based");
        Self {
            flat,
            timestep: (flat - 1) / (p + 1) + 1,
            order: (flat - 1) % (p + 1),
        }
    }

    pub fn new(timestep: usize, order: usize, p: usize) -> Self {
        assert!(timestep >= 1 && order <= p);
        Self {
            flat: (timestep - 1) * (p + 1) + order + 1,
            timestep,
            order,
        }
    }
}

const SATURATION: f64 = 1.0 - 1e-14;
const TWO_OVER_SQRT_PI: f64 = 1.128_379_167_095_512_6;

/// Cutoff `f` and its first two derivatives at `x`.
pub fn cutoff(x: f64) -> [f64; 3] {
    if x <= -SATURATION {
        return [0.0, 0.0, 0.0];
    }
    if x >= SATURATION {
        return [1.0, 0.0, 0.0];
    }
    let ax = x.abs();
    let a = 0.5 * ((1.0 + ax) / (1.0 - ax)).ln();
    let tail = 0.5 * libm::erfc(2.0 * a);
    let value = if x < 0.0 { tail } else { 1.0 - tail };
    // e^{-4a²} / (1-x²)^k evaluated in the log domain
    let one_minus = (1.0 - ax) * (1.0 + ax);
    let log_base = -4.0 * a * a;
    let lg = one_minus.ln();
    let e1 = log_base - lg;
    let d1 = if e1 < -740.0 { 0.0 } else { TWO_OVER_SQRT_PI * e1.exp() };
    let e2 = log_base - 2.0 * lg;
    let d2 = if e2 < -740.0 {
        0.0
    } else {
        let sa = if x < 0.0 { -a } else { a };
        TWO_OVER_SQRT_PI * e2.exp() * (2.0 * x - 8.0 * sa)
    };
    [value, d1, d2]
}

/// `f(t) = ½ erf(2 artanh t) + ½`, saturated to 0 / 1 outside (-1, 1).
pub fn cutoff_f(t: f64) -> f64 {
    cutoff(t)[0]
}

/// Legendre polynomial `P_m(x)` with first and second derivative.
pub fn legendre(m: usize, x: f64) -> [f64; 3] {
    let (mut p0, mut p1) = (1.0, x);
    let (mut d0, mut d1) = (0.0, 1.0);
    let (mut s0, mut s1) = (0.0, 0.0);
    if m == 0 {
        return [1.0, 0.0, 0.0];
    }
    for n in 1..m {
        let nf = n as f64;
        let p2 = ((2.0 * nf + 1.0) * x * p1 - nf * p0) / (nf + 1.0);
        let d2 = d0 + (2.0 * nf + 1.0) * p1;
        let s2 = s0 + (2.0 * nf + 1.0) * d1;
        (p0, p1) = (p1, p2);
        (d0, d1) = (d1, d2);
        (s0, s1) = (s1, s2);
    }
    [p1, d1, s1]
}

pub fn legendre_p(m: usize, x: f64) -> f64 {
    legendre(m, x)[0]
}

/// Basis function in local units: `s = (t - anchor)/Δt`, derivatives taken
/// with respect to `s`. Exactly zero outside `[0, width]`.
pub fn local_basis(class: StepClass, m: usize, s: f64, deriv: usize) -> f64 {
    if !(s >= 0.0 && s <= class.width()) {
        return 0.0;
    }
    match class {
        StepClass::Inner => {
            // μ = f(2s-1) on [0,1], 1 - f(2s-3) on [1,2]
            let (mu, dmu, ddmu) = if s <= 1.0 {
                let c = cutoff(2.0 * s - 1.0);
                (c[0], 2.0 * c[1], 4.0 * c[2])
            } else {
                let c = cutoff(2.0 * s - 3.0);
                (1.0 - c[0], -2.0 * c[1], -4.0 * c[2])
            };
            let [p, dp, ddp] = legendre(m, s - 1.0);
            product(deriv, [mu, dmu, ddmu], [p, dp, ddp])
        }
        StepClass::First => {
            let c = cutoff(2.0 * s - 1.0);
            let mu = [1.0 - c[0], -2.0 * c[1], -4.0 * c[2]];
            let [p, dp, ddp] = legendre(m, 2.0 * s - 1.0);
            let g = [
                8.0 * s * s * p,
                16.0 * s * p + 16.0 * s * s * dp,
                16.0 * p + 64.0 * s * dp + 32.0 * s * s * ddp,
            ];
            product(deriv, mu, g)
        }
        StepClass::Last => {
            let c = cutoff(2.0 * s - 1.0);
            let mu = [c[0], 2.0 * c[1], 4.0 * c[2]];
            let [p, dp, ddp] = legendre(m, 2.0 * s - 1.0);
            product(deriv, mu, [p, 2.0 * dp, 4.0 * ddp])
        }
    }
}

fn product(deriv: usize, u: [f64; 3], v: [f64; 3]) -> f64 {
    match deriv {
        0 => u[0] * v[0],
        1 => u[1] * v[0] + u[0] * v[1],
        2 => u[2] * v[0] + 2.0 * u[1] * v[1] + u[0] * v[2],
        _ => panic!("only derivatives up to order 2 are available"),
    }
}

/// `b_{ĩ,m}(t)` or its first / second time derivative.
pub fn basis_b(grid: &TimeGrid, idx: TemporalBasisIndex, t: f64, deriv: usize) -> f64 {
    let (lo, hi) = grid.support(idx.timestep);
    if !(t >= lo && t <= hi) {
        return 0.0;
    }
    let anchor = grid.t(grid.anchor_index(idx.timestep) as i64);
    let s = (t - anchor) / grid.dt;
    let v = local_basis(grid.class(idx.timestep), idx.order, s, deriv);
    match deriv {
        0 => v,
        1 => v / grid.dt,
        _ => v / (grid.dt * grid.dt),
    }
}

/// Partition-of-unity function `μ_i(t)`, `i ∈ 1..=N`.
pub fn partition_mu(grid: &TimeGrid, i: usize, t: f64) -> f64 {
    let fi = |k: i64| cutoff_f(2.0 * (t - grid.t(k)) / grid.dt - 1.0);
    if i == 1 {
        1.0 - fi(0)
    } else if i == grid.n {
        fi(grid.n as i64 - 2)
    } else {
        // ρ_{i-1}: bump on [t_{i-2}, t_i]
        let c = (i - 1) as i64;
        if t < grid.t(c - 1) || t > grid.t(c + 1) {
            0.0
        } else if t <= grid.t(c) {
            fi(c - 1)
        } else {
            1.0 - fi(c)
        }
    }
}
