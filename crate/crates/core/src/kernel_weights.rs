//! Kernel weights `ψ_{k,i}(r) = ∫ b̈_i(t-r) ḃ_k(t) dt` and
//! `ψ̃_{k,i}(r) = ∫ b_i(t-r) ḃ_k(t) dt`.
//!
//! On an equidistant grid every `ψ` is a shifted copy of one of a small set
//! of prototype functions `ξ` of `α = r + t_{anchor(ĩ)} - t_{anchor(k̃)}`.
//! Prototypes are tabulated in units of Δt (so one table set serves every
//! grid with the same `p`) as piecewise Chebyshev expansions.

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rayon::prelude::*;
use thiserror::Error;

use crate::quadrature::AdaptiveGauss;
use crate::temporal_basis::{local_basis, StepClass, TemporalBasisIndex, TimeGrid};

/// Polynomial degree of each Chebyshev panel.
pub const CHEB_DEGREE: usize = 16;
/// Panels per Δt; 16 panels cover `[0, 2Δt]`.
pub const PANELS_PER_STEP: usize = 8;

const NC: usize = CHEB_DEGREE + 1;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("distance argument must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("kernel table file: {0}")]
    Format(String),
    #[error("kernel table file: {0}")]
    Io(#[from] std::io::Error),
}

/// Pair of timestep classes: `trial` for `b_i` (shifted, differentiated
/// zero or two times), `test` for `ḃ_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub trial: StepClass,
    pub test: StepClass,
}

impl Variant {
    pub const INNER: Variant = Variant {
        trial: StepClass::Inner,
        test: StepClass::Inner,
    };

    pub fn all() -> impl Iterator<Item = Variant> {
        StepClass::ALL.into_iter().flat_map(|trial| {
            StepClass::ALL
                .into_iter()
                .map(move |test| Variant { trial, test })
        })
    }

    fn index(self) -> usize {
        class_index(self.trial) * 3 + class_index(self.test)
    }

    /// Tabulated range of `α/Δt`. The inner-inner case uses the parity
    /// symmetry and is stored on `[0, 2]`; boundary variants cover their
    /// whole support `[-w_trial, w_test]`.
    pub fn alpha_range(self) -> (f64, f64) {
        if self == Self::INNER {
            (0.0, 2.0)
        } else {
            (-self.trial.width(), self.test.width())
        }
    }

    /// Panel boundaries of the tables of this variant (units of Δt).
    pub fn breaks(self) -> &'static [f64] {
        static BREAKS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
        &BREAKS.get_or_init(|| Variant::all().map(make_breaks).collect())[self.index()]
    }

    fn panels(self) -> usize {
        self.breaks().len() - 1
    }

    /// Orders `(m1, m2)` stored for this variant.
    pub fn stored_pairs(self, p: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for m1 in 0..=p {
            for m2 in 0..=p {
                if self != Self::INNER || m1 <= m2 {
                    v.push((m1, m2));
                }
            }
        }
        v
    }
}

fn class_index(c: StepClass) -> usize {
    match c {
        StepClass::First => 0,
        StepClass::Inner => 1,
        StepClass::Last => 2,
    }
}

fn class_name(c: StepClass) -> &'static str {
    match c {
        StepClass::First => "first",
        StepClass::Inner => "inner",
        StepClass::Last => "last",
    }
}

fn parse_class(s: &str) -> Option<StepClass> {
    match s {
        "first" => Some(StepClass::First),
        "inner" => Some(StepClass::Inner),
        "last" => Some(StepClass::Last),
        _ => None,
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", class_name(self.trial), class_name(self.test))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrototypeKind {
    pub variant: Variant,
    pub m1: usize,
    pub m2: usize,
}

/// Piecewise Chebyshev approximation of one prototype on equal panels of
/// width `1/PANELS_PER_STEP` (units of Δt).
#[derive(Debug, Clone, PartialEq)]
pub struct ChebApproxTable {
    pub kind: PrototypeKind,
    pub tilde: bool,
    pub lo: f64,
    pub hi: f64,
    pub coeffs: Vec<[f64; NC]>,
}

impl ChebApproxTable {
    pub fn n_sub(&self) -> usize {
        self.coeffs.len()
    }

    /// Evaluates at `a = α/Δt`; zero outside the tabulated range.
    pub fn eval(&self, a: f64) -> f64 {
        if !(a >= self.lo && a <= self.hi) {
            return 0.0;
        }
        let (panel, x) = locate(a, self.kind.variant.breaks());
        clenshaw(&self.coeffs[panel], x)
    }
}

/// Panel containing `a` and the local coordinate in `[-1, 1]`.
fn locate(a: f64, breaks: &[f64]) -> (usize, f64) {
    let n = breaks.len() - 1;
    let panel = breaks.partition_point(|&b| b <= a).clamp(1, n) - 1;
    let (l, r) = (breaks[panel], breaks[panel + 1]);
    (panel, (2.0 * (a - l) / (r - l) - 1.0).clamp(-1.0, 1.0))
}

fn locate_uniform(a: f64, n_sub: usize) -> (usize, f64) {
    let u = a * PANELS_PER_STEP as f64;
    let panel = (u.floor() as usize).min(n_sub - 1);
    (panel, 2.0 * (u - panel as f64) - 1.0)
}

/// Number of geometrically graded panels next to each grid point in the
/// boundary variants.
const GRADING_LEVELS: usize = 10;

fn make_breaks(variant: Variant) -> Vec<f64> {
    let (lo, hi) = variant.alpha_range();
    let n = ((hi - lo) as usize) * PANELS_PER_STEP;
    let h = 1.0 / PANELS_PER_STEP as f64;
    let uniform: Vec<f64> = (0..=n).map(|j| lo + j as f64 * h).collect();
    if variant == Variant::INNER {
        return uniform;
    }
    // The first/last basis functions are only finitely smooth at their
    // support ends, so prototypes have flat, non-analytic tails at
    // integer α. Panels touching an integer are split geometrically.
    let mut out = vec![lo];
    for w in uniform.windows(2) {
        let (a, b) = (w[0], w[1]);
        let at_int = |x: f64| (x - x.round()).abs() < 1e-12;
        if at_int(a) {
            for l in (1..GRADING_LEVELS).rev() {
                out.push(a + h / (1u64 << l) as f64);
            }
        } else if at_int(b) {
            for l in 1..GRADING_LEVELS {
                out.push(b - h / (1u64 << l) as f64);
            }
        }
        out.push(b);
    }
    out
}

/// `Σ c_k T_k(x)` by Clenshaw's backward recurrence.
pub fn clenshaw(coeffs: &[f64], x: f64) -> f64 {
    let x = x.clamp(-1.0, 1.0);
    let two_x = 2.0 * x;
    let (mut b1, mut b2) = (0.0, 0.0);
    for &c in coeffs.iter().skip(1).rev() {
        let b0 = c + two_x * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    coeffs.first().copied().unwrap_or(0.0) + x * b1 - b2
}

/// Chebyshev coefficients of the interpolant through Chebyshev-Lobatto
/// nodes `cos(πj/d)` (DCT-I).
fn lobatto_coefficients(values: &[f64; NC]) -> [f64; NC] {
    let d = CHEB_DEGREE;
    let mut c = [0.0; NC];
    for (k, ck) in c.iter_mut().enumerate() {
        let mut s = 0.0;
        for (j, v) in values.iter().enumerate() {
            let w = if j == 0 || j == d { 0.5 } else { 1.0 };
            s += w * v * (std::f64::consts::PI * (j * k) as f64 / d as f64).cos();
        }
        *ck = 2.0 * s / d as f64;
    }
    c[0] *= 0.5;
    c[d] *= 0.5;
    c
}

fn prototype_unit(kind: PrototypeKind, tilde: bool, a: f64, quad: &AdaptiveGauss) -> f64 {
    prototype_scaled(1.0, kind, tilde, a, quad)
}

fn prototype_scaled(dt: f64, kind: PrototypeKind, tilde: bool, alpha: f64, quad: &AdaptiveGauss) -> f64 {
    let wa = kind.variant.trial.width() * dt;
    let wb = kind.variant.test.width() * dt;
    let lo = alpha.max(0.0);
    let hi = (alpha + wa).min(wb);
    if hi <= lo {
        return 0.0;
    }
    let d = if tilde { 0 } else { 2 };
    let scale = dt.powi(d as i32 + 1);
    let f = |t: f64| {
        local_basis(kind.variant.trial, kind.m1, (t - alpha) / dt, d)
            * local_basis(kind.variant.test, kind.m2, t / dt, 1)
            / scale
    };
    let breaks = [dt, alpha + dt];
    quad.integrate_with_breaks(lo, hi, &breaks, 1e-13 * dt.min(1.0), &f)
}

/// Defining integral of a prototype on `grid`, by adaptive Gauss quadrature.
///
/// `∫ β_trial^{(d)}(t - α) β̇_test(t) dt` with both basis functions anchored
/// at 0, `d = 0` for the tilde kernel and `d = 2` otherwise.
pub fn prototype_direct(grid: &TimeGrid, kind: PrototypeKind, tilde: bool, alpha: f64) -> f64 {
    prototype_scaled(grid.dt, kind, tilde, alpha, &AdaptiveGauss::default())
}

/// All prototype tables for order `p`, in units of Δt.
#[derive(Debug, Clone)]
pub struct KernelTables {
    p: usize,
    tables: Vec<ChebApproxTable>,
    /// first table of each variant (tilde tables, then the plain ones)
    offsets: [usize; 9],
}

impl KernelTables {
    pub fn build(p: usize) -> Self {
        let mut jobs = Vec::new();
        for variant in Variant::all() {
            for tilde in [true, false] {
                for (m1, m2) in variant.stored_pairs(p) {
                    jobs.push((PrototypeKind { variant, m1, m2 }, tilde));
                }
            }
        }
        let tables: Vec<ChebApproxTable> = jobs
            .par_iter()
            .map(|&(kind, tilde)| build_table(kind, tilde))
            .collect();
        Self::from_tables(p, tables)
    }

    fn from_tables(p: usize, tables: Vec<ChebApproxTable>) -> Self {
        let mut offsets = [usize::MAX; 9];
        for (i, t) in tables.iter().enumerate() {
            let v = t.kind.variant.index();
            if offsets[v] == usize::MAX {
                offsets[v] = i;
            }
        }
        Self { p, tables, offsets }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn tables(&self) -> &[ChebApproxTable] {
        &self.tables
    }

    pub fn table(&self, kind: PrototypeKind, tilde: bool) -> Option<&ChebApproxTable> {
        let pairs = kind.variant.stored_pairs(self.p);
        let pos = pairs.iter().position(|&q| q == (kind.m1, kind.m2))?;
        let base = self.offsets[kind.variant.index()];
        let idx = base + if tilde { 0 } else { pairs.len() } + pos;
        self.tables.get(idx)
    }

    /// Prototype value at `α` (physical units) through the tables,
    /// applying parity and swap identities for the inner-inner case.
    pub fn eval_prototype(&self, dt: f64, kind: PrototypeKind, tilde: bool, alpha: f64) -> f64 {
        let a = alpha / dt;
        let scale = if tilde { 1.0 } else { 1.0 / (dt * dt) };
        if kind.variant != Variant::INNER {
            return scale * self.table(kind, tilde).map_or(0.0, |t| t.eval(a));
        }
        let (lo, hi) = (kind.m1.min(kind.m2), kind.m1.max(kind.m2));
        let t = self
            .table(PrototypeKind { variant: kind.variant, m1: lo, m2: hi }, tilde)
            .expect("order exceeds table order");
        let mut v = t.eval(a.abs());
        if a < 0.0 && (kind.m1 + kind.m2) % 2 == 0 {
            v = -v;
        }
        if kind.m1 > kind.m2 && (kind.m1 + kind.m2) % 2 == 1 {
            v = -v;
        }
        scale * v
    }

    /// Writes the tables as ASCII (see README for the format).
    pub fn dump<W: Write>(&self, mut w: W) -> Result<(), KernelError> {
        writeln!(w, "tdbem-kernel-tables 1 p {} degree {} panels_per_step {}", self.p, CHEB_DEGREE, PANELS_PER_STEP)?;
        for t in &self.tables {
            for (panel, c) in t.coeffs.iter().enumerate() {
                write!(
                    w,
                    "{} {} {} {} {}",
                    t.kind.variant,
                    u8::from(t.tilde),
                    t.kind.m1,
                    t.kind.m2,
                    panel
                )?;
                for v in c {
                    write!(w, " {v:.17e}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, KernelError> {
        let bad = |m: String| KernelError::Format(m);
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 8 || h[0] != "tdbem-kernel-tables" || h[1] != "1" {
            return Err(bad(format!("unrecognized header `{header}`")));
        }
        let p: usize = h[3].parse().map_err(|_| bad("bad order".into()))?;
        if h[5] != CHEB_DEGREE.to_string() || h[7] != PANELS_PER_STEP.to_string() {
            return Err(bad("table layout does not match this build".into()));
        }
        let mut tables: Vec<ChebApproxTable> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 + NC {
                return Err(bad(format!("line {}: expected {} fields", n + 2, 5 + NC)));
            }
            let (trial, test) = f[0]
                .split_once('-')
                .and_then(|(a, b)| Some((parse_class(a)?, parse_class(b)?)))
                .ok_or_else(|| bad(format!("line {}: bad variant `{}`", n + 2, f[0])))?;
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("line {}: bad integer `{s}`", n + 2)));
            let tilde = num(f[1])? == 1;
            let kind = PrototypeKind {
                variant: Variant { trial, test },
                m1: num(f[2])?,
                m2: num(f[3])?,
            };
            let panel = num(f[4])?;
            let mut c = [0.0; NC];
            for (k, s) in f[5..].iter().enumerate() {
                c[k] = s.parse().map_err(|_| bad(format!("line {}: bad number `{s}`", n + 2)))?;
            }
            match tables.last_mut() {
                Some(t) if t.kind == kind && t.tilde == tilde => {
                    if panel != t.coeffs.len() {
                        return Err(bad(format!("line {}: panels out of order", n + 2)));
                    }
                    t.coeffs.push(c)
                }
                _ => {
                    if panel != 0 {
                        return Err(bad(format!("line {}: table does not start at panel 0", n + 2)));
                    }
                    let (lo, hi) = kind.variant.alpha_range();
                    tables.push(ChebApproxTable { kind, tilde, lo, hi, coeffs: vec![c] });
                }
            }
        }
        let expected = Self::layout(p);
        if tables.len() != expected.len()
            || tables
                .iter()
                .zip(&expected)
                .any(|(t, &(k, tl))| t.kind != k || t.tilde != tl || t.coeffs.len() != k.variant.panels())
        {
            return Err(bad("table set is incomplete or out of order".into()));
        }
        Ok(Self::from_tables(p, tables))
    }

    fn layout(p: usize) -> Vec<(PrototypeKind, bool)> {
        let mut v = Vec::new();
        for variant in Variant::all() {
            for tilde in [true, false] {
                for (m1, m2) in variant.stored_pairs(p) {
                    v.push((PrototypeKind { variant, m1, m2 }, tilde));
                }
            }
        }
        v
    }
}

fn build_table(kind: PrototypeKind, tilde: bool) -> ChebApproxTable {
    let quad = AdaptiveGauss::default();
    let (lo, hi) = kind.variant.alpha_range();
    let coeffs = kind
        .variant
        .breaks()
        .windows(2)
        .map(|w| {
            let (a, h) = (w[0], w[1] - w[0]);
            let mut values = [0.0; NC];
            for (j, v) in values.iter_mut().enumerate() {
                let x = (std::f64::consts::PI * j as f64 / CHEB_DEGREE as f64).cos();
                *v = prototype_unit(kind, tilde, a + 0.5 * h * (1.0 + x), &quad);
            }
            lobatto_coefficients(&values)
        })
        .collect();
    ChebApproxTable { kind, tilde, lo, hi, coeffs }
}

/// Support of `ψ_{k,i}` in `r`, or `None` when it is identically zero.
pub fn psi_support(grid: &TimeGrid, k_step: usize, i_step: usize) -> Option<(f64, f64)> {
    if k_step + 2 <= i_step {
        return None;
    }
    let (klo, khi) = grid.support_indices(k_step);
    let (ilo, ihi) = grid.support_indices(i_step);
    let lo = (klo as i64 - ihi as i64).max(0);
    let hi = khi as i64 - ilo as i64;
    if hi <= lo {
        return None;
    }
    Some((grid.t(lo), grid.t(hi)))
}

/// Evaluates all `(p+1)²` weights of one timestep block `(k̃, ĩ)` at once.
///
/// Output slices are indexed `m2 * (p+1) + m1` (test order, trial order).
#[derive(Debug, Clone)]
pub struct BlockKernel<'a> {
    tables: &'a KernelTables,
    variant: Variant,
    /// `(t_{anchor(ĩ)} - t_{anchor(k̃)}) / Δt`
    shift: f64,
    inv_dt: f64,
    inv_dt2: f64,
    support: Option<(f64, f64)>,
    first: usize,
    n_pairs: usize,
}

impl<'a> BlockKernel<'a> {
    pub fn new(tables: &'a KernelTables, grid: &TimeGrid, k_step: usize, i_step: usize) -> Self {
        assert_eq!(tables.p, grid.p, "kernel tables built for a different order");
        let variant = Variant {
            trial: grid.class(i_step),
            test: grid.class(k_step),
        };
        let shift = grid.anchor_index(i_step) as f64 - grid.anchor_index(k_step) as f64;
        Self {
            tables,
            variant,
            shift,
            inv_dt: 1.0 / grid.dt,
            inv_dt2: 1.0 / (grid.dt * grid.dt),
            support: psi_support(grid, k_step, i_step),
            first: tables.offsets[variant.index()],
            n_pairs: variant.stored_pairs(tables.p).len(),
        }
    }

    pub fn support(&self) -> Option<(f64, f64)> {
        self.support
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Fills `psi` and `psi_tilde` at distance `r`.
    pub fn eval(&self, r: f64, psi: &mut [f64], psi_tilde: &mut [f64]) {
        let np = self.tables.p + 1;
        debug_assert!(psi.len() >= np * np && psi_tilde.len() >= np * np);
        let zero = |psi: &mut [f64], pt: &mut [f64]| {
            psi[..np * np].fill(0.0);
            pt[..np * np].fill(0.0);
        };
        let Some((slo, shi)) = self.support else {
            return zero(psi, psi_tilde);
        };
        if r < slo || r > shi {
            return zero(psi, psi_tilde);
        }
        let a = r * self.inv_dt + self.shift;
        let tables = &self.tables.tables[self.first..];
        if self.variant == Variant::INNER {
            let abs = a.abs();
            if abs >= 2.0 {
                return zero(psi, psi_tilde);
            }
            let (panel, x) = locate_uniform(abs, 2 * PANELS_PER_STEP);
            let negative = a < 0.0;
            let mut idx = 0;
            for m1 in 0..np {
                for m2 in m1..np {
                    let vt = clenshaw(&tables[idx].coeffs[panel], x);
                    let v = clenshaw(&tables[self.n_pairs + idx].coeffs[panel], x) * self.inv_dt2;
                    idx += 1;
                    let even = (m1 + m2) % 2 == 0;
                    // parity: odd-sum functions are even in α
                    let s = if negative && even { -1.0 } else { 1.0 };
                    psi_tilde[m2 * np + m1] = s * vt;
                    psi[m2 * np + m1] = s * v;
                    if m1 != m2 {
                        let w = if even { s } else { -s };
                        psi_tilde[m1 * np + m2] = w * vt;
                        psi[m1 * np + m2] = w * v;
                    }
                }
            }
        } else {
            let (lo, hi) = self.variant.alpha_range();
            if !(a > lo && a < hi) {
                return zero(psi, psi_tilde);
            }
            let (panel, x) = locate(a, self.variant.breaks());
            for (idx, t) in tables[..self.n_pairs].iter().enumerate() {
                let (m1, m2) = (t.kind.m1, t.kind.m2);
                psi_tilde[m2 * np + m1] = clenshaw(&t.coeffs[panel], x);
                psi[m2 * np + m1] =
                    clenshaw(&tables[self.n_pairs + idx].coeffs[panel], x) * self.inv_dt2;
            }
        }
    }
}

/// Single kernel weight `ψ_{k,i}(r)` (or `ψ̃` when `tilde`), flat indices.
pub fn eval_psi(
    tables: &KernelTables,
    grid: &TimeGrid,
    k: usize,
    i: usize,
    r: f64,
    tilde: bool,
) -> Result<f64, KernelError> {
    if r < 0.0 || r.is_nan() {
        return Err(KernelError::NegativeDistance(r));
    }
    let kk = TemporalBasisIndex::from_flat(k, grid.p);
    let ii = TemporalBasisIndex::from_flat(i, grid.p);
    let bk = BlockKernel::new(tables, grid, kk.timestep, ii.timestep);
    let np = grid.p + 1;
    let mut psi = vec![0.0; np * np];
    let mut pt = vec![0.0; np * np];
    bk.eval(r, &mut psi, &mut pt);
    let at = kk.order * np + ii.order;
    Ok(if tilde { pt[at] } else { psi[at] })
}
