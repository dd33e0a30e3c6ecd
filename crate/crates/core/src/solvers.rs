//! Krylov solvers for `A α = g`: restarted GMRES, deflated DGMRES and
//! flexible FGMRES with the recursive block Hessenberg preconditioner.
//!
//! All variants precondition from the right, so the residual that is
//! monitored is the residual of the original system.

use std::collections::HashMap;
use std::io::Write;
use std::ops::RangeInclusive;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Schur, LU};
use thiserror::Error;

use crate::block_system::BlockHessenbergMatrix;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("operator of dimension {expected} applied to vector of length {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Arnoldi breakdown at iteration {0}")]
    Breakdown(usize),
    #[error("operator application failed: {0}")]
    Operator(String),
    #[error("preconditioner application failed: {0}")]
    Preconditioner(String),
    #[error("QR iteration did not converge")]
    SchurNotConverged,
}

/// A square linear map.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<(), SolverError>;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<(), SolverError> {
        if x.len() != self.ncols() || y.len() != self.nrows() {
            return Err(SolverError::DimensionMismatch {
                expected: self.ncols(),
                got: x.len(),
            });
        }
        let r = self * DVector::from_column_slice(x);
        y.copy_from_slice(r.as_slice());
        Ok(())
    }
}

impl LinearOperator for BlockHessenbergMatrix {
    fn dim(&self) -> usize {
        BlockHessenbergMatrix::dim(self)
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<(), SolverError> {
        let n = self.grid().n;
        self.apply_range(1..=n, 1..=n, x, y)
            .map_err(|e| SolverError::Operator(e.to_string()))
    }
}

/// Sub-matrix of a block system on inclusive timestep ranges.
#[derive(Debug, Clone)]
pub struct BlockView<'a> {
    pub a: &'a BlockHessenbergMatrix,
    pub rows: RangeInclusive<usize>,
    pub cols: RangeInclusive<usize>,
}

impl LinearOperator for BlockView<'_> {
    fn dim(&self) -> usize {
        (self.rows.end() + 1 - self.rows.start()) * self.a.step_len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<(), SolverError> {
        self.a
            .apply_range(self.rows.clone(), self.cols.clone(), x, y)
            .map_err(|e| SolverError::Operator(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gmres,
    Dgmres,
    FgmresRecursive,
}

impl std::str::FromStr for Method {
    type Err = SolverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gmres" => Ok(Method::Gmres),
            "dgmres" => Ok(Method::Dgmres),
            "fgmres-recursive" | "fgmres" => Ok(Method::FgmresRecursive),
            _ => Err(SolverError::InvalidConfig(format!("unknown solver.method `{s}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Gmres => "gmres",
            Method::Dgmres => "dgmres",
            Method::FgmresRecursive => "fgmres-recursive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Iterations between restarts, `m`.
    pub restart: usize,
    /// Relative residual tolerance `ε`.
    pub tol: f64,
    /// Maximum number of (outer) iterations.
    pub max_iter: usize,
    /// Deflation vectors added per restart, `l`.
    pub deflation_l: usize,
    /// Maximum deflation subspace dimension, `r`.
    pub deflation_r: usize,
    /// Inner FGMRES iterations per recursion level; its length is `m_r`.
    pub inner_iterations: Vec<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Gmres,
            restart: 50,
            tol: 1e-5,
            max_iter: 20_000,
            deflation_l: 4,
            deflation_r: 20,
            inner_iterations: vec![2, 10],
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if self.restart == 0 {
            return bad("solver.restart must be at least 1");
        }
        if !(self.tol > 0.0) {
            return bad("solver.tol must be positive");
        }
        if self.deflation_l > self.deflation_r {
            return bad("solver.deflation_l must not exceed solver.deflation_r");
        }
        if self.inner_iterations.contains(&0) {
            return bad("solver.inner_iterations entries must be at least 1");
        }
        Ok(())
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    /// Relative residual estimate; entry 0 is the initial residual.
    pub history: Vec<f64>,
    /// Seconds since the start of the solve, per history entry.
    pub times: Vec<f64>,
    pub converged: bool,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }

    pub fn relative_residual(&self) -> f64 {
        *self.history.last().expect("history is never empty")
    }

    /// CSV lines `iteration,relative_residual,wall_time`.
    pub fn write_log<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,relative_residual,wall_time")?;
        for (i, (r, t)) in self.history.iter().zip(&self.times).enumerate() {
            writeln!(w, "{i},{r:.6e},{t:.6}")?;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

fn residual(op: &dyn LinearOperator, b: &[f64], x: &[f64]) -> Result<Vec<f64>, SolverError> {
    let mut r = vec![0.0; b.len()];
    op.apply(x, &mut r)?;
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    Ok(r)
}

/// Right preconditioner callback `z = M^{-1} v`.
pub type Precond<'a> = dyn FnMut(&[f64], &mut [f64]) -> Result<(), SolverError> + 'a;

enum Mode<'p, 'a> {
    Plain,
    /// Fixed within a cycle; `x` is updated by `M^{-1} V y`.
    Fixed(&'p mut Precond<'a>),
    /// Flexible; the preconditioned vectors are kept.
    Flexible(&'p mut Precond<'a>),
}

/// Basis and unrotated Hessenberg matrix of the last cycle.
struct CycleInfo {
    v: Vec<Vec<f64>>,
    h: DMatrix<f64>,
    k: usize,
}

struct Run<'o> {
    op: &'o dyn LinearOperator,
    b: &'o [f64],
    bnorm: f64,
    tol: f64,
    max_iter: usize,
    start: Instant,
    history: Vec<f64>,
    times: Vec<f64>,
}

impl<'o> Run<'o> {
    fn new(op: &'o dyn LinearOperator, b: &'o [f64], tol: f64, max_iter: usize) -> Result<Self, SolverError> {
        if op.dim() != b.len() {
            return Err(SolverError::DimensionMismatch {
                expected: op.dim(),
                got: b.len(),
            });
        }
        Ok(Self {
            op,
            b,
            bnorm: norm(b),
            tol,
            max_iter,
            start: Instant::now(),
            history: Vec::new(),
            times: Vec::new(),
        })
    }

    fn record(&mut self, rel: f64) {
        self.history.push(rel);
        self.times.push(self.start.elapsed().as_secs_f64());
    }

    fn iterations(&self) -> usize {
        self.history.len().saturating_sub(1)
    }

    /// One restart cycle from `x` with residual `r` (`‖r‖ = beta`).
    fn cycle(
        &mut self,
        x: &mut [f64],
        r: &[f64],
        beta: f64,
        m: usize,
        mode: &mut Mode,
    ) -> Result<CycleInfo, SolverError> {
        let n = x.len();
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut z: Vec<Vec<f64>> = Vec::new();
        let mut h = DMatrix::<f64>::zeros(m + 1, m);
        let mut rot: Vec<(f64, f64)> = Vec::with_capacity(m);
        let mut rr = DMatrix::<f64>::zeros(m + 1, m);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k = 0;
        let mut w = vec![0.0; n];
        while k < m && self.iterations() < self.max_iter {
            let j = k;
            match mode {
                Mode::Plain => self.op.apply(&v[j], &mut w)?,
                Mode::Fixed(p) => {
                    let mut t = vec![0.0; n];
                    p(&v[j], &mut t)?;
                    self.op.apply(&t, &mut w)?;
                }
                Mode::Flexible(p) => {
                    let mut t = vec![0.0; n];
                    p(&v[j], &mut t)?;
                    self.op.apply(&t, &mut w)?;
                    z.push(t);
                }
            }
            let w_norm0 = norm(&w);
            for (i, vi) in v.iter().enumerate() {
                let hij = dot(&w, vi);
                h[(i, j)] = hij;
                axpy(-hij, vi, &mut w);
            }
            let hn = norm(&w);
            h[(j + 1, j)] = hn;
            // Givens rotations on the copy
            for i in 0..=j + 1 {
                rr[(i, j)] = h[(i, j)];
            }
            for (i, &(c, s)) in rot.iter().enumerate() {
                let (a, b) = (rr[(i, j)], rr[(i + 1, j)]);
                rr[(i, j)] = c * a + s * b;
                rr[(i + 1, j)] = -s * a + c * b;
            }
            let (a, b) = (rr[(j, j)], rr[(j + 1, j)]);
            let d = a.hypot(b);
            let (c, s) = if d == 0.0 { (1.0, 0.0) } else { (a / d, b / d) };
            rot.push((c, s));
            rr[(j, j)] = d;
            rr[(j + 1, j)] = 0.0;
            g[j + 1] = -s * g[j];
            g[j] *= c;
            k += 1;
            let rel = g[j + 1].abs() / self.bnorm;
            self.record(rel);
            let lucky = hn <= 1e-14 * w_norm0.max(f64::MIN_POSITIVE);
            if lucky || rel <= self.tol {
                break;
            }
            v.push(w.iter().map(|wi| wi / hn).collect());
        }
        // back substitution R y = g
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for l in i + 1..k {
                s -= rr[(i, l)] * y[l];
            }
            if rr[(i, i)].abs() <= 1e-300 {
                return Err(SolverError::Breakdown(self.iterations()));
            }
            y[i] = s / rr[(i, i)];
        }
        let mut u = vec![0.0; n];
        if let Mode::Flexible(_) = mode {
            for (yi, zi) in y.iter().zip(&z) {
                axpy(*yi, zi, &mut u);
            }
        } else {
            for (yi, vi) in y.iter().zip(&v) {
                axpy(*yi, vi, &mut u);
            }
        }
        if let Mode::Fixed(p) = mode {
            let mut t = vec![0.0; n];
            p(&u, &mut t)?;
            u = t;
        }
        axpy(1.0, &u, x);
        v.truncate(k);
        Ok(CycleInfo { v, h, k })
    }

    /// Restarted driver; `after` runs after every cycle that did not converge.
    fn solve(
        mut self,
        m: usize,
        mode: &mut Mode,
        after: &mut dyn FnMut(&CycleInfo) -> Result<(), SolverError>,
    ) -> Result<SolveResult, SolverError> {
        let n = self.b.len();
        let mut x = vec![0.0; n];
        if self.bnorm == 0.0 {
            self.record(0.0);
            return Ok(self.finish(x, true));
        }
        let mut r = self.b.to_vec();
        let mut beta = self.bnorm;
        self.record(1.0);
        loop {
            let info = self.cycle(&mut x, &r, beta, m, mode)?;
            r = residual(self.op, self.b, &x)?;
            beta = norm(&r);
            if beta / self.bnorm <= self.tol {
                return Ok(self.finish(x, true));
            }
            if self.iterations() >= self.max_iter {
                return Ok(self.finish(x, false));
            }
            after(&info)?;
        }
    }

    fn finish(self, x: Vec<f64>, converged: bool) -> SolveResult {
        SolveResult {
            x,
            history: self.history,
            times: self.times,
            converged,
        }
    }
}

/// Restarted GMRES(m) with modified Gram–Schmidt Arnoldi.
pub fn gmres(op: &dyn LinearOperator, b: &[f64], cfg: &SolverConfig) -> Result<SolveResult, SolverError> {
    cfg.validate()?;
    let run = Run::new(op, b, cfg.tol, cfg.max_iter)?;
    run.solve(cfg.restart, &mut Mode::Plain, &mut |_| Ok(()))
}

/// Flexible GMRES(m) with a right preconditioner that may change between
/// iterations.
pub fn fgmres(
    op: &dyn LinearOperator,
    b: &[f64],
    cfg: &SolverConfig,
    precond: &mut Precond,
) -> Result<SolveResult, SolverError> {
    cfg.validate()?;
    let run = Run::new(op, b, cfg.tol, cfg.max_iter)?;
    run.solve(cfg.restart, &mut Mode::Flexible(precond), &mut |_| Ok(()))
}

/// Approximate invariant subspace used by DGMRES.
#[derive(Debug, Clone, Default)]
pub struct DeflationState {
    /// Orthonormal columns of `U`.
    pub u: Vec<Vec<f64>>,
    /// `A U`, column by column.
    pub au: Vec<Vec<f64>>,
    /// `T = Uᵀ A U`.
    pub t_small: DMatrix<f64>,
    /// `|λ_max|` estimate.
    pub lambda_max: f64,
    /// Restarts whose augmentation was dropped because `T` was singular.
    pub skipped: usize,
    lu: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl DeflationState {
    /// State for a given orthonormal `U`.
    pub fn new(op: &dyn LinearOperator, u: Vec<Vec<f64>>, lambda_max: f64) -> Result<Self, SolverError> {
        let mut s = Self {
            lambda_max,
            ..Self::default()
        };
        for col in u {
            let mut au = vec![0.0; col.len()];
            op.apply(&col, &mut au)?;
            s.u.push(col);
            s.au.push(au);
        }
        if !s.refresh() {
            return Err(SolverError::InvalidConfig("Uᵀ A U is singular".into()));
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// Recomputes `T` and its factorization; `false` if `T` is singular.
    fn refresh(&mut self) -> bool {
        let r = self.u.len();
        let t = DMatrix::from_fn(r, r, |i, j| dot(&self.u[i], &self.au[j]));
        let lu = t.clone().lu();
        let min_pivot = (0..r).map(|i| lu.u()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        let scale = t.amax().max(f64::MIN_POSITIVE);
        self.t_small = t;
        if r > 0 && !(min_pivot > 1e-13 * scale) {
            self.lu = None;
            return false;
        }
        self.lu = Some(lu);
        true
    }

    /// `out = M̂⁻¹ v = v + U(|λ| T⁻¹ − I) Uᵀ v`.
    pub fn apply_inverse(&self, v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(v);
        let Some(lu) = self.lu.as_ref().filter(|_| !self.u.is_empty()) else {
            return;
        };
        let c = DVector::from_iterator(self.u.len(), self.u.iter().map(|ui| dot(ui, v)));
        let tc = lu.solve(&c).expect("factorization checked in refresh");
        for (i, ui) in self.u.iter().enumerate() {
            axpy(self.lambda_max * tc[i] - c[i], ui, out);
        }
    }

    /// Adds `V_k S` for the Schur vectors `S` of the `l` smallest Ritz values
    /// of `H_k`, up to dimension `r`.
    fn augment(
        &mut self,
        op: &dyn LinearOperator,
        info: &CycleInfo,
        l: usize,
        r: usize,
    ) -> Result<(), SolverError> {
        let k = info.k;
        if k == 0 {
            return Ok(());
        }
        let hk = info.h.view((0, 0), (k, k)).clone_owned();
        let (q, t) = match dense_schur(&hk) {
            Ok(qt) => qt,
            Err(e) => {
                log::warn!("deflation skipped: {e}");
                return Ok(());
            }
        };
        let eig = schur_eigenvalues(&t);
        let largest = eig.iter().map(|e| e.0.hypot(e.1)).fold(0.0, f64::max);
        self.lambda_max = self.lambda_max.max(largest);
        if self.u.len() >= r || l == 0 {
            return Ok(());
        }
        let want = l.min(r - self.u.len());
        let select = smallest_blocks(&t, want);
        let (q, _) = reorder_schur(q, t, &select);
        let count: usize = select.iter().map(|&(_, sz)| sz).sum();
        let before = self.u.len();
        let n = info.v[0].len();
        for c in 0..count.min(k) {
            let mut u = vec![0.0; n];
            for (i, vi) in info.v.iter().enumerate().take(k) {
                axpy(q[(i, c)], vi, &mut u);
            }
            let n0 = norm(&u);
            for _ in 0..2 {
                for e in &self.u {
                    let s = dot(e, &u);
                    axpy(-s, e, &mut u);
                }
            }
            let nu = norm(&u);
            if nu < 1e-12 * n0.max(1.0) || nu < 1e-12 {
                continue;
            }
            u.iter_mut().for_each(|x| *x /= nu);
            let mut au = vec![0.0; n];
            op.apply(&u, &mut au)?;
            self.u.push(u);
            self.au.push(au);
        }
        if !self.refresh() {
            log::warn!("deflation: Uᵀ A U singular, augmentation skipped");
            self.u.truncate(before);
            self.au.truncate(before);
            self.skipped += 1;
            self.refresh();
        }
        Ok(())
    }
}

/// DGMRES(m, l): GMRES(m) right-preconditioned by deflation of the smallest
/// Ritz values collected at each restart.
pub fn dgmres(
    op: &dyn LinearOperator,
    b: &[f64],
    cfg: &SolverConfig,
) -> Result<(SolveResult, DeflationState), SolverError> {
    cfg.validate()?;
    let state = Mutex::new(DeflationState::default());
    let mut apply = |v: &[f64], out: &mut [f64]| {
        state.lock().expect("deflation state").apply_inverse(v, out);
        Ok(())
    };
    let run = Run::new(op, b, cfg.tol, cfg.max_iter)?;
    let result = run.solve(cfg.restart, &mut Mode::Fixed(&mut apply), &mut |info| {
        state
            .lock()
            .expect("deflation state")
            .augment(op, info, cfg.deflation_l, cfg.deflation_r)
    })?;
    Ok((result, state.into_inner().expect("deflation state")))
}

/// Real Schur form `H = Q T Qᵀ`.
pub fn dense_schur(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), SolverError> {
    assert!(h.is_square());
    let schur = Schur::try_new(h.clone(), f64::EPSILON, 100 * h.nrows().max(10))
        .ok_or(SolverError::SchurNotConverged)?;
    let (q, mut t) = schur.unpack();
    for j in 0..t.ncols() {
        for i in j + 2..t.nrows() {
            t[(i, j)] = 0.0;
        }
    }
    Ok((q, t))
}

/// Diagonal blocks `(start, size)` of a quasi-triangular matrix.
pub fn schur_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            out.push((i, 2));
            i += 2;
        } else {
            out.push((i, 1));
            i += 1;
        }
    }
    out
}

/// Eigenvalues `(re, im)` read off the diagonal blocks.
pub fn schur_eigenvalues(t: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (i, sz) in schur_blocks(t) {
        if sz == 1 {
            out.push((t[(i, i)], 0.0));
        } else {
            let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let half = 0.5 * (a + d);
            let disc = 0.25 * (a - d) * (a - d) + b * c;
            if disc >= 0.0 {
                let s = disc.sqrt();
                out.push((half + s, 0.0));
                out.push((half - s, 0.0));
            } else {
                let s = (-disc).sqrt();
                out.push((half, s));
                out.push((half, -s));
            }
        }
    }
    out
}

/// Blocks holding the `want` smallest-modulus eigenvalues; a conjugate pair
/// is taken whole, so the total may exceed `want` by one.
fn smallest_blocks(t: &DMatrix<f64>, want: usize) -> Vec<(usize, usize)> {
    let mut blocks: Vec<(f64, (usize, usize))> = schur_blocks(t)
        .into_iter()
        .map(|(i, sz)| {
            let e = schur_eigenvalues(&t.view((i, i), (sz, sz)).clone_owned());
            let m = e.iter().map(|v| v.0.hypot(v.1)).fold(f64::INFINITY, f64::min);
            (m, (i, sz))
        })
        .collect();
    blocks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1 .0.cmp(&b.1 .0)));
    let mut out = Vec::new();
    let mut count = 0;
    for (_, blk) in blocks {
        if count >= want {
            break;
        }
        count += blk.1;
        out.push(blk);
    }
    out
}

/// Swaps the adjacent diagonal blocks starting at `i` (sizes `p`, `q`).
fn swap_blocks(q: &mut DMatrix<f64>, t: &mut DMatrix<f64>, i: usize, p: usize, r: usize) {
    let n = t.nrows();
    let a11 = t.view((i, i), (p, p)).clone_owned();
    let a12 = t.view((i, i + p), (p, r)).clone_owned();
    let a22 = t.view((i + p, i + p), (r, r)).clone_owned();
    // A11 X - X A22 = A12 via the Kronecker form
    let dim = p * r;
    let mut k = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for a in 0..p {
        for b in 0..r {
            let row = a * r + b;
            rhs[row] = a12[(a, b)];
            for c in 0..p {
                k[(row, c * r + b)] += a11[(a, c)];
            }
            for c in 0..r {
                k[(row, a * r + c)] -= a22[(c, b)];
            }
        }
    }
    let Some(sol) = k.lu().solve(&rhs) else {
        log::warn!("Schur reordering: blocks share an eigenvalue, swap skipped");
        return;
    };
    let mut basis = DMatrix::<f64>::zeros(p + r, r);
    for a in 0..p {
        for b in 0..r {
            basis[(a, b)] = -sol[a * r + b];
        }
    }
    for b in 0..r {
        basis[(p + b, b)] = 1.0;
    }
    // full orthogonal factor of the basis via Householder QR
    let qr = basis.qr();
    let mut g = DMatrix::<f64>::identity(p + r, p + r);
    qr.q_tr_mul(&mut g);
    let g = g.transpose();
    let sub = t.view((i, 0), (p + r, n)).clone_owned();
    t.view_mut((i, 0), (p + r, n)).copy_from(&(g.transpose() * sub));
    let sub = t.view((0, i), (n, p + r)).clone_owned();
    t.view_mut((0, i), (n, p + r)).copy_from(&(sub * &g));
    let sub = q.view((0, i), (n, p + r)).clone_owned();
    q.view_mut((0, i), (n, p + r)).copy_from(&(sub * &g));
    // restore the quasi-triangular pattern below the new leading block
    for row in i + r..i + p + r {
        for col in i..i + r {
            t[(row, col)] = 0.0;
        }
    }
}

/// Reorders a real Schur form so the selected blocks come first, in the
/// given order.
pub fn reorder_schur(
    mut q: DMatrix<f64>,
    mut t: DMatrix<f64>,
    select: &[(usize, usize)],
) -> (DMatrix<f64>, DMatrix<f64>) {
    // track blocks by their eigenvalues; positions shift during swaps
    let mut layout: Vec<(usize, bool)> = schur_blocks(&t)
        .into_iter()
        .map(|(i, sz)| (sz, select.iter().any(|s| s.0 == i)))
        .collect();
    let mut placed = 0;
    for target in 0..layout.len() {
        if !layout[target].1 {
            continue;
        }
        // bubble block `target` down to position `placed`
        let mut pos = target;
        while pos > placed {
            let start: usize = layout[..pos - 1].iter().map(|b| b.0).sum();
            let (p, r) = (layout[pos - 1].0, layout[pos].0);
            swap_blocks(&mut q, &mut t, start, p, r);
            layout.swap(pos - 1, pos);
            pos -= 1;
        }
        placed += 1;
    }
    (q, t)
}

/// How the half systems at the last recursion level are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowestSolve {
    /// Unpreconditioned FGMRES with the level's iteration count.
    Iterative,
    /// Dense LU (testing only, small systems).
    Exact,
}

/// Recursive block-triangular preconditioner: `M` equals `A` with block
/// `Ã_{h,h+1}` removed, `h = ⌈N/2⌉`, and its half systems are solved
/// approximately by FGMRES preconditioned in the same way one level down.
pub struct RecursivePreconditioner<'a> {
    a: &'a BlockHessenbergMatrix,
    levels: Vec<usize>,
    tol: f64,
    lowest: LowestSolve,
    exact: Mutex<HashMap<(usize, usize), LU<f64, nalgebra::Dyn, nalgebra::Dyn>>>,
}

impl<'a> RecursivePreconditioner<'a> {
    pub fn new(a: &'a BlockHessenbergMatrix, cfg: &SolverConfig, lowest: LowestSolve) -> Self {
        Self {
            a,
            levels: cfg.inner_iterations.clone(),
            tol: cfg.tol,
            lowest,
            exact: Mutex::new(HashMap::new()),
        }
    }

    /// `z = M⁻¹ r` for the full system.
    pub fn apply(&self, r: &[f64], z: &mut [f64]) -> Result<(), SolverError> {
        self.apply_level(0, 1, self.a.grid().n, r, z)
    }

    fn apply_level(&self, level: usize, lo: usize, hi: usize, r: &[f64], z: &mut [f64]) -> Result<(), SolverError> {
        let sl = self.a.step_len();
        if lo == hi {
            return self.solve_half(level, lo, hi, r, z);
        }
        let h = lo + (hi - lo + 1).div_ceil(2) - 1;
        let split = (h - lo + 1) * sl;
        let (z1, z2) = z.split_at_mut(split);
        self.solve_half(level, lo, h, &r[..split], z1)?;
        let lower = BlockView {
            a: self.a,
            rows: h + 1..=hi,
            cols: lo..=h,
        };
        let mut t = vec![0.0; r.len() - split];
        lower.apply(z1, &mut t)?;
        for (ti, ri) in t.iter_mut().zip(&r[split..]) {
            *ti = ri - *ti;
        }
        self.solve_half(level, h + 1, hi, &t, z2)
    }

    fn solve_half(&self, level: usize, lo: usize, hi: usize, v: &[f64], z: &mut [f64]) -> Result<(), SolverError> {
        let view = BlockView {
            a: self.a,
            rows: lo..=hi,
            cols: lo..=hi,
        };
        if level >= self.levels.len() {
            return match self.lowest {
                LowestSolve::Exact => self.exact_solve(lo, hi, v, z),
                LowestSolve::Iterative => {
                    z.copy_from_slice(v);
                    Ok(())
                }
            };
        }
        let its = self.levels[level];
        let cfg = SolverConfig {
            method: Method::FgmresRecursive,
            restart: its,
            tol: self.tol,
            max_iter: its,
            inner_iterations: Vec::new(),
            ..SolverConfig::default()
        };
        let deeper = level + 1 < self.levels.len() || self.lowest == LowestSolve::Exact;
        let result = if deeper {
            let mut pre = |x: &[f64], y: &mut [f64]| self.apply_level(level + 1, lo, hi, x, y);
            fgmres(&view, v, &cfg, &mut pre)
        } else {
            let mut pre = |x: &[f64], y: &mut [f64]| {
                y.copy_from_slice(x);
                Ok(())
            };
            fgmres(&view, v, &cfg, &mut pre)
        };
        let result = result.map_err(|e| SolverError::Preconditioner(e.to_string()))?;
        z.copy_from_slice(&result.x);
        Ok(())
    }

    fn exact_solve(&self, lo: usize, hi: usize, v: &[f64], z: &mut [f64]) -> Result<(), SolverError> {
        let mut cache = self.exact.lock().expect("exact solve cache");
        if !cache.contains_key(&(lo, hi)) {
            let view = BlockView {
                a: self.a,
                rows: lo..=hi,
                cols: lo..=hi,
            };
            let n = view.dim();
            let mut d = DMatrix::<f64>::zeros(n, n);
            let mut e = vec![0.0; n];
            let mut col = vec![0.0; n];
            for j in 0..n {
                e.fill(0.0);
                e[j] = 1.0;
                view.apply(&e, &mut col)?;
                d.set_column(j, &DVector::from_column_slice(&col));
            }
            cache.insert((lo, hi), d.lu());
        }
        let sol = cache[&(lo, hi)]
            .solve(&DVector::from_column_slice(v))
            .ok_or_else(|| SolverError::Preconditioner("singular diagonal system".into()))?;
        z.copy_from_slice(sol.as_slice());
        Ok(())
    }
}

/// FGMRES on the full system with the recursive preconditioner.
pub fn fgmres_recursive(
    a: &BlockHessenbergMatrix,
    b: &[f64],
    cfg: &SolverConfig,
    lowest: LowestSolve,
) -> Result<SolveResult, SolverError> {
    let pre = RecursivePreconditioner::new(a, cfg, lowest);
    let mut apply = |r: &[f64], z: &mut [f64]| pre.apply(r, z);
    fgmres(a, b, cfg, &mut apply)
}

/// Solves with the method selected in `cfg`.
pub fn solve(a: &BlockHessenbergMatrix, b: &[f64], cfg: &SolverConfig) -> Result<SolveResult, SolverError> {
    match cfg.method {
        Method::Gmres => gmres(a, b, cfg),
        Method::Dgmres => dgmres(a, b, cfg).map(|r| r.0),
        Method::FgmresRecursive => fgmres_recursive(a, b, cfg, LowestSolve::Iterative),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) / (n as f64).sqrt());
        for i in 0..n {
            a[(i, i)] += 3.0;
        }
        let b = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        (a, b)
    }

    fn cfg(restart: usize, tol: f64) -> SolverConfig {
        SolverConfig {
            restart,
            tol,
            max_iter: 5000,
            ..SolverConfig::default()
        }
    }

    fn direct(a: &DMatrix<f64>, b: &[f64]) -> DVector<f64> {
        a.clone().lu().solve(&DVector::from_column_slice(b)).unwrap()
    }

    fn rel_err(x: &[f64], e: &DVector<f64>) -> f64 {
        let d: f64 = x.iter().zip(e.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        d.sqrt() / e.norm()
    }

    #[test]
    fn identity_converges_in_one_step() {
        let a = DMatrix::<f64>::identity(7, 7);
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 2.5).collect();
        let r = gmres(&a, &b, &cfg(10, 1e-12)).unwrap();
        assert_eq!(r.iterations(), 1);
        for (x, y) in r.x.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let (a, _) = random_system(5, 1);
        let r = gmres(&a, &[0.0; 5], &cfg(5, 1e-10)).unwrap();
        assert!(r.converged && r.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gmres_matches_direct_solve() {
        let (a, b) = random_system(50, 2);
        let r = gmres(&a, &b, &cfg(50, 1e-12)).unwrap();
        assert!(r.converged);
        assert!(rel_err(&r.x, &direct(&a, &b)) <= 1e-10);
    }

    #[test]
    fn restarted_variants_match_direct_solve() {
        let (a, b) = random_system(200, 3);
        let exact = direct(&a, &b);
        let c = cfg(20, 1e-12);
        let r = gmres(&a, &b, &c).unwrap();
        assert!(rel_err(&r.x, &exact) <= 1e-10);
        let (r, _) = dgmres(&a, &b, &SolverConfig { deflation_l: 2, deflation_r: 8, ..c.clone() }).unwrap();
        assert!(rel_err(&r.x, &exact) <= 1e-10);
        let mut id = |x: &[f64], y: &mut [f64]| {
            y.copy_from_slice(x);
            Ok(())
        };
        let r = fgmres(&a, &b, &c, &mut id).unwrap();
        assert!(rel_err(&r.x, &exact) <= 1e-10);
    }

    #[test]
    fn fgmres_identity_reproduces_gmres() {
        let (a, b) = random_system(60, 4);
        let c = cfg(10, 1e-11);
        let g = gmres(&a, &b, &c).unwrap();
        let mut id = |x: &[f64], y: &mut [f64]| {
            y.copy_from_slice(x);
            Ok(())
        };
        let f = fgmres(&a, &b, &c, &mut id).unwrap();
        assert_eq!(g.history.len(), f.history.len());
        for (u, v) in g.history.iter().zip(&f.history) {
            assert!((u - v).abs() <= 1e-13);
        }
        for (u, v) in g.x.iter().zip(&f.x) {
            assert!((u - v).abs() <= 1e-13);
        }
    }

    #[test]
    fn dgmres_without_deflation_is_gmres() {
        let (a, b) = random_system(40, 5);
        let c = SolverConfig { deflation_l: 0, ..cfg(8, 1e-11) };
        let g = gmres(&a, &b, &c).unwrap();
        let (d, s) = dgmres(&a, &b, &c).unwrap();
        assert_eq!(s.dim(), 0);
        assert_eq!(g.history, d.history);
        assert_eq!(g.x, d.x);
    }

    #[test]
    fn fgmres_exact_inverse_one_step() {
        let (a, b) = random_system(30, 6);
        let lu = a.clone().lu();
        let mut inv = |x: &[f64], y: &mut [f64]| {
            y.copy_from_slice(lu.solve(&DVector::from_column_slice(x)).unwrap().as_slice());
            Ok(())
        };
        let r = fgmres(&a, &b, &cfg(10, 1e-10), &mut inv).unwrap();
        assert_eq!(r.iterations(), 1);
    }

    #[test]
    fn fgmres_constant_preconditioner_matches_right_preconditioned_gmres() {
        let (a, b) = random_system(40, 7);
        let d = DMatrix::from_fn(40, 40, |i, j| if i == j { 1.0 / (1.0 + i as f64 * 0.1) } else { 0.0 });
        let c = cfg(8, 1e-11);
        let mut pre = |x: &[f64], y: &mut [f64]| {
            for i in 0..x.len() {
                y[i] = d[(i, i)] * x[i];
            }
            Ok(())
        };
        let f = fgmres(&a, &b, &c, &mut pre).unwrap();
        // GMRES on A D, then x = D u
        let ad = &a * &d;
        let g = gmres(&ad, &b, &c).unwrap();
        let x: Vec<f64> = g.x.iter().enumerate().map(|(i, u)| d[(i, i)] * u).collect();
        for (u, v) in f.history.iter().zip(&g.history) {
            assert!((u - v).abs() <= 1e-12);
        }
        for (u, v) in f.x.iter().zip(&x) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_deflation_replaces_smallest_eigenvalue() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 10.0]));
        let s = DeflationState::new(&a, vec![vec![1.0, 0.0, 0.0]], 10.0).unwrap();
        let mut minv = DMatrix::zeros(3, 3);
        for j in 0..3 {
            let mut e = [0.0; 3];
            e[j] = 1.0;
            let mut out = [0.0; 3];
            s.apply_inverse(&e, &mut out);
            minv.set_column(j, &DVector::from_column_slice(&out));
        }
        let (_, t) = dense_schur(&(&a * minv)).unwrap();
        let mut ev: Vec<f64> = schur_eigenvalues(&t).iter().map(|e| e.0).collect();
        ev.sort_by(f64::total_cmp);
        for (x, y) in ev.iter().zip([2.0, 10.0, 10.0]) {
            assert!((x - y).abs() <= 1e-12, "{ev:?}");
        }
    }

    #[test]
    fn dgmres_collects_orthonormal_subspace() {
        let (mut a, b) = random_system(120, 8);
        for i in 0..4 {
            a[(i, i)] = 0.01 * (i + 1) as f64;
        }
        let c = SolverConfig { deflation_l: 2, deflation_r: 6, ..cfg(15, 1e-10) };
        let g = gmres(&a, &b, &c).unwrap();
        let (d, s) = dgmres(&a, &b, &c).unwrap();
        assert!(d.converged);
        assert!(s.dim() > 0 && s.dim() <= 7);
        for (i, u) in s.u.iter().enumerate() {
            for (j, v) in s.u.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((dot(u, v) - e).abs() <= 1e-10);
            }
        }
        assert!(d.iterations() <= g.iterations());
    }

    #[test]
    fn tridiagonal_eigenvalues() {
        let h = DMatrix::from_fn(4, 4, |i, j| match i.abs_diff(j) {
            0 => 2.0,
            1 => -1.0,
            _ => 0.0,
        });
        let (_, t) = dense_schur(&h).unwrap();
        let mut ev: Vec<f64> = schur_eigenvalues(&t).iter().map(|e| e.0).collect();
        ev.sort_by(f64::total_cmp);
        let mut exact: Vec<f64> = (1..=4)
            .map(|k| 2.0 - 2.0 * (k as f64 * std::f64::consts::PI / 5.0).cos())
            .collect();
        exact.sort_by(f64::total_cmp);
        for (x, y) in ev.iter().zip(&exact) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn triangular_input_is_its_own_schur_form() {
        let h = DMatrix::from_fn(5, 5, |i, j| if j >= i { 1.0 + (i * 5 + j) as f64 } else { 0.0 });
        let (q, t) = dense_schur(&h).unwrap();
        for i in 0..5 {
            assert!((t[(i, i)] - h[(i, i)]).abs() < 1e-10);
            assert!((q[(i, i)].abs() - 1.0).abs() < 1e-10);
        }
    }

    fn check_schur(h: &DMatrix<f64>, q: &DMatrix<f64>, t: &DMatrix<f64>, tol: f64) {
        let rec = q * t * q.transpose();
        assert!((rec - h).norm() <= tol * h.norm());
        let orth = q.transpose() * q - DMatrix::identity(h.nrows(), h.nrows());
        assert!(orth.norm() <= 1e-12);
        for j in 0..t.ncols() {
            for i in j + 2..t.nrows() {
                assert_eq!(t[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn random_schur_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = DMatrix::from_fn(20, 20, |_, _| rng.random_range(-1.0..1.0));
        let (q, t) = dense_schur(&h).unwrap();
        check_schur(&h, &q, &t, 1e-12);
    }

    #[test]
    fn reordering_moves_smallest_eigenvalues_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let h = DMatrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
            let (q, t) = dense_schur(&h).unwrap();
            let mut all: Vec<f64> = schur_eigenvalues(&t).iter().map(|e| e.0.hypot(e.1)).collect();
            all.sort_by(f64::total_cmp);
            let sel = smallest_blocks(&t, 3);
            let count: usize = sel.iter().map(|s| s.1).sum();
            let (q2, t2) = reorder_schur(q, t, &sel);
            check_schur(&h, &q2, &t2, 1e-11);
            let lead = schur_eigenvalues(&t2.view((0, 0), (count, count)).clone_owned());
            let mut lead: Vec<f64> = lead.iter().map(|e| e.0.hypot(e.1)).collect();
            lead.sort_by(f64::total_cmp);
            for (x, y) in lead.iter().zip(&all) {
                assert!((x - y).abs() < 1e-8 * (1.0 + y), "{lead:?} {all:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn residual_history_monotone_within_cycles(seed in 0u64..1000, m in 2usize..12) {
            let (a, b) = random_system(40, seed);
            let r = gmres(&a, &b, &cfg(m, 1e-10)).unwrap();
            for (c, w) in r.history[1..].chunks(m).enumerate() {
                for p in w.windows(2) {
                    prop_assert!(p[1] <= p[0] * (1.0 + 1e-12), "cycle {}", c);
                }
            }
        }
    }
}
