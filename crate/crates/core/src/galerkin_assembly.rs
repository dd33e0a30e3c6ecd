//! Sparse spatial blocks of the Galerkin matrix and the right-hand side.
//!
//! Block `(k̃, ĩ)` couples test timestep `k̃` with trial timestep `ĩ`. Its
//! `(p+1)²` sub-blocks share one sparsity pattern; entry `(l, j)` is
//!
//! ```text
//! ∫∫ (n_x·n_y) φ_l(x) φ_j(y) ψ(|x-y|) / (4π|x-y|)
//!  + (curl φ_l(x) · curl φ_j(y)) ψ̃(|x-y|) / (4π|x-y|)  dΓ_y dΓ_x
//! ```
//!
//! which is symmetric in `(l, j)`.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::kernel_weights::{BlockKernel, KernelTables};
use crate::mesh::{SurfaceMesh, Vec3};
use crate::quadrature::{GaussLegendre, PairKind, SingularRules, TriangleRule};
use crate::temporal_basis::{basis_b, StepClass, TemporalBasisIndex, TimeGrid};

/// Spatial quadrature rules for element pairs.
///
/// `q_reg` is the minimum order of the tensor rule for separated pairs. The
/// kernel weights vary on the scale Δt, so the order used for a pair grows
/// with `h/Δt` (`h` the larger element diameter); pairs closer than `h`
/// get a further increase.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub q_reg: usize,
    pub q_sing: usize,
    /// Order added per `h/Δt`.
    pub per_step: f64,
    triangle: Vec<TriangleRule>,
    singular: SingularRules,
}

const MAX_ORDER: usize = 30;
const NEAR_BONUS: usize = 4;
const ROUGH_BONUS: usize = 6;

impl QuadratureRule {
    pub fn new(q_reg: usize, q_sing: usize) -> Self {
        Self {
            q_reg,
            q_sing,
            per_step: 4.0,
            triangle: (0..=MAX_ORDER).map(TriangleRule::with_order).collect(),
            singular: SingularRules::new(q_sing),
        }
    }

    pub fn regular(&self) -> &TriangleRule {
        &self.triangle[self.q_reg.min(MAX_ORDER)]
    }

    pub fn with_order(&self, order: usize) -> &TriangleRule {
        &self.triangle[order.min(MAX_ORDER)]
    }

    /// Order for a separated pair with larger diameter `h` and distance `d`.
    /// `rough` marks kernels with a first-timestep trial function, whose
    /// second derivative jumps at `t = 0`; those converge only algebraically.
    pub fn pair_order(&self, h: f64, d: f64, dt: f64, rough: bool) -> usize {
        let mut q = self.q_reg + (self.per_step * h / dt).ceil() as usize;
        if d < h {
            q += NEAR_BONUS;
        }
        if rough {
            q += ROUGH_BONUS;
        }
        q.min(MAX_ORDER)
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::new(4, 5)
    }
}

/// Distance intervals of all element pairs and all dof pairs of a mesh.
#[derive(Debug, Clone)]
pub struct MeshDistances {
    n_elem: usize,
    n_dof: usize,
    elem: Vec<(f64, f64)>,
    dof_min: Vec<f64>,
    dof_max: Vec<f64>,
}

impl MeshDistances {
    pub fn new(mesh: &SurfaceMesh) -> Self {
        let n = mesh.triangle_count();
        let m = mesh.dof_count();
        let elem: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .flat_map_iter(|a| (0..n).map(move |b| (a, b)))
            .map(|(a, b)| {
                if a <= b {
                    mesh.triangle_distance(a, b)
                } else {
                    mesh.triangle_distance(b, a)
                }
            })
            .collect();
        let mut dof_min = vec![f64::INFINITY; m * m];
        let mut dof_max = vec![0.0f64; m * m];
        for a in 0..n {
            for b in 0..n {
                let (lo, hi) = elem[a * n + b];
                for &j in &mesh.triangles()[a] {
                    for &l in &mesh.triangles()[b] {
                        let k = j * m + l;
                        dof_min[k] = dof_min[k].min(lo);
                        dof_max[k] = dof_max[k].max(hi);
                    }
                }
            }
        }
        Self {
            n_elem: n,
            n_dof: m,
            elem,
            dof_min,
            dof_max,
        }
    }

    pub fn element(&self, a: usize, b: usize) -> (f64, f64) {
        self.elem[a * self.n_elem + b]
    }

    pub fn dof(&self, j: usize, l: usize) -> (f64, f64) {
        let k = j * self.n_dof + l;
        (self.dof_min[k], self.dof_max[k])
    }
}

fn meets(interval: (f64, f64), support: (f64, f64)) -> bool {
    interval.0 <= support.1 && interval.1 >= support.0
}

/// Row-compressed sparsity of one timestep block plus the contributing
/// element pairs `(τ_a, τ_b)`, `a <= b`, sorted. Each unordered pair
/// stands for both `(τ_x, τ_y)` orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub element_pairs: Vec<(u32, u32)>,
}

impl SparsityPattern {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            element_pairs: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.slot(row, col).is_some()
    }

    pub fn slot(&self, row: usize, col: usize) -> Option<usize> {
        let (a, b) = (self.row_ptr[row], self.row_ptr[row + 1]);
        self.cols[a..b].binary_search(&col).ok().map(|k| a + k)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |r| {
            self.cols[self.row_ptr[r]..self.row_ptr[r + 1]]
                .iter()
                .map(move |&c| (r, c))
        })
    }
}

/// Dof pairs `(l, j)` whose distance interval meets `supp ψ_{k,i}`, with the
/// contributing element pairs.
pub fn sparsity_pattern(
    mesh: &SurfaceMesh,
    dist: &MeshDistances,
    grid: &TimeGrid,
    k_step: usize,
    i_step: usize,
) -> SparsityPattern {
    let m = mesh.dof_count();
    let Some(support) = crate::kernel_weights::psi_support(grid, k_step, i_step) else {
        return SparsityPattern::empty(m);
    };
    let rows: Vec<Vec<usize>> = (0..m)
        .into_par_iter()
        .map(|l| (0..m).filter(|&j| meets(dist.dof(l, j), support)).collect())
        .collect();
    let mut row_ptr = Vec::with_capacity(m + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    for r in rows {
        cols.extend(r);
        row_ptr.push(cols.len());
    }
    let n = mesh.triangle_count();
    let element_pairs = (0..n)
        .into_par_iter()
        .flat_map_iter(|a| {
            (a..n)
                .filter(move |&b| meets(dist.element(a, b), support))
                .map(move |b| (a as u32, b as u32))
        })
        .collect();
    SparsityPattern {
        n: m,
        row_ptr,
        cols,
        element_pairs,
    }
}

/// Square sparse matrix in compressed row storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlock {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseBlock {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (a, b) = (self.row_ptr[row], self.row_ptr[row + 1]);
        match self.cols[a..b].binary_search(&col) {
            Ok(k) => self.values[a + k],
            Err(_) => 0.0,
        }
    }

    /// `y += s A x`
    pub fn mul_add(&self, s: f64, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.cols[k]];
            }
            *yr += s * acc;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[r * self.n + self.cols[k]] = self.values[k];
            }
        }
        d
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Read-only inputs for block assembly.
pub struct Assembler<'a> {
    pub mesh: &'a SurfaceMesh,
    pub dist: &'a MeshDistances,
    pub grid: &'a TimeGrid,
    pub tables: &'a KernelTables,
    pub rule: &'a QuadratureRule,
}

#[derive(Clone, Copy)]
struct QPoint {
    pos: Vec3,
    lam: [f64; 3],
    w: f64,
}

struct Kahan {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl Kahan {
    fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            comp: vec![0.0; n],
        }
    }

    fn add(&mut self, k: usize, v: f64) {
        let y = v - self.comp[k];
        let t = self.sum[k] + y;
        self.comp[k] = (t - self.sum[k]) - y;
        self.sum[k] = t;
    }
}

/// Contributions of one outer element: `(slot, [value per requested sub-block])`.
type Contributions = Vec<(usize, Vec<f64>)>;

impl Assembler<'_> {
    /// Assembles the requested sub-blocks `(m2, m1)` of timestep block
    /// `(k̃, ĩ)`. The result does not depend on the rayon pool size.
    pub fn assemble_timestep(
        &self,
        k_step: usize,
        i_step: usize,
        orders: &[(usize, usize)],
    ) -> Vec<SparseBlock> {
        let pattern = sparsity_pattern(self.mesh, self.dist, self.grid, k_step, i_step);
        self.assemble_with_pattern(&pattern, k_step, i_step, orders)
    }

    pub fn assemble_with_pattern(
        &self,
        pattern: &SparsityPattern,
        k_step: usize,
        i_step: usize,
        orders: &[(usize, usize)],
    ) -> Vec<SparseBlock> {
        let ns = orders.len();
        let np = self.grid.p + 1;
        let sel: Vec<usize> = orders.iter().map(|&(m2, m1)| m2 * np + m1).collect();
        let kernel = BlockKernel::new(self.tables, self.grid, k_step, i_step);
        let mut acc = Kahan::new(pattern.nnz() * ns);

        // group element pairs by outer element; each group is reduced on
        // its own and groups are merged in order
        let pairs = &pattern.element_pairs;
        let mut groups = Vec::new();
        let mut start = 0;
        while start < pairs.len() {
            let mut end = start;
            while end < pairs.len() && pairs[end].0 == pairs[start].0 {
                end += 1;
            }
            groups.push(start..end);
            start = end;
        }
        const CHUNK: usize = 64;
        for chunk in groups.chunks(CHUNK) {
            let parts: Vec<Contributions> = chunk
                .par_iter()
                .map(|range| {
                    let mut out = Vec::with_capacity(range.len() * 9);
                    let mut scratch = Scratch::new(np, ns);
                    for &(tx, ty) in &pairs[range.clone()] {
                        self.element_pair(
                            &kernel,
                            &sel,
                            pattern,
                            tx as usize,
                            ty as usize,
                            &mut scratch,
                            &mut out,
                        );
                    }
                    out
                })
                .collect();
            for part in parts {
                for (slot, vals) in part {
                    for (s, v) in vals.into_iter().enumerate() {
                        acc.add(slot * ns + s, v);
                    }
                }
            }
        }
        (0..ns)
            .map(|s| SparseBlock {
                n: pattern.n,
                row_ptr: pattern.row_ptr.clone(),
                cols: pattern.cols.clone(),
                values: (0..pattern.nnz()).map(|k| acc.sum[k * ns + s]).collect(),
            })
            .collect()
    }

    /// Single sub-block `A^{m2,m1}_{k̃,ĩ}`.
    pub fn assemble_block(&self, k_step: usize, i_step: usize, m2: usize, m1: usize) -> SparseBlock {
        self.assemble_timestep(k_step, i_step, &[(m2, m1)])
            .pop()
            .expect("one block requested")
    }

    fn regular_points(&self, e: usize, order: usize) -> Vec<QPoint> {
        let c = self.mesh.corners(e);
        let jac = 2.0 * self.mesh.area(e);
        let rule = self.rule.with_order(order);
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(&[s, t], &w)| QPoint {
                pos: c[0] + (c[1] - c[0]) * s + (c[2] - c[0]) * t,
                lam: [1.0 - s - t, s, t],
                w: w * jac,
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn element_pair(
        &self,
        kernel: &BlockKernel<'_>,
        sel: &[usize],
        pattern: &SparsityPattern,
        tx: usize,
        ty: usize,
        sc: &mut Scratch,
        out: &mut Contributions,
    ) {
        let ns = sel.len();
        let (kind, ox, oy) = self.mesh.pair_kind(tx, ty);
        let (lo, hi) = kernel.support().expect("pattern is empty for vanishing kernels");
        sc.s1.fill(0.0);
        sc.s2.fill(0.0);
        let accumulate = |x: &QPoint, y: &QPoint, w: f64, sc: &mut Scratch| {
            let r = (x.pos - y.pos).norm();
            if r < lo || r > hi {
                return;
            }
            kernel.eval(r, &mut sc.psi, &mut sc.psit);
            let k = w / (4.0 * PI * r);
            for (s, &idx) in sel.iter().enumerate() {
                let a1 = k * sc.psi[idx];
                let base = s * 9;
                for a in 0..3 {
                    let la = a1 * x.lam[a];
                    for b in 0..3 {
                        sc.s1[base + a * 3 + b] += la * y.lam[b];
                    }
                }
                sc.s2[s] += k * sc.psit[idx];
            }
        };
        if kind == PairKind::Regular {
            let (dmin, _) = self.dist.element(tx, ty);
            let size = self
                .mesh
                .triangle_diameter(tx)
                .max(self.mesh.triangle_diameter(ty));
            let rough = kernel.variant().trial == StepClass::First;
            let order = self.rule.pair_order(size, dmin, self.grid.dt, rough);
            let px = self.regular_points(tx, order);
            let py = self.regular_points(ty, order);
            // sum over y first, then spread over the x barycentrics
            for x in &px {
                sc.t1.fill(0.0);
                sc.t2.fill(0.0);
                for y in &py {
                    let r = (x.pos - y.pos).norm();
                    if r < lo || r > hi {
                        continue;
                    }
                    kernel.eval(r, &mut sc.psi, &mut sc.psit);
                    let k = y.w / (4.0 * PI * r);
                    for (s, &idx) in sel.iter().enumerate() {
                        let a1 = k * sc.psi[idx];
                        for b in 0..3 {
                            sc.t1[s * 3 + b] += a1 * y.lam[b];
                        }
                        sc.t2[s] += k * sc.psit[idx];
                    }
                }
                for s in 0..ns {
                    for a in 0..3 {
                        let la = x.w * x.lam[a];
                        for b in 0..3 {
                            sc.s1[s * 9 + a * 3 + b] += la * sc.t1[s * 3 + b];
                        }
                    }
                    sc.s2[s] += x.w * sc.t2[s];
                }
            }
        } else {
            let cx = self.mesh.corners(tx);
            let cy = self.mesh.corners(ty);
            let (jx, jy) = (2.0 * self.mesh.area(tx), 2.0 * self.mesh.area(ty));
            let px: [Vec3; 3] = [cx[ox[0]], cx[ox[1]], cx[ox[2]]];
            let py: [Vec3; 3] = [cy[oy[0]], cy[oy[1]], cy[oy[2]]];
            for q in self.rule.singular.rule(kind) {
                let map = |p: &[Vec3; 3], o: [usize; 3], [x1, x2]: [f64; 2]| {
                    let mut lam = [0.0; 3];
                    lam[o[0]] = 1.0 - x1;
                    lam[o[1]] = x1 - x2;
                    lam[o[2]] = x2;
                    QPoint {
                        pos: p[0] + (p[1] - p[0]) * x1 + (p[2] - p[1]) * x2,
                        lam,
                        w: 1.0,
                    }
                };
                let x = map(&px, ox, q.x);
                let y = map(&py, oy, q.y);
                accumulate(&x, &y, q.w * jx * jy, sc);
            }
        }

        if tx == ty {
            // the coincident rule is symmetric only up to rounding
            for s in 0..ns {
                let m = &mut sc.s1[s * 9..s * 9 + 9];
                for a in 0..3 {
                    for b in a + 1..3 {
                        let v = 0.5 * (m[a * 3 + b] + m[b * 3 + a]);
                        m[a * 3 + b] = v;
                        m[b * 3 + a] = v;
                    }
                }
            }
        }
        let nn = self.mesh.normal(tx).dot(&self.mesh.normal(ty));
        let vx = self.mesh.triangles()[tx];
        let vy = self.mesh.triangles()[ty];
        for a in 0..3 {
            let ca = self.mesh.surface_curl(tx, a);
            for b in 0..3 {
                let cc = ca.dot(&self.mesh.surface_curl(ty, b));
                let vals: Vec<f64> = (0..ns)
                    .map(|s| nn * sc.s1[s * 9 + a * 3 + b] + cc * sc.s2[s])
                    .collect();
                if tx != ty {
                    if let Some(slot) = pattern.slot(vy[b], vx[a]) {
                        out.push((slot, vals.clone()));
                    }
                }
                if let Some(slot) = pattern.slot(vx[a], vy[b]) {
                    out.push((slot, vals));
                }
            }
        }
    }
}

struct Scratch {
    psi: Vec<f64>,
    psit: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
}

impl Scratch {
    fn new(np: usize, ns: usize) -> Self {
        Self {
            psi: vec![0.0; np * np],
            psit: vec![0.0; np * np],
            s1: vec![0.0; ns * 9],
            s2: vec![0.0; ns],
            t1: vec![0.0; ns * 3],
            t2: vec![0.0; ns],
        }
    }
}

/// Time nodes used for right-hand sides: Gauss-Legendre with `4(p+4)` points
/// on every half of every grid interval.
pub fn rhs_time_nodes(grid: &TimeGrid) -> Vec<(usize, f64, f64)> {
    let gl = GaussLegendre::new(4 * (grid.p + 4));
    let mut nodes = Vec::new();
    for j in 0..grid.n - 1 {
        let a = grid.t(j as i64);
        let h = 0.5 * grid.dt;
        for half in 0..2 {
            let lo = a + half as f64 * h;
            for (t, w) in gl.mapped(lo, lo + h) {
                nodes.push((j, t, w));
            }
        }
    }
    nodes
}

/// `g_k(l) = ∫∫ g(x,t) φ_l(x) ḃ_k(t) dΓ_x dt`, laid out as `(k-1) M + l`.
/// `g` is called as `g(x, n_x, t)`.
pub fn assemble_rhs<G>(mesh: &SurfaceMesh, grid: &TimeGrid, rule: &QuadratureRule, g: G) -> Vec<f64>
where
    G: Fn(&Vec3, &Vec3, f64) -> f64 + Sync,
{
    let m = mesh.dof_count();
    let tri = rule.regular();
    // spatial points: (element, position, barycentrics, weight)
    let mut spatial = Vec::new();
    for e in 0..mesh.triangle_count() {
        let c = mesh.corners(e);
        let jac = 2.0 * mesh.area(e);
        for (&[s, t], &w) in tri.points.iter().zip(&tri.weights) {
            spatial.push((e, c[0] + (c[1] - c[0]) * s + (c[2] - c[0]) * t, [1.0 - s - t, s, t], w * jac));
        }
    }
    let nodes = rhs_time_nodes(grid);
    // G_l(t) = ∫ g(x,t) φ_l(x) dΓ_x at every time node
    let projected: Vec<Vec<f64>> = nodes
        .par_iter()
        .map(|&(_, t, _)| {
            let mut gl = vec![0.0; m];
            for (e, x, lam, w) in &spatial {
                let v = g(x, &mesh.normal(*e), t) * w;
                if v != 0.0 {
                    for (a, &vi) in mesh.triangles()[*e].iter().enumerate() {
                        gl[vi] += v * lam[a];
                    }
                }
            }
            gl
        })
        .collect();
    let l_count = grid.basis_count();
    let mut out = vec![0.0; l_count * m];
    for k in 1..=l_count {
        let idx = TemporalBasisIndex::from_flat(k, grid.p);
        let (lo, hi) = grid.support_indices(idx.timestep);
        let row = &mut out[(k - 1) * m..k * m];
        for (node, &(j, t, w)) in nodes.iter().enumerate() {
            if j < lo || j >= hi {
                continue;
            }
            let db = basis_b(grid, idx, t, 1) * w;
            if db != 0.0 {
                for (r, v) in row.iter_mut().zip(&projected[node]) {
                    *r += db * v;
                }
            }
        }
    }
    out
}

/// Load vector of `W φ = g` with `W = n·∇D`.
///
/// The bilinear form assembled by [`Assembler`] is the positive energetic
/// form, which represents `−W`; the load is negated accordingly.
pub fn assemble_neumann_rhs<G>(mesh: &SurfaceMesh, grid: &TimeGrid, rule: &QuadratureRule, g: G) -> Vec<f64>
where
    G: Fn(&Vec3, &Vec3, f64) -> f64 + Sync,
{
    let mut b = assemble_rhs(mesh, grid, rule, g);
    b.iter_mut().for_each(|v| *v = -*v);
    b
}
