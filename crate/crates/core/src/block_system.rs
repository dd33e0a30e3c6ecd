//! The global space-time matrix as a block Hessenberg collection of unique
//! sparse blocks.
//!
//! Block position `(k̃, ĩ)` is the `(p+1)M × (p+1)M` coupling of test timestep
//! `k̃` with trial timestep `ĩ`. Inner positions (both timesteps in
//! `2..=N-1`) depend only on `k̃ - ĩ`, so each diagonal is assembled once at
//! a canonical position, and inner sub-blocks with `m1 > m2` are recovered
//! from `(m1, m2)` up to the sign `(-1)^{m1+m2}`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::ops::RangeInclusive;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::galerkin_assembly::{Assembler, MeshDistances, QuadratureRule, SparseBlock};
use crate::kernel_weights::KernelTables;
use crate::mesh::SurfaceMesh;
use crate::temporal_basis::TimeGrid;

/// Default cap on `L·M` for [`BlockHessenbergMatrix::reconstruct_dense`].
pub const DENSE_CAP: usize = 20_000;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("vector length {got} does not match operator dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dense reconstruction of dimension {size} exceeds cap {cap}")]
    TooLarge { size: usize, cap: usize },
    #[error("stats output failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Key of a stored sub-block: canonical position and `(m2, m1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub k: usize,
    pub i: usize,
    pub m2: usize,
    pub m1: usize,
}

/// `⌈2 diam/Δt⌉ + 2`, capped at `N`.
pub fn nonzero_first_column(grid: &TimeGrid, diam: f64) -> usize {
    let c = (2.0 * diam / grid.dt).ceil();
    let c = if c.is_finite() && c >= 0.0 { c as usize } else { grid.n };
    (c + 2).min(grid.n)
}

/// Number of non-zero inner block positions for `N` timesteps when the first
/// column holds `ñ_z` non-zero blocks.
pub fn inner_nonzero_count(n: usize, nz_tilde: usize) -> usize {
    let (n, z) = (n as i64, nz_tilde as i64);
    let twice = (n * n - n - 4) - (n - z - 2) * (n - z - 1).max(0);
    debug_assert!(twice >= 0 && twice % 2 == 0);
    (twice / 2) as usize
}

fn is_inner(grid: &TimeGrid, step: usize) -> bool {
    step >= 2 && step < grid.n
}

/// Ownership of block positions by worker rank.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionPlan {
    pub workers: usize,
    pub n: usize,
    pub nz: usize,
    pub nz_tilde: usize,
    /// Non-zero positions `(k̃, ĩ)` and their owner, sorted by position.
    pub assignment: BTreeMap<(usize, usize), usize>,
}

impl DistributionPlan {
    /// `true` for positions that are structurally non-zero.
    pub fn is_nonzero(&self, k: usize, i: usize) -> bool {
        k + 1 >= i && k >= 1 && i >= 1 && k <= self.n && i <= self.n && k + 1 - i <= self.nz_tilde
    }

    pub fn owner(&self, k: usize, i: usize) -> Option<usize> {
        self.assignment.get(&(k, i)).copied()
    }

    /// Positions owned by `rank`, sorted.
    pub fn owned(&self, rank: usize) -> Vec<(usize, usize)> {
        self.assignment
            .iter()
            .filter(|(_, &r)| r == rank)
            .map(|(&pos, _)| pos)
            .collect()
    }

    pub fn inner_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.workers];
        for (&(k, i), &r) in &self.assignment {
            if k >= 2 && k < self.n && i >= 2 && i < self.n {
                c[r] += 1;
            }
        }
        c
    }
}

/// Plans ownership: inner positions diagonal by diagonal in contiguous
/// chunks of `⌊n_z/P⌋` or `⌈n_z/P⌉`, lower ranks taking the larger chunks;
/// boundary positions then go to the least loaded rank.
pub fn plan_distribution(
    grid: &TimeGrid,
    mesh: &SurfaceMesh,
    workers: usize,
) -> Result<DistributionPlan, BlockError> {
    plan_for(grid.n, nonzero_first_column(grid, mesh.diameter()), workers)
}

/// [`plan_distribution`] for given `N` and `ñ_z`.
pub fn plan_for(n: usize, nz_tilde: usize, workers: usize) -> Result<DistributionPlan, BlockError> {
    if workers == 0 {
        return Err(BlockError::NoWorkers);
    }
    let mut inner = Vec::new();
    for d in -1..(nz_tilde as i64) {
        for i in 2..n {
            let k = i as i64 + d;
            if k >= 2 && k < n as i64 {
                inner.push((k as usize, i));
            }
        }
    }
    let nz = inner.len();
    let mut assignment = BTreeMap::new();
    let mut load = vec![0usize; workers];
    let (base, extra) = (nz / workers, nz % workers);
    let mut it = inner.into_iter();
    for (rank, l) in load.iter_mut().enumerate() {
        let take = base + usize::from(rank < extra);
        for pos in it.by_ref().take(take) {
            assignment.insert(pos, rank);
        }
        *l = take;
    }
    let mut boundary = Vec::new();
    for k in 1..=n {
        for i in 1..=(k + 1).min(n) {
            let nonzero = k + 1 - i <= nz_tilde;
            let border = k == 1 || k == n || i == 1 || i == n;
            if nonzero && border {
                boundary.push((k, i));
            }
        }
    }
    for pos in boundary {
        let rank = (0..workers).min_by_key(|&r| (load[r], r)).expect("workers >= 1");
        load[rank] += 1;
        assignment.insert(pos, rank);
    }
    Ok(DistributionPlan {
        workers,
        n,
        nz,
        nz_tilde,
        assignment,
    })
}

/// Sub-block reference of one position: `(m2, m1, stored block, sign)`.
#[derive(Debug, Clone)]
struct PositionRefs {
    k: usize,
    i: usize,
    refs: Vec<(usize, usize, usize, f64)>,
}

/// The assembled system matrix.
#[derive(Debug, Clone)]
pub struct BlockHessenbergMatrix {
    grid: TimeGrid,
    m: usize,
    plan: DistributionPlan,
    keys: Vec<BlockKey>,
    blocks: Vec<SparseBlock>,
    lookup: BTreeMap<BlockKey, usize>,
    positions: Vec<PositionRefs>,
    /// Position index by `(k̃, ĩ)`.
    position_of: BTreeMap<(usize, usize), usize>,
}

/// Canonical position and sign for `(k̃, ĩ, m2, m1)`, ignoring zero blocks.
pub fn canonical(grid: &TimeGrid, k: usize, i: usize, m2: usize, m1: usize) -> (BlockKey, f64) {
    if is_inner(grid, k) && is_inner(grid, i) {
        let (ck, ci) = if k >= i { (k - i + 2, 2) } else { (2, 3) };
        if m1 > m2 {
            let sign = if (m1 + m2) % 2 == 0 { 1.0 } else { -1.0 };
            (BlockKey { k: ck, i: ci, m2: m1, m1: m2 }, sign)
        } else {
            (BlockKey { k: ck, i: ci, m2, m1 }, 1.0)
        }
    } else {
        (BlockKey { k, i, m2, m1 }, 1.0)
    }
}

impl BlockHessenbergMatrix {
    /// Assembles every canonical block of the system.
    pub fn assemble(
        mesh: &SurfaceMesh,
        grid: &TimeGrid,
        tables: &KernelTables,
        rule: &QuadratureRule,
        plan: &DistributionPlan,
    ) -> Self {
        let dist = MeshDistances::new(mesh);
        let asm = Assembler {
            mesh,
            dist: &dist,
            grid,
            tables,
            rule,
        };
        let np = grid.p + 1;
        let mut needed: BTreeMap<(usize, usize), BTreeSet<(usize, usize)>> = BTreeMap::new();
        for &(k, i) in plan.assignment.keys() {
            for m2 in 0..np {
                for m1 in 0..np {
                    let (key, _) = canonical(grid, k, i, m2, m1);
                    needed.entry((key.k, key.i)).or_default().insert((key.m2, key.m1));
                }
            }
        }
        let mut keys = Vec::new();
        let mut blocks = Vec::new();
        let mut lookup = BTreeMap::new();
        for (&(k, i), orders) in &needed {
            let orders: Vec<(usize, usize)> = orders.iter().copied().collect();
            log::debug!("assembling block ({k}, {i}), {} sub-blocks", orders.len());
            let assembled = asm.assemble_timestep(k, i, &orders);
            for (&(m2, m1), b) in orders.iter().zip(assembled) {
                let key = BlockKey { k, i, m2, m1 };
                lookup.insert(key, keys.len());
                keys.push(key);
                blocks.push(b);
            }
        }
        Self::from_parts(*grid, mesh.dof_count(), plan.clone(), keys, blocks, lookup)
    }

    fn from_parts(
        grid: TimeGrid,
        m: usize,
        plan: DistributionPlan,
        keys: Vec<BlockKey>,
        blocks: Vec<SparseBlock>,
        lookup: BTreeMap<BlockKey, usize>,
    ) -> Self {
        let np = grid.p + 1;
        let mut positions = Vec::new();
        let mut position_of = BTreeMap::new();
        for &(k, i) in plan.assignment.keys() {
            let mut refs = Vec::with_capacity(np * np);
            for m2 in 0..np {
                for m1 in 0..np {
                    let (key, sign) = canonical(&grid, k, i, m2, m1);
                    let idx = lookup[&key];
                    if blocks[idx].nnz() > 0 {
                        refs.push((m2, m1, idx, sign));
                    }
                }
            }
            position_of.insert((k, i), positions.len());
            positions.push(PositionRefs { k, i, refs });
        }
        Self {
            grid,
            m,
            plan,
            keys,
            blocks,
            lookup,
            positions,
            position_of,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Spatial dof count `M`.
    pub fn dofs(&self) -> usize {
        self.m
    }

    /// Total dimension `L·M`.
    pub fn dim(&self) -> usize {
        self.grid.basis_count() * self.m
    }

    /// Length of one timestep segment, `(p+1)M`.
    pub fn step_len(&self) -> usize {
        (self.grid.p + 1) * self.m
    }

    pub fn plan(&self) -> &DistributionPlan {
        &self.plan
    }

    pub fn keys(&self) -> &[BlockKey] {
        &self.keys
    }

    pub fn unique_blocks(&self) -> &[SparseBlock] {
        &self.blocks
    }

    /// Distinct canonical positions that were assembled.
    pub fn canonical_positions(&self) -> BTreeSet<(usize, usize)> {
        self.keys.iter().map(|k| (k.k, k.i)).collect()
    }

    /// Resolves `A^{m2,m1}_{k̃,ĩ}` to a stored block and sign; `None` for
    /// structurally zero blocks.
    pub fn block_index(&self, k: usize, i: usize, m2: usize, m1: usize) -> Option<(BlockKey, f64)> {
        if !self.plan.is_nonzero(k, i) {
            return None;
        }
        Some(canonical(&self.grid, k, i, m2, m1))
    }

    pub fn block(&self, k: usize, i: usize, m2: usize, m1: usize) -> Option<(&SparseBlock, f64)> {
        let (key, sign) = self.block_index(k, i, m2, m1)?;
        Some((&self.blocks[self.lookup[&key]], sign))
    }

    /// Row offset of `(k̃, m)` in the global vector.
    pub fn offset(&self, step: usize, order: usize) -> usize {
        ((step - 1) * (self.grid.p + 1) + order) * self.m
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, BlockError> {
        let n = self.grid.n;
        let mut y = vec![0.0; self.dim()];
        self.apply_range(1..=n, 1..=n, x, &mut y)?;
        Ok(y)
    }

    /// `y = A[rows, cols] x` for inclusive timestep ranges; `x` and `y` are
    /// the corresponding segments of the global vectors.
    ///
    /// Each rank multiplies its owned positions into per-position buffers;
    /// the buffers are summed in position order, so the result does not
    /// depend on the number of ranks.
    pub fn apply_range(
        &self,
        rows: RangeInclusive<usize>,
        cols: RangeInclusive<usize>,
        x: &[f64],
        y: &mut [f64],
    ) -> Result<(), BlockError> {
        let sl = self.step_len();
        let nx = (cols.end() + 1 - cols.start()) * sl;
        let ny = (rows.end() + 1 - rows.start()) * sl;
        if x.len() != nx {
            return Err(BlockError::DimensionMismatch { expected: nx, got: x.len() });
        }
        if y.len() != ny {
            return Err(BlockError::DimensionMismatch { expected: ny, got: y.len() });
        }
        let m = self.m;
        let (r0, c0) = (*rows.start(), *cols.start());
        let partials: Vec<Vec<(usize, Vec<f64>)>> = (0..self.plan.workers)
            .into_par_iter()
            .map(|rank| {
                let mut out = Vec::new();
                for (pi, pos) in self.positions.iter().enumerate() {
                    if self.plan.assignment[&(pos.k, pos.i)] != rank
                        || !rows.contains(&pos.k)
                        || !cols.contains(&pos.i)
                    {
                        continue;
                    }
                    let xs = &x[(pos.i - c0) * sl..(pos.i - c0 + 1) * sl];
                    let mut buf = vec![0.0; sl];
                    for &(m2, m1, idx, sign) in &pos.refs {
                        self.blocks[idx].mul_add(
                            sign,
                            &xs[m1 * m..(m1 + 1) * m],
                            &mut buf[m2 * m..(m2 + 1) * m],
                        );
                    }
                    out.push((pi, buf));
                }
                out
            })
            .collect();
        let mut all: Vec<(usize, Vec<f64>)> = partials.into_iter().flatten().collect();
        all.sort_unstable_by_key(|(pi, _)| *pi);
        y.fill(0.0);
        for (pi, buf) in all {
            let k = self.positions[pi].k;
            let ys = &mut y[(k - r0) * sl..(k - r0 + 1) * sl];
            for (a, b) in ys.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Materializes `A` (testing only).
    pub fn reconstruct_dense(&self) -> Result<DMatrix<f64>, BlockError> {
        self.reconstruct_dense_capped(DENSE_CAP)
    }

    pub fn reconstruct_dense_capped(&self, cap: usize) -> Result<DMatrix<f64>, BlockError> {
        let size = self.dim();
        if size > cap {
            return Err(BlockError::TooLarge { size, cap });
        }
        let mut d = DMatrix::zeros(size, size);
        let np = self.grid.p + 1;
        for &(k, i) in self.position_of.keys() {
            for m2 in 0..np {
                for m1 in 0..np {
                    let Some((b, sign)) = self.block(k, i, m2, m1) else {
                        continue;
                    };
                    let (ro, co) = (self.offset(k, m2), self.offset(i, m1));
                    for r in 0..b.n {
                        for s in b.row_ptr[r]..b.row_ptr[r + 1] {
                            d[(ro + r, co + b.cols[s])] = sign * b.values[s];
                        }
                    }
                }
            }
        }
        Ok(d)
    }

    /// CSV of every non-zero position: position, canonical key, nnz, owner.
    pub fn write_stats<W: Write>(&self, mut w: W) -> Result<(), BlockError> {
        writeln!(w, "k,i,m2,m1,canonical_k,canonical_i,canonical_m2,canonical_m1,sign,nnz,owner")?;
        let np = self.grid.p + 1;
        for (&(k, i), &owner) in &self.plan.assignment {
            for m2 in 0..np {
                for m1 in 0..np {
                    let (key, sign) = canonical(&self.grid, k, i, m2, m1);
                    let nnz = self.blocks[self.lookup[&key]].nnz();
                    writeln!(
                        w,
                        "{k},{i},{m2},{m1},{},{},{},{},{},{nnz},{owner}",
                        key.k, key.i, key.m2, key.m1, sign as i32
                    )?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_nz(n: usize, nz_tilde: usize) -> usize {
        let mut c = 0;
        for k in 2..n {
            for i in 2..n {
                let d = k as i64 - i as i64;
                if d >= -1 && d < nz_tilde as i64 {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn nz_example() {
        assert_eq!(inner_nonzero_count(8, 3), 20);
        let plan = plan_for(8, 3, 5).unwrap();
        assert_eq!(plan.nz, 20);
        assert!(plan.inner_counts().iter().all(|&c| c == 4));
    }

    #[test]
    fn nz_formula_matches_count() {
        for n in 4..=30 {
            for z in 2..=n {
                assert_eq!(inner_nonzero_count(n, z), brute_nz(n, z), "N={n} z={z}");
            }
        }
    }

    #[test]
    fn zero_workers_rejected() {
        assert!(matches!(plan_for(5, 3, 0), Err(BlockError::NoWorkers)));
    }

    #[test]
    fn diagonals_stay_together() {
        let plan = plan_for(12, 6, 4).unwrap();
        // a diagonal split between ranks lands on consecutive ranks
        for d in -1..6i64 {
            let ranks: BTreeSet<usize> = plan
                .assignment
                .iter()
                .filter(|(&(k, i), _)| {
                    (2..12).contains(&k) && (2..12).contains(&i) && k as i64 - i as i64 == d
                })
                .map(|(_, &r)| r)
                .collect();
            if let (Some(&lo), Some(&hi)) = (ranks.first(), ranks.last()) {
                assert_eq!(hi - lo + 1, ranks.len());
            }
        }
    }

    #[test]
    fn canonical_resolution() {
        let g = TimeGrid::new(1.0, 8, 2).unwrap();
        assert_eq!(canonical(&g, 5, 3, 0, 0).0, BlockKey { k: 4, i: 2, m2: 0, m1: 0 });
        assert_eq!(canonical(&g, 4, 5, 1, 1).0, BlockKey { k: 2, i: 3, m2: 1, m1: 1 });
        let (key, s) = canonical(&g, 4, 4, 0, 1);
        assert_eq!((key, s), (BlockKey { k: 2, i: 2, m2: 1, m1: 0 }, -1.0));
        let (key, s) = canonical(&g, 4, 4, 0, 2);
        assert_eq!((key, s), (BlockKey { k: 2, i: 2, m2: 2, m1: 0 }, 1.0));
        // boundary positions are never remapped
        let (key, s) = canonical(&g, 8, 3, 0, 1);
        assert_eq!((key, s), (BlockKey { k: 8, i: 3, m2: 0, m1: 1 }, 1.0));
        let (key, _) = canonical(&g, 3, 1, 1, 0);
        assert_eq!(key, BlockKey { k: 3, i: 1, m2: 1, m1: 0 });
    }

    proptest! {
        #[test]
        fn plan_balances_inner_positions(n in 4usize..30, z in 2usize..30, p in 1usize..12) {
            let z = z.min(n);
            let plan = plan_for(n, z, p).unwrap();
            prop_assert_eq!(plan.nz, inner_nonzero_count(n, z));
            let c = plan.inner_counts();
            let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            // every structurally non-zero position has exactly one owner
            for k in 1..=n {
                for i in 1..=n {
                    prop_assert_eq!(plan.owner(k, i).is_some(), plan.is_nonzero(k, i));
                }
            }
        }

        #[test]
        fn unique_positions_at_most_3n(n in 3usize..40, z in 2usize..40) {
            let z = z.min(n);
            let g = TimeGrid::new(1.0, n, 1).unwrap();
            let plan = plan_for(n, z, 3).unwrap();
            let canon: BTreeSet<(usize, usize)> = plan
                .assignment
                .keys()
                .map(|&(k, i)| { let c = canonical(&g, k, i, 0, 0).0; (c.k, c.i) })
                .collect();
            prop_assert!(canon.len() <= 3 * n);
            let inner = canon.iter().filter(|&&(k, i)| is_inner(&g, k) && is_inner(&g, i)).count();
            prop_assert!(inner <= n);
        }
    }
}
