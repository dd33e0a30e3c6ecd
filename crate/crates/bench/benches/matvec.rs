use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use tdbem_bench::mesh;
use tdbem_core::block_system::{plan_distribution, BlockHessenbergMatrix};
use tdbem_core::galerkin_assembly::QuadratureRule;
use tdbem_core::kernel_weights::KernelTables;
use tdbem_core::temporal_basis::TimeGrid;

fn matvec(c: &mut Criterion) {
    let tables = KernelTables::build(1);
    let m = mesh("sphere80.off");
    let grid = TimeGrid::new(6.0, 10, 1).unwrap();
    let plan = plan_distribution(&grid, &m, 4).unwrap();
    let a = BlockHessenbergMatrix::assemble(&m, &grid, &tables, &QuadratureRule::default(), &plan);
    let x: Vec<f64> = (0..a.dim()).map(|i| (i % 7) as f64 - 3.0).collect();
    c.bench_function("matvec_sphere80_N10", |b| b.iter(|| a.matvec(black_box(&x)).unwrap()));
}

criterion_group!(benches, matvec);
criterion_main!(benches);
