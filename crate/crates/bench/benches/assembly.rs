use criterion::{criterion_group, criterion_main, Criterion};

use tdbem_bench::mesh;
use tdbem_core::block_system::{plan_distribution, BlockHessenbergMatrix};
use tdbem_core::galerkin_assembly::QuadratureRule;
use tdbem_core::kernel_weights::KernelTables;
use tdbem_core::temporal_basis::TimeGrid;

fn assembly(c: &mut Criterion) {
    let tables = KernelTables::build(1);
    let rule = QuadratureRule::default();
    for (name, n) in [("icosahedron.off", 5), ("sphere80.off", 5)] {
        let m = mesh(name);
        let grid = TimeGrid::new(6.0, n, 1).unwrap();
        let plan = plan_distribution(&grid, &m, 1).unwrap();
        c.bench_function(&format!("assemble_{}_N{n}", name.trim_end_matches(".off")), |b| {
            b.iter(|| BlockHessenbergMatrix::assemble(&m, &grid, &tables, &rule, &plan))
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = assembly
}
criterion_main!(benches);
