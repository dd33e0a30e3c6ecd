use std::path::Path;
use std::sync::OnceLock;

use tdbem_core::block_system::{plan_distribution, plan_for, BlockHessenbergMatrix};
use tdbem_core::galerkin_assembly::{Assembler, MeshDistances, QuadratureRule};
use tdbem_core::kernel_weights::KernelTables;
use tdbem_core::mesh::SurfaceMesh;
use tdbem_core::temporal_basis::TimeGrid;

fn tables() -> &'static KernelTables {
    static T: OnceLock<KernelTables> = OnceLock::new();
    T.get_or_init(|| KernelTables::build(1))
}

fn ico() -> SurfaceMesh {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/icosahedron.off");
    SurfaceMesh::load(path).unwrap()
}

fn system(t_final: f64, workers: usize) -> (SurfaceMesh, TimeGrid, BlockHessenbergMatrix) {
    let mesh = ico();
    let grid = TimeGrid::new(t_final, 5, 1).unwrap();
    let plan = plan_distribution(&grid, &mesh, workers).unwrap();
    let a = BlockHessenbergMatrix::assemble(&mesh, &grid, tables(), &QuadratureRule::default(), &plan);
    (mesh, grid, a)
}

#[test]
fn dense_reconstruction_matches_naive_assembly() {
    for t_final in [5.0, 20.0] {
        let (mesh, grid, a) = system(t_final, 3);
        let dense = a.reconstruct_dense().unwrap();
        let dist = MeshDistances::new(&mesh);
        let rule = QuadratureRule::default();
        let asm = Assembler {
            mesh: &mesh,
            dist: &dist,
            grid: &grid,
            tables: tables(),
            rule: &rule,
        };
        let all = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let mut max = 0.0f64;
        for k in 1..=grid.n {
            for i in 1..=grid.n {
                let blocks = asm.assemble_timestep(k, i, &all);
                for (&(m2, m1), b) in all.iter().zip(&blocks) {
                    let (ro, co) = (a.offset(k, m2), a.offset(i, m1));
                    for r in 0..b.n {
                        for c in 0..b.n {
                            max = max.max((dense[(ro + r, co + c)] - b.get(r, c)).abs());
                        }
                    }
                }
            }
        }
        assert!(max <= 1e-12, "T={t_final}: {max:e}");
    }
}

#[test]
fn block_hessenberg_and_zero_band() {
    let (mesh, grid, a) = system(20.0, 2);
    let dense = a.reconstruct_dense().unwrap();
    let sl = a.step_len();
    let mut nonzero_seen = false;
    for k in 1..=grid.n {
        for i in 1..=grid.n {
            let blk = dense.view(((k - 1) * sl, (i - 1) * sl), (sl, sl));
            let zero = blk.iter().all(|&v| v == 0.0);
            if k + 2 <= i {
                assert!(zero, "({k},{i}) above the first superdiagonal");
            }
            let gap = grid.t(k as i64 - 2) - grid.t(i as i64);
            if gap > mesh.diameter() {
                assert!(zero, "({k},{i}) beyond the light cone");
            }
            if k == i {
                nonzero_seen |= !zero;
                assert!(!zero);
            }
        }
    }
    assert!(nonzero_seen);
}

#[test]
fn inner_blocks_shift_and_order_swap() {
    let (_, grid, a) = system(5.0, 1);
    let dense = a.reconstruct_dense().unwrap();
    let sub = |k: usize, i: usize, m2: usize, m1: usize| {
        dense
            .view((a.offset(k, m2), a.offset(i, m1)), (a.dofs(), a.dofs()))
            .clone_owned()
    };
    for m2 in 0..=1 {
        for m1 in 0..=1 {
            assert_eq!(sub(4, 3, m2, m1), sub(3, 2, m2, m1));
            assert_eq!(sub(3, 4, m2, m1), sub(2, 3, m2, m1));
        }
    }
    for k in 2..grid.n {
        for i in 2..grid.n {
            if k + 1 >= i {
                assert_eq!(sub(k, i, 1, 0), -sub(k, i, 0, 1), "({k},{i})");
            }
        }
    }
    let canon = a.canonical_positions();
    let inner = canon
        .iter()
        .filter(|&&(k, i)| (2..grid.n).contains(&k) && (2..grid.n).contains(&i))
        .count();
    assert!(inner <= grid.n);
    assert!(canon.len() <= 3 * grid.n);
    // three stored sub-blocks per inner canonical position for p = 1
    for &(k, i) in &canon {
        let stored = a.keys().iter().filter(|b| (b.k, b.i) == (k, i)).count();
        let inner_pos = (2..grid.n).contains(&k) && (2..grid.n).contains(&i);
        assert_eq!(stored, if inner_pos { 3 } else { 4 }, "({k},{i})");
    }
}

#[test]
fn matvec_matches_dense_and_worker_count() {
    let (mesh, grid, a1) = system(5.0, 1);
    let dense = a1.reconstruct_dense().unwrap();
    let x: Vec<f64> = (0..a1.dim()).map(|j| ((j * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let y1 = a1.matvec(&x).unwrap();
    let yd = &dense * nalgebra::DVector::from_column_slice(&x);
    for (u, v) in y1.iter().zip(yd.iter()) {
        assert!((u - v).abs() <= 1e-13 * (1.0 + v.abs()), "{u} {v}");
    }
    let zero = a1.matvec(&vec![0.0; a1.dim()]).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));

    let plan7 = plan_for(grid.n, a1.plan().nz_tilde, 7).unwrap();
    let a7 = BlockHessenbergMatrix::assemble(&mesh, &grid, tables(), &QuadratureRule::default(), &plan7);
    let y7 = a7.matvec(&x).unwrap();
    assert_eq!(y1, y7);
    assert!(a1.matvec(&x[1..]).is_err());
}

#[test]
fn stats_csv_lists_every_position() {
    let (_, _, a) = system(5.0, 2);
    let mut out = Vec::new();
    a.write_stats(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("k,i,m2,m1"));
    assert_eq!(lines.len() - 1, a.plan().assignment.len() * 4);
}
