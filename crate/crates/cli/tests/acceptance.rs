//! Acceptance suite: one PASS/FAIL line per criterion, written straight to
//! stderr so the lines show up without `--nocapture`.
//!
//! Criteria 6 and 7 run the full 320-element studies and take more than an
//! hour on one core; they are `#[ignore]`d and run with
//! `cargo test --release -p tdbem-cli --test acceptance -- --ignored`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdbem_cli::config::{Command, RunConfig};
use tdbem_cli::pipelines::{run_convergence, run_solver_bench};
use tdbem_cli::with_workers;
use tdbem_core::block_system::{inner_nonzero_count, plan_distribution, BlockHessenbergMatrix};
use tdbem_core::galerkin_assembly::{assemble_neumann_rhs, Assembler, MeshDistances, QuadratureRule};
use tdbem_core::kernel_weights::{eval_psi, prototype_direct, KernelTables, PrototypeKind, Variant};
use tdbem_core::mesh::{SurfaceMesh, Vec3};
use tdbem_core::potential_eval::{eval_double_layer, FieldRule};
use tdbem_core::quadrature::AdaptiveGauss;
use tdbem_core::reference::{SphericalHarmonic, TimeSignal};
use tdbem_core::solvers::{
    dense_schur, dgmres, fgmres, gmres, schur_eigenvalues, solve, DeflationState, LowestSolve, Method,
    RecursivePreconditioner, SolverConfig,
};
use tdbem_core::temporal_basis::{basis_b, partition_mu, TemporalBasisIndex, TimeGrid};

fn report(n: u32, name: &str, pass: bool, details: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n} ({name}): {verdict} ({details})");
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn mesh(name: &str) -> SurfaceMesh {
    SurfaceMesh::load(data(name)).unwrap()
}

fn tables(p: usize) -> &'static KernelTables {
    static T1: OnceLock<KernelTables> = OnceLock::new();
    static T2: OnceLock<KernelTables> = OnceLock::new();
    match p {
        1 => T1.get_or_init(|| KernelTables::build(1)),
        2 => T2.get_or_init(|| KernelTables::build(2)),
        _ => unreachable!(),
    }
}

fn assemble(mesh: &SurfaceMesh, grid: &TimeGrid, workers: usize, rule: &QuadratureRule) -> BlockHessenbergMatrix {
    let plan = plan_distribution(grid, mesh, workers).unwrap();
    BlockHessenbergMatrix::assemble(mesh, grid, tables(grid.p), rule, &plan)
}

#[test]
fn criterion_1_temporal_basis() {
    let start = Instant::now();
    let mut pou: f64 = 0.0;
    for p in [1, 2] {
        let g = TimeGrid::new(6.0, 13, p).unwrap();
        for k in 0..10_000 {
            let t = g.t_final * k as f64 / 9_999.0;
            let s: f64 = (1..=g.n).map(|i| partition_mu(&g, i, t)).sum();
            pou = pou.max((s - 1.0).abs());
        }
    }

    let g = TimeGrid::new(4.0, 9, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut leaks = 0;
    for _ in 0..10_000 {
        let ts = rng.random_range(1..=g.n);
        let idx = TemporalBasisIndex::new(ts, rng.random_range(0..=2), 2);
        let (lo, hi) = g.support(ts);
        let t = if rng.random_bool(0.5) {
            lo - rng.random_range(0.0..2.0)
        } else {
            hi + rng.random_range(1e-12..2.0)
        };
        if t < lo || t > hi {
            leaks += (0..3).filter(|&d| basis_b(&g, idx, t, d) != 0.0).count();
        }
    }

    let g = TimeGrid::new(3.0, 7, 3).unwrap();
    let h = 1e-6 * g.dt;
    let mut worst_fd: f64 = 0.0;
    let mut checked = 0;
    while checked < 4000 {
        let ts = rng.random_range(1..=g.n);
        let idx = TemporalBasisIndex::new(ts, rng.random_range(0..=3), 3);
        let (lo, hi) = g.support(ts);
        let t = rng.random_range(lo..hi);
        if !(0.01..0.99).contains(&(t / g.dt).fract()) {
            continue;
        }
        checked += 1;
        for d in 1..3 {
            let a = basis_b(&g, idx, t, d);
            let fd = (basis_b(&g, idx, t + h, d - 1) - basis_b(&g, idx, t - h, d - 1)) / (2.0 * h);
            let scale = a.abs() + 1.0 / g.dt.powi(d as i32);
            worst_fd = worst_fd.max((a - fd).abs() / scale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = pou <= 1e-12 && leaks == 0 && worst_fd <= 1e-6 && secs < 10.0;
    report(
        1,
        "temporal basis",
        pass,
        &format!("partition {pou:.1e}, support leaks {leaks}, derivative vs difference {worst_fd:.1e}, {secs:.1}s"),
    );
    assert!(pass);
}

fn psi_direct(g: &TimeGrid, k: usize, i: usize, r: f64, tilde: bool) -> f64 {
    let kk = TemporalBasisIndex::from_flat(k, g.p);
    let ii = TemporalBasisIndex::from_flat(i, g.p);
    let d = if tilde { 0 } else { 2 };
    let f = |t: f64| basis_b(g, ii, t - r, d) * basis_b(g, kk, t, 1);
    let mut breaks: Vec<f64> = (0..g.n).map(|j| g.t(j as i64)).collect();
    breaks.extend((0..g.n).map(|j| g.t(j as i64) + r));
    AdaptiveGauss::default().integrate_with_breaks(0.0, g.t_final, &breaks, 1e-13, &f)
}

#[test]
fn criterion_2_kernel_weights() {
    let start = Instant::now();
    let g = TimeGrid { dt: 0.7, ..TimeGrid::new(7.0, 11, 2).unwrap() };
    let inner = |m1, m2| PrototypeKind { variant: Variant::INNER, m1, m2 };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sym: f64 = 0.0;
    for _ in 0..200 {
        let a = rng.random_range(-2.0 * g.dt..2.0 * g.dt);
        let (m1, m2) = (rng.random_range(0..=2), rng.random_range(0..=2));
        for tilde in [true, false] {
            let x = prototype_direct(&g, inner(m1, m2), tilde, a);
            let y = prototype_direct(&g, inner(m1, m2), tilde, -a);
            let z = prototype_direct(&g, inner(m2, m1), tilde, a);
            let s = if (m1 + m2 + 1) % 2 == 0 { 1.0 } else { -1.0 };
            sym = sym.max((x - s * y).abs()).max((y + z).abs());
        }
    }

    // tables live in units of Δt, so compare against the Δt = 1 integral
    let unit = TimeGrid { dt: 1.0, ..g };
    let mut table_err: f64 = 0.0;
    for table in tables(2).tables() {
        let samples = if table.kind.variant == Variant::INNER { 200 } else { 20 };
        for _ in 0..samples {
            let a = rng.random_range(table.lo..table.hi);
            table_err = table_err.max((table.eval(a) - prototype_direct(&unit, table.kind, table.tilde, a)).abs());
        }
    }

    let g = TimeGrid::new(3.0, 7, 2).unwrap();
    let l = g.basis_count();
    let mut psi_err: f64 = 0.0;
    let mut boundary = 0;
    for n in 0..500 {
        let (k, i) = if n % 4 == 0 {
            let k = if rng.random_bool(0.5) { rng.random_range(1..=3) } else { rng.random_range(l - 2..=l) };
            (k, rng.random_range(1..=l))
        } else {
            (rng.random_range(1..=l), rng.random_range(1..=l))
        };
        let steps = [k, i].map(|f| TemporalBasisIndex::from_flat(f, g.p).timestep);
        if steps.iter().any(|&s| s == 1 || s == g.n) {
            boundary += 1;
        }
        let r = rng.random_range(0.0..3.5);
        let tilde = n % 2 == 0;
        let a = eval_psi(tables(2), &g, k, i, r, tilde).unwrap();
        psi_err = psi_err.max((a - psi_direct(&g, k, i, r, tilde)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = sym <= 1e-10 && table_err <= 1e-10 && psi_err <= 1e-9 && boundary > 0 && secs < 60.0;
    report(
        2,
        "kernel weights",
        pass,
        &format!(
            "symmetry {sym:.1e}, tables {table_err:.1e}, psi {psi_err:.1e} ({boundary} boundary samples), {secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_block_structure() {
    let start = Instant::now();
    let mesh = mesh("icosahedron.off");
    let rule = QuadratureRule::default();
    let mut recon: f64 = 0.0;
    let mut pattern_ok = true;
    let mut shift_ok = true;
    for t_final in [5.0, 20.0] {
        let grid = TimeGrid::new(t_final, 5, 1).unwrap();
        let a = assemble(&mesh, &grid, 2, &rule);
        let dense = a.reconstruct_dense().unwrap();
        let dist = MeshDistances::new(&mesh);
        let asm = Assembler { mesh: &mesh, dist: &dist, grid: &grid, tables: tables(1), rule: &rule };
        let all = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let sl = a.step_len();
        for k in 1..=grid.n {
            for i in 1..=grid.n {
                for (&(m2, m1), b) in all.iter().zip(&asm.assemble_timestep(k, i, &all)) {
                    let (ro, co) = (a.offset(k, m2), a.offset(i, m1));
                    for r in 0..b.n {
                        for c in 0..b.n {
                            recon = recon.max((dense[(ro + r, co + c)] - b.get(r, c)).abs());
                        }
                    }
                }
                let zero = dense.view(((k - 1) * sl, (i - 1) * sl), (sl, sl)).iter().all(|&v| v == 0.0);
                if (k + 2 <= i && !zero) || (k == i && zero) {
                    pattern_ok = false;
                }
            }
        }
        let sub = |k: usize, i: usize, m2: usize, m1: usize| {
            dense.view((a.offset(k, m2), a.offset(i, m1)), (a.dofs(), a.dofs())).clone_owned()
        };
        for k in 2..grid.n {
            for i in 2..grid.n {
                if k + 1 < i {
                    continue;
                }
                // shift back along the diagonal to column 2 (column 3 above it)
                let (k0, i0) = if k >= i { (k - i + 2, 2) } else { (2, 3) };
                for (m2, m1) in all {
                    shift_ok &= sub(k, i, m2, m1) == sub(k0, i0, m2, m1);
                }
                shift_ok &= sub(k, i, 1, 0) == -sub(k, i, 0, 1);
                let diag = sub(k, i, 0, 0);
                shift_ok &= diag == diag.transpose();
            }
        }
    }
    let mut nz_ok = true;
    for n in 4..=30usize {
        for z in 2..=n {
            let brute = (2..n)
                .flat_map(|k| (2..n).map(move |i| k as i64 - i as i64))
                .filter(|&d| d >= -1 && d < z as i64)
                .count();
            nz_ok &= inner_nonzero_count(n, z) == brute;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = recon <= 1e-12 && pattern_ok && shift_ok && nz_ok && secs < 120.0;
    report(
        3,
        "block structure",
        pass,
        &format!(
            "reconstruction {recon:.1e}, Hessenberg pattern {pattern_ok}, shift/sign relations {shift_ok}, nz formula {nz_ok}, {secs:.1}s"
        ),
    );
    assert!(pass);
}

fn random_system(n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) / (n as f64).sqrt());
    for i in 0..n {
        a[(i, i)] += 3.0;
    }
    let b = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (a, b)
}

fn rel_err(x: &[f64], e: &DVector<f64>) -> f64 {
    (DVector::from_column_slice(x) - e).norm() / e.norm()
}

#[test]
fn criterion_4_solvers() {
    let start = Instant::now();
    let base = SolverConfig { restart: 20, tol: 1e-12, max_iter: 5000, ..SolverConfig::default() };
    let mut identity = |x: &[f64], y: &mut [f64]| {
        y.copy_from_slice(x);
        Ok(())
    };
    let mut direct: f64 = 0.0;
    for seed in 0..3 {
        let (a, b) = random_system(200, seed);
        let exact = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        direct = direct.max(rel_err(&gmres(&a, &b, &base).unwrap().x, &exact));
        let (d, _) = dgmres(&a, &b, &SolverConfig { deflation_l: 2, deflation_r: 8, ..base.clone() }).unwrap();
        direct = direct.max(rel_err(&d.x, &exact));
        direct = direct.max(rel_err(&fgmres(&a, &b, &base, &mut identity).unwrap().x, &exact));
    }

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
    let spectrum = ev.iter().zip([2.0, 10.0, 10.0]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    let (a, b) = random_system(200, 7);
    let c = SolverConfig { restart: 10, tol: 1e-11, ..base.clone() };
    let g = gmres(&a, &b, &c).unwrap();
    let f = fgmres(&a, &b, &c, &mut identity).unwrap();
    let same_len = g.history.len() == f.history.len();
    let iterates = g
        .x
        .iter()
        .zip(&f.x)
        .chain(g.history.iter().zip(&f.history))
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut schur: f64 = 0.0;
    for n in [5, 20, 60] {
        let h = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let (q, t) = dense_schur(&h).unwrap();
        schur = schur.max((&q * &t * q.transpose() - &h).norm() / h.norm());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass =
        direct <= 1e-10 && spectrum <= 1e-12 && same_len && iterates <= 1e-13 && schur <= 1e-12 && secs < 30.0;
    report(
        4,
        "solver correctness",
        pass,
        &format!(
            "direct {direct:.1e}, deflated spectrum {spectrum:.1e}, identity-preconditioned FGMRES vs GMRES {iterates:.1e}, Schur {schur:.1e}, {secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_preconditioner_rank() {
    let start = Instant::now();
    let mesh = mesh("icosahedron.off");
    let grid = TimeGrid::new(4.0, 6, 1).unwrap();
    let a = assemble(&mesh, &grid, 2, &QuadratureRule::default());
    let n = a.dim();
    let cfg = SolverConfig {
        method: Method::FgmresRecursive,
        restart: 200,
        tol: 1e-12,
        max_iter: 400,
        inner_iterations: Vec::new(),
        ..SolverConfig::default()
    };
    let pre = RecursivePreconditioner::new(&a, &cfg, LowestSolve::Exact);
    let dense = a.reconstruct_dense().unwrap();
    let mut minv = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut z = vec![0.0; n];
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        pre.apply(&e, &mut z).unwrap();
        minv.set_column(j, &DVector::from_column_slice(&z));
    }
    let mut sv: Vec<f64> = (&dense * &minv - DMatrix::identity(n, n)).singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let rank = (grid.p + 1) * a.dofs();
    let tail = sv[rank..].iter().copied().fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = tail <= 1e-10 && sv[0] > 1e-6 && secs < 60.0;
    report(
        5,
        "preconditioner rank",
        pass,
        &format!("sigma_1 {:.2e}, largest beyond index {rank}: {tail:.1e}, {secs:.1}s", sv[0]),
    );
    assert!(pass);
}

#[test]
#[ignore = "full 320-element study, over an hour on one core"]
fn criterion_6_convergence() {
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let text = format!(
        "mesh = sphere320.off\nT = 6\nN = 5,10,20,40\np = 1,2\nrhs = sphere-n0\nrhs.signal = sin3t\noutput.dir = {}\n",
        out.path().display()
    );
    let cfg = RunConfig::parse(Command::Convergence, &text, &data("")).unwrap();
    let rep = with_workers(available(), || run_convergence(&cfg)).unwrap();
    let mut err = std::io::stderr().lock();
    for r in &rep.rows {
        let _ = writeln!(err, "  p={} N={:>2}: error {:.4e}, {} iterations", r.p, r.n, r.error, r.iterations);
    }
    drop(err);
    let slope = rep.slopes.iter().find(|s| s.0 == 1).unwrap().1;
    let slope_ok = (-1.2..=-0.8).contains(&slope);
    let error = |p: usize, n: usize| rep.rows.iter().find(|r| r.p == p && r.n == n).unwrap().error;
    let below = [5, 10, 20, 40].iter().all(|&n| error(2, n) < error(1, n));
    let secs = start.elapsed().as_secs_f64();
    report(6, "convergence slope p=1", slope_ok, &format!("slope {slope:.3}, target [-1.2, -0.8]"));
    report(6, "p=2 below p=1", below, &format!("{:.0}s total", secs));
    assert!(rep.all_converged());
    assert!(slope_ok && below);
}

#[test]
#[ignore = "320-element solver benchmark, long on one core"]
fn criterion_7_solver_benchmark() {
    let out = tempfile::tempdir().unwrap();
    let text = format!(
        "mesh = sphere320.off\nT = 6\nN = 20\np = 1\nsolver.tol = 1e-5\noutput.dir = {}\n",
        out.path().display()
    );
    let cfg = RunConfig::parse(Command::Bench, &text, &data("")).unwrap();
    let rep = with_workers(available(), || run_solver_bench(&cfg)).unwrap();
    let its = |m: &str| rep.iterations(m, 1, 20).unwrap();
    let (g, d, f) = (its("GMRES(50)"), its("DGMRES(50,4)"), its("FGMRES(50,2(2,10))"));
    let dg = d as f64 <= 0.3 * g as f64;
    let fg = f as f64 <= 0.1 * g as f64;
    let counts = format!("GMRES {g}, DGMRES {d}, FGMRES {f}; reference counts 5448/510/34");
    report(7, "DGMRES <= 0.3 GMRES", dg, &counts);
    report(7, "FGMRES <= 0.1 GMRES", fg, &counts);
    assert!(rep.all_converged());
    assert!(dg && fg);
}

fn available() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[test]
fn criterion_8_parallel_determinism() {
    let mesh = mesh("sphere80.off");
    let grid = TimeGrid::new(6.0, 8, 1).unwrap();
    let mut rule = QuadratureRule::default();
    rule.per_step = 1.0;
    tables(1);
    let y = SphericalHarmonic::new(0, 0).unwrap();
    let g = TimeSignal::sin3t();
    let rhs = assemble_neumann_rhs(&mesh, &grid, &rule, |x, _, t| g.value(t) * y.eval(x));
    let mut runs = Vec::new();
    for p in [1, 4, 8] {
        let (secs, x) = with_workers(p, || {
            let t0 = Instant::now();
            let a = assemble(&mesh, &grid, p, &rule);
            let secs = t0.elapsed().as_secs_f64();
            (secs, solve(&a, &rhs, &SolverConfig::default()).unwrap().x)
        });
        runs.push((p, secs, x));
    }
    let diff = runs[1..]
        .iter()
        .flat_map(|r| r.2.iter().zip(&runs[0].2).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max);
    let same = diff <= 1e-12;
    let speedup = runs[0].1 / runs[2].1;
    let cores = available();
    report(8, "determinism P=1,4,8", same, &format!("max coefficient difference {diff:.1e}"));
    report(
        8,
        "assembly speedup P=8",
        speedup >= 2.0,
        &format!("{speedup:.2}x on a host with {cores} core(s); needs 8 cores"),
    );
    assert!(same);
    if cores >= 8 {
        assert!(speedup >= 2.0);
    }
}

fn triangle() -> SurfaceMesh {
    let v = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.15, 0.0, 0.0), Vec3::new(0.03, 0.12, 0.0)];
    SurfaceMesh::new_unchecked(v, vec![[0, 1, 2]]).unwrap()
}

fn pseudo_coeffs(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn criterion_9_potential() {
    let start = Instant::now();
    let rule = FieldRule::default();
    let ico = mesh("icosahedron.off");
    let grid = TimeGrid::new(6.0, 13, 2).unwrap();
    let len = grid.basis_count() * ico.dof_count();
    let c = pseudo_coeffs(len, 1);
    let mut early = 0;
    let mut arrived = 0;
    for x in [Vec3::new(3.0, 0.0, 0.0), Vec3::new(1.0, 2.0, -2.0), Vec3::new(0.1, 0.2, 0.1)] {
        let d = ico.distance_to_point(&x);
        for f in [0.0, 0.25, 0.5, 0.9, 0.999] {
            early += usize::from(eval_double_layer(&ico, &grid, &c, &x, f * d, &rule) != 0.0);
        }
        arrived += usize::from(eval_double_layer(&ico, &grid, &c, &x, d + 1.0, &rule) != 0.0);
    }

    let mut lin: f64 = 0.0;
    for s in 0..20 {
        let (a, b) = (pseudo_coeffs(len, 10 + s), pseudo_coeffs(len, 100 + s));
        let ab: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u + v).collect();
        let x = Vec3::new(0.3, -0.2, 1.5 + 0.1 * s as f64);
        let t = 1.0 + 0.2 * s as f64;
        let ea = eval_double_layer(&ico, &grid, &a, &x, t, &rule);
        let eb = eval_double_layer(&ico, &grid, &b, &x, t, &rule);
        let eab = eval_double_layer(&ico, &grid, &ab, &x, t, &rule);
        lin = lin.max((eab - ea - eb).abs() / (1.0 + ea.abs() + eb.abs()));
    }

    let tri = triangle();
    let grid = TimeGrid::new(3.0, 7, 1).unwrap();
    let m = tri.dof_count();
    let active = [(3usize, 1.0), (4, -0.4), (6, 0.7), (9, 0.25)];
    let mut c = vec![0.0; grid.basis_count() * m];
    for (flat, a) in active {
        for j in 0..m {
            c[(flat - 1) * m + j] = a;
        }
    }
    let profile = |tau: f64, deriv: usize| -> f64 {
        active
            .iter()
            .map(|&(f, a)| a * basis_b(&grid, TemporalBasisIndex::from_flat(f, 1), tau, deriv))
            .sum()
    };
    let corners = tri.corners(0);
    let n = tri.normal(0);
    let jac = 2.0 * tri.area(0);
    let quad = AdaptiveGauss::new(12, 30);
    let mut oracle_err: f64 = 0.0;
    for (x, t) in [
        (Vec3::new(0.05, 0.04, 0.6), 1.3),
        (Vec3::new(0.4, -0.2, -0.5), 1.9),
        (Vec3::new(0.06, 0.05, 0.25), 1.0),
    ] {
        let f = |u: f64, v: f64| {
            let y = corners[0] + (corners[1] - corners[0]) * u + (corners[2] - corners[0]) * v;
            let d = x - y;
            let r = d.norm();
            n.dot(&d) / (r * r) * (profile(t - r, 0) / r + profile(t - r, 1))
        };
        let oracle = -jac / (4.0 * PI)
            * quad.integrate(0.0, 1.0, 1e-13, &|u: f64| quad.integrate(0.0, 1.0 - u, 1e-13, &|v: f64| f(u, v)));
        let got = eval_double_layer(&tri, &grid, &c, &x, t, &rule);
        oracle_err = oracle_err.max((got - oracle).abs() / oracle.abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = early == 0 && arrived > 0 && lin <= 1e-12 && oracle_err <= 1e-6 && secs < 60.0;
    report(
        9,
        "potential evaluation",
        pass,
        &format!(
            "non-zero before arrival {early}, linearity {lin:.1e}, single triangle {oracle_err:.1e}, {secs:.1}s"
        ),
    );
    assert!(pass);
}
