//! Experiment pipelines: convergence study, solver benchmark and
//! scattering solve with field export.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::time::Instant;

use log::info;

use tdbem_core::block_system::{plan_distribution, BlockHessenbergMatrix};
use tdbem_core::galerkin_assembly::{assemble_neumann_rhs, QuadratureRule};
use tdbem_core::kernel_weights::KernelTables;
use tdbem_core::mesh::{SurfaceMesh, Vec3};
use tdbem_core::potential_eval::{eval_total_field, FieldGrid, FieldRule, FieldTable};
use tdbem_core::reference::{
    incident_neumann, l2_spacetime_error, nodal_values, reference_n0, reference_n1, ErrorQuadrature,
    IncidentWave, Reference, SphericalHarmonic, TimeSignal, QUAD_TOL,
};
use tdbem_core::solvers::{solve, SolveResult, SolverConfig};
use tdbem_core::temporal_basis::TimeGrid;

use crate::config::{RhsSpec, RunConfig};
use crate::output::{write_csv, write_manifest, write_vtu, VtuGrid};
use crate::CliError;

/// Number of samples in each solution curve file.
const CURVE_SAMPLES: usize = 241;

fn e(v: f64) -> String {
    format!("{v:.6e}")
}

fn secs(v: f64) -> String {
    format!("{v:.3}")
}

/// Assembled system for one `(N, p)`.
pub struct System {
    pub mesh: SurfaceMesh,
    pub grid: TimeGrid,
    pub matrix: BlockHessenbergMatrix,
    pub rhs: Vec<f64>,
    pub assembly_s: f64,
}

/// Kernel tables shared between runs of equal order.
#[derive(Default)]
pub struct TableCache {
    tables: BTreeMap<usize, KernelTables>,
}

impl TableCache {
    pub fn get(&mut self, p: usize) -> &KernelTables {
        self.tables.entry(p).or_insert_with(|| KernelTables::build(p))
    }
}

fn sphere_data(n: usize, m: i32, signal: &TimeSignal) -> Result<(SphericalHarmonic, TimeSignal), CliError> {
    Ok((SphericalHarmonic::new(n, m)?, signal.clone()))
}

/// Assembles matrix and load vector. The assembly time covers the matrix
/// only.
pub fn assemble_system(
    cfg: &RunConfig,
    mesh: &SurfaceMesh,
    n: usize,
    p: usize,
    tables: &KernelTables,
    rule: &QuadratureRule,
) -> Result<System, CliError> {
    let grid = TimeGrid::new(cfg.t_final, n, p)?;
    let plan = plan_distribution(&grid, mesh, cfg.workers)?;
    let t0 = Instant::now();
    let matrix = BlockHessenbergMatrix::assemble(mesh, &grid, tables, rule, &plan);
    let assembly_s = t0.elapsed().as_secs_f64();
    let rhs = match &cfg.rhs {
        RhsSpec::Sphere { n, m, signal } => {
            let (y, g) = sphere_data(*n, *m, &signal.signal())?;
            assemble_neumann_rhs(mesh, &grid, rule, move |x, _, t| g.value(t) * y.eval(x))
        }
        RhsSpec::IncidentWave(w) => {
            let w = *w;
            assemble_neumann_rhs(mesh, &grid, rule, move |x, nx, t| incident_neumann(&w, x, nx, t))
        }
    };
    info!("assembled N={n} p={p}: dim {} in {assembly_s:.1}s", matrix.dim());
    Ok(System {
        mesh: mesh.clone(),
        grid,
        matrix,
        rhs,
        assembly_s,
    })
}

fn timed_solve(sys: &System, solver: &SolverConfig) -> Result<(SolveResult, f64), CliError> {
    let t0 = Instant::now();
    let r = solve(&sys.matrix, &sys.rhs, solver)?;
    Ok((r, t0.elapsed().as_secs_f64()))
}

/// Least-squares slope of `log(error)` over `log(N)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub p: usize,
    pub n: usize,
    pub dt: f64,
    pub error: f64,
    pub relative_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub assembly_s: f64,
    pub solve_s: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// `(p, slope)` for every order with at least two runs.
    pub slopes: Vec<(usize, f64)>,
}

impl ConvergenceReport {
    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| r.converged)
    }
}

/// Error study against the analytic sphere solution.
///
/// Writes `convergence.csv`, one `curve_p{p}_N{N}.csv` per run (numerical
/// and reference solution at the vertex nearest `curve.point`) and the
/// manifest.
pub fn run_convergence(cfg: &RunConfig) -> Result<ConvergenceReport, CliError> {
    let RhsSpec::Sphere { n: deg, m, signal } = cfg.rhs else {
        return Err(CliError::Usage("convergence needs a sphere right-hand side".into()));
    };
    fs::create_dir_all(&cfg.out_dir)?;
    write_manifest(&cfg.out_dir, &cfg.resolved())?;
    let mesh = SurfaceMesh::load(&cfg.mesh)?;
    let rule = cfg.quadrature();
    let (y, g) = sphere_data(deg, m, &signal.signal())?;
    if deg == 1 && cfg.t_final > 2.0 {
        return Err(CliError::Usage("the n = 1 reference is available for T <= 2 only".into()));
    }
    let time_factor = |t: f64| -> f64 {
        if deg == 0 {
            reference_n0(&g, t, QUAD_TOL)
        } else {
            reference_n1(&g, t, QUAD_TOL).expect("time range checked")
        }
    };
    let space = |x: &Vec3| y.eval(x);
    let reference = Reference::Separable {
        time: &time_factor,
        space: &space,
    };
    let vertex = nearest_vertex(&mesh, &cfg.curve_point);
    let mut tables = TableCache::default();
    let mut rows = Vec::new();
    for &p in &cfg.p {
        for &n in &cfg.n {
            let sys = assemble_system(cfg, &mesh, n, p, tables.get(p), &rule)?;
            let (r, solve_s) = timed_solve(&sys, &cfg.solver)?;
            let quad = ErrorQuadrature::default();
            let error = l2_spacetime_error(&mesh, &sys.grid, &r.x, &reference, quad);
            let norm = l2_spacetime_error(&mesh, &sys.grid, &vec![0.0; r.x.len()], &reference, quad);
            info!("N={n} p={p}: error {error:.4e}, {} iterations", r.iterations());
            let m_dofs = mesh.dof_count();
            let curve: Vec<Vec<String>> = (0..CURVE_SAMPLES)
                .map(|k| {
                    let t = cfg.t_final * k as f64 / (CURVE_SAMPLES - 1) as f64;
                    let num = nodal_values(&sys.grid, m_dofs, &r.x, t)[vertex];
                    let exact = time_factor(t) * y.eval(&mesh.vertices()[vertex]);
                    vec![e(t), e(num), e(exact)]
                })
                .collect();
            write_csv(
                &cfg.out_dir.join(format!("curve_p{p}_N{n}.csv")),
                &["t", "numerical", "reference"],
                &curve,
            )?;
            rows.push(ConvergenceRow {
                p,
                n,
                dt: sys.grid.dt,
                error,
                relative_error: error / norm,
                iterations: r.iterations(),
                converged: r.converged,
                assembly_s: sys.assembly_s,
                solve_s,
            });
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.p.to_string(),
                r.n.to_string(),
                e(r.dt),
                e(r.error),
                e(r.relative_error),
                r.iterations.to_string(),
                r.converged.to_string(),
                secs(r.assembly_s),
                secs(r.solve_s),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("convergence.csv"),
        &[
            "p",
            "N",
            "dt",
            "l2_error",
            "relative_error",
            "iterations",
            "converged",
            "assembly_s",
            "solve_s",
        ],
        &table,
    )?;
    let slopes = cfg
        .p
        .iter()
        .filter_map(|&p| {
            let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.p == p).map(|r| (r.n as f64, r.error)).collect();
            (pts.len() >= 2).then(|| (p, loglog_slope(&pts)))
        })
        .collect();
    Ok(ConvergenceReport { rows, slopes })
}

fn nearest_vertex(mesh: &SurfaceMesh, x: &Vec3) -> usize {
    mesh.vertices()
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - x).norm().total_cmp(&(b.1 - x).norm()))
        .map(|(i, _)| i)
        .expect("mesh has vertices")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub p: usize,
    pub n: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_residual: f64,
    pub assembly_s: f64,
    pub solve_s: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| r.converged)
    }

    pub fn iterations(&self, method: &str, p: usize, n: usize) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.p == p && r.n == n)
            .map(|r| r.iterations)
    }
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

/// Runs every configured solver on identical systems. Writes `bench.csv`
/// and one residual log per run.
pub fn run_solver_bench(cfg: &RunConfig) -> Result<BenchReport, CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    write_manifest(&cfg.out_dir, &cfg.resolved())?;
    let mesh = SurfaceMesh::load(&cfg.mesh)?;
    let rule = cfg.quadrature();
    let mut tables = TableCache::default();
    let mut rows = Vec::new();
    for &p in &cfg.p {
        for &n in &cfg.n {
            let sys = assemble_system(cfg, &mesh, n, p, tables.get(p), &rule)?;
            for spec in &cfg.bench_methods {
                let (r, solve_s) = timed_solve(&sys, &spec.config)?;
                info!("{} N={n} p={p}: {} iterations in {solve_s:.1}s", spec.label, r.iterations());
                let log = cfg
                    .out_dir
                    .join(format!("residuals_{}_p{p}_N{n}.csv", file_label(&spec.label)));
                r.write_log(BufWriter::new(fs::File::create(log)?))?;
                rows.push(BenchRow {
                    method: spec.label.clone(),
                    p,
                    n,
                    iterations: r.iterations(),
                    converged: r.converged,
                    final_residual: *r.history.last().expect("history starts with the initial residual"),
                    assembly_s: sys.assembly_s,
                    solve_s,
                });
            }
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.p.to_string(),
                r.n.to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
                e(r.final_residual),
                secs(r.assembly_s),
                secs(r.solve_s),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("bench.csv"),
        &[
            "method",
            "p",
            "N",
            "iterations",
            "converged",
            "final_residual",
            "assembly_s",
            "solve_s",
        ],
        &table,
    )?;
    Ok(BenchReport { rows })
}

#[derive(Debug, Clone)]
pub struct ScatterReport {
    pub result: SolveResult,
    pub grid: TimeGrid,
    pub field: Option<FieldTable>,
    pub assembly_s: f64,
    pub solve_s: f64,
}

/// Solves once, writes `coefficients.csv`, `matrix_stats.csv` and, when a
/// field slice is configured, one `field_NNN.vtu` per output time.
pub fn run_scattering(cfg: &RunConfig) -> Result<ScatterReport, CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    write_manifest(&cfg.out_dir, &cfg.resolved())?;
    let mesh = SurfaceMesh::load(&cfg.mesh)?;
    let rule = cfg.quadrature();
    let (n, p) = (cfg.n[0], cfg.p[0]);
    let tables = KernelTables::build(p);
    let sys = assemble_system(cfg, &mesh, n, p, &tables, &rule)?;
    let (r, solve_s) = timed_solve(&sys, &cfg.solver)?;
    info!("solved N={n} p={p}: {} iterations, converged {}", r.iterations(), r.converged);

    let m = mesh.dof_count();
    let coeffs: Vec<Vec<String>> = r
        .x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let flat = i / m + 1;
            vec![
                flat.to_string(),
                ((flat - 1) / (p + 1) + 1).to_string(),
                ((flat - 1) % (p + 1)).to_string(),
                (i % m).to_string(),
                format!("{v:.17e}"),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("coefficients.csv"),
        &["flat", "timestep", "order", "vertex", "value"],
        &coeffs,
    )?;
    sys.matrix
        .write_stats(BufWriter::new(fs::File::create(cfg.out_dir.join("matrix_stats.csv"))?))?;

    let field = match &cfg.field {
        None => None,
        Some(f) => {
            let wave = match cfg.rhs {
                RhsSpec::IncidentWave(w) => w,
                // scattered field only
                RhsSpec::Sphere { .. } => IncidentWave::new(0.0, Vec3::zeros(), 0.0, 0.0, 0.0, 1.0)?,
            };
            let fg = FieldGrid::plane(&mesh, f.origin, f.e1, f.e2, f.resolution, f.times.clone())?;
            let table = eval_total_field(&wave, &mesh, &sys.grid, &r.x, &fg, &FieldRule::default());
            for (k, (t, values)) in table.times.iter().zip(&table.values).enumerate() {
                let path = cfg.out_dir.join(format!("field_{k:03}.vtu"));
                let grid = VtuGrid {
                    points: &fg.points,
                    dims: fg.dims,
                };
                write_vtu(BufWriter::new(fs::File::create(path)?), &grid, values, *t)?;
            }
            Some(table)
        }
    };
    Ok(ScatterReport {
        result: r,
        grid: sys.grid,
        field,
        assembly_s: sys.assembly_s,
        solve_s,
    })
}
