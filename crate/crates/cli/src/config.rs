//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Sections are expressed with dotted
//! keys (`solver.method = gmres`). Relative paths are resolved against the
//! directory of the config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use tdbem_core::galerkin_assembly::QuadratureRule;
use tdbem_core::mesh::Vec3;
use tdbem_core::reference::{IncidentWave, TimeSignal};
use tdbem_core::solvers::{Method, SolverConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("key `{key}`: {msg}")]
    Key { key: String, msg: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ConfigError {
    fn key(key: &str, msg: impl Into<String>) -> Self {
        ConfigError::Key {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Convergence,
    Bench,
    Solve,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Convergence => "convergence",
            Command::Bench => "bench",
            Command::Solve => "solve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    Sin3t,
    Sin2pit,
}

impl SignalKind {
    pub fn signal(self) -> TimeSignal {
        match self {
            SignalKind::Sin3t => TimeSignal::sin3t(),
            SignalKind::Sin2pit => TimeSignal::sin2pit(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SignalKind::Sin3t => "sin3t",
            SignalKind::Sin2pit => "sin2pit",
        }
    }
}

/// Right-hand side selector.
#[derive(Debug, Clone, PartialEq)]
pub enum RhsSpec {
    /// `g(t) Y_n^m(x)` on the unit sphere.
    Sphere { n: usize, m: i32, signal: SignalKind },
    IncidentWave(IncidentWave),
}

/// Structured planar slice for field output.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub origin: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
    pub resolution: (usize, usize),
    pub times: Vec<f64>,
}

/// One solver of a benchmark, written in the usual notation
/// `GMRES(50)`, `DGMRES(50,4)`, `FGMRES(50,2(2,10))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub label: String,
    pub config: SolverConfig,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub mesh: PathBuf,
    pub t_final: f64,
    pub n: Vec<usize>,
    pub p: Vec<usize>,
    pub rhs: RhsSpec,
    pub solver: SolverConfig,
    pub bench_methods: Vec<MethodSpec>,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub field: Option<FieldSpec>,
    pub q_reg: usize,
    pub q_sing: usize,
    pub per_step: f64,
    /// Evaluation point of the plotted solution curve (nearest vertex).
    pub curve_point: Vec3,
}

const KEYS: &[&str] = &[
    "mesh",
    "T",
    "N",
    "p",
    "rhs",
    "rhs.m",
    "rhs.signal",
    "wave.amplitude",
    "wave.k",
    "wave.omega",
    "wave.phase",
    "wave.m_f",
    "wave.m_t",
    "solver.method",
    "solver.restart",
    "solver.tol",
    "solver.max_iter",
    "solver.deflation_l",
    "solver.deflation_r",
    "solver.inner_iterations",
    "bench.methods",
    "workers",
    "output.dir",
    "field.origin",
    "field.e1",
    "field.e2",
    "field.resolution",
    "field.times",
    "quadrature.q_reg",
    "quadrature.q_sing",
    "quadrature.per_step",
    "curve.point",
];

pub const DEFAULT_BENCH_METHODS: &str = "GMRES(50); DGMRES(50,4); FGMRES(50,2(2,10))";

/// Parses `key = value` lines; duplicate keys are rejected.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: format!("invalid key `{k}`"),
            });
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(map)
}

struct Pairs<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Pairs<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError::key(key, format!("cannot parse `{v}`"))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| ConfigError::key(key, format!("cannot parse `{}`", s.trim())))
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    fn vec3(&self, key: &str) -> Result<Option<Vec3>, ConfigError> {
        match self.list::<f64>(key)? {
            None => Ok(None),
            Some(v) if v.len() == 3 => Ok(Some(Vec3::new(v[0], v[1], v[2]))),
            Some(_) => Err(ConfigError::key(key, "expected three comma-separated numbers")),
        }
    }
}

/// Parses `GMRES(m)`, `DGMRES(m,l)` or `FGMRES(m,k(i_1,..,i_k))`.
pub fn parse_method_spec(spec: &str, base: &SolverConfig) -> Result<MethodSpec, String> {
    let s: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
    let open = s.find('(').ok_or_else(|| format!("`{spec}`: expected NAME(...)"))?;
    if !s.ends_with(')') {
        return Err(format!("`{spec}`: missing closing parenthesis"));
    }
    let name = s[..open].to_ascii_lowercase();
    let args = &s[open + 1..s.len() - 1];
    let (first, rest) = match args.split_once(',') {
        Some((a, b)) => (a, Some(b)),
        None => (args, None),
    };
    let restart: usize = first.parse().map_err(|_| format!("`{spec}`: bad restart `{first}`"))?;
    let mut config = SolverConfig {
        restart,
        ..base.clone()
    };
    match (name.as_str(), rest) {
        ("gmres", None) => config.method = Method::Gmres,
        ("dgmres", Some(l)) => {
            config.method = Method::Dgmres;
            config.deflation_l = l.parse().map_err(|_| format!("`{spec}`: bad deflation count `{l}`"))?;
        }
        ("fgmres", Some(r)) => {
            config.method = Method::FgmresRecursive;
            let (levels, inner) = match r.split_once('(') {
                Some((k, i)) if i.ends_with(')') => (k, &i[..i.len() - 1]),
                _ => return Err(format!("`{spec}`: expected levels(i_1,..)")),
            };
            let levels: usize = levels.parse().map_err(|_| format!("`{spec}`: bad level count `{levels}`"))?;
            let inner: Vec<usize> = inner
                .split(',')
                .map(|v| v.parse().map_err(|_| format!("`{spec}`: bad iteration count `{v}`")))
                .collect::<Result<_, _>>()?;
            if inner.len() != levels {
                return Err(format!("`{spec}`: {levels} levels but {} iteration counts", inner.len()));
            }
            config.inner_iterations = inner;
        }
        _ => return Err(format!("`{spec}`: unknown solver form")),
    }
    config.validate().map_err(|e| format!("`{spec}`: {e}"))?;
    Ok(MethodSpec {
        label: s.to_ascii_uppercase(),
        config,
    })
}

impl RunConfig {
    pub fn load(command: Command, path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(command, &text, base)
    }

    /// Parses and validates; relative paths are taken relative to `base`.
    pub fn parse(command: Command, text: &str, base: &Path) -> Result<Self, ConfigError> {
        let map = parse_pairs(text)?;
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ConfigError::Unknown(k.clone()));
        }
        let p = Pairs { map: &map };

        let mesh = base.join(p.raw("mesh").ok_or_else(|| ConfigError::Missing("mesh".into()))?);
        if !mesh.is_file() {
            return Err(ConfigError::key("mesh", format!("file {} does not exist", mesh.display())));
        }
        let t_final: f64 = p.parse("T")?.ok_or_else(|| ConfigError::Missing("T".into()))?;
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(ConfigError::key("T", "must be positive"));
        }
        let n: Vec<usize> = p.list("N")?.ok_or_else(|| ConfigError::Missing("N".into()))?;
        if n.is_empty() {
            return Err(ConfigError::key("N", "needs at least one value"));
        }
        if let Some(bad) = n.iter().find(|&&v| v < 3) {
            return Err(ConfigError::key("N", format!("N = {bad} is below the minimum of 3")));
        }
        let pv: Vec<usize> = p.list("p")?.unwrap_or_else(|| vec![1]);
        if pv.is_empty() {
            return Err(ConfigError::key("p", "needs at least one value"));
        }
        if command == Command::Solve && (n.len() != 1 || pv.len() != 1) {
            return Err(ConfigError::key(
                if n.len() != 1 { "N" } else { "p" },
                "solve takes a single value",
            ));
        }

        let rhs = match p.raw("rhs").unwrap_or("sphere-n0") {
            "sphere-n0" | "sphere-n1" => {
                let deg = usize::from(p.raw("rhs") == Some("sphere-n1"));
                let m: i32 = p.or("rhs.m", 0)?;
                if m.unsigned_abs() as usize > deg {
                    return Err(ConfigError::key("rhs.m", format!("order {m} out of range for degree {deg}")));
                }
                let signal = match p.raw("rhs.signal") {
                    None if deg == 0 => SignalKind::Sin3t,
                    None => SignalKind::Sin2pit,
                    Some("sin3t") => SignalKind::Sin3t,
                    Some("sin2pit") => SignalKind::Sin2pit,
                    Some(v) => return Err(ConfigError::key("rhs.signal", format!("unknown signal `{v}`"))),
                };
                RhsSpec::Sphere { n: deg, m, signal }
            }
            "incident-wave" => {
                let d = IncidentWave::submarine();
                let wave = IncidentWave::new(
                    p.or("wave.amplitude", d.amplitude)?,
                    p.vec3("wave.k")?.unwrap_or(d.k),
                    p.or("wave.omega", d.omega)?,
                    p.or("wave.phase", d.phase)?,
                    p.or("wave.m_f", d.m_f)?,
                    p.or("wave.m_t", d.m_t)?,
                )
                .map_err(|e| ConfigError::key("wave.m_t", e.to_string()))?;
                RhsSpec::IncidentWave(wave)
            }
            v => return Err(ConfigError::key("rhs", format!("unknown selector `{v}`"))),
        };
        if command == Command::Convergence && matches!(rhs, RhsSpec::Sphere { n: 1, .. }) && t_final > 2.0 {
            return Err(ConfigError::key("T", "the n = 1 reference is available for T <= 2 only"));
        }
        if command == Command::Convergence && matches!(rhs, RhsSpec::IncidentWave(_)) {
            return Err(ConfigError::key("rhs", "convergence needs an analytic reference (sphere-n0 or sphere-n1)"));
        }

        let d = SolverConfig::default();
        let solver = SolverConfig {
            method: match p.raw("solver.method") {
                None => d.method,
                Some(v) => v
                    .parse()
                    .map_err(|e: tdbem_core::solvers::SolverError| ConfigError::key("solver.method", e.to_string()))?,
            },
            restart: p.or("solver.restart", d.restart)?,
            tol: p.or("solver.tol", d.tol)?,
            max_iter: p.or("solver.max_iter", d.max_iter)?,
            deflation_l: p.or("solver.deflation_l", d.deflation_l)?,
            deflation_r: p.or("solver.deflation_r", d.deflation_r)?,
            inner_iterations: p.list("solver.inner_iterations")?.unwrap_or(d.inner_iterations),
        };
        if !(solver.tol > 0.0) {
            return Err(ConfigError::key("solver.tol", "must be positive"));
        }
        if solver.restart == 0 {
            return Err(ConfigError::key("solver.restart", "must be positive"));
        }
        if solver.max_iter == 0 {
            return Err(ConfigError::key("solver.max_iter", "must be positive"));
        }
        solver
            .validate()
            .map_err(|e| ConfigError::key("solver.method", e.to_string()))?;

        let bench_methods = p
            .raw("bench.methods")
            .unwrap_or(DEFAULT_BENCH_METHODS)
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_method_spec(s, &solver).map_err(|e| ConfigError::key("bench.methods", e)))
            .collect::<Result<Vec<_>, _>>()?;
        if command == Command::Bench && bench_methods.is_empty() {
            return Err(ConfigError::key("bench.methods", "needs at least one solver"));
        }

        let workers: usize = p.or("workers", 1)?;
        if workers == 0 {
            return Err(ConfigError::key("workers", "must be at least 1"));
        }

        let field = match p.vec3("field.origin")? {
            None => None,
            Some(origin) => {
                let e1 = p.vec3("field.e1")?.ok_or_else(|| ConfigError::Missing("field.e1".into()))?;
                let e2 = p.vec3("field.e2")?.ok_or_else(|| ConfigError::Missing("field.e2".into()))?;
                let res: Vec<usize> = p.list("field.resolution")?.unwrap_or_else(|| vec![33, 33]);
                if res.len() != 2 || res.iter().any(|&r| r < 2) {
                    return Err(ConfigError::key("field.resolution", "expected two counts of at least 2"));
                }
                let times: Vec<f64> = p.list("field.times")?.ok_or_else(|| ConfigError::Missing("field.times".into()))?;
                if let Some(t) = times.iter().find(|&&t| !(0.0..=t_final).contains(&t)) {
                    return Err(ConfigError::key("field.times", format!("time {t} outside [0, T]")));
                }
                Some(FieldSpec {
                    origin,
                    e1,
                    e2,
                    resolution: (res[0], res[1]),
                    times,
                })
            }
        };

        let q = QuadratureRule::default();
        let per_step: f64 = p.or("quadrature.per_step", 1.0)?;
        if !(per_step >= 0.0) {
            return Err(ConfigError::key("quadrature.per_step", "must be non-negative"));
        }
        Ok(Self {
            command,
            mesh,
            t_final,
            n,
            p: pv,
            rhs,
            solver,
            bench_methods,
            workers,
            out_dir: base.join(p.raw("output.dir").unwrap_or("out")),
            field,
            q_reg: p.or("quadrature.q_reg", q.q_reg)?,
            q_sing: p.or("quadrature.q_sing", q.q_sing)?,
            per_step,
            curve_point: p.vec3("curve.point")?.unwrap_or(Vec3::new(0.0, 0.0, 1.0)),
        })
    }

    pub fn quadrature(&self) -> QuadratureRule {
        let mut q = QuadratureRule::new(self.q_reg, self.q_sing);
        q.per_step = self.per_step;
        q
    }

    /// Fully resolved configuration as `key = value` lines.
    pub fn resolved(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let v3 = |v: &Vec3| format!("{},{},{}", v.x, v.y, v.z);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("command", self.command.name().into());
        kv("mesh", self.mesh.display().to_string());
        kv("T", self.t_final.to_string());
        kv("N", list(&self.n));
        kv("p", list(&self.p));
        match &self.rhs {
            RhsSpec::Sphere { n, m, signal } => {
                kv("rhs", format!("sphere-n{n}"));
                kv("rhs.m", m.to_string());
                kv("rhs.signal", signal.name().into());
            }
            RhsSpec::IncidentWave(w) => {
                kv("rhs", "incident-wave".into());
                kv("wave.amplitude", w.amplitude.to_string());
                kv("wave.k", v3(&w.k));
                kv("wave.omega", w.omega.to_string());
                kv("wave.phase", w.phase.to_string());
                kv("wave.m_f", w.m_f.to_string());
                kv("wave.m_t", w.m_t.to_string());
            }
        }
        kv("solver.method", self.solver.method.to_string());
        kv("solver.restart", self.solver.restart.to_string());
        kv("solver.tol", self.solver.tol.to_string());
        kv("solver.max_iter", self.solver.max_iter.to_string());
        kv("solver.deflation_l", self.solver.deflation_l.to_string());
        kv("solver.deflation_r", self.solver.deflation_r.to_string());
        kv("solver.inner_iterations", list(&self.solver.inner_iterations));
        kv(
            "bench.methods",
            self.bench_methods.iter().map(|m| m.label.as_str()).collect::<Vec<_>>().join("; "),
        );
        kv("workers", self.workers.to_string());
        kv("output.dir", self.out_dir.display().to_string());
        if let Some(f) = &self.field {
            kv("field.origin", v3(&f.origin));
            kv("field.e1", v3(&f.e1));
            kv("field.e2", v3(&f.e2));
            kv("field.resolution", format!("{},{}", f.resolution.0, f.resolution.1));
            kv(
                "field.times",
                f.times.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
            );
        }
        kv("quadrature.q_reg", self.q_reg.to_string());
        kv("quadrature.q_sing", self.q_sing.to_string());
        kv("quadrature.per_step", self.per_step.to_string());
        kv("curve.point", v3(&self.curve_point));
        s
    }
}
