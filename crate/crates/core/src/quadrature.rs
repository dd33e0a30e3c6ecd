//! Gauss–Legendre rules, triangle rules and the singular rules for
//! coincident / edge-adjacent / vertex-adjacent triangle pairs.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let half = n.div_ceil(2);
        for i in 0..half {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    /// Nodes and weights mapped to `[0, 1]`.
    pub fn unit(&self) -> Vec<(f64, f64)> {
        self.mapped(0.0, 1.0).collect()
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = if n == 0 {
        0.0
    } else {
        n as f64 * (x * p1 - p0) / (x * x - 1.0)
    };
    (p, dp)
}

/// Adaptive Gauss–Legendre integration with 32-point panels; a panel is
/// bisected until the two halves agree with the whole to `tol`.
pub struct AdaptiveGauss {
    rule: GaussLegendre,
    max_depth: usize,
}

impl Default for AdaptiveGauss {
    fn default() -> Self {
        Self::new(32, 40)
    }
}

impl AdaptiveGauss {
    pub fn new(points: usize, max_depth: usize) -> Self {
        Self {
            rule: GaussLegendre::new(points),
            max_depth,
        }
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, a: f64, b: f64, tol: f64, f: &F) -> f64 {
        if b <= a {
            return 0.0;
        }
        let whole = self.rule.integrate(a, b, f);
        self.refine(a, b, whole, tol, 0, f)
    }

    /// Integrates over `[a, b]` after splitting at the given breakpoints
    /// (points outside `(a, b)` are ignored).
    pub fn integrate_with_breaks<F: Fn(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        breaks: &[f64],
        tol: f64,
        f: &F,
    ) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut cuts: Vec<f64> = breaks
            .iter()
            .copied()
            .filter(|&c| c > a && c < b)
            .collect();
        cuts.push(a);
        cuts.push(b);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.windows(2)
            .map(|w| self.integrate(w[0], w[1], tol, f))
            .sum()
    }

    fn refine<F: Fn(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: usize,
        f: &F,
    ) -> f64 {
        let mid = 0.5 * (a + b);
        let left = self.rule.integrate(a, mid, f);
        let right = self.rule.integrate(mid, b, f);
        let split = left + right;
        if (split - whole).abs() <= tol || depth >= self.max_depth {
            return split;
        }
        self.refine(a, mid, left, 0.5 * tol, depth + 1, f)
            + self.refine(mid, b, right, 0.5 * tol, depth + 1, f)
    }
}

/// Quadrature on the reference triangle with vertices (0,0), (1,0), (0,1).
///
/// Collapsed (Duffy) tensor Gauss rule: all weights positive, sum 1/2.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    /// Reference coordinates `(s, t)`; the point is `P0 + s (P1-P0) + t (P2-P0)`.
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub order: usize,
}

impl TriangleRule {
    /// Rule exact for polynomials of total degree `order`.
    pub fn with_order(order: usize) -> Self {
        let n = (order + 3) / 2;
        let gl = GaussLegendre::new(n.max(1)).unit();
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for &(u, wu) in &gl {
            for &(v, wv) in &gl {
                points.push([u, (1.0 - u) * v]);
                weights.push(wu * wv * (1.0 - u));
            }
        }
        Self {
            points,
            weights,
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// How two triangles of a mesh touch each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairKind {
    Coincident,
    Edge,
    Vertex,
    Regular,
}

/// A point of a singular 4D rule in the coordinates of the reference
/// triangle `{0 <= x2 <= x1 <= 1}` for both factors.
#[derive(Debug, Clone, Copy)]
pub struct PairPoint {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub w: f64,
}

/// Relative-coordinate rules for touching triangle pairs.
///
/// Both triangles are parametrized over `{0 <= x2 <= x1 <= 1}` by
/// `P0 + x1 (P1 - P0) + x2 (P2 - P1)`. The shared vertex is `P0` in the
/// vertex case and the shared edge is `P0 P1` in the edge case, in the same
/// order on both triangles.
#[derive(Debug, Clone)]
pub struct SingularRules {
    pub coincident: Vec<PairPoint>,
    pub edge: Vec<PairPoint>,
    pub vertex: Vec<PairPoint>,
    pub order: usize,
}

impl SingularRules {
    pub fn new(order: usize) -> Self {
        let gl = GaussLegendre::new(order).unit();
        let mut coincident = Vec::new();
        let mut edge = Vec::new();
        let mut vertex = Vec::new();
        for &(xi, wxi) in &gl {
            for &(e1, w1) in &gl {
                for &(e2, w2) in &gl {
                    for &(e3, w3) in &gl {
                        let w = wxi * w1 * w2 * w3;
                        push_coincident(&mut coincident, xi, e1, e2, e3, w);
                        push_edge(&mut edge, xi, e1, e2, e3, w);
                        push_vertex(&mut vertex, xi, e1, e2, e3, w);
                    }
                }
            }
        }
        Self {
            coincident,
            edge,
            vertex,
            order,
        }
    }

    pub fn rule(&self, kind: PairKind) -> &[PairPoint] {
        match kind {
            PairKind::Coincident => &self.coincident,
            PairKind::Edge => &self.edge,
            PairKind::Vertex => &self.vertex,
            PairKind::Regular => &[],
        }
    }
}

fn scaled(s: f64, a: f64, b: f64) -> [f64; 2] {
    [s * a, s * b]
}

fn push_coincident(out: &mut Vec<PairPoint>, xi: f64, e1: f64, e2: f64, e3: f64, w: f64) {
    let jac = w * xi * xi * xi * e1 * e1 * e2;
    let pairs = [
        (
            scaled(xi, 1.0, 1.0 - e1 + e1 * e2),
            scaled(xi, 1.0 - e1 * e2 * e3, 1.0 - e1),
        ),
        (
            scaled(xi, 1.0 - e1 * e2 * e3, 1.0 - e1),
            scaled(xi, 1.0, 1.0 - e1 + e1 * e2),
        ),
        (
            scaled(xi, 1.0, e1 * (1.0 - e2 + e2 * e3)),
            scaled(xi, 1.0 - e1 * e2, e1 * (1.0 - e2)),
        ),
        (
            scaled(xi, 1.0 - e1 * e2, e1 * (1.0 - e2)),
            scaled(xi, 1.0, e1 * (1.0 - e2 + e2 * e3)),
        ),
        (
            scaled(xi, 1.0 - e1 * e2 * e3, e1 * (1.0 - e2 * e3)),
            scaled(xi, 1.0, e1 * (1.0 - e2)),
        ),
        (
            scaled(xi, 1.0, e1 * (1.0 - e2)),
            scaled(xi, 1.0 - e1 * e2 * e3, e1 * (1.0 - e2 * e3)),
        ),
    ];
    out.extend(pairs.into_iter().map(|(x, y)| PairPoint { x, y, w: jac }));
}

fn push_edge(out: &mut Vec<PairPoint>, xi: f64, e1: f64, e2: f64, e3: f64, w: f64) {
    let base = w * xi * xi * xi * e1 * e1;
    out.push(PairPoint {
        x: scaled(xi, 1.0, e1 * e3),
        y: scaled(xi, 1.0 - e1 * e2, e1 * (1.0 - e2)),
        w: base,
    });
    let rest = [
        (
            scaled(xi, 1.0, e1),
            scaled(xi, 1.0 - e1 * e2 * e3, e1 * e2 * (1.0 - e3)),
        ),
        (
            scaled(xi, 1.0 - e1 * e2, e1 * (1.0 - e2)),
            scaled(xi, 1.0, e1 * e2 * e3),
        ),
        (
            scaled(xi, 1.0 - e1 * e2 * e3, e1 * e2 * (1.0 - e3)),
            scaled(xi, 1.0, e1),
        ),
        (
            scaled(xi, 1.0 - e1 * e2 * e3, e1 * (1.0 - e2 * e3)),
            scaled(xi, 1.0, e1 * e2),
        ),
    ];
    out.extend(rest.into_iter().map(|(x, y)| PairPoint {
        x,
        y,
        w: base * e2,
    }));
}

fn push_vertex(out: &mut Vec<PairPoint>, xi: f64, e1: f64, e2: f64, e3: f64, w: f64) {
    let jac = w * xi * xi * xi * e2;
    out.push(PairPoint {
        x: scaled(xi, 1.0, e1),
        y: scaled(xi * e2, 1.0, e3),
        w: jac,
    });
    out.push(PairPoint {
        x: scaled(xi * e2, 1.0, e1),
        y: scaled(xi, 1.0, e3),
        w: jac,
    });
}
