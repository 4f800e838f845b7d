//! Fiedler eigenpairs, the adaptive partition count and spectral routing
//! plans.

pub mod lanczos;
pub mod multilevel;
pub mod nystrom;
pub mod partition;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::depgraph::{DependencyGraph, LaplacianOp};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use lanczos::{top_eigenpairs, LanczosOptions};
use multilevel::{prolongate, Level};
pub use nystrom::{landmark_budget, nystrom_fiedler, NystromSketch};
pub use partition::{recursive_bisection, BisectOptions, SplitRule};

/// Levels at or below this size are solved directly.
const COARSEST: usize = 160;

#[derive(Debug, Clone)]
pub struct FiedlerOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for FiedlerOptions {
    fn default() -> Self {
        FiedlerOptions { tol: 1e-9, max_iter: 200_000, seed: 0x5eed }
    }
}

#[derive(Debug, Clone)]
pub struct FiedlerPair {
    pub lambda2: f64,
    /// Unit norm, orthogonal to `D^{1/2} 1`, first nonzero entry positive.
    pub vector: Vec<f64>,
    pub residual: f64,
    pub matvecs: usize,
}

/// Flip `x` so its first clearly nonzero entry is positive.
pub fn sign_normalize(x: &mut [f64]) {
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(first) = x.iter().find(|v| v.abs() > 1e-10 * scale) {
        if *first < 0.0 {
            x.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// `<x, L~ x>` for unit `x`, summed edge-wise so that tiny eigenvalues keep
/// their relative accuracy.
fn rayleigh(g: &DependencyGraph, x: &[f64]) -> f64 {
    let d = g.degrees();
    let s: f64 = g
        .edges()
        .iter()
        .map(|&(i, j)| {
            let r = x[i] / (d[i] as f64).sqrt() - x[j] / (d[j] as f64).sqrt();
            r * r
        })
        .sum();
    s / lanczos::dot(x, x)
}

/// Second-smallest eigenpair of the normalized Laplacian of `g`.
pub fn fiedler_pair(g: &DependencyGraph, tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>)> {
    let f = fiedler_detailed(g, &FiedlerOptions { tol, max_iter, ..Default::default() })?;
    Ok((f.lambda2, f.vector))
}

/// Thick-restart Lanczos on the affinity with the null vector deflated,
/// started from a Galerkin coarse-grid solution when the graph is large.
pub fn fiedler_detailed(g: &DependencyGraph, opts: &FiedlerOptions) -> Result<FiedlerPair> {
    let n = g.n_nodes();
    if n < 2 {
        return Err(Error::Argument("Fiedler pair needs at least 2 nodes".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Argument(format!("tolerance must be positive, got {}", opts.tol)));
    }
    g.require_connected()?;
    let mut rng = rng::stream(opts.seed, tag::LANCZOS);

    let mut levels = vec![Level::from_graph(g)];
    let mut maps = Vec::new();
    while levels.last().unwrap().n() > COARSEST && levels.len() < 40 {
        let (coarse, map) = levels.last().unwrap().coarsen();
        if coarse.n() as f64 > 0.9 * levels.last().unwrap().n() as f64 {
            break;
        }
        levels.push(coarse);
        maps.push(map);
    }

    // Internal target sits below the requested residual so that the
    // explicit check at the end has headroom.
    let inner_tol = 0.5 * opts.tol;
    let mut x: Option<Vec<f64>> = None;
    let mut matvecs = 0;
    for li in (1..levels.len()).rev() {
        let level = &levels[li];
        let start = x.take();
        let mut u0 = level.sqrt_degree();
        let nu = lanczos::norm(&u0);
        u0.iter_mut().for_each(|v| *v /= nu);
        let cap = if li == levels.len() - 1 { 20 * level.n() + 500 } else { 600 };
        let res = top_eigenpairs(level, &[u0], start, &LanczosOptions::new(1, inner_tol, cap), &mut rng);
        let coarse_x = res.vectors.into_iter().next().unwrap();
        x = Some(prolongate(level, &levels[li - 1], &maps[li - 1], &coarse_x));
    }

    let op = LaplacianOp::new(g)?;
    let mut u0 = g.sqrt_degrees();
    let nu = lanczos::norm(&u0);
    u0.iter_mut().for_each(|v| *v /= nu);
    let res = top_eigenpairs(&op, &[u0], x, &LanczosOptions::new(1, inner_tol, opts.max_iter), &mut rng);
    matvecs += res.matvecs;
    let mut v = res.vectors.into_iter().next().unwrap();
    sign_normalize(&mut v);
    let lambda2 = rayleigh(g, &v);
    let mut lv = vec![0.0; n];
    op.laplacian(&v, &mut lv);
    let residual = lv.iter().zip(&v).map(|(a, b)| (a - lambda2 * b).powi(2)).sum::<f64>().sqrt();
    if residual > opts.tol {
        return Err(Error::Convergence { iterations: matvecs, residual });
    }
    Ok(FiedlerPair { lambda2, vector: v, residual, matvecs })
}

/// `sum_{i<=top_k} max(mu_i, 0) / mu_1` over the leading eigenvalues of the
/// affinity `D^{-1/2} W D^{-1/2}`; negative eigenvalues contribute nothing.
pub fn effective_rank(g: &DependencyGraph, top_k: usize) -> Result<f64> {
    let n = g.n_nodes();
    if top_k == 0 || top_k > n {
        return Err(Error::Argument(format!("top_k must lie in [1, {n}]")));
    }
    let op = LaplacianOp::new(g)?;
    let mut rng = rng::stream(n as u64, tag::LANCZOS);
    let mut opts = LanczosOptions::new(top_k, 1e-6, 400 * top_k + 20_000);
    opts.max_basis = (3 * top_k + 40).min(n);
    opts.keep = (2 * top_k).min(opts.max_basis.saturating_sub(1));
    let res = top_eigenpairs(&op, &[], None, &opts, &mut rng);
    if !res.converged {
        let residual = res.residuals.iter().cloned().fold(0.0, f64::max);
        return Err(Error::Convergence { iterations: res.matvecs, residual });
    }
    let mu1 = res.values[0];
    Ok(res.values.iter().map(|&m| m.max(0.0)).sum::<f64>() / mu1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    ExactLanczos,
    Nystrom { l: usize },
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::ExactLanczos => write!(f, "exact"),
            Method::Nystrom { l } => write!(f, "nystrom:{l}"),
        }
    }
}

/// `lambda2_hat` is NaN when the partition count was fixed rather than
/// estimated; equality compares it bitwise so such plans still compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralPlan {
    pub lambda2_hat: f64,
    pub fiedler: Vec<f64>,
    pub p_hat: usize,
    pub assignment: Vec<usize>,
    pub cut_count: usize,
    pub method: Method,
    pub c: f64,
    pub seed: u64,
}

impl PartialEq for SpectralPlan {
    fn eq(&self, o: &Self) -> bool {
        self.lambda2_hat.to_bits() == o.lambda2_hat.to_bits()
            && self.fiedler == o.fiedler
            && self.p_hat == o.p_hat
            && self.assignment == o.assignment
            && self.cut_count == o.cut_count
            && self.method == o.method
            && self.c == o.c
            && self.seed == o.seed
    }
}

impl SpectralPlan {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.p_hat];
        for &p in &self.assignment {
            s[p] += 1;
        }
        s
    }

    /// Members of each partition in increasing index order.
    pub fn partitions(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.p_hat];
        for (i, &p) in self.assignment.iter().enumerate() {
            parts[p].push(i);
        }
        parts
    }

    /// CSV `index,partition,fiedler_value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,partition,fiedler_value")?;
        for i in 0..self.n() {
            let f = self.fiedler.get(i).copied().unwrap_or(f64::NAN);
            writeln!(w, "{i},{},{f:?}", self.assignment[i])?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "lambda2_hat": self.lambda2_hat,
            "p_hat": self.p_hat,
            "cut_count": self.cut_count,
            "method": self.method.to_string(),
            "c": self.c,
            "seed": self.seed,
        })
        .to_string()
    }
}

#[derive(Debug, Clone)]
pub struct RouteOptions {
    pub m: usize,
    pub c: f64,
    pub method: Method,
    pub rule: SplitRule,
    pub fiedler: FiedlerOptions,
    pub seed: u64,
}

impl RouteOptions {
    pub fn new(m: usize, c: f64, method: Method) -> Self {
        RouteOptions { m, c, method, rule: SplitRule::Balanced, fiedler: FiedlerOptions::default(), seed: 0 }
    }
}

/// `min(ceil(c / lambda2), m)`, at least 1.
pub fn p_hat_for(c: f64, lambda2: f64, m: usize) -> usize {
    let raw = (c / lambda2).ceil();
    if !raw.is_finite() || raw >= m as f64 {
        m.max(1)
    } else {
        (raw as usize).max(1)
    }
}

/// Estimated gap and Fiedler vector by the configured method.
pub fn estimate_gap(g: &DependencyGraph, method: Method, fiedler: &FiedlerOptions, seed: u64) -> Result<(f64, Vec<f64>)> {
    match method {
        Method::ExactLanczos => {
            let f = fiedler_detailed(g, &FiedlerOptions { seed: rng::split(seed, 1), ..fiedler.clone() })?;
            Ok((f.lambda2, f.vector))
        }
        Method::Nystrom { l } => {
            let (lambda, v, _) = nystrom_fiedler(g, l, seed)?;
            Ok((lambda, v))
        }
    }
}

fn validate(opts: &RouteOptions) -> Result<()> {
    if opts.m < 1 {
        return Err(Error::Argument("ensemble size m must be >= 1".into()));
    }
    if !(opts.c > 0.0) {
        return Err(Error::Argument(format!("routing constant c must be > 0, got {}", opts.c)));
    }
    Ok(())
}

/// Routing plan with the gap measured on `gap_graph` and the partitions cut
/// on `part_graph` (both over the same nodes).
pub fn route(gap_graph: &DependencyGraph, part_graph: &DependencyGraph, opts: &RouteOptions) -> Result<SpectralPlan> {
    validate(opts)?;
    if gap_graph.n_nodes() != part_graph.n_nodes() {
        return Err(Error::Argument("gap and partition graphs differ in size".into()));
    }
    let (lambda2_hat, fiedler) = estimate_gap(gap_graph, opts.method, &opts.fiedler, opts.seed)?;
    if !(lambda2_hat > 0.0 && lambda2_hat <= 2.0 + 1e-9) {
        return Err(Error::Routing(format!("estimated gap {lambda2_hat} lies outside (0, 2]")));
    }
    let p_hat = p_hat_for(opts.c, lambda2_hat, opts.m);
    let mut plan = route_with_count(part_graph, p_hat, opts)?;
    plan.lambda2_hat = lambda2_hat;
    plan.fiedler = fiedler;
    Ok(plan)
}

/// Single-graph routing: gap and partitions from the same graph.
pub fn route_partitions(g: &DependencyGraph, m: usize, c: f64, method: Method) -> Result<SpectralPlan> {
    route(g, g, &RouteOptions::new(m, c, method))
}

/// Partition plan for a fixed count `p`, bypassing gap estimation.
pub fn route_with_count(part_graph: &DependencyGraph, p: usize, opts: &RouteOptions) -> Result<SpectralPlan> {
    validate(opts)?;
    let n = part_graph.n_nodes();
    let assignment = if p == 1 {
        vec![0; n]
    } else {
        let bis = BisectOptions { rule: opts.rule, fiedler: FiedlerOptions { seed: rng::split(opts.seed, 2), ..opts.fiedler.clone() } };
        recursive_bisection(part_graph, p, &bis)?
    };
    let cut_count = part_graph.cut_edges(&assignment, p)?;
    Ok(SpectralPlan {
        lambda2_hat: f64::NAN,
        fiedler: Vec::new(),
        p_hat: p,
        assignment,
        cut_count,
        method: opts.method,
        c: opts.c,
        seed: opts.seed,
    })
}
