//! From a trajectory and a named scheme to a trained ensemble: resolves the
//! scheme's parameters (estimated gap, block lengths, routing plan), draws
//! the subsamples and trains.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::chain_sim::{Topology, Trajectory};
use crate::depgraph::{build_graph, GraphRecipe};
use crate::ensemble::{train, BaseLearnerSpec, EnsembleModel};
use crate::error::{Error, Result};
use crate::resampling::{draw, ResamplingScheme, RoutedSize, SchemeKind};
use crate::rng;
use crate::spectral::{
    estimate_gap, landmark_budget, p_hat_for, route_with_count, FiedlerOptions, Method, RouteOptions, SpectralPlan,
    SplitRule,
};

/// A scheme as named in configs; parameters left as `None` are resolved from
/// the data (estimated mixing time) or the generating config (oracle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SchemeSpec {
    Uniform,
    LagThin { stride: usize },
    TmixThin,
    StationaryBoot { mean_block: Option<f64> },
    CircularBB { block_len: Option<usize> },
    OracleBB,
    Spectral { fixed_p: Option<usize> },
}

impl SchemeSpec {
    /// The baseline panel, in table order.
    pub fn all_baselines() -> Vec<SchemeSpec> {
        vec![
            SchemeSpec::Uniform,
            SchemeSpec::LagThin { stride: 2 },
            SchemeSpec::TmixThin,
            SchemeSpec::StationaryBoot { mean_block: None },
            SchemeSpec::CircularBB { block_len: None },
            SchemeSpec::OracleBB,
            SchemeSpec::Spectral { fixed_p: None },
        ]
    }

    fn needs_gap(&self) -> bool {
        matches!(
            self,
            SchemeSpec::TmixThin
                | SchemeSpec::StationaryBoot { mean_block: None }
                | SchemeSpec::CircularBB { block_len: None }
                | SchemeSpec::Spectral { fixed_p: None }
        )
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeSpec::Uniform => write!(f, "uniform"),
            SchemeSpec::LagThin { stride } => write!(f, "lag-thin:{stride}"),
            SchemeSpec::TmixThin => write!(f, "tmix-thin"),
            SchemeSpec::StationaryBoot { mean_block: None } => write!(f, "stat-boot"),
            SchemeSpec::StationaryBoot { mean_block: Some(b) } => write!(f, "stat-boot:{b}"),
            SchemeSpec::CircularBB { block_len: None } => write!(f, "cbb"),
            SchemeSpec::CircularBB { block_len: Some(b) } => write!(f, "cbb:{b}"),
            SchemeSpec::OracleBB => write!(f, "oracle-bb"),
            SchemeSpec::Spectral { fixed_p: None } => write!(f, "spectral"),
            SchemeSpec::Spectral { fixed_p: Some(p) } => write!(f, "spectral:{p}"),
        }
    }
}

impl FromStr for SchemeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let bad = || Error::Parse(format!("bad scheme {s:?}"));
        let num = |a: &str| a.parse::<usize>().map_err(|_| bad());
        Ok(match (head, arg) {
            ("uniform", None) => SchemeSpec::Uniform,
            ("lag-thin", None) => SchemeSpec::LagThin { stride: 2 },
            ("lag-thin", Some(a)) => SchemeSpec::LagThin { stride: num(a)? },
            ("tmix-thin", None) => SchemeSpec::TmixThin,
            ("stat-boot", None) => SchemeSpec::StationaryBoot { mean_block: None },
            ("stat-boot", Some(a)) => SchemeSpec::StationaryBoot { mean_block: Some(a.parse().map_err(|_| bad())?) },
            ("cbb", None) => SchemeSpec::CircularBB { block_len: None },
            ("cbb", Some(a)) => SchemeSpec::CircularBB { block_len: Some(num(a)?) },
            ("oracle-bb", None) => SchemeSpec::OracleBB,
            ("spectral", None) => SchemeSpec::Spectral { fixed_p: None },
            ("spectral", Some(a)) => SchemeSpec::Spectral { fixed_p: Some(num(a)?) },
            _ => return Err(bad()),
        })
    }
}

/// Gap method as configured; `NystromBudget` takes `ceil(t_mix (ln n)^2)`
/// landmarks from the generating config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MethodSpec {
    Exact,
    Nystrom(usize),
    NystromBudget,
}

impl MethodSpec {
    pub fn resolve(&self, n: usize, t_mix: u32) -> Method {
        match *self {
            MethodSpec::Exact => Method::ExactLanczos,
            MethodSpec::Nystrom(l) => Method::Nystrom { l: l.min(n) },
            MethodSpec::NystromBudget => Method::Nystrom { l: landmark_budget(t_mix as f64, n) },
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSpec::Exact => write!(f, "exact"),
            MethodSpec::Nystrom(l) => write!(f, "nystrom:{l}"),
            MethodSpec::NystromBudget => write!(f, "nystrom"),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "exact" => Ok(MethodSpec::Exact),
            None if s == "nystrom" => Ok(MethodSpec::NystromBudget),
            Some(("nystrom", l)) => l.parse().map(MethodSpec::Nystrom).map_err(|_| Error::Parse(format!("bad method {s:?}"))),
            _ => Err(Error::Parse(format!("bad method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub c: f64,
    pub method: MethodSpec,
    pub gap_graph: GraphRecipe,
    /// `None` picks the topology's own adjacency.
    pub part_graph: Option<GraphRecipe>,
    pub size: RoutedSize,
    pub rule: SplitRule,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            c: 1.0,
            method: MethodSpec::Exact,
            gap_graph: GraphRecipe::FeatureKnn(10),
            part_graph: None,
            size: RoutedSize::Subsample,
            rule: SplitRule::Balanced,
        }
    }
}

pub fn topology_graph(topology: Topology) -> GraphRecipe {
    match topology {
        Topology::Path1D => GraphRecipe::TemporalWindow(1),
        Topology::Lattice2D { .. } => GraphRecipe::SpatialKnn(4),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitContext {
    pub m: usize,
    pub learner: BaseLearnerSpec,
    pub routing: RoutingConfig,
}

impl FitContext {
    pub fn new(m: usize, learner: BaseLearnerSpec) -> Self {
        FitContext { m, learner, routing: RoutingConfig::default() }
    }
}

/// Estimated gap and Fiedler vector of one trajectory, computed at most once.
#[derive(Debug, Default)]
pub struct GapCache(OnceLock<(f64, Vec<f64>)>);

impl GapCache {
    pub fn new() -> Self {
        GapCache(OnceLock::new())
    }

    pub fn get_or_compute(&self, traj: &Trajectory, routing: &RoutingConfig, seed: u64) -> Result<&(f64, Vec<f64>)> {
        if let Some(v) = self.0.get() {
            return Ok(v);
        }
        let g = build_graph(traj, &routing.gap_graph)?;
        let method = routing.method.resolve(traj.n(), traj.config.t_mix);
        let v = estimate_gap(&g, method, &FiedlerOptions::default(), rng::split(seed, 21))?;
        if !(v.0 > 0.0 && v.0 <= 2.0 + 1e-9) {
            return Err(Error::Routing(format!("estimated gap {} lies outside (0, 2]", v.0)));
        }
        Ok(self.0.get_or_init(|| v))
    }
}

/// `ceil(c / lambda2)` capped at `n`: the estimated mixing time.
pub fn tmix_hat(c: f64, lambda2: f64, n: usize) -> usize {
    p_hat_for(c, lambda2, n)
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: EnsembleModel,
    pub plan: Option<SpectralPlan>,
    pub lambda2_hat: Option<f64>,
    /// Stride, block length or partition count actually used.
    pub param: Option<f64>,
    pub degenerate: bool,
}

/// Concrete resampling scheme plus the routing plan when there is one.
pub fn resolve(
    traj: &Trajectory,
    scheme: SchemeSpec,
    ctx: &FitContext,
    seed: u64,
    cache: &GapCache,
) -> Result<(ResamplingScheme, Option<SpectralPlan>, Option<f64>, Option<f64>)> {
    let n = traj.n();
    if ctx.m < 1 || ctx.m > n {
        return Err(Error::Argument(format!("ensemble size {} must lie in [1, {n}]", ctx.m)));
    }
    let size = ((n as f64 / ctx.m as f64).round() as usize).clamp(1, n);
    let rs = rng::split(seed, 11);
    let gap = if scheme.needs_gap() { Some(cache.get_or_compute(traj, &ctx.routing, seed)?) } else { None };
    let lambda = gap.map(|g| g.0);
    let that = lambda.map(|l| tmix_hat(ctx.routing.c, l, n));
    let t_true = traj.config.t_mix as usize;
    let mk = |kind| ResamplingScheme::new(kind, size, rs);
    Ok(match scheme {
        SchemeSpec::Uniform => (mk(SchemeKind::Uniform), None, lambda, None),
        SchemeSpec::LagThin { stride } => (mk(SchemeKind::LagThin { stride }), None, lambda, Some(stride as f64)),
        SchemeSpec::TmixThin => {
            let stride = that.unwrap();
            (mk(SchemeKind::TmixThin { stride }), None, lambda, Some(stride as f64))
        }
        SchemeSpec::StationaryBoot { mean_block } => {
            let b = mean_block.unwrap_or_else(|| that.unwrap() as f64);
            (mk(SchemeKind::StationaryBoot { mean_block: b }), None, lambda, Some(b))
        }
        SchemeSpec::CircularBB { block_len } => {
            let b = block_len.unwrap_or_else(|| that.unwrap()).min(n);
            (mk(SchemeKind::CircularBB { block_len: b }), None, lambda, Some(b as f64))
        }
        SchemeSpec::OracleBB => {
            let b = t_true.min(n);
            (mk(SchemeKind::OracleBB { block_len: b }), None, lambda, Some(b as f64))
        }
        SchemeSpec::Spectral { fixed_p } => {
            let p = match fixed_p {
                Some(p) => p,
                None => p_hat_for(ctx.routing.c, lambda.unwrap(), ctx.m),
            };
            let part = ctx.routing.part_graph.clone().unwrap_or_else(|| topology_graph(traj.topology));
            let pg = build_graph(traj, &part)?;
            let mut opts = RouteOptions::new(ctx.m, ctx.routing.c, ctx.routing.method.resolve(n, traj.config.t_mix));
            opts.rule = ctx.routing.rule;
            opts.seed = rng::split(seed, 12);
            let mut plan = route_with_count(&pg, p, &opts)?;
            if let Some((l, v)) = gap {
                plan.lambda2_hat = *l;
                plan.fiedler = v.clone();
            }
            let kind = SchemeKind::SpectralRoute { plan: Box::new(plan.clone()), size: ctx.routing.size };
            (mk(kind), Some(plan), lambda, Some(p as f64))
        }
    })
}

pub fn fit(traj: &Trajectory, scheme: SchemeSpec, ctx: &FitContext, seed: u64, cache: &GapCache) -> Result<Fitted> {
    let (rs, plan, lambda2_hat, param) = resolve(traj, scheme, ctx, seed, cache)?;
    let subs = draw(&rs, traj.n(), ctx.m)?;
    if subs.degenerate {
        log::warn!("{scheme}: resampling pool collapsed to a single sample");
    }
    let model = train(traj, &subs, &ctx.learner)?;
    Ok(Fitted { model, plan, lambda2_hat, param, degenerate: subs.degenerate })
}
