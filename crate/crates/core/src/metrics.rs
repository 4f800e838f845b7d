//! Excess risk, pairwise learner-margin covariance, margin autocovariance,
//! the truncated variance functional and rate-curve slopes.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::chain_sim::{bayes_risk_oracle, draw_stationary, generate, ChainConfig, Trajectory};
use crate::ensemble::{EnsembleModel, Learner};
use crate::error::{Error, Result};
use crate::pipeline::{fit, FitContext, GapCache, SchemeSpec};
use crate::rng;
use crate::stats::{linear_fit, mean, sign, Estimate};

/// Anything that votes in {-1, +1}.
pub trait Classifier: Sync {
    fn vote(&self, x: &[f64]) -> i8;
}

impl Classifier for Learner {
    fn vote(&self, x: &[f64]) -> i8 {
        self.predict(x)
    }
}

impl Classifier for EnsembleModel {
    fn vote(&self, x: &[f64]) -> i8 {
        self.predict(x)
    }
}

impl<F: Fn(&[f64]) -> i8 + Sync> Classifier for F {
    fn vote(&self, x: &[f64]) -> i8 {
        self(x)
    }
}

/// The Bayes rule `sign(<v, x>)` of the witness class.
#[derive(Debug, Clone)]
pub struct BayesRule {
    pub v: Vec<i8>,
}

impl Classifier for BayesRule {
    fn vote(&self, x: &[f64]) -> i8 {
        sign(self.v.iter().zip(x).map(|(&s, &xi)| s as f64 * xi).sum())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub excess_risk: Estimate,
    pub pairwise_cov: f64,
    pub autocov: Vec<f64>,
    pub variance_functional: f64,
    pub n_eval: usize,
    pub seeds_used: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "excess_risk,excess_risk_se,pairwise_cov,variance_functional,n_eval,seeds_used,autocov";

    /// One CSV row; the autocovariance vector is `;`-joined in the last column.
    pub fn csv_row(&self) -> String {
        let ac: Vec<String> = self.autocov.iter().map(|v| format!("{v:.6e}")).collect();
        format!(
            "{:.6},{:.6},{:.6e},{:.6e},{},{},{}",
            self.excess_risk.value,
            self.excess_risk.se,
            self.pairwise_cov,
            self.variance_functional,
            self.n_eval,
            self.seeds_used,
            ac.join(";")
        )
    }
}

/// Held-out error of the majority vote minus the Bayes risk. The event
/// `Y * H(X) <= 0` is taken on the margin, so a tied vote counts as an error.
pub fn excess_risk(model: &EnsembleModel, eval: &Trajectory, bayes: f64) -> Result<Estimate> {
    if let Some(p) = &model.provenance {
        if !p.same_law(&eval.config) {
            return Err(Error::Argument("evaluation data come from a different law than the training data".into()));
        }
    }
    let errs = model
        .margins(eval)
        .iter()
        .zip(&eval.y)
        .filter(|(rho, &y)| y as f64 * **rho <= 0.0)
        .count();
    let n = eval.n() as f64;
    let p = errs as f64 / n;
    Ok(Estimate::new(p - bayes, (p * (1.0 - p) / n).sqrt()))
}

/// `V_j = mean_t y_t h_j(x_t)` over an evaluation set, for every learner.
pub fn learner_margins(model: &EnsembleModel, eval: &Trajectory) -> Vec<f64> {
    model
        .votes(eval)
        .iter()
        .map(|v| v.iter().zip(&eval.y).map(|(&h, &y)| (h * y) as f64).sum::<f64>() / eval.n() as f64)
        .collect()
}

/// Randomness held fixed across seeds when measuring learner covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovMode {
    /// Fresh chain and fresh resampling per seed.
    Joint,
    /// One chain; only the resampling varies.
    ChainConditional,
}

/// Fixed held-out evaluation set and Bayes risk shared by all seeds of a cell.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub traj: Trajectory,
    pub bayes: Estimate,
}

impl EvalSet {
    pub fn new(config: &ChainConfig, n_eval: usize, mc_draws: usize) -> Result<Self> {
        let traj = draw_stationary(config, n_eval, rng::split(config.seed, 31))?;
        let bayes = bayes_risk_oracle(config, mc_draws)?;
        Ok(EvalSet { traj, bayes })
    }
}

/// One trained ensemble scored on the evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed_index: u64,
    pub excess_risk: Estimate,
    pub margins: Vec<f64>,
    pub lambda2_hat: Option<f64>,
    pub param: Option<f64>,
}

/// Trains one ensemble for seed `s` of a cell: chain seed and resampling seed
/// are both split from `config.seed`.
pub fn run_seed(
    config: &ChainConfig,
    scheme: SchemeSpec,
    ctx: &FitContext,
    eval: &EvalSet,
    s: u64,
    mode: CovMode,
) -> Result<SeedOutcome> {
    let chain_seed = match mode {
        CovMode::Joint => rng::split(config.seed, 1000 + s),
        CovMode::ChainConditional => rng::split(config.seed, 1000),
    };
    let traj = generate(&config.with_seed(chain_seed))?;
    let fitted = fit(&traj, scheme, ctx, rng::split(config.seed, 5000 + s), &GapCache::new())?;
    Ok(SeedOutcome {
        seed_index: s,
        excess_risk: excess_risk(&fitted.model, &eval.traj, eval.bayes.value)?,
        margins: learner_margins(&fitted.model, &eval.traj),
        lambda2_hat: fitted.lambda2_hat,
        param: fitted.param,
    })
}

/// Seeds `0..n_seeds` of one cell, sorted by seed.
pub fn run_seeds(
    config: &ChainConfig,
    scheme: SchemeSpec,
    ctx: &FitContext,
    eval: &EvalSet,
    n_seeds: usize,
    mode: CovMode,
) -> Result<Vec<SeedOutcome>> {
    (0..n_seeds as u64).into_par_iter().map(|s| run_seed(config, scheme, ctx, eval, s, mode)).collect()
}

/// Mean pairwise covariance of learner margins across `n_seeds` ensembles.
pub fn pairwise_margin_cov(
    config: &ChainConfig,
    scheme: SchemeSpec,
    ctx: &FitContext,
    eval: &EvalSet,
    n_seeds: usize,
    mode: CovMode,
) -> Result<Estimate> {
    if n_seeds < 2 {
        return Err(Error::Argument(format!("need at least 2 seeds, got {n_seeds}")));
    }
    if n_seeds < 20 {
        log::warn!("pairwise covariance from only {n_seeds} seeds");
    }
    let outs = run_seeds(config, scheme, ctx, eval, n_seeds, mode)?;
    pairwise_cov_from_margins(&outs.iter().map(|o| o.margins.clone()).collect::<Vec<_>>())
}

/// Mean over learner pairs `j != l` of the across-seed sample covariance of
/// `V_j` and `V_l`; `v[s][j]` is learner `j`'s margin under seed `s`.
/// The standard error is a delete-one-seed jackknife.
pub fn pairwise_cov_from_margins(v: &[Vec<f64>]) -> Result<Estimate> {
    let s = v.len();
    if s < 2 {
        return Err(Error::Argument(format!("need at least 2 seeds, got {s}")));
    }
    let m = v[0].len();
    if m < 2 || v.iter().any(|r| r.len() != m) {
        return Err(Error::Argument("need a rectangular table with at least 2 learners".into()));
    }
    let value = mean_pair_cov(v, None);
    if s < 3 {
        return Ok(Estimate::new(value, f64::NAN));
    }
    let loo: Vec<f64> = (0..s).map(|k| mean_pair_cov(v, Some(k))).collect();
    let lm = mean(&loo);
    let jk = ((s - 1) as f64 / s as f64 * loo.iter().map(|x| (x - lm).powi(2)).sum::<f64>()).sqrt();
    Ok(Estimate::new(value, jk))
}

/// Uses `sum_{j != l} Cov(V_j, V_l) = Var(sum_j V_j) - sum_j Var(V_j)`.
fn mean_pair_cov(v: &[Vec<f64>], skip: Option<usize>) -> f64 {
    let rows: Vec<&Vec<f64>> = v.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, r)| r).collect();
    let s = rows.len() as f64;
    let m = rows[0].len();
    let var = |xs: &[f64]| {
        let mu = mean(xs);
        xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (s - 1.0)
    };
    let totals: Vec<f64> = rows.iter().map(|r| r.iter().sum()).collect();
    let per: f64 = (0..m).map(|j| var(&rows.iter().map(|r| r[j]).collect::<Vec<_>>())).sum();
    (var(&totals) - per) / (m * (m - 1)) as f64
}

fn margin_series(traj: &Trajectory, h: &dyn Classifier) -> Vec<f64> {
    (0..traj.n()).map(|t| (traj.y[t] * h.vote(traj.row(t))) as f64).collect()
}

/// `gamma_k` for `k = 0..=k_max` of `M_t = y_t h(x_t)`, uncentered as the
/// lag-product average or centered on the series mean.
pub fn margin_autocov(traj: &Trajectory, h: &dyn Classifier, k_max: usize, centered: bool) -> Result<Vec<f64>> {
    let n = traj.n();
    if 2 * k_max >= n {
        return Err(Error::Argument(format!("k_max = {k_max} must be below n/2 = {}", n / 2)));
    }
    Ok(autocov_of(&margin_series(traj, h), k_max, centered))
}

pub fn autocov_of(m: &[f64], k_max: usize, centered: bool) -> Vec<f64> {
    let n = m.len();
    let mu = if centered { mean(m) } else { 0.0 };
    (0..=k_max)
        .map(|k| (0..n - k).map(|t| (m[t] - mu) * (m[t + k] - mu)).sum::<f64>() / (n - k) as f64)
        .collect()
}

/// `V = gamma_0 + 2 sum_{k=1}^{lag} (1 - k/n) gamma_k` with centered
/// autocovariances.
pub fn variance_functional(traj: &Trajectory, h: &dyn Classifier, truncation_lag: usize) -> Result<f64> {
    let n = traj.n();
    if truncation_lag >= n {
        return Err(Error::Argument(format!("truncation lag {truncation_lag} must be below n = {n}")));
    }
    Ok(variance_functional_of(&margin_series(traj, h), truncation_lag))
}

pub fn variance_functional_of(m: &[f64], lag: usize) -> f64 {
    let n = m.len() as f64;
    let g = autocov_of(m, lag, true);
    g[0] + 2.0 * (1..=lag).map(|k| (1.0 - k as f64 / n) * g[k]).sum::<f64>()
}

/// Least-squares slope of `log risk` on `log t_mix`.
pub fn rate_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::Argument(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(t, r)| !(t > 0.0) || !(r > 0.0)) {
        return Err(Error::Argument("rate points must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Ok(linear_fit(&xs, &ys).1)
}
