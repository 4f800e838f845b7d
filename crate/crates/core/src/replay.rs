//! Linear value evaluation from a shared replay buffer. An exploratory
//! random walk on the unit torus fills the buffer; `m` ridge LFA solvers
//! fit frozen-target Bellman regressions on resampled index sets.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain_sim::{read_u32, read_u64};
use crate::depgraph::DependencyGraph;
use crate::error::{Error, Result};
use crate::knn::knn_all;
use crate::pipeline::MethodSpec;
use crate::resampling::{draw_spectral_routed, draw_uniform, RoutedSize};
use crate::rng::{self, tag};
use crate::spectral::{estimate_gap, landmark_budget, p_hat_for, route_with_count, FiedlerOptions, RouteOptions};
use crate::stats::{integrated_autocorr_time, mean, variance};

const MAGIC: &[u8; 8] = b"SRRPLY1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub n_buffer: usize,
    pub t_mix: u32,
    pub state_dim: usize,
    pub n_freq: usize,
    pub n_actions: usize,
    pub gamma_discount: f64,
    pub m: usize,
    /// Frozen `w_old`, length `feat_dim()`.
    pub target_weights: Vec<f64>,
    /// Mean reward `phi^T reward_weights`, shared by every buffer of the config.
    pub reward_weights: Vec<f64>,
    pub reward_noise: f64,
    /// Routing constant and gap method for the spectral scheme.
    pub route_c: f64,
    pub method: MethodSpec,
    pub knn_k: usize,
    pub seed: u64,
}

impl ReplayConfig {
    /// Two-dimensional torus, two harmonics, two actions, `gamma = 0.9`,
    /// target weights drawn from the seed.
    pub fn new(n_buffer: usize, t_mix: u32, m: usize, seed: u64) -> Self {
        let mut cfg = ReplayConfig {
            n_buffer,
            t_mix,
            state_dim: 2,
            n_freq: 2,
            n_actions: 2,
            gamma_discount: 0.9,
            m,
            target_weights: Vec::new(),
            reward_weights: Vec::new(),
            reward_noise: 0.1,
            route_c: 1.0,
            method: MethodSpec::NystromBudget,
            knn_k: 10,
            seed,
        };
        let mut r = rng::substream(seed, tag::REPLAY, 0);
        cfg.target_weights = (0..cfg.feat_dim()).map(|_| 0.5 * r.sample::<f64, _>(StandardNormal)).collect();
        let mut rw = rng::substream(seed, tag::REPLAY, 2);
        cfg.reward_weights = (0..cfg.feat_dim()).map(|_| rw.sample::<f64, _>(StandardNormal)).collect();
        cfg
    }

    pub fn block_dim(&self) -> usize {
        1 + 2 * self.n_freq * self.state_dim
    }

    pub fn feat_dim(&self) -> usize {
        self.n_actions * self.block_dim()
    }

    /// `||phi(s, a)||` for every state and action.
    pub fn feature_bound(&self) -> f64 {
        ((1 + self.n_freq * self.state_dim) as f64).sqrt()
    }

    /// Per-coordinate step variance whose first harmonic has lag-1
    /// autocorrelation `1 - 1/t_mix`; `None` means fresh uniform states.
    pub fn step_variance(&self) -> Option<f64> {
        (self.t_mix > 1).then(|| -(1.0 - 1.0 / self.t_mix as f64).ln() / (2.0 * PI * PI))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t_mix < 1 {
            return bad("t_mix must be >= 1".into());
        }
        if self.n_buffer < 2 || self.m < 1 || self.state_dim < 1 || self.n_freq < 1 || self.n_actions < 1 {
            return bad("buffer, ensemble, state, frequency and action sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gamma_discount) {
            return bad(format!("discount {} must lie in [0, 1)", self.gamma_discount));
        }
        if self.target_weights.len() != self.feat_dim() {
            return bad(format!("target weights have {} entries, features {}", self.target_weights.len(), self.feat_dim()));
        }
        if self.reward_weights.len() != self.feat_dim() {
            return bad(format!("reward weights have {} entries, features {}", self.reward_weights.len(), self.feat_dim()));
        }
        if !(self.route_c > 0.0) {
            return bad("routing constant must be > 0".into());
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ReplayConfig { seed, ..self.clone() }
    }

    pub fn features(&self, s: &[f64], a: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let b = &mut out[a * self.block_dim()..(a + 1) * self.block_dim()];
        b[0] = 1.0;
        let mut k = 1;
        for &si in s {
            for f in 1..=self.n_freq {
                let ang = 2.0 * PI * f as f64 * si;
                b[k] = ang.cos();
                b[k + 1] = ang.sin();
                k += 2;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub transitions: Vec<Transition>,
    pub config: ReplayConfig,
    /// Row-major `n x feat_dim` features of `(state, action)`.
    pub phi: Vec<f64>,
    pub feature_bound: f64,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn phi_row(&self, i: usize) -> &[f64] {
        let p = self.config.feat_dim();
        &self.phi[i * p..(i + 1) * p]
    }

    pub fn chains_correctly(&self) -> bool {
        self.transitions.windows(2).all(|w| w[0].next_state == w[1].state)
    }

    /// First-harmonic embedding of the states, the space the routing graph lives in.
    pub fn state_embedding(&self, upto: usize) -> Vec<f64> {
        self.transitions[..upto]
            .iter()
            .flat_map(|t| t.state.iter().flat_map(|&s| [(2.0 * PI * s).cos(), (2.0 * PI * s).sin()]))
            .collect()
    }

    /// Field-wise binary dump: config as key-value JSON, then per transition
    /// the state, action, reward and next state.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.config).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for t in &self.transitions {
            for v in t.state.iter().chain([t.reward].iter()).chain(&t.next_state) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[t.action as u8])?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a replay buffer file".into()));
        }
        let hl = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; hl];
        r.read_exact(&mut header)?;
        let config: ReplayConfig = serde_json::from_slice(&header).map_err(|e| Error::Parse(e.to_string()))?;
        let n = read_u64(&mut r)? as usize;
        let d = config.state_dim;
        let mut transitions = Vec::with_capacity(n);
        for _ in 0..n {
            let mut vals = Vec::with_capacity(2 * d + 1);
            for _ in 0..2 * d + 1 {
                vals.push(f64::from_bits(read_u64(&mut r)?));
            }
            let mut a = [0u8; 1];
            r.read_exact(&mut a)?;
            transitions.push(Transition {
                state: vals[..d].to_vec(),
                reward: vals[d],
                next_state: vals[d + 1..].to_vec(),
                action: a[0] as usize,
            });
        }
        finish(config, transitions)
    }
}

fn finish(config: ReplayConfig, transitions: Vec<Transition>) -> Result<ReplayBuffer> {
    let p = config.feat_dim();
    let n = transitions.len();
    let mut phi = vec![0.0; n * p];
    for (i, t) in transitions.iter().enumerate() {
        config.features(&t.state, t.action, &mut phi[i * p..(i + 1) * p]);
    }
    let mut sigma = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let row = DVector::from_column_slice(&phi[i * p..(i + 1) * p]);
        sigma += &row * row.transpose();
    }
    sigma /= n as f64;
    let eig = SymmetricEigen::new(sigma);
    let min_eig = eig.eigenvalues.min();
    let max_eig = eig.eigenvalues.max();
    if !(min_eig >= 1e-3 * max_eig) {
        return Err(Error::Data(format!(
            "feature second moment is ill-conditioned: min eigenvalue {min_eig:.3e} vs max {max_eig:.3e}"
        )));
    }
    let feature_bound = config.feature_bound();
    Ok(ReplayBuffer { transitions, config, phi, feature_bound, min_eig, max_eig })
}

/// Runs the exploratory walk for `n_buffer` steps from a uniform start.
pub fn fill_buffer(cfg: &ReplayConfig) -> Result<ReplayBuffer> {
    cfg.validate()?;
    let mut r = rng::substream(cfg.seed, tag::REPLAY, 1);
    let w_r = &cfg.reward_weights;
    let sd = cfg.step_variance().map(f64::sqrt);
    let d = cfg.state_dim;
    let mut s: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
    let mut feat = vec![0.0; cfg.feat_dim()];
    let mut transitions = Vec::with_capacity(cfg.n_buffer);
    for _ in 0..cfg.n_buffer {
        let a = r.random_range(0..cfg.n_actions);
        cfg.features(&s, a, &mut feat);
        let reward = feat.iter().zip(w_r).map(|(f, w)| f * w).sum::<f64>()
            + cfg.reward_noise * r.sample::<f64, _>(StandardNormal);
        let next: Vec<f64> = match sd {
            None => (0..d).map(|_| r.random::<f64>()).collect(),
            Some(sd) => s.iter().map(|&x| (x + sd * r.sample::<f64, _>(StandardNormal)).rem_euclid(1.0)).collect(),
        };
        transitions.push(Transition { state: s, action: a, reward, next_state: next.clone() });
        s = next;
    }
    finish(cfg.clone(), transitions)
}

/// Integrated autocorrelation time of the first state coordinate's first harmonic.
pub fn state_iat(buf: &ReplayBuffer) -> f64 {
    let xs: Vec<f64> = buf.transitions.iter().map(|t| (2.0 * PI * t.state[0]).cos()).collect();
    integrated_autocorr_time(&xs)
}

/// `y_i = r_i + gamma max_a' phi(s_{i+1}, a')^T w_old`.
pub fn compute_targets(buf: &ReplayBuffer, w_old: &[f64], gamma_discount: f64) -> Vec<f64> {
    let cfg = &buf.config;
    let mut feat = vec![0.0; cfg.feat_dim()];
    buf.transitions
        .iter()
        .map(|t| {
            let best = (0..cfg.n_actions)
                .map(|a| {
                    cfg.features(&t.next_state, a, &mut feat);
                    feat.iter().zip(w_old).map(|(f, w)| f * w).sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            t.reward + gamma_discount * best
        })
        .collect()
}

/// `w = (Sigma_S + eps I)^{-1} Phi_S^T Y_S / |S|` with
/// `Sigma_S = Phi_S^T Phi_S / |S|` and `eps = 1e-6 tr(Sigma_S) / p`.
pub fn lfa_solve(buf: &ReplayBuffer, indices: &[usize], targets: &[f64]) -> Result<Vec<f64>> {
    let p = buf.config.feat_dim();
    if indices.len() < p {
        return Err(Error::Argument(format!("{} indices cannot determine {p} weights", indices.len())));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= buf.len() || i >= targets.len()) {
        return Err(Error::Argument(format!("index {bad} out of range")));
    }
    let k = indices.len() as f64;
    let mut sigma = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for &i in indices {
        let y = targets[i];
        if y.is_nan() {
            return Err(Error::Data(format!("target {i} is NaN")));
        }
        let row = buf.phi_row(i);
        for a in 0..p {
            if row[a] == 0.0 {
                continue;
            }
            rhs[a] += row[a] * y;
            for b in 0..p {
                sigma[(a, b)] += row[a] * row[b];
            }
        }
    }
    sigma /= k;
    rhs /= k;
    let eps = 1e-6 * sigma.trace() / p as f64;
    for a in 0..p {
        sigma[(a, a)] += eps;
    }
    let chol = sigma.cholesky().ok_or_else(|| Error::Data("regularized feature matrix is not positive definite".into()))?;
    Ok(chol.solve(&rhs).as_slice().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplayScheme {
    Uniform,
    SpectralRoute,
}

impl std::fmt::Display for ReplayScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReplayScheme::Uniform => "uniform",
            ReplayScheme::SpectralRoute => "spectral",
        })
    }
}

impl std::str::FromStr for ReplayScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ReplayScheme::Uniform),
            "spectral" => Ok(ReplayScheme::SpectralRoute),
            _ => Err(Error::Parse(format!("unknown replay scheme {s:?}"))),
        }
    }
}

pub const ROUNDS: usize = 4;

/// Per-learner index multisets built over four insertion rounds: after each
/// quarter of the buffer arrives the routing plan is re-sketched on the
/// filled prefix and every learner adds `n/(4m)` draws.
pub fn draw_replay_sets(buf: &ReplayBuffer, scheme: ReplayScheme, seed: u64) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let cfg = &buf.config;
    let n = buf.len();
    let m = cfg.m;
    let per_round = (n / (ROUNDS * m)).max(1);
    let mut sets = vec![Vec::new(); m];
    let mut p_hats = Vec::new();
    for round in 1..=ROUNDS {
        let upto = n * round / ROUNDS;
        let rs = rng::split(seed, round as u64);
        let drawn = match scheme {
            ReplayScheme::Uniform => draw_uniform(upto, m, per_round, rs)?,
            ReplayScheme::SpectralRoute => {
                let plan = sketch_plan(buf, upto, rs)?;
                p_hats.push(plan.p_hat);
                draw_spectral_routed(&plan, m, per_round, RoutedSize::Subsample, rs)?
            }
        };
        for (s, d) in sets.iter_mut().zip(drawn.per_learner) {
            s.extend(d);
        }
    }
    Ok((sets, p_hats))
}

fn sketch_plan(buf: &ReplayBuffer, upto: usize, seed: u64) -> Result<crate::spectral::SpectralPlan> {
    let cfg = &buf.config;
    let emb = buf.state_embedding(upto);
    let dim = 2 * cfg.state_dim;
    let k = cfg.knn_k.min(upto - 1);
    let pairs = knn_all(&emb, dim, k).into_iter().enumerate().flat_map(|(i, nb)| nb.into_iter().map(move |j| (i, j)));
    let gap_graph = DependencyGraph::from_edges(upto, pairs.collect::<Vec<_>>())?;
    let method = match cfg.method {
        MethodSpec::NystromBudget => crate::spectral::Method::Nystrom { l: landmark_budget(cfg.t_mix as f64, upto) },
        other => other.resolve(upto, cfg.t_mix),
    };
    let (lambda2, fiedler) = estimate_gap(&gap_graph, method, &FiedlerOptions::default(), rng::split(seed, 7))?;
    if !(lambda2 > 0.0 && lambda2 <= 2.0 + 1e-9) {
        return Err(Error::Routing(format!("estimated buffer gap {lambda2} lies outside (0, 2]")));
    }
    let p = p_hat_for(cfg.route_c, lambda2, cfg.m);
    let mut opts = RouteOptions::new(cfg.m, cfg.route_c, method);
    opts.seed = rng::split(seed, 8);
    let mut plan = route_with_count(&DependencyGraph::path(upto), p, &opts)?;
    plan.lambda2_hat = lambda2;
    plan.fiedler = fiedler;
    Ok(plan)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplaySeedRow {
    pub seed_index: u64,
    pub wbar: Vec<f64>,
    /// Mean within-batch variance of the Bellman targets.
    pub target_var: f64,
    pub p_hats: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayStats {
    pub scheme: ReplayScheme,
    pub t_mix: u32,
    /// Trace of the across-seed covariance of `w_bar`.
    pub var_wbar: f64,
    pub var_wbar_se: f64,
    pub target_var: f64,
    pub target_var_se: f64,
    pub rows: Vec<ReplaySeedRow>,
}

impl ReplayStats {
    pub const CSV_HEADER: &'static str = "scheme,t_mix,seed,var_wbar,target_var";

    /// Per-seed rows carry the seed's squared deviation of `w_bar` from the
    /// across-seed mean (scaled so their average is `var_wbar`); the final
    /// row, seed `all`, carries the aggregates.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> Result<()> {
        if header {
            writeln!(w, "{}", Self::CSV_HEADER)?;
        }
        let s = self.rows.len() as f64;
        let centre = wbar_mean(&self.rows);
        for r in &self.rows {
            let dev: f64 = r.wbar.iter().zip(&centre).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * s / (s - 1.0);
            writeln!(w, "{},{},{},{dev:.6e},{:.6e}", self.scheme, self.t_mix, r.seed_index, r.target_var)?;
        }
        writeln!(w, "{},{},all,{:.6e},{:.6e}", self.scheme, self.t_mix, self.var_wbar, self.target_var)?;
        Ok(())
    }
}

fn wbar_mean(rows: &[ReplaySeedRow]) -> Vec<f64> {
    let p = rows[0].wbar.len();
    (0..p).map(|k| mean(&rows.iter().map(|r| r.wbar[k]).collect::<Vec<_>>())).collect()
}

fn trace_var(rows: &[&ReplaySeedRow]) -> f64 {
    let p = rows[0].wbar.len();
    (0..p).map(|k| variance(&rows.iter().map(|r| r.wbar[k]).collect::<Vec<_>>())).sum()
}

pub fn replay_seed(cfg: &ReplayConfig, scheme: ReplayScheme, s: u64) -> Result<ReplaySeedRow> {
    let buf = fill_buffer(&cfg.with_seed(rng::split(cfg.seed, 100 + s)))?;
    let targets = compute_targets(&buf, &cfg.target_weights, cfg.gamma_discount);
    let (sets, p_hats) = draw_replay_sets(&buf, scheme, rng::split(cfg.seed, 200 + s))?;
    let p = cfg.feat_dim();
    let mut wbar = vec![0.0; p];
    let mut tv = 0.0;
    for set in &sets {
        let w = lfa_solve(&buf, set, &targets)?;
        wbar.iter_mut().zip(&w).for_each(|(a, b)| *a += b / cfg.m as f64);
        tv += variance(&set.iter().map(|&i| targets[i]).collect::<Vec<_>>()) / cfg.m as f64;
    }
    Ok(ReplaySeedRow { seed_index: s, wbar, target_var: tv, p_hats })
}

/// Across `n_seeds` buffers: trace variance of `w_bar` (jackknife se) and
/// the mean within-batch target variance.
pub fn ensemble_weight_variance(cfg: &ReplayConfig, scheme: ReplayScheme, n_seeds: usize) -> Result<ReplayStats> {
    if n_seeds < 3 {
        return Err(Error::Argument(format!("need at least 3 seeds, got {n_seeds}")));
    }
    if n_seeds < 20 {
        log::warn!("replay variance from only {n_seeds} seeds");
    }
    let rows: Vec<ReplaySeedRow> =
        (0..n_seeds as u64).into_par_iter().map(|s| replay_seed(cfg, scheme, s)).collect::<Result<_>>()?;
    ReplayStats::from_rows(scheme, cfg.t_mix, rows)
}

impl ReplayStats {
    pub fn from_rows(scheme: ReplayScheme, t_mix: u32, rows: Vec<ReplaySeedRow>) -> Result<Self> {
        if rows.len() < 3 {
            return Err(Error::Argument(format!("need at least 3 seeds, got {}", rows.len())));
        }
        let all: Vec<&ReplaySeedRow> = rows.iter().collect();
        let var_wbar = trace_var(&all);
        let loo: Vec<f64> = (0..rows.len())
            .map(|k| trace_var(&all.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, r)| *r).collect::<Vec<_>>()))
            .collect();
        let s = rows.len() as f64;
        let lm = mean(&loo);
        let var_wbar_se = ((s - 1.0) / s * loo.iter().map(|x| (x - lm).powi(2)).sum::<f64>()).sqrt();
        let tvs: Vec<f64> = rows.iter().map(|r| r.target_var).collect();
        Ok(ReplayStats {
            scheme,
            t_mix,
            var_wbar,
            var_wbar_se,
            target_var: mean(&tvs),
            target_var_se: (variance(&tvs) / s).sqrt(),
            rows,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayComparison {
    pub uniform: ReplayStats,
    pub spectral: ReplayStats,
    /// `1 - target_var(spectral) / target_var(uniform)`.
    pub target_var_drop: f64,
}

pub fn compare_schemes(cfg: &ReplayConfig, n_seeds: usize) -> Result<ReplayComparison> {
    let uniform = ensemble_weight_variance(cfg, ReplayScheme::Uniform, n_seeds)?;
    let spectral = ensemble_weight_variance(cfg, ReplayScheme::SpectralRoute, n_seeds)?;
    let target_var_drop = 1.0 - spectral.target_var / uniform.target_var;
    Ok(ReplayComparison { uniform, spectral, target_var_drop })
}

/// `c = mean over seeds of t_mix * lambda2_hat` on full buffers of `cfg`.
pub fn calibrate_route_c(cfg: &ReplayConfig, n_seeds: usize) -> Result<f64> {
    let vals = (0..n_seeds as u64)
        .map(|s| {
            let buf = fill_buffer(&cfg.with_seed(rng::split(cfg.seed, 900 + s)))?;
            let plan = sketch_plan(&buf, buf.len(), rng::split(cfg.seed, 950 + s))?;
            Ok(cfg.t_mix as f64 * plan.lambda2_hat)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_is_bounded_and_chained() {
        let cfg = ReplayConfig::new(2000, 10, 5, 1);
        let buf = fill_buffer(&cfg).unwrap();
        assert!(buf.chains_correctly());
        let b = buf.feature_bound;
        for i in 0..buf.len() {
            let nr: f64 = buf.phi_row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(nr <= b + 1e-12);
        }
        assert!(buf.min_eig >= 1e-3 * buf.max_eig);
    }

    #[test]
    fn targets_degenerate_cases() {
        let cfg = ReplayConfig::new(500, 5, 5, 2);
        let buf = fill_buffer(&cfg).unwrap();
        let r: Vec<f64> = buf.transitions.iter().map(|t| t.reward).collect();
        assert_eq!(compute_targets(&buf, &vec![0.0; cfg.feat_dim()], 0.9), r);
        assert_eq!(compute_targets(&buf, &cfg.target_weights, 0.0), r);
    }

    #[test]
    fn zero_targets_give_zero_weights() {
        let cfg = ReplayConfig::new(500, 5, 5, 3);
        let buf = fill_buffer(&cfg).unwrap();
        let idx: Vec<usize> = (0..200).collect();
        let w = lfa_solve(&buf, &idx, &vec![0.0; 500]).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
        assert!(lfa_solve(&buf, &idx[..5], &vec![0.0; 500]).is_err());
        let mut t = vec![0.0; 500];
        t[3] = f64::NAN;
        assert!(matches!(lfa_solve(&buf, &idx, &t), Err(Error::Data(_))));
    }

    #[test]
    fn binary_round_trip() {
        let cfg = ReplayConfig::new(300, 3, 5, 4);
        let buf = fill_buffer(&cfg).unwrap();
        let mut bytes = Vec::new();
        buf.write_binary(&mut bytes).unwrap();
        let back = ReplayBuffer::read_binary(&bytes[..]).unwrap();
        assert_eq!(back.transitions, buf.transitions);
        assert_eq!(back.config, buf.config);
    }
}
