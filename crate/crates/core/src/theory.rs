//! Small exact computations: AR(1) trajectory KL divergence (closed form and
//! dense oracle), two-point testing arithmetic and the packing budget.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two AR(1) trajectory laws that differ in their per-step mean by `delta_mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlSpec {
    pub n: usize,
    pub lambda: f64,
    pub d0: usize,
    pub delta_mu: Vec<f64>,
}

impl KlSpec {
    pub fn new(n: usize, lambda: f64, delta_mu: Vec<f64>) -> Self {
        KlSpec { n, lambda, d0: delta_mu.len(), delta_mu }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda < 1.0) {
            return Err(Error::Domain(format!("lambda = {} must be < 1", self.lambda)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if self.n < 1 {
            return Err(Error::Argument("trajectory length must be >= 1".into()));
        }
        if self.d0 != self.delta_mu.len() {
            return Err(Error::Argument(format!("d0 = {} but delta_mu has {} entries", self.d0, self.delta_mu.len())));
        }
        Ok(())
    }

    fn sq_norm(&self) -> f64 {
        self.delta_mu.iter().map(|x| x * x).sum()
    }
}

/// Unbounded constants of the bounds; all default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        BoundConstants { c0: 1.0, c1: 1.0, c2: 1.0, c3: 1.0 }
    }
}

/// `1^T Sigma_T^{-1} 1 = [n(1 - lambda) + 2 lambda] / (1 + lambda)`.
pub fn q_closed(n: usize, lambda: f64) -> f64 {
    (n as f64 * (1.0 - lambda) + 2.0 * lambda) / (1.0 + lambda)
}

/// `s^T Sigma_T^{-1} s` in O(n) through the tridiagonal precision, written as
/// `s_1^2 + sum_t (s_{t+1} - lambda s_t)^2 / (1 - lambda^2)`.
pub fn precision_quadratic(s: &[f64], lambda: f64) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let inn: f64 = s.windows(2).map(|w| (w[1] - lambda * w[0]).powi(2)).sum();
    s[0] * s[0] + inn / (1.0 - lambda * lambda)
}

pub fn kl_trajectory_closed(spec: &KlSpec) -> Result<f64> {
    spec.validate()?;
    Ok(0.5 * spec.sq_norm() * q_closed(spec.n, spec.lambda))
}

pub const DENSE_CAP: usize = 512;

fn dense_precision(n: usize, lambda: f64) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_fn(n, n, |i, j| lambda.powi((i as i32 - j as i32).abs()));
    sigma
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Domain("trajectory covariance is not positive definite".into()))
}

fn dense_kl(spec: &KlSpec, shift: impl Fn(usize) -> f64) -> Result<f64> {
    spec.validate()?;
    if spec.n * spec.d0 > DENSE_CAP {
        return Err(Error::Argument(format!("n * d0 = {} exceeds the dense cap {DENSE_CAP}", spec.n * spec.d0)));
    }
    let (n, d0) = (spec.n, spec.d0);
    // Stacked time-major vector with precision Sigma_T^{-1} (x) I.
    let p = dense_precision(n, spec.lambda)?;
    let full = p.kronecker(&DMatrix::<f64>::identity(d0, d0));
    let dm = nalgebra::DVector::from_fn(n * d0, |k, _| spec.delta_mu[k % d0] + shift(k / d0 + 1));
    Ok(0.5 * (dm.transpose() * full * &dm)[0])
}

pub fn kl_trajectory_dense(spec: &KlSpec) -> Result<f64> {
    dense_kl(spec, |_| 0.0)
}

/// Dense KL when one law also carries the drift `(nu/n) t 1`, `t = 1..n`.
pub fn kl_trajectory_drift_dense(spec: &KlSpec, nu: f64) -> Result<f64> {
    let n = spec.n as f64;
    dense_kl(spec, |t| nu / n * t as f64)
}

/// Same quantity via the O(n) tridiagonal form, one coordinate at a time.
pub fn kl_trajectory_drift(spec: &KlSpec, nu: f64) -> Result<f64> {
    spec.validate()?;
    let n = spec.n as f64;
    Ok(spec
        .delta_mu
        .iter()
        .map(|&d| {
            let s: Vec<f64> = (1..=spec.n).map(|t| d + nu / n * t as f64).collect();
            0.5 * precision_quadratic(&s, spec.lambda)
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeCam {
    pub delta: f64,
    pub kl: f64,
    pub risk_floor: f64,
}

/// `Delta = c0 t_mix / sqrt(n)`, `KL = Delta^2 / (2 var_rho)` and the
/// two-point floor `(1 - sqrt(KL/2)) / 2` clipped to `[0, 1/2]`.
pub fn lecam_separation(n: usize, t_mix: f64, var_rho: f64, c: &BoundConstants) -> LeCam {
    let delta = c.c0 * t_mix / (n as f64).sqrt();
    let kl = if var_rho > 0.0 { delta * delta / (2.0 * var_rho) } else { f64::INFINITY };
    let risk_floor = (0.5 * (1.0 - (kl / 2.0).sqrt())).clamp(0.0, 0.5);
    LeCam { delta, kl, risk_floor }
}

/// `c1 delta (1 - (c2 (n / t_mix) delta^2 + ln 2) / (d0 / 8))`.
pub fn fano_budget(n: usize, t_mix: f64, d0: usize, delta: f64, c: &BoundConstants) -> f64 {
    let budget = d0 as f64 / 8.0;
    c.c1 * delta * (1.0 - (c.c2 * (n as f64 / t_mix) * delta * delta + std::f64::consts::LN_2) / budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanoMax {
    pub delta_star: f64,
    pub value: f64,
    /// `delta_star / sqrt(t_mix / n)`.
    pub c3: f64,
}

/// Grid maximizer of [`fano_budget`] over `delta` in `(0, delta_hi]`, where
/// `delta_hi` is the positive root of the bound. `None` when the packing
/// budget `d0/8` does not exceed `ln 2`.
pub fn fano_maximizer(n: usize, t_mix: f64, d0: usize, c: &BoundConstants, grid: usize) -> Option<FanoMax> {
    let budget = d0 as f64 / 8.0;
    if budget <= std::f64::consts::LN_2 || grid == 0 {
        return None;
    }
    let a = c.c2 * n as f64 / t_mix;
    let hi = ((budget - std::f64::consts::LN_2) / a).sqrt();
    let (delta_star, value) = (1..=grid)
        .map(|k| {
            let d = hi * k as f64 / grid as f64;
            (d, fano_budget(n, t_mix, d0, d, c))
        })
        .max_by(|x, y| x.1.total_cmp(&y.1))?;
    Some(FanoMax { delta_star, value, c3: delta_star / (t_mix / n as f64).sqrt() })
}

/// CSV `n,t_mix,lambda,value` of the closed-form KL (unit `delta_mu` norm)
/// over a grid, with `lambda = 1 - 1/t_mix`.
pub fn write_kl_grid<W: Write>(mut w: W, ns: &[usize], t_mixes: &[f64]) -> Result<()> {
    writeln!(w, "n,t_mix,lambda,value")?;
    for &n in ns {
        for &t in t_mixes {
            let lambda = 1.0 - 1.0 / t;
            let kl = kl_trajectory_closed(&KlSpec::new(n, lambda, vec![1.0]))?;
            writeln!(w, "{n},{t},{lambda},{kl:?}")?;
        }
    }
    Ok(())
}
