//! Small statistical helpers shared by the simulators, metrics and tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Self { value, se }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1) as f64
}

pub fn mean_and_se(xs: &[f64]) -> Estimate {
    let n = xs.len().max(1) as f64;
    Estimate::new(mean(xs), (variance(xs) / n).sqrt())
}

/// Sample autocorrelation at `lag`, normalized by the lag-0 autocovariance.
pub fn autocorrelation(xs: &[f64], lag: usize) -> f64 {
    let n = xs.len();
    assert!(lag < n, "lag {lag} must be below series length {n}");
    let mu = mean(xs);
    let c0: f64 = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
    let ck: f64 = xs[..n - lag]
        .iter()
        .zip(&xs[lag..])
        .map(|(a, b)| (a - mu) * (b - mu))
        .sum::<f64>()
        / n as f64;
    ck / c0
}

/// Statistical inefficiency `1 + 2 * sum_k rho_k`, summing sample
/// autocorrelations up to (excluding) the first non-positive one.
///
/// For an AR(1) series with coefficient `lambda` the population value is
/// `(1 + lambda) / (1 - lambda)`.
pub fn integrated_autocorr_time(xs: &[f64]) -> f64 {
    let n = xs.len();
    let mu = mean(xs);
    let centered: Vec<f64> = xs.iter().map(|x| x - mu).collect();
    let c0: f64 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let ck: f64 = centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64;
        let rho = ck / c0;
        if rho <= 0.0 {
            break;
        }
        tau += 2.0 * rho;
    }
    tau
}

/// Ordinary least-squares fit `y = intercept + slope * x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

/// Sign with the convention `sign(0) = +1`.
#[inline]
pub fn sign(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// Upper tail probability of the chi-square distribution.
pub fn chi_square_sf(stat: f64, dof: f64) -> f64 {
    if stat <= 0.0 || dof <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(dof).expect("positive degrees of freedom");
    dist.sf(stat)
}

/// Pearson chi-square goodness of fit of `counts` against equal expected
/// frequencies. Returns the p-value.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    let expected = total as f64 / k;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    chi_square_sf(stat, k - 1.0)
}

/// Two-sample chi-square homogeneity test on two frequency tables over the
/// same bins. Bins empty in both samples are dropped. Returns the p-value.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let na: f64 = a.iter().sum::<u64>() as f64;
    let nb: f64 = b.iter().sum::<u64>() as f64;
    let total = na + nb;
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&ca, &cb) in a.iter().zip(b) {
        let col = (ca + cb) as f64;
        if col == 0.0 {
            continue;
        }
        bins += 1;
        let ea = col * na / total;
        let eb = col * nb / total;
        stat += (ca as f64 - ea).powi(2) / ea + (cb as f64 - eb).powi(2) / eb;
    }
    chi_square_sf(stat, bins.saturating_sub(1) as f64)
}
