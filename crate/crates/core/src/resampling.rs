//! Per-learner training index multisets for every resampling scheme.
//!
//! Learner `j` always draws from its own stream `substream(seed, RESAMPLE, j)`,
//! so sets are reproducible and do not depend on how many learners or
//! threads there are.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};
use crate::spectral::SpectralPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SchemeKind {
    Uniform,
    LagThin { stride: usize },
    TmixThin { stride: usize },
    StationaryBoot { mean_block: f64 },
    CircularBB { block_len: usize },
    OracleBB { block_len: usize },
    SpectralRoute { plan: Box<SpectralPlan>, size: RoutedSize },
}

/// Bootstrap size of a routed learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RoutedSize {
    /// The common subsample size `n/m`; `P = 1` then coincides with uniform bagging.
    #[default]
    Subsample,
    /// The size of the learner's own partition.
    Partition,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Uniform => "uniform",
            SchemeKind::LagThin { .. } => "lag_thin",
            SchemeKind::TmixThin { .. } => "tmix_thin",
            SchemeKind::StationaryBoot { .. } => "stationary_boot",
            SchemeKind::CircularBB { .. } => "circular_bb",
            SchemeKind::OracleBB { .. } => "oracle_bb",
            SchemeKind::SpectralRoute { .. } => "spectral",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplingScheme {
    pub kind: SchemeKind,
    pub subsample_size: usize,
    pub seed: u64,
}

impl ResamplingScheme {
    pub fn new(kind: SchemeKind, subsample_size: usize, seed: u64) -> Self {
        ResamplingScheme { kind, subsample_size, seed }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.subsample_size < 1 || self.subsample_size > n {
            return Err(Error::Argument(format!(
                "subsample size {} must lie in [1, {n}]",
                self.subsample_size
            )));
        }
        match &self.kind {
            SchemeKind::LagThin { stride } | SchemeKind::TmixThin { stride } if *stride < 1 => {
                Err(Error::Argument("stride must be >= 1".into()))
            }
            SchemeKind::StationaryBoot { mean_block } if !(*mean_block >= 1.0) => {
                Err(Error::Argument("mean block length must be >= 1".into()))
            }
            SchemeKind::CircularBB { block_len } | SchemeKind::OracleBB { block_len }
                if *block_len < 1 || *block_len > n =>
            {
                Err(Error::Argument(format!("block length must lie in [1, {n}]")))
            }
            SchemeKind::SpectralRoute { plan, .. } if plan.n() != n => {
                Err(Error::Argument("routing plan covers a different sample count".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSet {
    /// One sorted multiset per learner.
    pub per_learner: Vec<Vec<usize>>,
    pub scheme: ResamplingScheme,
    /// Set when the scheme collapsed to a single-point pool.
    pub degenerate: bool,
}

impl SubsampleSet {
    fn new(mut per_learner: Vec<Vec<usize>>, scheme: ResamplingScheme) -> Self {
        per_learner.iter_mut().for_each(|s| s.sort_unstable());
        SubsampleSet { per_learner, scheme, degenerate: false }
    }

    pub fn m(&self) -> usize {
        self.per_learner.len()
    }

    /// How often each index in `[0, n)` was drawn over all learners.
    pub fn index_counts(&self, n: usize) -> Vec<u64> {
        let mut c = vec![0u64; n];
        for s in &self.per_learner {
            for &i in s {
                c[i] += 1;
            }
        }
        c
    }

    /// CSV `learner_id,index,multiplicity`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "learner_id,index,multiplicity")?;
        for (j, s) in self.per_learner.iter().enumerate() {
            let mut k = 0;
            while k < s.len() {
                let mut e = k;
                while e < s.len() && s[e] == s[k] {
                    e += 1;
                }
                writeln!(w, "{j},{},{}", s[k], e - k)?;
                k = e;
            }
        }
        Ok(())
    }
}

fn learner_rng(seed: u64, j: usize) -> Rng {
    rng::substream(seed, tag::RESAMPLE, j as u64)
}

fn per_learner(m: usize, seed: u64, f: impl Fn(&mut Rng) -> Vec<usize>) -> Vec<Vec<usize>> {
    (0..m).map(|j| f(&mut learner_rng(seed, j))).collect()
}

fn check_common(n: usize, m: usize, size: usize) -> Result<()> {
    if n == 0 || m == 0 || size == 0 {
        return Err(Error::Argument(format!("need n, m, size >= 1 (got {n}, {m}, {size})")));
    }
    Ok(())
}

/// `size` i.i.d. uniform indices per learner.
pub fn draw_uniform(n: usize, m: usize, size: usize, seed: u64) -> Result<SubsampleSet> {
    check_common(n, m, size)?;
    let sets = per_learner(m, seed, |r| (0..size).map(|_| r.random_range(0..n)).collect());
    Ok(SubsampleSet::new(sets, ResamplingScheme::new(SchemeKind::Uniform, size.min(n), seed)))
}

/// Emit `len` circular indices starting at `start`, stopping at `size`.
fn emit_block(out: &mut Vec<usize>, start: usize, len: usize, n: usize, size: usize) {
    for k in 0..len {
        if out.len() == size {
            return;
        }
        out.push((start + k) % n);
    }
}

/// Geometric block lengths with mean `mean_block`, uniform circular starts.
pub fn draw_stationary_bootstrap(n: usize, m: usize, size: usize, mean_block: f64, seed: u64) -> Result<SubsampleSet> {
    check_common(n, m, size)?;
    if !(mean_block >= 1.0) {
        return Err(Error::Argument("mean block length must be >= 1".into()));
    }
    let p = 1.0 / mean_block;
    let sets = per_learner(m, seed, |r| {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let start = r.random_range(0..n);
            // Geometric on {1, 2, ...}: continue each step with probability 1 - p.
            let mut len = 1;
            while len < size && r.random::<f64>() >= p {
                len += 1;
            }
            emit_block(&mut out, start, len, n, size);
        }
        out
    });
    Ok(SubsampleSet::new(
        sets,
        ResamplingScheme::new(SchemeKind::StationaryBoot { mean_block }, size.min(n), seed),
    ))
}

/// Fixed-length circular blocks with uniform starts, last block truncated.
pub fn draw_circular_block(n: usize, m: usize, size: usize, block_len: usize, seed: u64) -> Result<SubsampleSet> {
    check_common(n, m, size)?;
    if block_len < 1 {
        return Err(Error::Argument("block length must be >= 1".into()));
    }
    let sets = per_learner(m, seed, |r| {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            emit_block(&mut out, r.random_range(0..n), block_len, n, size);
        }
        out
    });
    Ok(SubsampleSet::new(
        sets,
        ResamplingScheme::new(SchemeKind::CircularBB { block_len }, size.min(n), seed),
    ))
}

/// Whole non-overlapping blocks of length `block_len` (the last one may be
/// shorter), `round((n/m) / block_len)` of them per learner. With
/// `disjoint`, blocks are dealt from a shared shuffled deck so learners
/// overlap only once the deck runs out.
pub fn draw_block_bagging(n: usize, m: usize, block_len: usize, seed: u64, disjoint: bool) -> Result<SubsampleSet> {
    check_common(n, m, 1)?;
    if block_len < 1 || block_len > n {
        return Err(Error::Argument(format!("block length must lie in [1, {n}]")));
    }
    let n_blocks = n.div_ceil(block_len);
    let target = (n as f64 / m as f64).round().max(1.0);
    let per = ((target / block_len as f64).round() as usize).max(1);
    let block = |b: usize| (b * block_len)..((b + 1) * block_len).min(n);
    let sets = if disjoint {
        let mut deck_rng = rng::stream(seed, tag::RESAMPLE ^ 0xd15);
        let mut deck: Vec<usize> = Vec::new();
        (0..m)
            .map(|_| {
                let mut out = Vec::new();
                for _ in 0..per {
                    if deck.is_empty() {
                        deck = (0..n_blocks).collect();
                        rand::seq::SliceRandom::shuffle(deck.as_mut_slice(), &mut deck_rng);
                    }
                    out.extend(block(deck.pop().unwrap()));
                }
                out
            })
            .collect()
    } else {
        per_learner(m, seed, |r| {
            let mut out = Vec::new();
            for _ in 0..per {
                out.extend(block(r.random_range(0..n_blocks)));
            }
            out
        })
    };
    Ok(SubsampleSet::new(
        sets,
        ResamplingScheme::new(SchemeKind::OracleBB { block_len }, (per * block_len).min(n), seed),
    ))
}

/// Keep every `stride`-th index, then bootstrap `size` from that pool.
pub fn draw_thinned(n: usize, m: usize, stride: usize, size: usize, seed: u64) -> Result<SubsampleSet> {
    check_common(n, m, size)?;
    if stride < 1 {
        return Err(Error::Argument("stride must be >= 1".into()));
    }
    let pool = (n / stride).max(1);
    let sets = per_learner(m, seed, |r| (0..size).map(|_| r.random_range(0..pool) * stride).collect());
    let mut set = SubsampleSet::new(sets, ResamplingScheme::new(SchemeKind::LagThin { stride }, size.min(n), seed));
    if pool == 1 {
        log::warn!("thinning stride {stride} >= n = {n}: pool has a single sample");
        set.degenerate = true;
    }
    Ok(set)
}

/// Learner counts per partition: `floor(m/P)` each, remainder to the
/// largest partitions (ties to the smaller label).
pub fn learners_per_partition(sizes: &[usize], m: usize) -> Vec<usize> {
    let p = sizes.len();
    let mut counts = vec![m / p; p];
    let mut by_size: Vec<usize> = (0..p).collect();
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    for &q in by_size.iter().take(m % p) {
        counts[q] += 1;
    }
    counts
}

/// Within-partition bagging along a routing plan. Learners are laid out in
/// partition order.
pub fn draw_spectral_routed(plan: &SpectralPlan, m: usize, size: usize, rule: RoutedSize, seed: u64) -> Result<SubsampleSet> {
    check_common(plan.n(), m, size)?;
    if plan.p_hat > m {
        return Err(Error::Routing(format!("P = {} exceeds ensemble size {m}", plan.p_hat)));
    }
    let parts = plan.partitions();
    if let Some((p, part)) = parts.iter().enumerate().find(|(_, s)| s.len() < 2) {
        return Err(Error::Routing(format!("partition {p} has {} samples", part.len())));
    }
    let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
    let counts = learners_per_partition(&sizes, m);
    let owner: Vec<usize> = counts.iter().enumerate().flat_map(|(p, &c)| std::iter::repeat_n(p, c)).collect();
    let sets = (0..m)
        .map(|j| {
            let part = &parts[owner[j]];
            let k = match rule {
                RoutedSize::Subsample => size,
                RoutedSize::Partition => part.len(),
            };
            let mut r = learner_rng(seed, j);
            (0..k).map(|_| part[r.random_range(0..part.len())]).collect()
        })
        .collect();
    Ok(SubsampleSet::new(
        sets,
        ResamplingScheme::new(
            SchemeKind::SpectralRoute { plan: Box::new(plan.clone()), size: rule },
            size.min(plan.n()),
            seed,
        ),
    ))
}

/// Dispatch on the scheme.
pub fn draw(scheme: &ResamplingScheme, n: usize, m: usize) -> Result<SubsampleSet> {
    scheme.validate(n)?;
    let (size, seed) = (scheme.subsample_size, scheme.seed);
    let mut set = match &scheme.kind {
        SchemeKind::Uniform => draw_uniform(n, m, size, seed)?,
        SchemeKind::LagThin { stride } | SchemeKind::TmixThin { stride } => draw_thinned(n, m, *stride, size, seed)?,
        SchemeKind::StationaryBoot { mean_block } => draw_stationary_bootstrap(n, m, size, *mean_block, seed)?,
        SchemeKind::CircularBB { block_len } => draw_circular_block(n, m, size, *block_len, seed)?,
        SchemeKind::OracleBB { block_len } => draw_block_bagging(n, m, *block_len, seed, false)?,
        SchemeKind::SpectralRoute { plan, size: rule } => draw_spectral_routed(plan, m, size, *rule, seed)?,
    };
    set.scheme = scheme.clone();
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_index_universe() {
        let s = draw_uniform(1, 3, 5, 0).unwrap();
        assert!(s.per_learner.iter().all(|v| v == &vec![0; 5]));
    }

    #[test]
    fn determinism_and_learner_independence() {
        let a = draw_circular_block(1000, 5, 100, 7, 42).unwrap();
        let b = draw_circular_block(1000, 5, 100, 7, 42).unwrap();
        assert_eq!(a, b);
        // Learner j's set does not depend on how many learners were drawn.
        let c = draw_circular_block(1000, 3, 100, 7, 42).unwrap();
        assert_eq!(&a.per_learner[..3], &c.per_learner[..]);
    }

    #[test]
    fn wraparound_block() {
        let mut out = Vec::new();
        emit_block(&mut out, 8, 5, 10, 100);
        assert_eq!(out, vec![8, 9, 0, 1, 2]);
    }

    #[test]
    fn block_len_equal_size_is_one_run() {
        let s = draw_circular_block(500, 4, 60, 60, 1).unwrap();
        for set in &s.per_learner {
            let mut sorted = set.clone();
            sorted.sort();
            let gaps = sorted.windows(2).filter(|w| w[1] != w[0] + 1).count();
            assert!(gaps <= 1, "one circular run may wrap once");
        }
    }

    #[test]
    fn block_bagging_full_and_structural() {
        let s = draw_block_bagging(100, 4, 100, 3, false).unwrap();
        assert!(s.per_learner.iter().all(|v| v == &(0..100).collect::<Vec<_>>()));
        let s = draw_block_bagging(50_000, 20, 50, 3, false).unwrap();
        for set in &s.per_learner {
            let mut counts = std::collections::BTreeMap::new();
            for &i in set {
                *counts.entry(i / 50).or_insert(0usize) += 1;
            }
            assert!(counts.values().all(|c| c % 50 == 0));
        }
        let d = draw_block_bagging(1000, 4, 10, 3, true).unwrap();
        let mut all: Vec<usize> = d.per_learner.concat();
        let before = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), before);
    }

    #[test]
    fn thinning_pool() {
        let s = draw_thinned(50_000, 3, 50, 500, 2).unwrap();
        assert!(s.per_learner.iter().flatten().all(|&i| i % 50 == 0 && i < 50_000));
        let mut distinct: Vec<usize> = s.per_learner.concat();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() <= 1000);
        assert!(draw_thinned(10, 2, 20, 5, 0).unwrap().degenerate);
    }

    #[test]
    fn remainder_goes_to_largest() {
        assert_eq!(learners_per_partition(&[10, 30, 20], 5), vec![1, 2, 2]);
        assert_eq!(learners_per_partition(&[5, 5], 3), vec![2, 1]);
    }

    #[test]
    fn csv_multiplicities() {
        let s = SubsampleSet::new(vec![vec![3, 1, 3]], ResamplingScheme::new(SchemeKind::Uniform, 3, 0));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "learner_id,index,multiplicity\n0,1,1\n0,3,2\n");
    }
}
