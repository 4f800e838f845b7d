//! Base learners trained on subsample sets and their majority vote.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain_sim::{read_u32, read_u64, ChainConfig, Trajectory};
use crate::error::{Error, Result};
use crate::resampling::SubsampleSet;
use crate::stats::sign;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LearnerKind {
    AxisTree { max_depth: usize, min_leaf: usize },
    LinearRidge { reg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseLearnerSpec {
    pub kind: LearnerKind,
    pub seed: u64,
}

impl BaseLearnerSpec {
    pub fn tree(max_depth: usize, min_leaf: usize) -> Self {
        BaseLearnerSpec { kind: LearnerKind::AxisTree { max_depth, min_leaf }, seed: 0 }
    }

    pub fn ridge(reg: f64) -> Self {
        BaseLearnerSpec { kind: LearnerKind::LinearRidge { reg }, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LearnerKind::AxisTree { max_depth, min_leaf } if max_depth < 1 || min_leaf < 1 => {
                Err(Error::Config("tree needs max_depth >= 1 and min_leaf >= 1".into()))
            }
            LearnerKind::LinearRidge { reg } if !(reg > 0.0) => Err(Error::Config("ridge needs reg > 0".into())),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for BaseLearnerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            LearnerKind::AxisTree { max_depth, min_leaf } => write!(f, "tree:{max_depth}:{min_leaf}"),
            LearnerKind::LinearRidge { reg } => write!(f, "ridge:{reg}"),
        }
    }
}

impl std::str::FromStr for BaseLearnerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Parse(format!("bad learner spec {s:?}"));
        let spec = match parts.as_slice() {
            ["tree", d, l] => Self::tree(d.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?),
            ["ridge", r] => Self::ridge(r.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf(i8),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Learner {
    Constant(i8),
    Tree(Vec<TreeNode>),
    /// Affine score `bias + <w, x>`; the vote is its sign.
    Linear { w: Vec<f64>, bias: f64 },
}

impl Learner {
    pub fn predict(&self, x: &[f64]) -> i8 {
        match self {
            Learner::Constant(c) => *c,
            Learner::Tree(nodes) => {
                let mut k = 0;
                loop {
                    match &nodes[k] {
                        TreeNode::Leaf(v) => return *v,
                        TreeNode::Split { feature, threshold, left, right } => {
                            k = if x[*feature] <= *threshold { *left } else { *right };
                        }
                    }
                }
            }
            Learner::Linear { .. } => sign(self.score(x)),
        }
    }

    /// Raw score for diagnostics; equals the vote for non-linear learners.
    pub fn score(&self, x: &[f64]) -> f64 {
        match self {
            Learner::Linear { w, bias } => bias + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
            _ => self.predict(x) as f64,
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], k: usize) -> usize {
            match &nodes[k] {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        match self {
            Learner::Tree(nodes) => go(nodes, 0),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub learners: Vec<Learner>,
    pub scheme_tag: String,
    pub spec: BaseLearnerSpec,
    /// Law the training data came from, if known.
    pub provenance: Option<ChainConfig>,
}

impl EnsembleModel {
    pub fn m(&self) -> usize {
        self.learners.len()
    }

    /// Mean vote in [-1, 1].
    pub fn margin(&self, x: &[f64]) -> f64 {
        let s: i64 = self.learners.iter().map(|h| h.predict(x) as i64).sum();
        s as f64 / self.learners.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> i8 {
        sign(self.margin(x))
    }

    /// `votes[j][t]` is learner `j`'s vote on row `t` of `traj`.
    pub fn votes(&self, traj: &Trajectory) -> Vec<Vec<i8>> {
        self.learners
            .par_iter()
            .map(|h| (0..traj.n()).map(|t| h.predict(traj.row(t))).collect())
            .collect()
    }

    pub fn margins(&self, traj: &Trajectory) -> Vec<f64> {
        (0..traj.n()).into_par_iter().map(|t| self.margin(traj.row(t))).collect()
    }

    const MAGIC: &'static [u8; 8] = b"SRMODEL\n";
    const VERSION: u32 = 1;

    /// Versioned binary: magic, version, header strings, then one record per
    /// learner.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        write_str(&mut w, &self.scheme_tag)?;
        write_str(&mut w, &self.spec.to_string())?;
        write_str(&mut w, &self.provenance.as_ref().map(|c| c.to_kv()).unwrap_or_default())?;
        w.write_all(&(self.learners.len() as u64).to_le_bytes())?;
        for h in &self.learners {
            match h {
                Learner::Constant(c) => w.write_all(&[0, *c as u8])?,
                Learner::Linear { w: coef, bias } => {
                    w.write_all(&[1])?;
                    w.write_all(&(coef.len() as u32).to_le_bytes())?;
                    w.write_all(&bias.to_le_bytes())?;
                    for c in coef {
                        w.write_all(&c.to_le_bytes())?;
                    }
                }
                Learner::Tree(nodes) => {
                    w.write_all(&[2])?;
                    w.write_all(&(nodes.len() as u32).to_le_bytes())?;
                    for node in nodes {
                        match node {
                            TreeNode::Leaf(v) => w.write_all(&[0, *v as u8])?,
                            TreeNode::Split { feature, threshold, left, right } => {
                                w.write_all(&[1])?;
                                w.write_all(&(*feature as u32).to_le_bytes())?;
                                w.write_all(&threshold.to_le_bytes())?;
                                w.write_all(&(*left as u32).to_le_bytes())?;
                                w.write_all(&(*right as u32).to_le_bytes())?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Parse("not a model file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::Parse(format!("unsupported model version {version}")));
        }
        let scheme_tag = read_str(&mut r)?;
        let spec: BaseLearnerSpec = read_str(&mut r)?.parse()?;
        let prov = read_str(&mut r)?;
        let provenance = if prov.is_empty() { None } else { Some(ChainConfig::from_kv(&prov)?) };
        let m = read_u64(&mut r)? as usize;
        let mut learners = Vec::with_capacity(m);
        for _ in 0..m {
            let kind = read_u8(&mut r)?;
            learners.push(match kind {
                0 => Learner::Constant(read_u8(&mut r)? as i8),
                1 => {
                    let d = read_u32(&mut r)? as usize;
                    let bias = read_f64(&mut r)?;
                    let w = (0..d).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
                    Learner::Linear { w, bias }
                }
                2 => {
                    let k = read_u32(&mut r)? as usize;
                    let mut nodes = Vec::with_capacity(k);
                    for _ in 0..k {
                        nodes.push(match read_u8(&mut r)? {
                            0 => TreeNode::Leaf(read_u8(&mut r)? as i8),
                            1 => TreeNode::Split {
                                feature: read_u32(&mut r)? as usize,
                                threshold: read_f64(&mut r)?,
                                left: read_u32(&mut r)? as usize,
                                right: read_u32(&mut r)? as usize,
                            },
                            t => return Err(Error::Parse(format!("bad tree node tag {t}"))),
                        });
                    }
                    Learner::Tree(nodes)
                }
                t => return Err(Error::Parse(format!("bad learner tag {t}"))),
            });
        }
        Ok(EnsembleModel { learners, scheme_tag, spec, provenance })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Fit one learner on rows `idx` (a multiset) of `x` / `y`.
pub fn fit_learner(x: &[f64], d: usize, y: &[i8], idx: &[usize], spec: &BaseLearnerSpec) -> Result<Learner> {
    if idx.is_empty() {
        return Err(Error::Training("empty subsample".into()));
    }
    let first = y[idx[0]];
    if idx.iter().all(|&i| y[i] == first) {
        return Ok(Learner::Constant(first));
    }
    match spec.kind {
        LearnerKind::AxisTree { max_depth, min_leaf } => Ok(fit_tree(x, d, y, idx, max_depth, min_leaf)),
        LearnerKind::LinearRidge { reg } => fit_ridge(x, d, y, idx, reg),
    }
}

fn fit_ridge(x: &[f64], d: usize, y: &[i8], idx: &[usize], reg: f64) -> Result<Learner> {
    let p = d + 1;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for &i in idx {
        row[0] = 1.0;
        row[1..].copy_from_slice(&x[i * d..(i + 1) * d]);
        let yi = y[i] as f64;
        for r in 0..p {
            b[r] += row[r] * yi;
            for c in 0..p {
                a[(r, c)] += row[r] * row[c];
            }
        }
    }
    // The intercept is not penalized.
    for r in 1..p {
        a[(r, r)] += reg;
    }
    // Positive definite: the intercept column is all ones and the rest is ridged.
    let sol = a
        .cholesky()
        .map(|ch| ch.solve(&b))
        .ok_or_else(|| Error::Training("ridge system not positive definite".into()))?;
    Ok(Learner::Linear { w: sol.as_slice()[1..].to_vec(), bias: sol[0] })
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    d: usize,
    y: &'a [i8],
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

fn leaf_value(y: &[i8], idx: &[usize]) -> i8 {
    sign(idx.iter().map(|&i| y[i] as i64).sum::<i64>() as f64)
}

/// Sum of per-child `pos * neg / size`, proportional to weighted Gini.
fn impurity(pl: f64, nl: f64, pr: f64, nr: f64) -> f64 {
    let left = if nl > 0.0 { pl * (nl - pl) / nl } else { 0.0 };
    let right = if nr > 0.0 { pr * (nr - pr) / nr } else { 0.0 };
    left + right
}

impl TreeBuilder<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let me = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(leaf_value(self.y, idx)));
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i] > 0).count();
        if depth >= self.max_depth || pos == 0 || pos == n || n < 2 * self.min_leaf {
            return me;
        }
        let parent = impurity(pos as f64, n as f64, 0.0, 0.0);
        // (impurity, threshold, feature)
        let mut best: Option<(f64, f64, usize)> = None;
        let mut vals: Vec<(f64, bool)> = Vec::with_capacity(n);
        for f in 0..self.d {
            vals.clear();
            vals.extend(idx.iter().map(|&i| (self.x[i * self.d + f], self.y[i] > 0)));
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0usize;
            for k in 0..n - 1 {
                left_pos += vals[k].1 as usize;
                let nl = k + 1;
                if vals[k].0 == vals[k + 1].0 || nl < self.min_leaf || n - nl < self.min_leaf {
                    continue;
                }
                let imp = impurity(left_pos as f64, nl as f64, (pos - left_pos) as f64, (n - nl) as f64);
                let thr = 0.5 * (vals[k].0 + vals[k + 1].0);
                let better = match best {
                    None => true,
                    Some((bi, bt, bf)) => imp < bi || (imp == bi && (thr < bt || (thr == bt && f < bf))),
                };
                if better {
                    best = Some((imp, thr, f));
                }
            }
        }
        let Some((imp, threshold, feature)) = best else { return me };
        if imp >= parent * (1.0 - 1e-12) {
            return me;
        }
        let mut split = 0;
        for k in 0..n {
            if self.x[idx[k] * self.d + feature] <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[me] = TreeNode::Split { feature, threshold, left, right };
        me
    }
}

fn fit_tree(x: &[f64], d: usize, y: &[i8], idx: &[usize], max_depth: usize, min_leaf: usize) -> Learner {
    let mut b = TreeBuilder { x, d, y, max_depth, min_leaf, nodes: Vec::new() };
    let mut idx = idx.to_vec();
    b.grow(&mut idx, 0);
    Learner::Tree(b.nodes)
}

/// Train one learner per subsample, in parallel.
pub fn train(traj: &Trajectory, subs: &SubsampleSet, spec: &BaseLearnerSpec) -> Result<EnsembleModel> {
    spec.validate()?;
    if subs.per_learner.is_empty() {
        return Err(Error::Training("no subsamples".into()));
    }
    let n = traj.n();
    if let Some(bad) = subs.per_learner.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::Training(format!("index {bad} out of range for n = {n}")));
    }
    let learners = subs
        .per_learner
        .par_iter()
        .map(|idx| fit_learner(&traj.x, traj.d0(), &traj.y, idx, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        learners,
        scheme_tag: subs.scheme.kind.name().to_string(),
        spec: *spec,
        provenance: Some(traj.config.clone()),
    })
}
