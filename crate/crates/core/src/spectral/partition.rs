//! Recursive spectral bisection with local Fiedler vectors.

use serde::{Deserialize, Serialize};

use super::{fiedler_detailed, FiedlerOptions};
use crate::depgraph::DependencyGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SplitRule {
    /// Split a set destined for `q` parts at the `floor(q/2)/q` quantile of
    /// the Fiedler order.
    #[default]
    Balanced,
    /// Split at the sign change of the Fiedler vector.
    Sign,
}

#[derive(Debug, Clone)]
pub struct BisectOptions {
    pub rule: SplitRule,
    pub fiedler: FiedlerOptions,
}

/// Nodes of `nodes` (a subset of `g`) ordered along their local Fiedler
/// vector, plus the number that fall on the negative side.
fn fiedler_order(g: &DependencyGraph, nodes: &[usize], opts: &FiedlerOptions) -> Result<(Vec<usize>, usize)> {
    if nodes.len() <= 2 {
        return Ok((nodes.to_vec(), nodes.len() / 2));
    }
    let sub = g.induced(nodes);
    let (nc, labels) = sub.components();
    if nc > 1 {
        log::warn!("bisection subgraph of {} nodes has {nc} components; ordering by component", nodes.len());
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); nc];
        for (a, &lab) in labels.iter().enumerate() {
            groups[lab].push(nodes[a]);
        }
        let mut out = Vec::with_capacity(nodes.len());
        for grp in groups {
            out.extend(fiedler_order(g, &grp, opts)?.0);
        }
        // The component boundary nearest the middle plays the sign split.
        let half = out.len() / 2;
        return Ok((out, half));
    }
    let local_opts = FiedlerOptions { seed: crate::rng::split(opts.seed, nodes[0] as u64 ^ ((nodes.len() as u64) << 32)), ..opts.clone() };
    let f = fiedler_detailed(&sub, &local_opts)?;
    let deg = sub.degrees();
    // Random-walk coordinates D^{-1/2} v2 are the ones that are monotone on paths.
    let key: Vec<f64> = f.vector.iter().zip(deg).map(|(v, &d)| v / (d as f64).sqrt()).collect();
    let mut idx: Vec<usize> = (0..nodes.len()).collect();
    idx.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(nodes[a].cmp(&nodes[b])));
    let positive = key.iter().filter(|&&k| k >= 0.0).count();
    Ok((idx.into_iter().map(|a| nodes[a]).collect(), positive))
}

fn split_into(g: &DependencyGraph, nodes: Vec<usize>, q: usize, first: usize, opts: &BisectOptions) -> Result<Vec<(usize, usize)>> {
    if q == 1 {
        return Ok(nodes.into_iter().map(|i| (i, first)).collect());
    }
    if nodes.len() < q {
        return Err(Error::Routing(format!("cannot split {} nodes into {q} parts", nodes.len())));
    }
    let (order, positive) = fiedler_order(g, &nodes, &opts.fiedler)?;
    let len = order.len();
    let (at, q_left) = match opts.rule {
        SplitRule::Balanced => {
            let q_left = q / 2;
            let at = ((len * q_left) as f64 / q as f64).round() as usize;
            (at, q_left)
        }
        SplitRule::Sign => {
            let at = positive.clamp(1, len - 1);
            let q_left = ((q * at) as f64 / len as f64).round() as usize;
            (at, q_left.clamp(1, q - 1))
        }
    };
    // Each side must hold at least one node per part.
    let at = at.clamp(q_left, len - (q - q_left));
    let mut left = order;
    let right = left.split_off(at);
    let big = len >= 4096;
    let (a, b) = if big {
        rayon::join(
            || split_into(g, left, q_left, first, opts),
            || split_into(g, right, q - q_left, first + q_left, opts),
        )
    } else {
        (split_into(g, left, q_left, first, opts), split_into(g, right, q - q_left, first + q_left, opts))
    };
    let mut out = a?;
    out.extend(b?);
    Ok(out)
}

/// Assign each node of `g` to one of `parts` groups.
pub fn recursive_bisection(g: &DependencyGraph, parts: usize, opts: &BisectOptions) -> Result<Vec<usize>> {
    let n = g.n_nodes();
    if parts == 0 || parts > n {
        return Err(Error::Argument(format!("cannot form {parts} parts from {n} nodes")));
    }
    let mut assignment = vec![usize::MAX; n];
    for (i, p) in split_into(g, (0..n).collect(), parts, 0, opts)? {
        assignment[i] = p;
    }
    Ok(assignment)
}
