//! Coarse-graph hierarchy used to seed the Fiedler iteration.
//!
//! Aggregating matched node pairs turns the fine generalized problem
//! `L z = lambda D z` into the Galerkin problem on a weighted graph with
//! self-loops, whose normalized affinity has the same form as the fine one.

use rayon::prelude::*;

use super::lanczos::SymOperator;
use crate::depgraph::DependencyGraph;

pub struct Level {
    n: usize,
    offsets: Vec<usize>,
    adj: Vec<usize>,
    weights: Vec<f64>,
    self_weight: Vec<f64>,
    degree: Vec<f64>,
    inv_sqrt: Vec<f64>,
}

impl Level {
    pub fn from_graph(g: &DependencyGraph) -> Level {
        let n = g.n_nodes();
        let mut offsets = vec![0; n + 1];
        let mut adj = Vec::with_capacity(2 * g.n_edges());
        for i in 0..n {
            adj.extend_from_slice(g.neighbors(i));
            offsets[i + 1] = adj.len();
        }
        let degree: Vec<f64> = g.degrees().iter().map(|&d| d as f64).collect();
        Level {
            n,
            offsets,
            weights: vec![1.0; adj.len()],
            adj,
            self_weight: vec![0.0; n],
            inv_sqrt: degree.iter().map(|d| 1.0 / d.sqrt()).collect(),
            degree,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sqrt_degree(&self) -> Vec<f64> {
        self.degree.iter().map(|d| d.sqrt()).collect()
    }

    pub fn inv_sqrt_degree(&self) -> &[f64] {
        &self.inv_sqrt
    }

    /// Heavy-edge matching; returns the coarse level and the fine-to-coarse map.
    pub fn coarsen(&self) -> (Level, Vec<usize>) {
        let n = self.n;
        let mut visit: Vec<usize> = (0..n).collect();
        visit.sort_by(|&a, &b| self.degree[a].total_cmp(&self.degree[b]).then(a.cmp(&b)));
        let mut map = vec![usize::MAX; n];
        let mut nc = 0;
        for &u in &visit {
            if map[u] != usize::MAX {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for e in self.offsets[u]..self.offsets[u + 1] {
                let v = self.adj[e];
                if map[v] != usize::MAX || v == u {
                    continue;
                }
                let w = self.weights[e];
                let better = match best {
                    None => true,
                    Some((bw, bv)) => w > bw || (w == bw && self.degree[v] < self.degree[bv]),
                };
                if better {
                    best = Some((w, v));
                }
            }
            map[u] = nc;
            if let Some((_, v)) = best {
                map[v] = nc;
            }
            nc += 1;
        }

        let mut members = vec![Vec::new(); nc];
        for (i, &a) in map.iter().enumerate() {
            members[a].push(i);
        }
        let rows: Vec<(Vec<(usize, f64)>, f64)> = members
            .par_iter()
            .enumerate()
            .map(|(a, mem)| {
                let mut self_w = 0.0;
                let mut out: Vec<(usize, f64)> = Vec::new();
                for &i in mem {
                    self_w += self.self_weight[i];
                    for e in self.offsets[i]..self.offsets[i + 1] {
                        let b = map[self.adj[e]];
                        if b == a {
                            self_w += self.weights[e];
                        } else {
                            out.push((b, self.weights[e]));
                        }
                    }
                }
                out.sort_by_key(|p| p.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(out.len());
                for (b, w) in out {
                    match merged.last_mut() {
                        Some(last) if last.0 == b => last.1 += w,
                        _ => merged.push((b, w)),
                    }
                }
                (merged, self_w)
            })
            .collect();
        let mut offsets = vec![0; nc + 1];
        let mut adj = Vec::new();
        let mut weights = Vec::new();
        let mut self_weight = vec![0.0; nc];
        for (a, (row, sw)) in rows.into_iter().enumerate() {
            self_weight[a] = sw;
            for (b, w) in row {
                adj.push(b);
                weights.push(w);
            }
            offsets[a + 1] = adj.len();
        }
        let degree: Vec<f64> = members.iter().map(|mem| mem.iter().map(|&i| self.degree[i]).sum()).collect();
        let coarse = Level {
            n: nc,
            offsets,
            adj,
            weights,
            self_weight,
            inv_sqrt: degree.iter().map(|d: &f64| 1.0 / d.sqrt()).collect(),
            degree,
        };
        (coarse, map)
    }
}

impl SymOperator for Level {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = &self.inv_sqrt;
        let row = |i: usize| {
            let mut acc = self.self_weight[i] * s[i] * x[i];
            for e in self.offsets[i]..self.offsets[i + 1] {
                acc += self.weights[e] * s[self.adj[e]] * x[self.adj[e]];
            }
            s[i] * acc
        };
        if self.n >= 1 << 14 {
            y.par_iter_mut().enumerate().for_each(|(i, o)| *o = row(i));
        } else {
            for (i, o) in y.iter_mut().enumerate() {
                *o = row(i);
            }
        }
    }
}

/// Carry a normalized coarse eigenvector to the fine level: undo the coarse
/// degree scaling, copy aggregate values to members, apply the fine scaling.
pub fn prolongate(coarse: &Level, fine: &Level, map: &[usize], x: &[f64]) -> Vec<f64> {
    let cs = coarse.inv_sqrt_degree();
    map.iter()
        .enumerate()
        .map(|(i, &a)| x[a] * cs[a] * fine.degree[i].sqrt())
        .collect()
}
