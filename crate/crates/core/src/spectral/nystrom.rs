//! Landmark (Nystrom) surrogate of the normalized Laplacian,
//! `I - D^{-1/2} C W_ll^+ C^T D^{-1/2}`.
//!
//! Nothing of size `n x l` is formed. `W_ll` is eigendecomposed block by
//! block over the connected pieces of the landmark subgraph, `W_ll^+` is the
//! ridge inverse `theta / (theta^2 + eps^2)` on its numerical range, and the
//! top pair of the resulting rank-`r` surrogate affinity comes from Lanczos
//! with the trivial direction deflated.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::depgraph::DependencyGraph;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::spectral::lanczos::{self, top_eigenpairs, LanczosOptions, SymOperator};
use rand_distr::Distribution;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NystromSketch {
    /// Sorted, distinct.
    pub landmarks: Vec<usize>,
    /// Sparse column block `C = W[:, landmarks]`: entry `a` lists the rows
    /// (graph neighbors) where landmark `a`'s column is 1.
    pub c_block: Vec<Vec<usize>>,
    /// Sparse `W_ll`: entry `a` lists the landmark positions adjacent to `a`.
    pub w_ll: Vec<Vec<usize>>,
    pub ridge_eps: f64,
}

impl NystromSketch {
    pub fn l(&self) -> usize {
        self.landmarks.len()
    }

    pub fn w_ll_matrix(&self) -> DMatrix<f64> {
        let l = self.l();
        let mut w = DMatrix::zeros(l, l);
        for (a, row) in self.w_ll.iter().enumerate() {
            for &b in row {
                w[(a, b)] = 1.0;
            }
        }
        w
    }
}

/// Relative ridge for `W_ll`. The landmark block of a simple graph has zero
/// trace, so the Frobenius norm takes over as the scale in that case.
pub fn ridge_for(w_ll: &DMatrix<f64>) -> f64 {
    ridge_from(w_ll.trace(), w_ll.norm(), w_ll.nrows())
}

fn ridge_from(trace: f64, frob: f64, l: usize) -> f64 {
    let l = l.max(1) as f64;
    let eps = if trace > 0.0 { 1e-8 * trace / l } else { 1e-8 * frob / l.sqrt() };
    if eps > 0.0 {
        eps
    } else {
        1e-8
    }
}

/// Eigenpairs of `W_ll` on one connected block of the landmark subgraph,
/// restricted to the numerical range.
struct Block {
    /// Support positions (landmark indices) of the block.
    members: Vec<usize>,
    /// `members.len() x r` column-major eigenvectors.
    u: Vec<f64>,
    f: Vec<f64>,
}

/// Rank-`r` surrogate affinity `D^{-1/2} C U F U^T C^T D^{-1/2}`.
struct SurrogateOp<'a> {
    g: &'a DependencyGraph,
    landmarks: &'a [usize],
    blocks: Vec<Block>,
    inv_sqrt_deg: Vec<f64>,
}

impl SymOperator for SurrogateOp<'_> {
    fn dim(&self) -> usize {
        self.g.n_nodes()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for b in &self.blocks {
            let k = b.members.len();
            let cx: Vec<f64> = b
                .members
                .iter()
                .map(|&a| self.g.neighbors(self.landmarks[a]).iter().map(|&j| x[j] * self.inv_sqrt_deg[j]).sum())
                .collect();
            let mut z = vec![0.0; k];
            for (c, fc) in b.f.iter().enumerate() {
                let col = &b.u[c * k..(c + 1) * k];
                let t = fc * col.iter().zip(&cx).map(|(p, q)| p * q).sum::<f64>();
                z.iter_mut().zip(col).for_each(|(zi, p)| *zi += t * p);
            }
            for (&a, zi) in b.members.iter().zip(&z) {
                for &j in self.g.neighbors(self.landmarks[a]) {
                    y[j] += zi * self.inv_sqrt_deg[j];
                }
            }
        }
    }
}

fn block_eigen(members: Vec<usize>, w_adj: &[Vec<usize>], index: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let k = members.len();
    let w = faer::Mat::<f64>::from_fn(k, k, |i, j| {
        if w_adj[members[i]].binary_search(&members[j]).is_ok() {
            1.0
        } else {
            0.0
        }
    });
    debug_assert!(members.iter().enumerate().all(|(i, &a)| index[a] == i));
    let eig = w.self_adjoint_eigen(faer::Side::Lower).expect("symmetric eigensolve");
    let theta: Vec<f64> = (0..k).map(|i| eig.S()[i]).collect();
    let u = eig.U();
    let mut vecs = Vec::with_capacity(k * k);
    for c in 0..k {
        vecs.extend((0..k).map(|r| u[(r, c)]));
    }
    (theta, vecs, members)
}

pub fn nystrom_fiedler(g: &DependencyGraph, l: usize, seed: u64) -> Result<(f64, Vec<f64>, NystromSketch)> {
    let n = g.n_nodes();
    if l < 2 || l > n {
        return Err(Error::Argument(format!("landmark count {l} must lie in [2, {n}]")));
    }
    g.require_connected()?;
    let mut rng = rng::stream(seed, tag::NYSTROM);
    let mut landmarks = rand::seq::index::sample(&mut rng, n, l).into_vec();
    landmarks.sort_unstable();

    let mut pos = vec![usize::MAX; n];
    for (a, &i) in landmarks.iter().enumerate() {
        pos[i] = a;
    }
    let w_adj: Vec<Vec<usize>> = landmarks
        .iter()
        .map(|&i| {
            let mut r: Vec<usize> = g.neighbors(i).iter().filter(|&&j| pos[j] != usize::MAX).map(|&j| pos[j]).collect();
            r.sort_unstable();
            r
        })
        .collect();
    let nnz: usize = w_adj.iter().map(Vec::len).sum();
    let eps = ridge_from(0.0, (nnz as f64).sqrt(), l);

    // W_ll is block diagonal over the connected pieces of the landmark
    // subgraph; isolated landmarks are its null space, where the ridge
    // inverse vanishes.
    let mut index = vec![usize::MAX; l];
    let mut pieces = Vec::new();
    for a0 in 0..l {
        if index[a0] != usize::MAX || w_adj[a0].is_empty() {
            continue;
        }
        let mut members = vec![a0];
        index[a0] = 0;
        let mut head = 0;
        while head < members.len() {
            let a = members[head];
            head += 1;
            for &b in &w_adj[a] {
                if index[b] == usize::MAX {
                    index[b] = members.len();
                    members.push(b);
                }
            }
        }
        pieces.push(members);
    }
    let eigs: Vec<_> = pieces.into_iter().map(|m| block_eigen(m, &w_adj, &index)).collect();
    let tmax = eigs.iter().flat_map(|e| e.0.iter()).fold(0.0f64, |m, t| m.max(t.abs()));
    let support: usize = eigs.iter().map(|e| e.2.len()).sum();
    let rank_tol = support as f64 * f64::EPSILON * tmax;
    let mut blocks = Vec::new();
    for (theta, vecs, members) in eigs {
        let k = members.len();
        let mut u = Vec::new();
        let mut f = Vec::new();
        for (c, &t) in theta.iter().enumerate() {
            if t.abs() > rank_tol {
                u.extend_from_slice(&vecs[c * k..(c + 1) * k]);
                f.push(t / (t * t + eps * eps));
            }
        }
        if !f.is_empty() {
            blocks.push(Block { members, u, f });
        }
    }
    let rank: usize = blocks.iter().map(|b| b.f.len()).sum();

    let sketch = NystromSketch {
        c_block: landmarks.iter().map(|&i| g.neighbors(i).to_vec()).collect(),
        landmarks: landmarks.clone(),
        w_ll: w_adj,
        ridge_eps: eps,
    };
    let mut fallback = || {
        let mut x: Vec<f64> = (0..n).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        project_and_normalize(g, &mut x);
        x
    };
    if rank == 0 {
        // Zero surrogate affinity: every direction off the trivial one has eigenvalue 1.
        log::warn!("landmark block is empty; Nystrom surrogate carries no structure");
        let x = fallback();
        return Ok((1.0, x, sketch));
    }

    let sqrt_deg = g.sqrt_degrees();
    let op = SurrogateOp { g, landmarks: &landmarks, blocks, inv_sqrt_deg: sqrt_deg.iter().map(|s| 1.0 / s).collect() };
    let nu = lanczos::norm(&sqrt_deg);
    let u0: Vec<f64> = sqrt_deg.iter().map(|s| s / nu).collect();
    let mut lrng = rng::substream(seed, tag::NYSTROM, 1);
    let res = top_eigenpairs(&op, &[u0], None, &LanczosOptions::new(1, 1e-10, 50 * rank + 2000), &mut lrng);
    let mu = res.values[0];
    if !res.converged {
        return Err(Error::Convergence { iterations: res.matvecs, residual: res.residuals[0] });
    }
    if mu <= 0.0 && rank + 1 < n {
        // The surrogate's null directions (eigenvalue 1) sit below 1 - mu.
        let x = fallback();
        return Ok((1.0, x, sketch));
    }
    let mut x = res.vectors.into_iter().next().unwrap();
    project_and_normalize(g, &mut x);
    Ok((1.0 - mu, x, sketch))
}

fn project_and_normalize(g: &DependencyGraph, x: &mut [f64]) {
    let sqrt_deg = g.sqrt_degrees();
    let two_e = (2 * g.n_edges()) as f64;
    let proj: f64 = x.iter().zip(&sqrt_deg).map(|(a, b)| a * b).sum::<f64>() / two_e;
    for (xi, sd) in x.iter_mut().zip(&sqrt_deg) {
        *xi -= proj * sd;
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx > 0.0 {
        x.iter_mut().for_each(|v| *v /= nx);
    }
    super::sign_normalize(x);
}

/// Landmark budget `ceil(t_mix * (ln n)^2)`, capped at `n`.
pub fn landmark_budget(t_mix: f64, n: usize) -> usize {
    let ln = (n as f64).ln();
    ((t_mix * ln * ln).ceil() as usize).clamp(2, n)
}
