//! Thick-restart Lanczos for the largest eigenpairs of a symmetric operator
//! on the orthogonal complement of a few known eigenvectors.
//!
//! The projected matrix is assembled from the Gram-Schmidt coefficients of
//! full reorthogonalization, so it stays the exact Rayleigh quotient of the
//! basis after restarts and breakdowns.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::depgraph::LaplacianOp;
use crate::rng::Rng;

const PAR_THRESHOLD: usize = 1 << 13;
const CHECK_EVERY: usize = 8;

pub trait SymOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl SymOperator for LaplacianOp<'_> {
    fn dim(&self) -> usize {
        self.n()
    }

    /// Lanczos targets the top of the affinity spectrum, i.e. the bottom of
    /// the Laplacian spectrum.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.affinity(x, y)
    }
}

#[derive(Debug, Clone)]
pub struct LanczosOptions {
    pub nev: usize,
    pub tol: f64,
    pub max_matvecs: usize,
    pub max_basis: usize,
    pub keep: usize,
}

impl LanczosOptions {
    pub fn new(nev: usize, tol: f64, max_matvecs: usize) -> Self {
        let max_basis = (2 * nev + 40).max(64);
        LanczosOptions { nev, tol, max_matvecs, max_basis, keep: (nev + max_basis / 3).min(max_basis - 2) }
    }
}

#[derive(Debug, Clone)]
pub struct LanczosResult {
    /// Descending.
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub matvecs: usize,
    pub converged: bool,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    if a.len() >= PAR_THRESHOLD {
        a.par_chunks(4096).zip(b.par_chunks(4096)).map(|(x, y)| seq_dot(x, y)).sum()
    } else {
        seq_dot(a, b)
    }
}

fn seq_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: &mut [f64], s: f64) {
    a.iter_mut().for_each(|x| *x *= s);
}

/// `w -= sum_c coef[c] * basis[c]`.
fn subtract_combination(w: &mut [f64], basis: &[Vec<f64>], coef: &[f64]) {
    let body = |(off, chunk): (usize, &mut [f64])| {
        for (c, v) in basis.iter().enumerate() {
            let h = coef[c];
            if h != 0.0 {
                for (k, x) in chunk.iter_mut().enumerate() {
                    *x -= h * v[off + k];
                }
            }
        }
    };
    if w.len() >= PAR_THRESHOLD {
        w.par_chunks_mut(4096).enumerate().for_each(|(i, c)| body((i * 4096, c)));
    } else {
        body((0, w));
    }
}

fn project_out(w: &mut [f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let coef: Vec<f64> = if w.len() >= PAR_THRESHOLD {
        basis.par_iter().map(|v| dot(v, w)).collect()
    } else {
        basis.iter().map(|v| dot(v, w)).collect()
    };
    subtract_combination(w, basis, &coef);
    coef
}

fn combine(basis: &[Vec<f64>], coef: impl Fn(usize) -> f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (c, v) in basis.iter().enumerate() {
        let h = coef(c);
        for (o, x) in out.iter_mut().zip(v) {
            *o += h * x;
        }
    }
    out
}

/// A unit vector orthogonal to `against` and `basis`, or `None` when the
/// admissible space is exhausted.
fn fresh_vector(n: usize, against: &[Vec<f64>], basis: &[Vec<f64>], rng: &mut Rng) -> Option<Vec<f64>> {
    for _ in 0..5 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let before = norm(&v);
        for _ in 0..2 {
            project_out(&mut v, against);
            project_out(&mut v, basis);
        }
        let nv = norm(&v);
        if nv > 1e-8 * before {
            scale(&mut v, 1.0 / nv);
            return Some(v);
        }
    }
    None
}

/// Largest `opts.nev` eigenpairs of `op` restricted to the complement of the
/// orthonormal vectors `deflate`.
pub fn top_eigenpairs(
    op: &dyn SymOperator,
    deflate: &[Vec<f64>],
    start: Option<Vec<f64>>,
    opts: &LanczosOptions,
    rng: &mut Rng,
) -> LanczosResult {
    let n = op.dim();
    let space = n.saturating_sub(deflate.len());
    let nev = opts.nev.min(space);
    let max_basis = opts.max_basis.min(space).max(1);
    let keep = opts.keep.min(max_basis.saturating_sub(1)).max(nev.min(max_basis.saturating_sub(1)));

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_basis);
    let mut t = DMatrix::<f64>::zeros(max_basis, max_basis);
    let mut matvecs = 0usize;

    let first = start
        .and_then(|mut v| {
            for _ in 0..2 {
                project_out(&mut v, deflate);
            }
            let nv = norm(&v);
            (nv > 1e-12).then(|| {
                scale(&mut v, 1.0 / nv);
                v
            })
        })
        .or_else(|| fresh_vector(n, deflate, &[], rng));
    let Some(first) = first else {
        return LanczosResult {
            values: vec![],
            vectors: vec![],
            residuals: vec![],
            matvecs,
            converged: true,
        };
    };
    basis.push(first);
    let mut w = vec![0.0; n];

    loop {
        let j = basis.len() - 1;
        op.apply(&basis[j], &mut w);
        matvecs += 1;
        project_out(&mut w, deflate);
        let mut h = project_out(&mut w, &basis);
        let h2 = project_out(&mut w, &basis);
        for (a, b) in h.iter_mut().zip(h2) {
            *a += b;
        }
        project_out(&mut w, deflate);
        for (i, &hi) in h.iter().enumerate() {
            t[(i, j)] = hi;
            t[(j, i)] = hi;
        }
        let beta = norm(&w);

        let k = j + 1;
        let breakdown = beta <= 1e-12;
        let next = if breakdown {
            fresh_vector(n, deflate, &basis, rng)
        } else {
            scale(&mut w, 1.0 / beta);
            Some(w.clone())
        };
        // On breakdown with no admissible direction left the basis spans the space.
        let exhausted = k == space || next.is_none();
        let full = basis.len() >= max_basis;
        let out_of_budget = matvecs >= opts.max_matvecs;
        // The projected eigenproblem costs O(k^3), so it is solved only
        // every few steps and whenever a restart or exit needs it.
        if !(exhausted || full || out_of_budget || k % CHECK_EVERY == 0) {
            basis.push(next.expect("exhausted basis handled above"));
            continue;
        }

        let eig = SymmetricEigen::new(t.view((0, 0), (k, k)).into_owned());
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let want = nev.min(k);
        let residuals: Vec<f64> = order[..want].iter().map(|&c| beta * eig.eigenvectors[(j, c)].abs()).collect();
        let converged = exhausted || (want == nev && residuals.iter().all(|&r| r <= opts.tol));

        if converged || out_of_budget {
            let vectors: Vec<Vec<f64>> = order[..want]
                .iter()
                .map(|&c| {
                    let mut x = combine(&basis, |r| eig.eigenvectors[(r, c)], n);
                    let nx = norm(&x);
                    scale(&mut x, 1.0 / nx);
                    x
                })
                .collect();
            return LanczosResult {
                values: order[..want].iter().map(|&c| eig.eigenvalues[c]).collect(),
                vectors,
                residuals: if exhausted { vec![0.0; want] } else { residuals },
                matvecs,
                converged,
            };
        }

        let next = next.expect("exhausted basis handled above");

        if basis.len() < max_basis {
            basis.push(next);
            continue;
        }

        // Thick restart: keep the leading Ritz vectors, then continue from
        // the residual direction.
        let kept: Vec<Vec<f64>> = order[..keep]
            .iter()
            .map(|&c| combine(&basis, |r| eig.eigenvectors[(r, c)], n))
            .collect();
        t.fill(0.0);
        for (i, &c) in order[..keep].iter().enumerate() {
            t[(i, i)] = eig.eigenvalues[c];
        }
        basis = kept;
        let mut next = next;
        if breakdown {
            project_out(&mut next, &basis);
            let nn = norm(&next);
            scale(&mut next, 1.0 / nn);
        }
        basis.push(next);
    }
}
