//! Exact k-nearest-neighbor queries.
//!
//! A kd-tree for Euclidean feature space; candidates are ordered by
//! `(squared distance, index)` so ties always resolve to the smaller index
//! and the answer never depends on tree shape.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

const LEAF: usize = 16;

#[derive(Clone, Copy, Debug)]
struct Cand {
    d2: f64,
    idx: usize,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

pub struct KdTree<'a> {
    points: &'a [f64],
    dim: usize,
    order: Vec<usize>,
    root: Node,
}

impl<'a> KdTree<'a> {
    /// `points` is row-major with `dim` columns.
    pub fn new(points: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && points.len() % dim == 0);
        let n = points.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        let root = build(points, dim, &mut order, 0);
        KdTree { points, dim, order, root }
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// The `k` nearest points to point `query` other than itself, sorted
    /// nearest first.
    pub fn neighbors_of(&self, query: usize, k: usize) -> Vec<usize> {
        let q = self.point(query).to_vec();
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, &q, Some(query), k, &mut heap);
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.idx).collect()
    }

    fn search(&self, node: &Node, q: &[f64], skip: Option<usize>, k: usize, heap: &mut BinaryHeap<Cand>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == skip {
                        continue;
                    }
                    let d2 = sq_dist(self.point(i), q);
                    let c = Cand { d2, idx: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, skip, k, heap);
                // Equal-distance candidates across the plane may still win on
                // index, so only prune strictly farther half-spaces.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.search(far, q, skip, k, heap);
                }
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn build(points: &[f64], dim: usize, order: &mut [usize], offset: usize) -> Node {
    let len = order.len();
    if len <= LEAF {
        return Node::Leaf { start: offset, end: offset + len };
    }
    let mut best = (0, -1.0);
    for j in 0..dim {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in order.iter() {
            let v = points[i * dim + j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > best.1 {
            best = (j, hi - lo);
        }
    }
    let split_dim = best.0;
    if best.1 <= 0.0 {
        return Node::Leaf { start: offset, end: offset + len };
    }
    let mid = len / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a * dim + split_dim].total_cmp(&points[b * dim + split_dim])
    });
    let value = points[order[mid] * dim + split_dim];
    // Left holds values <= value, right holds values >= value; queries use
    // the plane distance for pruning so either side of the tie is fine.
    let (l, r) = order.split_at_mut(mid);
    Node::Split {
        dim: split_dim,
        value,
        left: Box::new(build(points, dim, l, offset)),
        right: Box::new(build(points, dim, r, offset + mid)),
    }
}

/// k nearest neighbors of every point (self excluded), computed in parallel.
pub fn knn_all(points: &[f64], dim: usize, k: usize) -> Vec<Vec<usize>> {
    let n = points.len() / dim;
    let tree = KdTree::new(points, dim);
    (0..n).into_par_iter().map(|i| tree.neighbors_of(i, k)).collect()
}

/// Brute-force reference used by tests.
pub fn knn_brute(points: &[f64], dim: usize, k: usize) -> Vec<Vec<usize>> {
    let n = points.len() / dim;
    (0..n)
        .map(|i| {
            let p = &points[i * dim..(i + 1) * dim];
            let mut c: Vec<Cand> = (0..n)
                .filter(|&j| j != i)
                .map(|j| Cand { d2: sq_dist(p, &points[j * dim..(j + 1) * dim]), idx: j })
                .collect();
            c.sort();
            c.truncate(k);
            c.into_iter().map(|c| c.idx).collect()
        })
        .collect()
}

/// k nearest cells of every cell on a `side x side` grid in Euclidean grid
/// distance, ties by smaller row-major index.
pub fn grid_knn(side: usize, k: usize) -> Vec<Vec<usize>> {
    let n = side * side;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (r0, c0) = ((i / side) as i64, (i % side) as i64);
            let mut radius = 1i64;
            loop {
                let mut cands = Vec::new();
                for r in (r0 - radius).max(0)..=(r0 + radius).min(side as i64 - 1) {
                    for c in (c0 - radius).max(0)..=(c0 + radius).min(side as i64 - 1) {
                        let j = (r * side as i64 + c) as usize;
                        if j != i {
                            let d2 = ((r - r0) * (r - r0) + (c - c0) * (c - c0)) as f64;
                            cands.push(Cand { d2, idx: j });
                        }
                    }
                }
                cands.sort();
                let exhausted = cands.len() == n - 1;
                // Every cell outside the window is farther than `radius`.
                if exhausted || (cands.len() >= k && cands[k - 1].d2 <= (radius * radius) as f64) {
                    cands.truncate(k);
                    return cands.into_iter().map(|c| c.idx).collect();
                }
                radius *= 2;
            }
        })
        .collect()
}
