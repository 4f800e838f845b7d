//! Unweighted empirical dependency graphs over sample indices and the
//! matrix-free normalized Laplacian `I - D^{-1/2} W D^{-1/2}`.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain_sim::{Topology, Trajectory};
use crate::error::{Error, Result};
use crate::knn;

/// Below this size matvecs stay sequential.
const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GraphRecipe {
    TemporalWindow(usize),
    SpatialKnn(usize),
    FeatureKnn(usize),
    Union(Vec<GraphRecipe>),
}

impl GraphRecipe {
    pub fn validate(&self) -> Result<()> {
        match self {
            GraphRecipe::TemporalWindow(0) => Err(Error::Config("window tau must be >= 1".into())),
            GraphRecipe::SpatialKnn(0) | GraphRecipe::FeatureKnn(0) => {
                Err(Error::Config("k must be >= 1".into()))
            }
            GraphRecipe::Union(parts) if parts.is_empty() => {
                Err(Error::Config("union of zero recipes".into()))
            }
            GraphRecipe::Union(parts) => parts.iter().try_for_each(|p| p.validate()),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for GraphRecipe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphRecipe::TemporalWindow(t) => write!(f, "window:{t}"),
            GraphRecipe::SpatialKnn(k) => write!(f, "spatial:{k}"),
            GraphRecipe::FeatureKnn(k) => write!(f, "feature:{k}"),
            GraphRecipe::Union(parts) => {
                let s: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                write!(f, "{}", s.join("+"))
            }
        }
    }
}

impl std::str::FromStr for GraphRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('+').map(str::trim).collect();
        if parts.len() > 1 {
            return Ok(GraphRecipe::Union(parts.iter().map(|p| p.parse()).collect::<Result<_>>()?));
        }
        let (kind, val) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("graph recipe {s:?} needs kind:value")))?;
        let val: usize = val.parse().map_err(|_| Error::Parse(format!("bad value in {s:?}")))?;
        let recipe = match kind {
            "window" => GraphRecipe::TemporalWindow(val),
            "spatial" => GraphRecipe::SpatialKnn(val),
            "feature" => GraphRecipe::FeatureKnn(val),
            _ => return Err(Error::Parse(format!("unknown graph kind {kind:?}"))),
        };
        recipe.validate()?;
        Ok(recipe)
    }
}

/// A simple undirected graph with CSR adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    degrees: Vec<usize>,
    offsets: Vec<usize>,
    adj: Vec<usize>,
}

impl DependencyGraph {
    /// Normalizes the pair list: orients each pair as `i < j`, drops
    /// self-loops and duplicates.
    pub fn from_edges(n_nodes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (a, b) in pairs {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::Argument(format!("edge ({a},{b}) out of range for n={n_nodes}")));
            }
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.par_sort_unstable();
        edges.dedup();
        let mut degrees = vec![0usize; n_nodes];
        for &(i, j) in &edges {
            degrees[i] += 1;
            degrees[j] += 1;
        }
        let mut offsets = vec![0usize; n_nodes + 1];
        for i in 0..n_nodes {
            offsets[i + 1] = offsets[i] + degrees[i];
        }
        let mut fill = offsets.clone();
        let mut adj = vec![0usize; 2 * edges.len()];
        for &(i, j) in &edges {
            adj[fill[i]] = j;
            fill[i] += 1;
            adj[fill[j]] = i;
            fill[j] += 1;
        }
        for i in 0..n_nodes {
            adj[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Ok(DependencyGraph { n_nodes, edges, degrees, offsets, adj })
    }

    pub fn path(n: usize) -> Self {
        Self::from_edges(n, (1..n).map(|i| (i - 1, i))).unwrap()
    }

    pub fn complete(n: usize) -> Self {
        Self::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)))).unwrap()
    }

    pub fn grid(side: usize) -> Self {
        let mut e = Vec::new();
        for r in 0..side {
            for c in 0..side {
                let i = r * side + c;
                if c + 1 < side {
                    e.push((i, i + 1));
                }
                if r + 1 < side {
                    e.push((i, i + side));
                }
            }
        }
        Self::from_edges(side * side, e).unwrap()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Nodes with no incident edge.
    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes).filter(|&i| self.degrees[i] == 0).collect()
    }

    /// Connected component label per node, labels in order of first node.
    pub fn components(&self) -> (usize, Vec<usize>) {
        let mut label = vec![usize::MAX; self.n_nodes];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for s in 0..self.n_nodes {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = count;
            queue.push_back(s);
            while let Some(u) = queue.pop_front() {
                for &w in self.neighbors(u) {
                    if label[w] == usize::MAX {
                        label[w] = count;
                        queue.push_back(w);
                    }
                }
            }
            count += 1;
        }
        (count, label)
    }

    pub fn is_connected(&self) -> bool {
        self.n_nodes > 0 && self.components().0 == 1
    }

    /// Fails with a structural error unless every node has an edge and the
    /// graph is one component.
    pub fn require_connected(&self) -> Result<()> {
        if let Some(&i) = self.isolated_nodes().first() {
            if self.n_nodes > 1 {
                return Err(Error::ZeroDegree(i));
            }
        }
        let (c, _) = self.components();
        if c != 1 {
            return Err(Error::Disconnected { components: c });
        }
        Ok(())
    }

    /// Subgraph induced by `nodes`; local index `a` corresponds to `nodes[a]`.
    pub fn induced(&self, nodes: &[usize]) -> DependencyGraph {
        let mut local = vec![usize::MAX; self.n_nodes];
        for (a, &i) in nodes.iter().enumerate() {
            local[i] = a;
        }
        let mut e = Vec::new();
        for (a, &i) in nodes.iter().enumerate() {
            for &j in self.neighbors(i) {
                let b = local[j];
                if b != usize::MAX && a < b {
                    e.push((a, b));
                }
            }
        }
        DependencyGraph::from_edges(nodes.len(), e).unwrap()
    }

    /// `D^{1/2} 1`, the null vector of the normalized Laplacian.
    pub fn sqrt_degrees(&self) -> Vec<f64> {
        self.degrees.iter().map(|&d| (d as f64).sqrt()).collect()
    }

    fn inv_sqrt_degrees(&self) -> Result<Vec<f64>> {
        self.degrees
            .iter()
            .enumerate()
            .map(|(i, &d)| if d == 0 { Err(Error::ZeroDegree(i)) } else { Ok(1.0 / (d as f64).sqrt()) })
            .collect()
    }

    /// `L~ x` without materializing the matrix.
    pub fn normalized_laplacian_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let op = LaplacianOp::new(self)?;
        if x.len() != self.n_nodes {
            return Err(Error::Argument(format!(
                "vector length {} != n_nodes {}",
                x.len(),
                self.n_nodes
            )));
        }
        let mut out = vec![0.0; self.n_nodes];
        op.laplacian(x, &mut out);
        Ok(out)
    }

    /// Dense `L~` for small-graph oracles.
    pub fn dense_laplacian(&self) -> Result<nalgebra::DMatrix<f64>> {
        let inv = self.inv_sqrt_degrees()?;
        let mut m = nalgebra::DMatrix::<f64>::identity(self.n_nodes, self.n_nodes);
        for &(i, j) in &self.edges {
            let w = inv[i] * inv[j];
            m[(i, j)] -= w;
            m[(j, i)] -= w;
        }
        Ok(m)
    }

    /// Number of edges whose endpoints carry different labels.
    pub fn cut_edges(&self, assignment: &[usize], n_parts: usize) -> Result<usize> {
        if assignment.len() != self.n_nodes {
            return Err(Error::Argument(format!(
                "assignment length {} != n_nodes {}",
                assignment.len(),
                self.n_nodes
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&p| p >= n_parts) {
            return Err(Error::Argument(format!("label {bad} not in [0, {n_parts})")));
        }
        Ok(self.edges.iter().filter(|&&(i, j)| assignment[i] != assignment[j]).count())
    }

    /// Edge list text: header `n=<n>` then `i j` per line.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n={}", self.n_nodes)?;
        for &(i, j) in &self.edges {
            writeln!(w, "{i} {j}")?;
        }
        Ok(())
    }

    pub fn read_edge_list<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty edge list".into()))??;
        let n: usize = header
            .trim()
            .strip_prefix("n=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad edge list header {header:?}")))?;
        let mut edges = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(|t| t.parse::<usize>());
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => edges.push((a, b)),
                _ => return Err(Error::Parse(format!("bad edge line {line:?}"))),
            }
        }
        Self::from_edges(n, edges)
    }
}

/// Precomputed `D^{-1/2}` plus adjacency for repeated applications.
pub struct LaplacianOp<'g> {
    g: &'g DependencyGraph,
    inv_sqrt: Vec<f64>,
}

impl<'g> LaplacianOp<'g> {
    pub fn new(g: &'g DependencyGraph) -> Result<Self> {
        Ok(LaplacianOp { g, inv_sqrt: g.inv_sqrt_degrees()? })
    }

    pub fn n(&self) -> usize {
        self.g.n_nodes
    }

    /// `out = D^{-1/2} W D^{-1/2} x`.
    pub fn affinity(&self, x: &[f64], out: &mut [f64]) {
        let g = self.g;
        let s = &self.inv_sqrt;
        let row = |i: usize| -> f64 {
            let acc: f64 = g.neighbors(i).iter().map(|&j| s[j] * x[j]).sum();
            s[i] * acc
        };
        if g.n_nodes >= PAR_THRESHOLD {
            out.par_iter_mut().enumerate().for_each(|(i, o)| *o = row(i));
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                *o = row(i);
            }
        }
    }

    /// `out = (I - D^{-1/2} W D^{-1/2}) x`.
    pub fn laplacian(&self, x: &[f64], out: &mut [f64]) {
        self.affinity(x, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = xi - *o;
        }
    }
}

/// Build the dependency graph of `traj` under `recipe`. Isolated nodes are
/// not an error here; see [`DependencyGraph::isolated_nodes`].
pub fn build_graph(traj: &Trajectory, recipe: &GraphRecipe) -> Result<DependencyGraph> {
    recipe.validate()?;
    let n = traj.n();
    let mut pairs = Vec::new();
    collect_edges(traj, recipe, &mut pairs)?;
    let g = DependencyGraph::from_edges(n, pairs)?;
    let isolated = g.isolated_nodes();
    if g.n_edges() == 0 || !isolated.is_empty() {
        log::warn!("graph {recipe} has {} isolated nodes ({} edges)", isolated.len(), g.n_edges());
    }
    Ok(g)
}

fn collect_edges(traj: &Trajectory, recipe: &GraphRecipe, pairs: &mut Vec<(usize, usize)>) -> Result<()> {
    let n = traj.n();
    match recipe {
        GraphRecipe::TemporalWindow(tau) => {
            for i in 0..n {
                for j in i + 1..(i + tau + 1).min(n) {
                    pairs.push((i, j));
                }
            }
        }
        GraphRecipe::SpatialKnn(k) => {
            let Topology::Lattice2D { side } = traj.topology else {
                return Err(Error::Config("SpatialKnn requires a Lattice2D trajectory".into()));
            };
            for (i, nb) in knn::grid_knn(side, *k).into_iter().enumerate() {
                pairs.extend(nb.into_iter().map(|j| (i, j)));
            }
        }
        GraphRecipe::FeatureKnn(k) => {
            if n < k + 1 {
                return Err(Error::Config(format!("FeatureKnn({k}) needs n >= {}, got {n}", k + 1)));
            }
            for (i, nb) in knn::knn_all(&traj.x, traj.d0(), *k).into_iter().enumerate() {
                pairs.extend(nb.into_iter().map(|j| (i, j)));
            }
        }
        GraphRecipe::Union(parts) => {
            for p in parts {
                collect_edges(traj, p, pairs)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain_sim::{generate, ChainConfig};

    #[test]
    fn temporal_window_examples() {
        let traj = generate(&ChainConfig::ar1(1, 1, 4, 0.0, 1.0, 0)).unwrap();
        let g = build_graph(&traj, &GraphRecipe::TemporalWindow(1)).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(g.degrees(), &[1, 2, 2, 1]);
        assert_eq!(g, DependencyGraph::path(4));
        let traj = generate(&ChainConfig::ar1(1, 1, 5, 0.0, 1.0, 0)).unwrap();
        let g = build_graph(&traj, &GraphRecipe::TemporalWindow(2)).unwrap();
        assert_eq!(g.n_edges(), 7);
    }

    #[test]
    fn null_vector_and_hand_matvec() {
        let g = DependencyGraph::path(4);
        let out = g.normalized_laplacian_matvec(&g.sqrt_degrees()).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
        let out = g.normalized_laplacian_matvec(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let want = [1.0, -1.0 / 2f64.sqrt(), 0.0, 0.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        let dense = g.dense_laplacian().unwrap();
        assert!((dense[(0, 1)] + 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_degree_is_rejected() {
        let g = DependencyGraph::from_edges(3, [(0, 1)]).unwrap();
        assert_eq!(g.isolated_nodes(), vec![2]);
        assert!(matches!(g.normalized_laplacian_matvec(&[0.0; 3]), Err(Error::ZeroDegree(2))));
        assert!(g.require_connected().is_err());
    }

    #[test]
    fn cut_edge_examples() {
        let g = DependencyGraph::path(4);
        assert_eq!(g.cut_edges(&[0, 0, 0, 0], 1).unwrap(), 0);
        assert_eq!(g.cut_edges(&[0, 0, 1, 1], 2).unwrap(), 1);
        assert!(g.cut_edges(&[0, 0, 2, 1], 2).is_err());
        let g = DependencyGraph::path(100);
        for p in [1usize, 2, 4, 7, 10] {
            let labels: Vec<usize> = (0..100).map(|i| i * p / 100).collect();
            assert_eq!(g.cut_edges(&labels, p).unwrap(), p - 1);
        }
    }

    #[test]
    fn edge_list_roundtrip_and_recipe_parse() {
        let g = DependencyGraph::grid(4);
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        assert!(buf.starts_with(b"n=16\n"));
        assert_eq!(DependencyGraph::read_edge_list(&buf[..]).unwrap(), g);
        let r: GraphRecipe = "window:1+feature:5".parse().unwrap();
        assert_eq!(r, GraphRecipe::Union(vec![GraphRecipe::TemporalWindow(1), GraphRecipe::FeatureKnn(5)]));
        assert_eq!(r.to_string(), "window:1+feature:5");
        assert!("feature:0".parse::<GraphRecipe>().is_err());
    }

    #[test]
    fn spatial_knn_on_lattice() {
        let traj = generate(&ChainConfig::lattice(2, 1, 5, 0.0, 1.0, 0)).unwrap();
        let g = build_graph(&traj, &GraphRecipe::SpatialKnn(4)).unwrap();
        // Interior cells keep their 4 lattice neighbors.
        assert_eq!(g.neighbors(12), &[7, 11, 13, 17]);
        let path = generate(&ChainConfig::ar1(2, 1, 25, 0.0, 1.0, 0)).unwrap();
        assert!(build_graph(&path, &GraphRecipe::SpatialKnn(4)).is_err());
    }
}
