//! Synthetic dependent datasets.
//!
//! The Gaussian AR(1) witness: a latent process
//! `xi_t = lambda * xi_{t-1} + sqrt(1 - lambda^2) * W_t` with
//! `lambda = 1 - 1/t_mix`, features `X_t = mu_v + drift_t + xi_t` and labels
//! `Y_t = sign(<v, X_t> + eta_t)`. A separable 2D lattice field with the same
//! per-axis coefficient provides the spatial analog.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::stats::{sign, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Topology {
    Path1D,
    Lattice2D { side: usize },
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Path1D => write!(f, "path"),
            Topology::Lattice2D { side } => write!(f, "lattice:{side}"),
        }
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "path" {
            return Ok(Topology::Path1D);
        }
        if let Some(side) = s.strip_prefix("lattice:") {
            let side = side
                .parse()
                .map_err(|_| Error::Parse(format!("bad lattice side in {s:?}")))?;
            return Ok(Topology::Lattice2D { side });
        }
        Err(Error::Parse(format!("unknown topology {s:?}")))
    }
}

/// Parameters of a dependent process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub t_mix: u32,
    pub d0: usize,
    pub n: usize,
    pub delta: f64,
    pub v: Vec<i8>,
    pub eta_std: f64,
    pub drift_nu: f64,
    pub topology: Topology,
    pub seed: u64,
}

impl ChainConfig {
    /// Stationary path witness with `v = (1, ..., 1)`.
    pub fn ar1(t_mix: u32, d0: usize, n: usize, delta: f64, eta_std: f64, seed: u64) -> Self {
        Self {
            t_mix,
            d0,
            n,
            delta,
            v: vec![1; d0],
            eta_std,
            drift_nu: 0.0,
            topology: Topology::Path1D,
            seed,
        }
    }

    pub fn lattice(t_mix: u32, d0: usize, side: usize, delta: f64, eta_std: f64, seed: u64) -> Self {
        Self {
            topology: Topology::Lattice2D { side },
            ..Self::ar1(t_mix, d0, side * side, delta, eta_std, seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_mix < 1 {
            return Err(Error::Config("t_mix must be >= 1".into()));
        }
        if self.n < 2 {
            return Err(Error::Config(format!("n must be >= 2, got {}", self.n)));
        }
        if self.d0 < 1 {
            return Err(Error::Config("d0 must be >= 1".into()));
        }
        if !(self.eta_std > 0.0) {
            return Err(Error::Config(format!("eta_std must be > 0, got {}", self.eta_std)));
        }
        if !(self.delta >= 0.0) || !(self.drift_nu >= 0.0) {
            return Err(Error::Config("delta and drift_nu must be nonnegative".into()));
        }
        if self.v.len() != self.d0 || self.v.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Config("v must be a sign vector of length d0".into()));
        }
        if let Topology::Lattice2D { side } = self.topology {
            if side * side != self.n {
                return Err(Error::Config(format!(
                    "lattice side {side} does not match n = {} (side^2 = {})",
                    self.n,
                    side * side
                )));
            }
        }
        Ok(())
    }

    /// Autoregression coefficient `1 - 1/t_mix`.
    pub fn lambda(&self) -> f64 {
        1.0 - 1.0 / self.t_mix as f64
    }

    /// Mean shift `delta * v / ||v||`.
    pub fn mu_v(&self) -> Vec<f64> {
        let scale = self.delta / (self.d0 as f64).sqrt();
        self.v.iter().map(|&s| scale * s as f64).collect()
    }

    /// Per-coordinate drift added at step `t`.
    pub fn drift_at(&self, t: usize) -> f64 {
        self.drift_nu / self.n as f64 * t as f64
    }

    /// True when two configurations describe the same data law (seed, length
    /// and topology are ignored).
    pub fn same_law(&self, other: &ChainConfig) -> bool {
        self.t_mix == other.t_mix
            && self.d0 == other.d0
            && self.delta == other.delta
            && self.v == other.v
            && self.eta_std == other.eta_std
            && self.drift_nu == other.drift_nu
    }

    /// Flat `key=value` representation, one key per line, sorted.
    pub fn to_kv(&self) -> String {
        let v: Vec<String> = self.v.iter().map(|s| s.to_string()).collect();
        let mut out = String::new();
        for (k, val) in [
            ("d0", self.d0.to_string()),
            ("delta", format!("{:?}", self.delta)),
            ("drift_nu", format!("{:?}", self.drift_nu)),
            ("eta_std", format!("{:?}", self.eta_std)),
            ("n", self.n.to_string()),
            ("seed", self.seed.to_string()),
            ("t_mix", self.t_mix.to_string()),
            ("topology", self.topology.to_string()),
            ("v", v.join(",")),
        ] {
            out.push_str(k);
            out.push('=');
            out.push_str(&val);
            out.push('\n');
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            map.get(key)
                .ok_or_else(|| Error::Parse(format!("missing key {key}")))?
                .parse()
                .map_err(|_| Error::Parse(format!("bad value for {key}")))
        }
        let v = map
            .get("v")
            .ok_or_else(|| Error::Parse("missing key v".into()))?
            .split(',')
            .map(|s| s.trim().parse::<i8>().map_err(|_| Error::Parse("bad sign in v".into())))
            .collect::<Result<Vec<_>>>()?;
        let cfg = ChainConfig {
            t_mix: get(&map, "t_mix")?,
            d0: get(&map, "d0")?,
            n: get(&map, "n")?,
            delta: get(&map, "delta")?,
            v,
            eta_std: get(&map, "eta_std")?,
            drift_nu: get(&map, "drift_nu")?,
            topology: map
                .get("topology")
                .ok_or_else(|| Error::Parse("missing key topology".into()))?
                .parse()?,
            seed: get(&map, "seed")?,
        };
        Ok(cfg)
    }
}

/// Realized samples of a dependent process.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Row-major `n x d0` features.
    pub x: Vec<f64>,
    pub y: Vec<i8>,
    pub config: ChainConfig,
    pub topology: Topology,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d0(&self) -> usize {
        self.config.d0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d0();
        &self.x[i * d..(i + 1) * d]
    }

    /// Latent noise `xi_t = X_t - mu_v - drift_t`, row-major.
    pub fn latent(&self) -> Vec<f64> {
        let d = self.d0();
        let mu = self.config.mu_v();
        let mut out = self.x.clone();
        for t in 0..self.n() {
            let drift = self.config.drift_at(t);
            for j in 0..d {
                out[t * d + j] -= mu[j] + drift;
            }
        }
        out
    }

    /// Latent coordinate `j` as a series.
    pub fn latent_coord(&self, j: usize) -> Vec<f64> {
        let d = self.d0();
        self.latent().iter().skip(j).step_by(d).copied().collect()
    }

    /// First `n` samples of a path trajectory.
    pub fn prefix(&self, n: usize) -> Result<Trajectory> {
        if !matches!(self.topology, Topology::Path1D) || n < 2 || n > self.n() {
            return Err(Error::Argument(format!("prefix of length {n} is not defined here")));
        }
        let d = self.d0();
        Ok(Trajectory {
            x: self.x[..n * d].to_vec(),
            y: self.y[..n].to_vec(),
            config: ChainConfig { n, ..self.config.clone() },
            topology: self.topology,
        })
    }

    /// Lattice cell of row-major index `i`.
    pub fn cell(&self, i: usize) -> Option<(usize, usize)> {
        match self.topology {
            Topology::Path1D => None,
            Topology::Lattice2D { side } if i < self.n() => Some((i / side, i % side)),
            Topology::Lattice2D { .. } => None,
        }
    }

    const MAGIC: &'static [u8; 8] = b"SRTRAJ1\n";

    /// Columnar binary: magic, u32 header length, key-value config header,
    /// u64 n, u64 d0, little-endian f64 features, i8 labels.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let header = self.config.to_kv();
        w.write_all(Self::MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        w.write_all(&(self.d0() as u64).to_le_bytes())?;
        for v in &self.x {
            w.write_all(&v.to_le_bytes())?;
        }
        let labels: Vec<u8> = self.y.iter().map(|&s| s as u8).collect();
        w.write_all(&labels)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Parse("not a trajectory file".into()));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let config = ChainConfig::from_kv(
            std::str::from_utf8(&header).map_err(|e| Error::Parse(e.to_string()))?,
        )?;
        let n = read_u64(&mut r)? as usize;
        let d0 = read_u64(&mut r)? as usize;
        if d0 != config.d0 {
            return Err(Error::Parse("header d0 disagrees with body".into()));
        }
        let mut buf = vec![0u8; n * d0 * 8];
        r.read_exact(&mut buf)?;
        let x = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut labels = vec![0u8; n];
        r.read_exact(&mut labels)?;
        let y = labels.into_iter().map(|b| b as i8).collect();
        Ok(Trajectory {
            x,
            y,
            topology: config.topology,
            config,
        })
    }

    /// CSV with columns `index,x0..x{d0-1},y`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (0..self.d0()).map(|j| format!("x{j}")).collect();
        writeln!(w, "index,{},y", cols.join(","))?;
        for i in 0..self.n() {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{i},{},{}", row.join(","), self.y[i])?;
        }
        Ok(())
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn label(v: &[i8], x: &[f64], noise: f64) -> i8 {
    let score: f64 = v.iter().zip(x).map(|(&s, &xi)| s as f64 * xi).sum();
    sign(score + noise)
}

/// Finish a trajectory from its latent field (row-major `n x d0`).
fn observe(config: &ChainConfig, latent: Vec<f64>) -> Trajectory {
    let d = config.d0;
    let mu = config.mu_v();
    let mut noise_rng = rng::stream(config.seed, tag::NOISE);
    let mut x = latent;
    let mut y = Vec::with_capacity(config.n);
    for t in 0..config.n {
        let drift = config.drift_at(t);
        let row = &mut x[t * d..(t + 1) * d];
        for (xi, m) in row.iter_mut().zip(&mu) {
            *xi += m + drift;
        }
        let eta: f64 = noise_rng.sample::<f64, _>(StandardNormal) * config.eta_std;
        y.push(label(&config.v, row, eta));
    }
    Trajectory {
        x,
        y,
        topology: config.topology,
        config: config.clone(),
    }
}

/// Sample the AR(1) witness along a path.
pub fn generate_ar1(config: &ChainConfig) -> Result<Trajectory> {
    config.validate()?;
    if config.topology != Topology::Path1D {
        return Err(Error::Config("generate_ar1 requires Path1D topology".into()));
    }
    let (n, d) = (config.n, config.d0);
    let lambda = config.lambda();
    let innov = (1.0 - lambda * lambda).sqrt();
    let mut rng = rng::stream(config.seed, tag::CHAIN);
    let mut xi = vec![0.0; n * d];
    for j in 0..d {
        xi[j] = rng.sample(StandardNormal);
    }
    for t in 1..n {
        for j in 0..d {
            let w: f64 = rng.sample(StandardNormal);
            xi[t * d + j] = lambda * xi[(t - 1) * d + j] + innov * w;
        }
    }
    Ok(observe(config, xi))
}

/// Sample a separable Gauss-Markov field on a `side x side` grid: an AR(1)
/// filter along rows followed by one along columns, so that
/// `Cov(z[r,c], z[r',c']) = lambda^|r-r'| * lambda^|c-c'|`.
pub fn generate_lattice(config: &ChainConfig) -> Result<Trajectory> {
    config.validate()?;
    let Topology::Lattice2D { side } = config.topology else {
        return Err(Error::Config("generate_lattice requires Lattice2D topology".into()));
    };
    let d = config.d0;
    let lambda = config.lambda();
    let innov = (1.0 - lambda * lambda).sqrt();
    let mut rng = rng::stream(config.seed, tag::CHAIN);
    let mut xi = vec![0.0; config.n * d];
    let mut field = vec![0.0; config.n];
    for j in 0..d {
        for z in field.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        for r in 0..side {
            for c in 1..side {
                let i = r * side + c;
                field[i] = lambda * field[i - 1] + innov * field[i];
            }
        }
        for r in 1..side {
            for c in 0..side {
                let i = r * side + c;
                field[i] = lambda * field[i - side] + innov * field[i];
            }
        }
        for (i, z) in field.iter().enumerate() {
            xi[i * d + j] = *z;
        }
    }
    Ok(observe(config, xi))
}

/// Dispatch on the configured topology.
pub fn generate(config: &ChainConfig) -> Result<Trajectory> {
    match config.topology {
        Topology::Path1D => generate_ar1(config),
        Topology::Lattice2D { .. } => generate_lattice(config),
    }
}

/// Independent draws from the stationary law, for held-out evaluation.
/// The returned trajectory carries `config` with `n = n_eval` and `seed`.
pub fn draw_stationary(config: &ChainConfig, n_eval: usize, seed: u64) -> Result<Trajectory> {
    let eval_cfg = ChainConfig {
        n: n_eval,
        seed,
        drift_nu: config.drift_nu,
        topology: Topology::Path1D,
        ..config.clone()
    };
    eval_cfg.validate()?;
    let d = config.d0;
    let mu = config.mu_v();
    let mut rng = rng::stream(seed, tag::EVAL);
    let mut x = vec![0.0; n_eval * d];
    let mut y = Vec::with_capacity(n_eval);
    for t in 0..n_eval {
        let row = &mut x[t * d..(t + 1) * d];
        for (xi, m) in row.iter_mut().zip(&mu) {
            *xi = m + rng.sample::<f64, _>(StandardNormal);
        }
        let eta: f64 = rng.sample::<f64, _>(StandardNormal) * config.eta_std;
        y.push(label(&config.v, row, eta));
    }
    Ok(Trajectory {
        x,
        y,
        topology: Topology::Path1D,
        config: eval_cfg,
    })
}

/// Monte-Carlo Bayes risk `Pr[sign(<v,X> + eta) != sign(<v,X>)]` under the
/// stationary law, with its binomial standard error.
pub fn bayes_risk_oracle(config: &ChainConfig, mc_draws: usize) -> Result<Estimate> {
    config.validate()?;
    if mc_draws < 10_000 {
        return Err(Error::Argument(format!("mc_draws must be >= 1e4, got {mc_draws}")));
    }
    let mu = config.mu_v();
    let mut rng = rng::stream(config.seed, tag::BAYES);
    let mut errors = 0u64;
    for _ in 0..mc_draws {
        let mut score = 0.0;
        for (&s, &m) in config.v.iter().zip(&mu) {
            let x = m + rng.sample::<f64, _>(StandardNormal);
            score += s as f64 * x;
        }
        let eta: f64 = rng.sample::<f64, _>(StandardNormal) * config.eta_std;
        if sign(score + eta) != sign(score) {
            errors += 1;
        }
    }
    let p = errors as f64 / mc_draws as f64;
    Ok(Estimate::new(p, (p * (1.0 - p) / mc_draws as f64).sqrt()))
}
