//! Experiment presets, resolved configuration, seed-level CSV output and
//! row verification.
//!
//! A preset is a flat key-value file. Resolution applies environment
//! overrides (`SPECROUTE_<KEY>`), then explicit overrides, then replaces
//! `c = "auto"` by a stored or freshly calibrated constant. The resolved map
//! is written next to the results and hashed; every CSV row carries the
//! preset name and that hash, plus the `(cell, seed)` pair that reproduces it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::chain_sim::{generate, ChainConfig};
use crate::depgraph::{build_graph, GraphRecipe};
use crate::ensemble::{BaseLearnerSpec, EnsembleModel};
use crate::error::{Error, Result};
use crate::metrics::{pairwise_cov_from_margins, rate_slope, run_seed, CovMode, EvalSet};
use crate::pipeline::{FitContext, GapCache, RoutingConfig, SchemeSpec};
use crate::replay::{calibrate_route_c, replay_seed, ReplayConfig, ReplayScheme, ReplaySeedRow, ReplayStats};
use crate::resampling::RoutedSize;
use crate::rng;
use crate::spectral::{effective_rank, estimate_gap, landmark_budget, nystrom_fiedler, FiedlerOptions, Method, SplitRule};
use crate::stats::{linear_fit, mean, mean_and_se};
use crate::theory::{kl_trajectory_closed, KlSpec};

pub type Kv = BTreeMap<String, String>;

pub const ENV_PREFIX: &str = "SPECROUTE_";
pub const PARTIAL_MARKER: &str = "PARTIAL";
pub const STORE_FILE: &str = "calibration.toml";

const PRESETS: &[(&str, &str)] = &[
    ("rates-ar1", include_str!("../presets/rates-ar1.toml")),
    ("rates-slow", include_str!("../presets/rates-slow.toml")),
    ("covariance", include_str!("../presets/covariance.toml")),
    ("ablate-p", include_str!("../presets/ablate-p.toml")),
    ("lattice", include_str!("../presets/lattice.toml")),
    ("reff", include_str!("../presets/reff.toml")),
    ("nystrom", include_str!("../presets/nystrom.toml")),
    ("concentration", include_str!("../presets/concentration.toml")),
    ("replay", include_str!("../presets/replay.toml")),
    ("kl-grid", include_str!("../presets/kl-grid.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

pub fn is_preset(name: &str) -> bool {
    PRESETS.iter().any(|p| p.0 == name)
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|p| p.0 == name)
        .map(|p| p.1)
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?}; available: {}", preset_names().join(", "))))
}

/// First comment line of the preset file.
pub fn preset_description(name: &str) -> Option<&'static str> {
    preset_text(name).ok()?.lines().find_map(|l| l.strip_prefix("# "))
}

pub fn parse_kv(text: &str) -> Result<Kv> {
    let table: toml::Table = text.parse().map_err(|e| Error::Parse(format!("config: {e}")))?;
    table.into_iter().map(|(k, v)| Ok((k, value_string(&v)?))).collect()
}

fn value_string(v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(a) => a.iter().map(value_string).collect::<Result<Vec<_>>>()?.join(","),
        other => return Err(Error::Parse(format!("nested value {other} in a flat config"))),
    })
}

/// One `key = "value"` line per entry, sorted by key.
pub fn format_kv(kv: &Kv) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {}\n", toml::Value::String(v.clone()))).collect()
}

/// Hex prefix of the SHA-256 of [`format_kv`].
pub fn config_hash(kv: &Kv) -> String {
    let digest = Sha256::digest(format_kv(kv).as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Preset defaults, then environment, then explicit overrides. Overrides of
/// keys the preset does not define are rejected; unknown environment keys
/// are ignored.
pub fn resolve_config(name: &str, overrides: &Kv, env: impl IntoIterator<Item = (String, String)>) -> Result<Kv> {
    let mut kv = parse_kv(preset_text(name)?)?;
    for (k, v) in env {
        let Some(key) = k.strip_prefix(ENV_PREFIX) else { continue };
        let key = key.to_ascii_lowercase();
        if kv.contains_key(&key) {
            log::info!("{name}: {key} = {v:?} from environment");
            kv.insert(key, v);
        }
    }
    for (k, v) in overrides {
        if !kv.contains_key(k) {
            return Err(Error::Config(format!("preset {name} has no key {k:?}")));
        }
        kv.insert(k.clone(), v.clone());
    }
    kv.insert("preset".into(), name.into());
    Ok(kv)
}

struct Keys<'a>(&'a Kv);

impl Keys<'_> {
    fn str(&self, k: &str) -> Result<&str> {
        self.0.get(k).map(String::as_str).ok_or_else(|| Error::Config(format!("missing key {k:?}")))
    }

    fn get<T: FromStr>(&self, k: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let s = self.str(k)?;
        s.trim().parse().map_err(|e| Error::Config(format!("key {k} = {s:?}: {e}")))
    }

    fn list<T: FromStr>(&self, k: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let s = self.str(k)?;
        let out = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|e| Error::Config(format!("key {k} item {p:?}: {e}"))))
            .collect::<Result<Vec<T>>>()?;
        if out.is_empty() {
            return Err(Error::Config(format!("key {k} is empty")));
        }
        Ok(out)
    }
}

/// Persistent key-value store for calibrated constants.
#[derive(Debug, Clone)]
pub struct ConfigStore {
    path: PathBuf,
    kv: Kv,
}

impl ConfigStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(STORE_FILE);
        let kv = if path.exists() { parse_kv(&fs::read_to_string(&path)?)? } else { Kv::new() };
        Ok(ConfigStore { path, kv })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.kv.get(key).map(String::as_str)
    }

    pub fn put(&mut self, key: &str, value: &str) -> Result<()> {
        self.kv.insert(key.into(), value.into());
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        write_atomic(&self.path, format_kv(&self.kv).as_bytes())
    }
}

/// Temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Ordered `(column, value)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Row(pub Vec<(String, String)>);

impl Row {
    pub fn push(&mut self, k: &str, v: impl Display) -> &mut Self {
        self.0.push((k.into(), v.to_string()));
        self
    }

    fn with(mut self, k: &str, v: impl Display) -> Self {
        self.push(k, v);
        self
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.iter().find(|(c, _)| c == k).map(|(_, v)| v.as_str())
    }

    pub fn f64(&self, k: &str) -> Option<f64> {
        self.get(k)?.parse().ok()
    }

    fn list_f64(&self, k: &str) -> Vec<f64> {
        self.get(k).unwrap_or("").split(';').filter(|s| !s.is_empty()).filter_map(|s| s.parse().ok()).collect()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn joined<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_csv(path: &Path, rows: &[Row]) -> Result<()> {
    let mut out = String::new();
    if let Some(first) = rows.first() {
        out.push_str(&first.0.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    for r in rows {
        if r.0.iter().any(|(_, v)| v.contains(',') || v.contains('\n')) {
            return Err(Error::Data("CSV value contains a separator".into()));
        }
        out.push_str(&r.0.iter().map(|(_, v)| v.as_str()).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_csv(path: &Path) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let Some(header) = lines.next() else { return Ok(Vec::new()) };
    let cols: Vec<&str> = header.split(',').collect();
    lines
        .map(|l| {
            let vals: Vec<&str> = l.split(',').collect();
            if vals.len() != cols.len() {
                return Err(Error::Parse(format!("{}: row has {} fields, header {}", path.display(), vals.len(), cols.len())));
            }
            Ok(Row(cols.iter().zip(vals).map(|(c, v)| (c.to_string(), v.to_string())).collect()))
        })
        .collect()
}

/// Aligned plain-text table of the given columns.
pub fn render_table(rows: &[Row], skip: &[&str]) -> String {
    let Some(first) = rows.first() else { return String::new() };
    let cols: Vec<&str> = first.0.iter().map(|(k, _)| k.as_str()).filter(|k| !skip.contains(k)).collect();
    let cell = |r: &Row, c: &str| {
        let v = r.get(c).unwrap_or("");
        match v.parse::<f64>() {
            Ok(x) if v.contains('.') || v.contains('e') => format!("{x:.4e}"),
            _ => v.to_string(),
        }
    };
    let widths: Vec<usize> =
        cols.iter().map(|c| rows.iter().map(|r| cell(r, c).len()).max().unwrap_or(0).max(c.len())).collect();
    let mut out = String::new();
    let line = |vals: Vec<String>| {
        vals.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}", w = *w)).collect::<Vec<_>>().join("  ") + "\n"
    };
    out.push_str(&line(cols.iter().map(|c| c.to_string()).collect()));
    for r in rows {
        out.push_str(&line(cols.iter().map(|c| cell(r, c)).collect()));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub c: f64,
    pub t_mix: u32,
    /// Mean estimated gap at each probed mixing time, ascending in `t_mix`.
    pub response: Vec<(u32, f64)>,
    pub monotone: bool,
}

/// Fits `c = t_mix_known * mean(lambda2_hat)` on fresh witnesses shaped like
/// `template`, so that `ceil(c / lambda2_hat)` lands near `t_mix_known`. The
/// gap is also probed at `t/4` and `t/2`; a response that does not decrease
/// with `t_mix` is reported and logged as a warning.
pub fn calibrate_c(t_mix_known: u32, template: &ChainConfig, routing: &RoutingConfig, n_seeds: usize) -> Result<Calibration> {
    if t_mix_known < 1 || n_seeds < 1 {
        return Err(Error::Argument("calibration needs t_mix >= 1 and at least one seed".into()));
    }
    let mut ts: Vec<u32> = vec![(t_mix_known / 4).max(1), (t_mix_known / 2).max(1), t_mix_known];
    ts.dedup();
    let response = ts
        .iter()
        .map(|&t| {
            let cfg = ChainConfig { t_mix: t, ..template.clone() };
            let lambdas = (0..n_seeds as u64)
                .into_par_iter()
                .map(|s| {
                    let traj = generate(&cfg.with_seed(rng::split(template.seed, 7000 + s)))?;
                    Ok(GapCache::new().get_or_compute(&traj, routing, rng::split(template.seed, 7500 + s))?.0)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((t, mean(&lambdas)))
        })
        .collect::<Result<Vec<_>>>()?;
    let monotone = response.windows(2).all(|w| w[1].1 < w[0].1);
    if !monotone {
        log::warn!("calibration: estimated gap does not decrease with t_mix: {response:?}");
    }
    let lambda = response.last().unwrap().1;
    Ok(Calibration { c: t_mix_known as f64 * lambda, t_mix: t_mix_known, response, monotone })
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn chain_base(kv: &Kv, t_mix: u32, seed: u64) -> Result<ChainConfig> {
    let k = Keys(kv);
    let (d0, delta, eta) = (k.get("d0")?, k.get("delta")?, k.get("eta_std")?);
    Ok(match k.str("topology")? {
        "path" => ChainConfig::ar1(t_mix, d0, k.get("n")?, delta, eta, seed),
        "lattice" => ChainConfig::lattice(t_mix, d0, k.get("side")?, delta, eta, seed),
        other => return Err(Error::Config(format!("unknown topology {other:?}"))),
    })
}

fn routing_from(kv: &Kv, c: f64) -> Result<RoutingConfig> {
    let k = Keys(kv);
    let part = k.str("part_graph")?;
    Ok(RoutingConfig {
        c,
        method: k.get("method")?,
        gap_graph: k.get("gap_graph")?,
        part_graph: if part == "auto" { None } else { Some(part.parse()?) },
        size: match k.str("routed_size")? {
            "subsample" => RoutedSize::Subsample,
            "partition" => RoutedSize::Partition,
            other => return Err(Error::Config(format!("unknown routed_size {other:?}"))),
        },
        rule: match k.str("split_rule")? {
            "balanced" => SplitRule::Balanced,
            "sign" => SplitRule::Sign,
            other => return Err(Error::Config(format!("unknown split_rule {other:?}"))),
        },
    })
}

fn replay_base(kv: &Kv, t_mix: u32, seed: u64, c: f64) -> Result<ReplayConfig> {
    let k = Keys(kv);
    let mut cfg = ReplayConfig::new(k.get("n")?, t_mix, k.get("m")?, seed);
    cfg.method = k.get("method")?;
    cfg.knn_k = k.get("knn_k")?;
    cfg.route_c = c;
    Ok(cfg)
}

/// Store key identifying a calibration problem.
pub fn calibration_key(kv: &Kv) -> Result<String> {
    let k = Keys(kv);
    let base = match k.str("kind")? {
        "chain" => format!(
            "chain {} n{} side{} t{} {} {} d{} delta{} eta{} s{}",
            k.str("topology")?,
            kv.get("n").map(String::as_str).unwrap_or("-"),
            kv.get("side").map(String::as_str).unwrap_or("-"),
            k.str("calibrate_t")?,
            k.str("gap_graph")?,
            k.str("method")?,
            k.str("d0")?,
            k.str("delta")?,
            k.str("eta_std")?,
            k.str("calibrate_seeds")?,
        ),
        "replay" => format!(
            "replay n{} m{} t{} {} k{} s{}",
            k.str("n")?,
            k.str("m")?,
            k.str("calibrate_t")?,
            k.str("method")?,
            k.str("knn_k")?,
            k.str("calibrate_seeds")?,
        ),
        other => return Err(Error::Config(format!("preset kind {other:?} has no routing constant"))),
    };
    Ok(sanitize(&base))
}

/// Calibration seeds are fixed so a given key always refits the same value.
const CALIBRATION_SEED: u64 = 0xca1b;

/// Runs the calibration described by a resolved preset config.
pub fn calibrate_config(kv: &Kv) -> Result<Calibration> {
    let k = Keys(kv);
    let t: u32 = k.get("calibrate_t")?;
    let seeds: usize = k.get("calibrate_seeds")?;
    match k.str("kind")? {
        "chain" => {
            let template = chain_base(kv, t, CALIBRATION_SEED)?;
            calibrate_c(t, &template, &routing_from(kv, 1.0)?, seeds)
        }
        "replay" => {
            let cfg = replay_base(kv, t, CALIBRATION_SEED, 1.0)?;
            let c = calibrate_route_c(&cfg, seeds)?;
            Ok(Calibration { c, t_mix: t, response: vec![(t, c / t as f64)], monotone: true })
        }
        other => Err(Error::Config(format!("preset kind {other:?} has no routing constant"))),
    }
}

/// Replaces `c = "auto"` by the stored constant, calibrating and storing it
/// first when absent.
pub fn resolve_auto(kv: &mut Kv, store: &mut ConfigStore) -> Result<()> {
    if kv.get("c").map(String::as_str) != Some("auto") {
        return Ok(());
    }
    let key = calibration_key(kv)?;
    let c = match store.get(&key) {
        Some(v) => {
            log::info!("c = {v} from the calibration store ({key})");
            v.to_string()
        }
        None => {
            let cal = calibrate_config(kv)?;
            log::info!("calibrated c = {} at t_mix = {} (response {:?})", cal.c, cal.t_mix, cal.response);
            let v = cal.c.to_string();
            store.put(&key, &v)?;
            v
        }
    };
    kv.insert("c".into(), c);
    Ok(())
}

struct ChainPlan {
    schemes: Vec<SchemeSpec>,
    configs: Vec<ChainConfig>,
    evals: Vec<EvalSet>,
    ctx: FitContext,
    mode: CovMode,
}

struct ScanPlan {
    cells: Vec<(usize, u32)>,
    ns: Vec<usize>,
    kv: Kv,
}

struct ReplayPlan {
    cells: Vec<(usize, ReplayScheme)>,
    configs: Vec<ReplayConfig>,
}

enum Body {
    Chain(ChainPlan),
    Reff(ScanPlan),
    Nystrom(ScanPlan),
    Concentration(ScanPlan),
    Replay(ReplayPlan),
    KlGrid(ScanPlan),
}

/// A resolved preset ready to run unit by unit.
pub struct Plan {
    pub name: String,
    pub kv: Kv,
    pub hash: String,
    pub seeds: usize,
    master: u64,
    body: Body,
}

impl Plan {
    /// Builds cells from a fully resolved config (`c` must be numeric).
    pub fn new(kv: Kv) -> Result<Self> {
        let k = Keys(&kv);
        let name = k.str("preset")?.to_string();
        let seeds: usize = k.get("seeds")?;
        let master: u64 = k.get("seed")?;
        if seeds < 1 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        let body = match k.str("kind")? {
            "chain" => {
                let ts: Vec<u32> = k.list("t_mix")?;
                let c: f64 = k.get("c")?;
                let configs = ts
                    .iter()
                    .map(|&t| {
                        let cfg = chain_base(&kv, t, rng::split(master, t as u64))?;
                        cfg.validate()?;
                        Ok(cfg)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (n_eval, mc): (usize, usize) = (k.get("n_eval")?, k.get("mc_draws")?);
                let evals = configs.par_iter().map(|c| EvalSet::new(c, n_eval, mc)).collect::<Result<Vec<_>>>()?;
                let learner: BaseLearnerSpec = k.get("learner")?;
                let mut ctx = FitContext::new(k.get("m")?, learner);
                ctx.routing = routing_from(&kv, c)?;
                let mode = match k.str("cov_mode")? {
                    "joint" => CovMode::Joint,
                    "conditional" => CovMode::ChainConditional,
                    other => return Err(Error::Config(format!("unknown cov_mode {other:?}"))),
                };
                Body::Chain(ChainPlan { schemes: k.list("schemes")?, configs, evals, ctx, mode })
            }
            "replay" => {
                let ts: Vec<u32> = k.list("t_mix")?;
                let schemes: Vec<ReplayScheme> = k.list("schemes")?;
                let c: f64 = k.get("c")?;
                let configs = ts
                    .iter()
                    .map(|&t| {
                        let cfg = replay_base(&kv, t, rng::split(master, t as u64), c)?;
                        cfg.validate()?;
                        Ok(cfg)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let cells = (0..ts.len()).flat_map(|i| schemes.iter().map(move |&s| (i, s))).collect();
                Body::Replay(ReplayPlan { cells, configs })
            }
            kind @ ("reff" | "nystrom" | "kl-grid") => {
                let ns: Vec<usize> = k.list("n")?;
                let ts: Vec<u32> = k.list("t_mix")?;
                let cells = ns.iter().flat_map(|&n| ts.iter().map(move |&t| (n, t))).collect();
                let scan = ScanPlan { cells, ns, kv: kv.clone() };
                match kind {
                    "reff" => Body::Reff(scan),
                    "nystrom" => Body::Nystrom(scan),
                    _ => Body::KlGrid(scan),
                }
            }
            "concentration" => {
                let ns: Vec<usize> = k.list("n")?;
                let n_ref: usize = k.get("n_ref")?;
                if ns.iter().any(|&n| n < 2 || n > n_ref) {
                    return Err(Error::Config(format!("every n must lie in [2, n_ref = {n_ref}]")));
                }
                let ts: Vec<u32> = k.list("t_mix")?;
                let cells = ts.iter().map(|&t| (n_ref, t)).collect();
                Body::Concentration(ScanPlan { cells, ns, kv: kv.clone() })
            }
            other => return Err(Error::Config(format!("unknown preset kind {other:?}"))),
        };
        let hash = config_hash(&kv);
        Ok(Plan { name, kv, hash, seeds, master, body })
    }

    pub fn n_cells(&self) -> usize {
        match &self.body {
            Body::Chain(p) => p.configs.len() * p.schemes.len(),
            Body::Replay(p) => p.cells.len(),
            Body::Reff(p) | Body::Nystrom(p) | Body::Concentration(p) | Body::KlGrid(p) => p.cells.len(),
        }
    }

    pub fn units(&self) -> Vec<(usize, u64)> {
        let seeds = if matches!(self.body, Body::KlGrid(_)) { 1 } else { self.seeds as u64 };
        (0..self.n_cells()).flat_map(|c| (0..seeds).map(move |s| (c, s))).collect()
    }

    /// Rows of one `(cell, seed)` unit, each tagged with the preset, the
    /// config hash, the unit and its position within the unit.
    pub fn run_unit(&self, cell: usize, seed: u64) -> Result<Vec<Row>> {
        if cell >= self.n_cells() {
            return Err(Error::Argument(format!("cell {cell} out of range")));
        }
        let rows = match &self.body {
            Body::Chain(p) => vec![chain_unit(p, cell, seed)?],
            Body::Replay(p) => {
                let (ti, scheme) = p.cells[cell];
                let cfg = &p.configs[ti];
                let r = replay_seed(cfg, scheme, seed)?;
                vec![Row::default()
                    .with("t_mix", cfg.t_mix)
                    .with("scheme", scheme)
                    .with("target_var", r.target_var)
                    .with("p_hats", joined(&r.p_hats))
                    .with("wbar", joined(&r.wbar))]
            }
            Body::Reff(p) => vec![reff_unit(p, self.master, cell, seed)?],
            Body::Nystrom(p) => vec![nystrom_unit(p, self.master, cell, seed)?],
            Body::Concentration(p) => concentration_unit(p, self.master, cell, seed)?,
            Body::KlGrid(p) => {
                let (n, t) = p.cells[cell];
                let lambda = 1.0 - 1.0 / t as f64;
                let kl = kl_trajectory_closed(&KlSpec::new(n, lambda, vec![1.0]))?;
                vec![Row::default().with("n", n).with("t_mix", t).with("lambda", lambda).with("kl", kl)]
            }
        };
        Ok(rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut head = Row::default()
                    .with("preset", &self.name)
                    .with("config_hash", &self.hash)
                    .with("cell", cell)
                    .with("seed", seed)
                    .with("sub", i);
                head.0.extend(r.0);
                head
            })
            .collect())
    }

    /// Aggregate rows per cell plus fitted slopes.
    pub fn summarize(&self, rows: &[Row]) -> Result<(Vec<Row>, Vec<Row>)> {
        let by_cell = |c: usize| -> Vec<&Row> { rows.iter().filter(|r| r.get("cell") == Some(&c.to_string())).collect() };
        let head = |r: Row| {
            let mut h = Row::default().with("preset", &self.name).with("config_hash", &self.hash);
            h.0.extend(r.0);
            h
        };
        let mut summary = Vec::new();
        let mut slopes = Vec::new();
        match &self.body {
            Body::Chain(p) => {
                let ns = p.schemes.len();
                for (ci, cfg) in p.configs.iter().enumerate() {
                    for (si, scheme) in p.schemes.iter().enumerate() {
                        let rs = by_cell(ci * ns + si);
                        if rs.is_empty() {
                            continue;
                        }
                        let risk = mean_and_se(&rs.iter().filter_map(|r| r.f64("excess_risk")).collect::<Vec<_>>());
                        let margins: Vec<Vec<f64>> = rs.iter().map(|r| r.list_f64("margins")).collect();
                        let cov = if margins.len() >= 2 { pairwise_cov_from_margins(&margins).ok() } else { None };
                        let lam: Vec<f64> = rs.iter().filter_map(|r| r.f64("lambda2_hat")).collect();
                        let par: Vec<f64> = rs.iter().filter_map(|r| r.f64("param")).collect();
                        summary.push(head(
                            Row::default()
                                .with("topology", cfg.topology)
                                .with("t_mix", cfg.t_mix)
                                .with("scheme", scheme)
                                .with("seeds", rs.len())
                                .with("excess_risk", risk.value)
                                .with("excess_risk_se", risk.se)
                                .with("pairwise_cov", opt(cov.map(|c| c.value)))
                                .with("pairwise_cov_se", opt(cov.map(|c| c.se)))
                                .with("lambda2_hat", opt((!lam.is_empty()).then(|| mean(&lam))))
                                .with("param", opt((!par.is_empty()).then(|| mean(&par)))),
                        ));
                    }
                }
                for scheme in &p.schemes {
                    let pts = |col: &str| -> Vec<(f64, f64)> {
                        summary
                            .iter()
                            .filter(|r| r.get("scheme") == Some(&scheme.to_string()))
                            .filter_map(|r| Some((r.f64("t_mix")?, r.f64(col)?)))
                            .filter(|&(_, v)| v > 0.0)
                            .collect()
                    };
                    slopes.push(head(
                        Row::default()
                            .with("scheme", scheme)
                            .with("risk_slope", opt(rate_slope(&pts("excess_risk")).ok()))
                            .with("cov_slope", opt(loglog_slope(&pts("pairwise_cov")))),
                    ));
                }
            }
            Body::Replay(p) => {
                for (ci, &(ti, scheme)) in p.cells.iter().enumerate() {
                    let rs = by_cell(ci);
                    if rs.len() < 3 {
                        continue;
                    }
                    let seed_rows: Vec<ReplaySeedRow> = rs
                        .iter()
                        .map(|r| ReplaySeedRow {
                            seed_index: r.f64("seed").unwrap_or(0.0) as u64,
                            wbar: r.list_f64("wbar"),
                            target_var: r.f64("target_var").unwrap_or(f64::NAN),
                            p_hats: r.list_f64("p_hats").into_iter().map(|x| x as usize).collect(),
                        })
                        .collect();
                    let st = ReplayStats::from_rows(scheme, p.configs[ti].t_mix, seed_rows)?;
                    let ph: Vec<f64> = st.rows.iter().flat_map(|r| r.p_hats.iter().map(|&x| x as f64)).collect();
                    summary.push(head(
                        Row::default()
                            .with("t_mix", st.t_mix)
                            .with("scheme", scheme)
                            .with("seeds", st.rows.len())
                            .with("var_wbar", st.var_wbar)
                            .with("var_wbar_se", st.var_wbar_se)
                            .with("target_var", st.target_var)
                            .with("target_var_se", st.target_var_se)
                            .with("p_hat", opt((!ph.is_empty()).then(|| mean(&ph)))),
                    ));
                }
                for cfg in &p.configs {
                    let get = |s: &str| {
                        summary.iter().find(|r| {
                            r.get("t_mix") == Some(&cfg.t_mix.to_string()) && r.get("scheme") == Some(s)
                        })
                    };
                    if let (Some(u), Some(s)) = (get("uniform"), get("spectral")) {
                        let drop = 1.0 - s.f64("target_var").unwrap_or(f64::NAN) / u.f64("target_var").unwrap_or(f64::NAN);
                        slopes.push(head(Row::default().with("t_mix", cfg.t_mix).with("target_var_drop", drop)));
                    }
                }
            }
            Body::Reff(p) => {
                let mut prev: BTreeMap<u32, f64> = BTreeMap::new();
                for (ci, &(n, t)) in p.cells.iter().enumerate() {
                    let rs = by_cell(ci);
                    if rs.is_empty() {
                        continue;
                    }
                    let e = mean_and_se(&rs.iter().filter_map(|r| r.f64("r_eff")).collect::<Vec<_>>());
                    let rel = prev.get(&t).map(|&p| e.value / p - 1.0);
                    prev.insert(t, e.value);
                    summary.push(head(
                        Row::default()
                            .with("n", n)
                            .with("t_mix", t)
                            .with("seeds", rs.len())
                            .with("r_eff", e.value)
                            .with("r_eff_se", e.se)
                            .with("rel_increase", opt(rel)),
                    ));
                }
            }
            Body::Nystrom(p) => {
                for (ci, &(n, t)) in p.cells.iter().enumerate() {
                    let rs = by_cell(ci);
                    if rs.is_empty() {
                        continue;
                    }
                    let col = |c: &str| mean(&rs.iter().filter_map(|r| r.f64(c)).collect::<Vec<_>>());
                    let within = rs
                        .iter()
                        .filter(|r| matches!((r.f64("abs_error"), r.f64("band")), (Some(e), Some(b)) if e <= b))
                        .count();
                    summary.push(head(
                        Row::default()
                            .with("n", n)
                            .with("t_mix", t)
                            .with("seeds", rs.len())
                            .with("l", col("l"))
                            .with("lambda2_exact", col("lambda2_exact"))
                            .with("lambda2_nystrom", col("lambda2_nystrom"))
                            .with("abs_error", col("abs_error"))
                            .with("band", col("band"))
                            .with("within_band", within)
                            .with("exact_secs", col("exact_secs"))
                            .with("nystrom_secs", col("nystrom_secs")),
                    ));
                }
            }
            Body::Concentration(p) => {
                for (ci, &(_, t)) in p.cells.iter().enumerate() {
                    let rs = by_cell(ci);
                    let mut pts = Vec::new();
                    for &n in &p.ns {
                        let errs: Vec<f64> = rs
                            .iter()
                            .filter(|r| r.get("n") == Some(&n.to_string()))
                            .filter_map(|r| r.f64("abs_error"))
                            .collect();
                        if errs.is_empty() {
                            continue;
                        }
                        let e = mean_and_se(&errs);
                        pts.push((n as f64, e.value));
                        summary.push(head(
                            Row::default()
                                .with("n", n)
                                .with("t_mix", t)
                                .with("seeds", errs.len())
                                .with("abs_error", e.value)
                                .with("abs_error_se", e.se),
                        ));
                    }
                    slopes.push(head(Row::default().with("t_mix", t).with("error_slope", opt(loglog_slope(&pts)))));
                }
            }
            Body::KlGrid(_) => {
                summary = rows.iter().map(|r| head(Row(r.0.iter().skip(5).cloned().collect()))).collect();
            }
        }
        Ok((summary, slopes))
    }
}

/// Least-squares slope in log-log coordinates over at least two positive points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    if xs.iter().all(|&x| x == xs[0]) {
        return None;
    }
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Some(linear_fit(&xs, &ys).1)
}

fn chain_unit(p: &ChainPlan, cell: usize, seed: u64) -> Result<Row> {
    let (ci, si) = (cell / p.schemes.len(), cell % p.schemes.len());
    let cfg = &p.configs[ci];
    let scheme = p.schemes[si];
    let out = run_seed(cfg, scheme, &p.ctx, &p.evals[ci], seed, p.mode)?;
    Ok(Row::default()
        .with("topology", cfg.topology)
        .with("t_mix", cfg.t_mix)
        .with("scheme", scheme)
        .with("excess_risk", out.excess_risk.value)
        .with("excess_risk_se", out.excess_risk.se)
        .with("lambda2_hat", opt(out.lambda2_hat))
        .with("param", opt(out.param))
        .with("margins", joined(&out.margins)))
}

fn scan_traj(p: &ScanPlan, master: u64, n: usize, t: u32, seed: u64) -> Result<crate::chain_sim::Trajectory> {
    let k = Keys(&p.kv);
    let cell_seed = rng::split(rng::split(master, n as u64), t as u64);
    let cfg = ChainConfig::ar1(t, k.get("d0")?, n, k.get("delta")?, k.get("eta_std")?, rng::split(cell_seed, seed));
    generate(&cfg)
}

fn reff_unit(p: &ScanPlan, master: u64, cell: usize, seed: u64) -> Result<Row> {
    let k = Keys(&p.kv);
    let (n, t) = p.cells[cell];
    let traj = scan_traj(p, master, n, t, seed)?;
    let g = build_graph(&traj, &GraphRecipe::FeatureKnn(k.get("knn_k")?))?;
    let top_k: usize = k.get("top_k")?;
    let r = effective_rank(&g, top_k.min(n))?;
    Ok(Row::default().with("n", n).with("t_mix", t).with("r_eff", r))
}

fn exact_gap(g: &crate::depgraph::DependencyGraph, seed: u64) -> Result<f64> {
    Ok(estimate_gap(g, Method::ExactLanczos, &FiedlerOptions::default(), seed)?.0)
}

fn nystrom_unit(p: &ScanPlan, master: u64, cell: usize, seed: u64) -> Result<Row> {
    let k = Keys(&p.kv);
    let (n, t) = p.cells[cell];
    let recipe = GraphRecipe::FeatureKnn(k.get("knn_k")?);
    let traj = scan_traj(p, master, n, t, seed)?;
    let g = build_graph(&traj, &recipe)?;
    let gs = rng::split(seed, 3);
    let start = Instant::now();
    let exact = exact_gap(&g, gs)?;
    let exact_secs = start.elapsed().as_secs_f64();
    let half = exact_gap(&build_graph(&traj.prefix(n / 2)?, &recipe)?, gs)?;
    let l = landmark_budget(t as f64, n);
    let start = Instant::now();
    let (nys, _, _) = nystrom_fiedler(&g, l, rng::split(seed, 4))?;
    let nystrom_secs = start.elapsed().as_secs_f64();
    Ok(Row::default()
        .with("n", n)
        .with("t_mix", t)
        .with("l", l)
        .with("lambda2_exact", exact)
        .with("lambda2_half", half)
        .with("lambda2_nystrom", nys)
        .with("abs_error", (nys - exact).abs())
        .with("band", (exact - half).abs())
        .with("exact_secs", exact_secs)
        .with("nystrom_secs", nystrom_secs))
}

fn concentration_unit(p: &ScanPlan, master: u64, cell: usize, seed: u64) -> Result<Vec<Row>> {
    let k = Keys(&p.kv);
    let (n_ref, t) = p.cells[cell];
    let recipe = GraphRecipe::FeatureKnn(k.get("knn_k")?);
    let traj = scan_traj(p, master, n_ref, t, seed)?;
    let gs = rng::split(seed, 3);
    let reference = exact_gap(&build_graph(&traj, &recipe)?, gs)?;
    p.ns
        .iter()
        .map(|&n| {
            let l = exact_gap(&build_graph(&traj.prefix(n)?, &recipe)?, gs)?;
            Ok(Row::default()
                .with("n", n)
                .with("t_mix", t)
                .with("lambda2", l)
                .with("lambda2_ref", reference)
                .with("abs_error", (l - reference).abs()))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub overrides: Kv,
    /// Read `SPECROUTE_*` variables from the process environment.
    pub use_env: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions { out_dir: out_dir.into(), threads: None, overrides: Kv::new(), use_env: false }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub config: Kv,
    pub hash: String,
    pub rows: Vec<Row>,
    pub summary: Vec<Row>,
    pub slopes: Vec<Row>,
    pub table: String,
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}

/// Resolves the preset with the options' overrides, without running it.
pub fn resolved_config(name: &str, opts: &RunOptions) -> Result<Kv> {
    let env: Vec<(String, String)> = if opts.use_env { std::env::vars().collect() } else { Vec::new() };
    resolve_config(name, &opts.overrides, env)
}

/// Runs every unit of a preset and writes `config.toml`, `seeds.csv`,
/// `summary.csv` and `slopes.csv` into `<out_dir>/<name>/`. On failure the
/// completed rows are still written and a `PARTIAL` marker holds the error.
pub fn run_preset(name: &str, opts: &RunOptions) -> Result<RunReport> {
    let mut kv = resolved_config(name, opts)?;
    let dir = opts.out_dir.join(name);
    fs::create_dir_all(&dir)?;
    let marker = dir.join(PARTIAL_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = with_pool(opts.threads, || {
        let mut store = ConfigStore::open(&opts.out_dir)?;
        resolve_auto(&mut kv, &mut store)?;
        let plan = Plan::new(kv.clone())?;
        write_atomic(&dir.join("config.toml"), format_kv(&plan.kv).as_bytes())?;
        log::info!("{name}: {} units, config hash {}", plan.units().len(), plan.hash);
        let results: Vec<Result<Vec<Row>>> =
            plan.units().into_par_iter().map(|(c, s)| plan.run_unit(c, s)).collect();
        let mut rows = Vec::new();
        let mut first_err = None;
        for r in results {
            match r {
                Ok(rs) => rows.extend(rs),
                Err(e) if first_err.is_none() => first_err = Some(e),
                Err(_) => {}
            }
        }
        write_csv(&dir.join("seeds.csv"), &rows)?;
        if let Some(e) = first_err {
            return Err(e);
        }
        let (summary, slopes) = plan.summarize(&rows)?;
        write_csv(&dir.join("summary.csv"), &summary)?;
        write_csv(&dir.join("slopes.csv"), &slopes)?;
        let mut table = render_table(&summary, &["preset", "config_hash"]);
        if !slopes.is_empty() {
            table.push('\n');
            table.push_str(&render_table(&slopes, &["preset", "config_hash"]));
        }
        Ok(RunReport { dir: dir.clone(), config: plan.kv.clone(), hash: plan.hash.clone(), rows, summary, slopes, table })
    });
    if let Err(e) = &result {
        write_atomic(&marker, format!("{e}\n").as_bytes())?;
    }
    result
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub row_index: usize,
    pub cell: usize,
    pub seed: u64,
    pub compared: usize,
    /// `(column, stored, recomputed)` for every mismatch.
    pub diffs: Vec<(String, String, String)>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.diffs.is_empty()
    }
}

/// Re-runs the unit behind one stored row (sampled when `row` is `None`)
/// from the stored resolved config and diffs every column except timings.
pub fn verify(out_dir: &Path, name: &str, row: Option<usize>, threads: Option<usize>) -> Result<VerifyReport> {
    let dir = out_dir.join(name);
    let kv = parse_kv(&fs::read_to_string(dir.join("config.toml"))?)?;
    let rows = read_csv(&dir.join("seeds.csv"))?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no rows to verify", dir.display())));
    }
    let idx = match row {
        Some(i) if i < rows.len() => i,
        Some(i) => return Err(Error::Argument(format!("row {i} out of range ({} rows)", rows.len()))),
        None => rand::random_range(0..rows.len()),
    };
    let stored = &rows[idx];
    let field = |k: &str| stored.get(k).ok_or_else(|| Error::Data(format!("row lacks column {k}")));
    let cell: usize = field("cell")?.parse().map_err(|_| Error::Data("bad cell".into()))?;
    let seed: u64 = field("seed")?.parse().map_err(|_| Error::Data("bad seed".into()))?;
    let sub: usize = field("sub")?.parse().map_err(|_| Error::Data("bad sub".into()))?;
    let fresh = with_pool(threads, || {
        let plan = Plan::new(kv)?;
        if field("config_hash")? != plan.hash {
            return Err(Error::Data(format!("stored hash {} does not match config {}", field("config_hash")?, plan.hash)));
        }
        plan.run_unit(cell, seed)
    })?;
    let again = fresh.get(sub).ok_or_else(|| Error::Data(format!("unit produced no row {sub}")))?;
    let mut diffs = Vec::new();
    let mut compared = 0;
    for (k, v) in &stored.0 {
        if k.ends_with("_secs") {
            continue;
        }
        compared += 1;
        let w = again.get(k).unwrap_or("<missing>");
        if w != v {
            diffs.push((k.clone(), v.clone(), w.to_string()));
        }
    }
    Ok(VerifyReport { row_index: idx, cell, seed, compared, diffs })
}

/// Reads feature rows and writes `index,margin,prediction`. Columns named
/// `x<j>` are features when a header is present; otherwise every column is.
pub fn predict_csv<R: BufRead, W: Write>(model: &EnsembleModel, input: R, mut out: W) -> Result<usize> {
    let mut lines = input.lines();
    let Some(first) = lines.next().transpose()? else { return Ok(0) };
    let numeric = |l: &str| l.split(',').all(|f| f.trim().parse::<f64>().is_ok());
    let (cols, pending): (Option<Vec<usize>>, Option<String>) = if numeric(&first) {
        (None, Some(first))
    } else {
        let cols: Vec<usize> = first
            .split(',')
            .enumerate()
            .filter(|(_, h)| h.trim().strip_prefix('x').is_some_and(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit())))
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            return Err(Error::Parse("header has no x<j> feature columns".into()));
        }
        (Some(cols), None)
    };
    let expected = model.provenance.as_ref().map(|c| c.d0);
    writeln!(out, "index,margin,prediction")?;
    let mut count = 0;
    for (i, line) in pending.into_iter().map(Ok).chain(lines).enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let pick: Vec<&str> = match &cols {
            Some(c) => c.iter().map(|&j| fields.get(j).copied().unwrap_or("")).collect(),
            None => fields,
        };
        let x = pick
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Parse(format!("line {}: bad feature {f:?}", i + 1))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(d) = expected {
            if x.len() != d {
                return Err(Error::Data(format!("line {}: {} features, model expects {d}", i + 1, x.len())));
            }
        }
        writeln!(out, "{count},{},{}", model.margin(&x), model.predict(&x))?;
        count += 1;
    }
    Ok(count)
}
