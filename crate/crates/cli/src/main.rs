use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use specroute::chain_sim::{generate, ChainConfig};
use specroute::ensemble::{BaseLearnerSpec, EnsembleModel};
use specroute::harness::{self, Kv, RunOptions};
use specroute::pipeline::{fit, FitContext, GapCache, SchemeSpec};

#[derive(Parser)]
#[command(name = "specroute", version, about = "Spectral routing experiments on dependent data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seeds per cell.
    #[arg(long)]
    seeds: Option<usize>,
    /// Sample size (or list of sizes, comma separated).
    #[arg(long)]
    n: Option<String>,
    /// Ensemble size.
    #[arg(long)]
    m: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Extra `key=value` overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn options(&self) -> anyhow::Result<RunOptions> {
        let mut o = Kv::new();
        if let Some(s) = self.seeds {
            o.insert("seeds".into(), s.to_string());
        }
        if let Some(n) = &self.n {
            o.insert("n".into(), n.clone());
        }
        if let Some(m) = self.m {
            o.insert("m".into(), m.to_string());
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else { bail!("--set expects KEY=VALUE, got {kv:?}") };
            o.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(RunOptions { out_dir: self.out_dir.clone(), threads: self.threads, overrides: o, use_env: true })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset and write its CSV artifacts.
    Run {
        preset: String,
        #[command(flatten)]
        common: Common,
    },
    /// Fit and store the routing constant of a preset.
    Calibrate {
        preset: String,
        /// Known mixing time of the calibration witness.
        #[arg(long)]
        t_mix: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run one stored row of a finished preset and diff it.
    Verify {
        preset: String,
        /// Row index in seeds.csv; sampled when absent.
        #[arg(long)]
        row: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// List the available presets.
    List,
    /// Train one ensemble on a simulated chain and save it.
    Fit {
        #[arg(long, default_value_t = 10)]
        t_mix: u32,
        #[arg(long, default_value_t = 20000)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        d0: usize,
        #[arg(long, default_value = "uniform")]
        scheme: String,
        #[arg(long, default_value = "tree:8:5")]
        learner: String,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the training features as CSV.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Margins and labels of a saved model on a feature CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn unknown_preset(name: &str) -> ExitCode {
    eprintln!("unknown preset {name:?}; available presets:");
    for p in harness::preset_names() {
        eprintln!("  {p:<14} {}", harness::preset_description(p).unwrap_or(""));
    }
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let preset = match &cli.command {
        Command::Run { preset, .. } | Command::Calibrate { preset, .. } | Command::Verify { preset, .. } => Some(preset),
        _ => None,
    };
    if let Some(p) = preset {
        if !harness::is_preset(p) {
            return unknown_preset(p);
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::List => {
            for p in harness::preset_names() {
                println!("{p:<14} {}", harness::preset_description(p).unwrap_or(""));
            }
        }
        Command::Run { preset, common } => {
            let report = harness::run_preset(&preset, &common.options()?)?;
            println!("{preset} (config {}) -> {}", report.hash, report.dir.display());
            print!("{}", report.table);
        }
        Command::Calibrate { preset, t_mix, common } => {
            let mut opts = common.options()?;
            if let Some(t) = t_mix {
                opts.overrides.insert("calibrate_t".into(), t.to_string());
            }
            let kv = harness::resolved_config(&preset, &opts)?;
            let key = harness::calibration_key(&kv)?;
            let cal = harness::calibrate_config(&kv)?;
            let mut store = harness::ConfigStore::open(&opts.out_dir)?;
            store.put(&key, &cal.c.to_string())?;
            println!("c = {} at t_mix = {}", cal.c, cal.t_mix);
            for (t, l) in &cal.response {
                println!("  t_mix {t:>5}  mean lambda2_hat {l:.6e}  P_hat {}", (cal.c / l).ceil());
            }
            if !cal.monotone {
                println!("warning: estimated gap is not monotone in t_mix");
            }
            println!("stored as {key} in {}", opts.out_dir.join(harness::STORE_FILE).display());
        }
        Command::Verify { preset, row, common } => {
            let r = harness::verify(&common.out_dir, &preset, row, common.threads)?;
            println!("row {} (cell {}, seed {}): {} columns compared", r.row_index, r.cell, r.seed, r.compared);
            for (k, a, b) in &r.diffs {
                println!("  {k}: stored {a} recomputed {b}");
            }
            if !r.ok() {
                return Ok(ExitCode::FAILURE);
            }
            println!("identical");
        }
        Command::Fit { t_mix, n, m, d0, scheme, learner, c, seed, out, features } => {
            let scheme: SchemeSpec = scheme.parse()?;
            let learner: BaseLearnerSpec = learner.parse()?;
            let traj = generate(&ChainConfig::ar1(t_mix, d0, n, 0.5, 0.5, seed))?;
            let mut ctx = FitContext::new(m, learner);
            ctx.routing.c = c;
            let fitted = fit(&traj, scheme, &ctx, specroute::rng::split(seed, 1), &GapCache::new())?;
            fitted.model.write_binary(BufWriter::new(File::create(&out).with_context(|| out.display().to_string())?))?;
            if let Some(p) = features {
                traj.write_csv(BufWriter::new(File::create(&p)?))?;
            }
            println!("{scheme}: {} learners -> {}", fitted.model.m(), out.display());
        }
        Command::Predict { model, input, output } => {
            let model = EnsembleModel::read_binary(BufReader::new(
                File::open(&model).with_context(|| model.display().to_string())?,
            ))?;
            let reader = BufReader::new(File::open(&input).with_context(|| input.display().to_string())?);
            let count = match output {
                Some(p) => {
                    let mut w = BufWriter::new(File::create(&p)?);
                    let c = harness::predict_csv(&model, reader, &mut w)?;
                    w.flush()?;
                    c
                }
                None => harness::predict_csv(&model, reader, std::io::stdout().lock())?,
            };
            eprintln!("{count} rows predicted");
        }
    }
    Ok(ExitCode::SUCCESS)
}
