//! End-to-end acceptance criteria. Each criterion prints one PASS or FAIL
//! line with the measured quantities; a criterion whose run errors is a FAIL
//! carrying the error. The process exits nonzero on a FAIL only when
//! `SPECROUTE_ACCEPTANCE_STRICT=1`. The slow large-sample rates replica runs only with
//! `SPECROUTE_ACCEPTANCE_SLOW=1`.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specroute::chain_sim::ChainConfig;
use specroute::depgraph::DependencyGraph;
use specroute::ensemble::BaseLearnerSpec;
use specroute::metrics::{pairwise_margin_cov, CovMode, EvalSet};
use specroute::pipeline::{FitContext, SchemeSpec};
use specroute::harness::{run_preset, Kv, RunOptions, RunReport};
use specroute::resampling::{
    draw_circular_block, draw_spectral_routed, draw_stationary_bootstrap, draw_thinned, draw_uniform, RoutedSize,
    SubsampleSet,
};
use specroute::spectral::{fiedler_pair, route_with_count, Method, RouteOptions};
use specroute::stats::chi_square_two_sample;
use specroute::theory::{kl_trajectory_closed, kl_trajectory_dense, lecam_separation, BoundConstants, KlSpec};
use specroute::Result;

type Outcome = Result<(bool, String)>;

fn out_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn run(preset: &str, sub: &str, overrides: &[(&str, &str)]) -> Result<RunReport> {
    let mut opts = RunOptions::new(out_root().join(sub));
    opts.overrides = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<Kv>();
    run_preset(preset, &opts)
}

fn cell(r: &RunReport, t_mix: u32, scheme: &str, col: &str) -> Option<f64> {
    r.summary
        .iter()
        .find(|row| row.get("t_mix") == Some(&t_mix.to_string()) && row.get("scheme") == Some(scheme))
        .and_then(|row| row.f64(col))
}

fn need(v: Option<f64>, what: &str) -> Result<f64> {
    v.ok_or_else(|| specroute::Error::Data(format!("missing {what}")))
}

fn kl_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for n in 2..=64 {
        for &lambda in &[0.0, 0.3, 0.9, 0.98] {
            for dm in [vec![0.7], vec![0.3, -1.1, 0.5]] {
                let s = KlSpec::new(n, lambda, dm);
                let a = kl_trajectory_closed(&s)?;
                let b = kl_trajectory_dense(&s)?;
                worst = worst.max((a - b).abs() / a.abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst <= 1e-10 && secs < 10.0, format!("max relative gap {worst:.2e}, {secs:.2} s")))
}

fn random_connected(rng: &mut ChaCha8Rng) -> DependencyGraph {
    let n = rng.random_range(3..=64);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    let extra = rng.random_range(0..2 * n);
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    DependencyGraph::from_edges(n, edges).unwrap()
}

fn spectral_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_val, mut worst_vec) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let g = random_connected(&mut rng);
        let (l2, v2) = fiedler_pair(&g, 1e-10, 100_000)?;
        let eig = SymmetricEigen::new(g.dense_laplacian()?);
        let mut order: Vec<usize> = (0..g.n_nodes()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let (e2, e3) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
        worst_val = worst_val.max((l2 - e2).abs());
        if e3 - e2 > 1e-3 {
            let col = eig.eigenvectors.column(order[1]);
            let dot: f64 = col.iter().zip(&v2).map(|(a, b)| a * b).sum();
            let s = dot.signum();
            let d = col.iter().zip(&v2).map(|(a, b)| (s * a - b).abs()).fold(0.0, f64::max);
            worst_vec = worst_vec.max(d);
        }
    }
    let mut non_monotone = Vec::new();
    for n in 4..=512 {
        let g = DependencyGraph::path(n);
        let (_, v2) = fiedler_pair(&g, 1e-10, 200_000)?;
        let v: Vec<f64> = v2.iter().zip(g.degrees()).map(|(x, &d)| x / (d as f64).sqrt()).collect();
        let up = v.windows(2).all(|w| w[1] > w[0]);
        let down = v.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            non_monotone.push(n);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst_val <= 1e-8 && worst_vec <= 1e-6 && non_monotone.is_empty() && secs < 30.0,
        format!(
            "eigenvalue gap {worst_val:.2e}, vector gap {worst_vec:.2e}, non-monotone paths {non_monotone:?}, {secs:.1} s"
        ),
    ))
}

fn covariance_mechanism() -> Outcome {
    let n = 20000.0;
    let uni = run("covariance", "c3-uniform", &[("t_mix", "10,50"), ("schemes", "uniform")])?;
    let spec = run("covariance", "c3-spectral", &[("t_mix", "50"), ("schemes", "spectral")])?;
    let c10 = need(cell(&uni, 10, "uniform", "pairwise_cov"), "uniform covariance at 10")?;
    let c50 = need(cell(&uni, 50, "uniform", "pairwise_cov"), "uniform covariance at 50")?;
    let s50 = need(cell(&spec, 50, "spectral", "pairwise_cov"), "spectral covariance at 50")?;
    let within = |c: f64, t: f64| {
        let r = c / (t * t / n);
        (1.0 / 3.0..=3.0).contains(&r)
    };
    let slope = if c10 > 0.0 && c50 > 0.0 { (c50 / c10).ln() / 5f64.ln() } else { f64::NAN };
    let pass = within(c10, 10.0) && within(c50, 50.0) && (slope - 2.0).abs() <= 0.5 && s50 * 5.0 <= c50;
    Ok((
        pass,
        format!(
            "uniform cov {c10:.3e} (theory {:.3e}) and {c50:.3e} (theory {:.3e}), slope {slope:.2}, spectral cov at 50 {s50:.3e}",
            100.0 / n,
            2500.0 / n
        ),
    ))
}

// the measured covariance plugged into the two-point bound at n = 50000
fn lecam_measured() -> Outcome {
    let (n, t) = (50_000usize, 50u32);
    let cfg = ChainConfig::ar1(t, 4, n, 0.5, 0.5, 3);
    let ctx = FitContext::new(50, BaseLearnerSpec::tree(8, 5));
    let eval = EvalSet::new(&cfg, 20_000, 200_000)?;
    let cov = pairwise_margin_cov(&cfg, SchemeSpec::Uniform, &ctx, &eval, 20, CovMode::Joint)?;
    let l = lecam_separation(n, t as f64, cov.value, &BoundConstants::default());
    Ok((
        l.kl <= 1.0 && l.risk_floor > 0.0,
        format!("measured cov {:.3e} (se {:.1e}), KL {:.3e}, floor {:.3}", cov.value, cov.se, l.kl, l.risk_floor),
    ))
}

fn rate_separation() -> Outcome {
    let r = run("rates-ar1", "c4", &[("schemes", "uniform,spectral")])?;
    let slope = |s: &str| {
        r.slopes.iter().find(|row| row.get("scheme") == Some(s)).and_then(|row| row.f64("risk_slope"))
    };
    let (su, ss) = (need(slope("uniform"), "uniform slope")?, need(slope("spectral"), "spectral slope")?);
    let ru = need(cell(&r, 50, "uniform", "excess_risk"), "uniform risk")?;
    let rs = need(cell(&r, 50, "spectral", "excess_risk"), "spectral risk")?;
    Ok((
        su >= 0.75 && ss <= 0.65 && ru >= 3.0 * rs,
        format!("slopes uniform {su:.3} spectral {ss:.3}; risk at t_mix 50 uniform {ru:.4} spectral {rs:.4}"),
    ))
}

fn rates_slow() -> Outcome {
    let r = run("rates-slow", "c4-slow", &[("schemes", "uniform,spectral")])?;
    let ru = need(cell(&r, 50, "uniform", "excess_risk"), "uniform risk")?;
    let rs = need(cell(&r, 50, "spectral", "excess_risk"), "spectral risk")?;
    Ok((
        (ru - 0.228).abs() <= 0.05 && (rs - 0.046).abs() <= 0.05,
        format!("risk at t_mix 50: uniform {ru:.4} (target .228), spectral {rs:.4} (target .046)"),
    ))
}

fn partition_ablation() -> Outcome {
    let r = run("ablate-p", "c5", &[])?;
    let fixed: Vec<(usize, f64)> = [1usize, 5, 10, 50, 100]
        .iter()
        .map(|&p| Ok((p, need(cell(&r, 50, &format!("spectral:{p}"), "excess_risk"), "fixed-P risk")?)))
        .collect::<Result<_>>()?;
    let adaptive = need(cell(&r, 50, "spectral", "excess_risk"), "adaptive risk")?;
    let p_hat = cell(&r, 50, "spectral", "param").unwrap_or(f64::NAN);
    let best = fixed.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let p1 = fixed[0].1;
    let shown: Vec<String> = fixed.iter().map(|(p, v)| format!("P={p}: {v:.4}")).collect();
    Ok((
        adaptive <= 1.5 * best && p1 >= 3.0 * best,
        format!("{}; adaptive (mean P_hat {p_hat:.1}): {adaptive:.4}", shown.join(", ")),
    ))
}

fn spectral_concentration() -> Outcome {
    let r = run("concentration", "c6", &[])?;
    let slope = need(r.slopes.first().and_then(|row| row.f64("error_slope")), "error slope")?;
    Ok(((slope + 0.5).abs() <= 0.2, format!("log-error slope {slope:.3}")))
}

fn nystrom_fidelity() -> Outcome {
    let fid = run("nystrom", "c7-fidelity", &[("n", "10000")])?;
    let row = &fid.summary[0];
    let (err, band) = (need(row.f64("abs_error"), "error")?, need(row.f64("band"), "band")?);
    let within = row.get("within_band").unwrap_or("0").to_string();
    let lam_nys = row.f64("lambda2_nystrom").unwrap_or(f64::NAN);
    let timing = run("nystrom", "c7-timing", &[("n", "100000"), ("seeds", "1")])?;
    let trow = &timing.summary[0];
    let (te, tn) = (need(trow.f64("exact_secs"), "exact time")?, need(trow.f64("nystrom_secs"), "Nystrom time")?);
    let reff = run("reff", "c7-reff", &[("n", "10000,100000"), ("seeds", "2")])?;
    let rel = need(reff.summary.last().and_then(|r| r.f64("rel_increase")), "r_eff increase")?;
    let r4 = reff.summary[0].f64("r_eff").unwrap_or(f64::NAN);
    let r5 = reff.summary[1].f64("r_eff").unwrap_or(f64::NAN);
    Ok((
        err <= band && te >= 5.0 * tn && rel < 0.15,
        format!(
            "mean |error| {err:.3e} vs band {band:.3e} ({within}/10 seeds inside, mean Nystrom gap {lam_nys:.3e}); \
             n=1e5 exact {te:.2} s vs Nystrom {tn:.2} s; r_eff {r4:.2} -> {r5:.2} ({:+.1}%)",
            100.0 * rel
        ),
    ))
}

fn replay_variance() -> Outcome {
    let uni = run("replay", "c8-uniform", &[("t_mix", "10,50"), ("schemes", "uniform"), ("c", "1")])?;
    let v10 = need(cell(&uni, 10, "uniform", "var_wbar"), "var at 10")?;
    let v50 = need(cell(&uni, 50, "uniform", "var_wbar"), "var at 50")?;
    let tv_u = need(cell(&uni, 50, "uniform", "target_var"), "uniform target variance")?;
    let ratio = v50 / v10;
    let detail = format!("uniform var(w_bar) {v10:.3e} -> {v50:.3e} (ratio {ratio:.2})");
    match run("replay", "c8-spectral", &[("t_mix", "50"), ("schemes", "spectral")]) {
        Ok(spec) => {
            let tv_s = need(cell(&spec, 50, "spectral", "target_var"), "spectral target variance")?;
            let drop = 1.0 - tv_s / tv_u;
            Ok((ratio >= 4.0 && drop >= 0.2, format!("{detail}; target variance drop {:.1}%", 100.0 * drop)))
        }
        Err(e) => Ok((false, format!("{detail}; spectral run failed: {e}"))),
    }
}

fn chi_pair(a: &SubsampleSet, b: &SubsampleSet, n: usize) -> (f64, f64) {
    let marginal = chi_square_two_sample(&a.index_counts(n), &b.index_counts(n));
    // Adjacent index pairs inside a learner's set, tail pooled at 6.
    let adj = |s: &SubsampleSet| {
        let mut h = vec![0u64; 7];
        for set in &s.per_learner {
            let mut d = set.clone();
            d.dedup();
            let k = d.windows(2).filter(|w| w[1] == w[0] + 1).count();
            h[k.min(6)] += 1;
        }
        h
    };
    (marginal, chi_square_two_sample(&adj(a), &adj(b)))
}

fn degeneracies() -> Outcome {
    let (n, m, size) = (100, 10_000, 10);
    let reference = draw_uniform(n, m, size, 901)?;
    let plan = route_with_count(&DependencyGraph::path(n), 1, &RouteOptions::new(m, 1.0, Method::ExactLanczos))?;
    let cases: Vec<(&str, SubsampleSet)> = vec![
        ("cbb block 1", draw_circular_block(n, m, size, 1, 902)?),
        ("stat-boot mean 1", draw_stationary_bootstrap(n, m, size, 1.0, 903)?),
        ("thin stride 1", draw_thinned(n, m, 1, size, 904)?),
        ("spectral P=1", draw_spectral_routed(&plan, m, size, RoutedSize::Subsample, 905)?),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, s) in &cases {
        let (pm, pa) = chi_pair(s, &reference, n);
        pass &= pm >= 0.01 && pa >= 0.01;
        parts.push(format!("{name}: p {pm:.3}/{pa:.3}"));
    }
    Ok((pass, parts.join(", ")))
}

fn lattice_analog() -> Outcome {
    let r = run("lattice", "lattice", &[])?;
    let spec = need(cell(&r, 8, "spectral", "excess_risk"), "spectral risk")?;
    let base: Vec<(String, f64)> = r
        .summary
        .iter()
        .filter(|row| row.get("scheme") != Some("spectral"))
        .filter_map(|row| Some((row.get("scheme")?.to_string(), row.f64("excess_risk")?)))
        .collect();
    let best = base.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = base.iter().map(|(s, v)| format!("{s} {v:.4}")).collect();
    Ok((
        !base.is_empty() && spec <= 0.75 * best,
        format!("spectral {spec:.4} vs best baseline {best:.4} ({})", shown.join(", ")),
    ))
}

fn main() {
    let strict = std::env::var("SPECROUTE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let slow = std::env::var("SPECROUTE_ACCEPTANCE_SLOW").is_ok_and(|v| v == "1");
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 kl closed vs dense", kl_oracle),
        ("2 fiedler exactness", spectral_exactness),
        ("3 covariance mechanism", covariance_mechanism),
        ("3b two-point bound with measured covariance", lecam_measured),
        ("4 rate separation", rate_separation),
        ("5 partition-count ablation", partition_ablation),
        ("6 spectral concentration", spectral_concentration),
        ("7 nystrom fidelity and r_eff", nystrom_fidelity),
        ("8 replay variance", replay_variance),
        ("9 degeneracy equivalences", degeneracies),
        ("10 lattice analog", lattice_analog),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(x) => x,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} [{name}] {detail} ({:.0} s)", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    if slow {
        let start = Instant::now();
        let (pass, detail) = rates_slow().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!("{} [4b large-sample rates replica] {detail} ({:.0} s)", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    } else {
        println!("SKIP [4b large-sample rates replica] set SPECROUTE_ACCEPTANCE_SLOW=1 to run");
    }
    println!("acceptance: {failed} criteria failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
