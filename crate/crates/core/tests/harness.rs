use std::fs;

use specroute::chain_sim::{generate, ChainConfig};
use specroute::ensemble::{BaseLearnerSpec, EnsembleModel, Learner};
use specroute::harness::{
    calibrate_c, config_hash, format_kv, is_preset, loglog_slope, parse_kv, preset_names, predict_csv, read_csv,
    resolve_config, run_preset, verify, write_csv, ConfigStore, Kv, Row, RunOptions, PARTIAL_MARKER, STORE_FILE,
};
use specroute::pipeline::{FitContext, GapCache};
use specroute::spectral::p_hat_for;
use specroute::Error;

fn kv(pairs: &[(&str, &str)]) -> Kv {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn small_chain(dir: &std::path::Path, extra: &[(&str, &str)]) -> RunOptions {
    let mut opts = RunOptions::new(dir);
    opts.overrides = kv(&[
        ("n", "2000"),
        ("m", "5"),
        ("seeds", "2"),
        ("t_mix", "1,10"),
        ("schemes", "uniform,spectral"),
        ("c", "1"),
        ("n_eval", "2000"),
        ("mc_draws", "20000"),
    ]);
    opts.overrides.extend(kv(extra));
    opts
}

fn without_timings(rows: &[Row]) -> Vec<Vec<(String, String)>> {
    rows.iter().map(|r| r.0.iter().filter(|(k, _)| !k.ends_with("_secs")).cloned().collect()).collect()
}

#[test]
fn presets_are_listed_and_unknown_names_rejected() {
    let names = preset_names();
    for want in ["rates-ar1", "covariance", "ablate-p", "replay", "kl-grid", "lattice"] {
        assert!(names.contains(&want) && is_preset(want), "{want}");
    }
    let err = resolve_config("no-such", &Kv::new(), Vec::new()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("rates-ar1"));
}

#[test]
fn overrides_must_name_existing_keys_and_env_is_prefixed() {
    assert!(resolve_config("rates-ar1", &kv(&[("not_a_key", "1")]), Vec::new()).is_err());
    let env = vec![("SPECROUTE_M".to_string(), "7".to_string()), ("M".to_string(), "9".to_string())];
    let r = resolve_config("rates-ar1", &Kv::new(), env.clone()).unwrap();
    assert_eq!(r["m"], "7");
    let r = resolve_config("rates-ar1", &kv(&[("m", "3")]), env).unwrap();
    assert_eq!(r["m"], "3");
    assert_eq!(r["preset"], "rates-ar1");
}

#[test]
fn config_text_round_trips_and_hash_tracks_content() {
    let a = resolve_config("covariance", &Kv::new(), Vec::new()).unwrap();
    let back = parse_kv(&format_kv(&a)).unwrap();
    assert_eq!(back, a);
    assert_eq!(config_hash(&a), config_hash(&back));
    let mut b = a.clone();
    b.insert("m".into(), "51".into());
    assert_ne!(config_hash(&a), config_hash(&b));
    assert!(parse_kv("a = [").is_err());
}

#[test]
fn kl_grid_run_writes_csvs_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_preset("kl-grid", &RunOptions::new(dir.path())).unwrap();
    let out = dir.path().join("kl-grid");
    for f in ["config.toml", "seeds.csv", "summary.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join(PARTIAL_MARKER).exists());
    assert_eq!(report.rows.len(), 32);
    assert_eq!(read_csv(&out.join("seeds.csv")).unwrap().len(), 32);
    for i in [0, 17, 31] {
        let v = verify(dir.path(), "kl-grid", Some(i), None).unwrap();
        assert!(v.ok(), "{:?}", v.diffs);
        assert!(v.compared > 0);
    }
    assert!(verify(dir.path(), "kl-grid", Some(99), None).is_err());
    assert!(verify(dir.path(), "rates-ar1", None, None).is_err());
}

#[test]
fn small_chain_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_preset("rates-ar1", &small_chain(dir.path(), &[])).unwrap();
    assert_eq!(a.rows.len(), 2 * 2 * 2);
    assert_eq!(a.summary.len(), 4);
    assert!(a.summary.iter().all(|r| r.f64("excess_risk").is_some_and(f64::is_finite)));
    assert!(!a.table.is_empty());
    for i in 0..a.rows.len() {
        let v = verify(dir.path(), "rates-ar1", Some(i), None).unwrap();
        assert!(v.ok(), "row {i}: {:?}", v.diffs);
    }
    let other = tempfile::tempdir().unwrap();
    let b = run_preset("rates-ar1", &small_chain(other.path(), &[])).unwrap();
    assert_eq!(without_timings(&a.rows), without_timings(&b.rows));
    assert_eq!(a.hash, b.hash);
}

#[test]
fn tampered_config_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    run_preset("kl-grid", &RunOptions::new(dir.path())).unwrap();
    let path = dir.path().join("kl-grid").join("config.toml");
    let text = fs::read_to_string(&path).unwrap().replace("seed = \"10\"", "seed = \"11\"");
    fs::write(&path, text).unwrap();
    assert!(verify(dir.path(), "kl-grid", Some(0), None).is_err());
}

#[test]
fn failed_run_leaves_partial_marker() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_preset("rates-ar1", &small_chain(dir.path(), &[("learner", "tree:0:5")])).unwrap_err();
    let marker = dir.path().join("rates-ar1").join(PARTIAL_MARKER);
    let text = fs::read_to_string(&marker).unwrap();
    assert!(text.contains(&err.to_string()));
    run_preset("rates-ar1", &small_chain(dir.path(), &[])).unwrap();
    assert!(!marker.exists());
}

#[test]
fn auto_constant_is_calibrated_once_and_stored() {
    let dir = tempfile::tempdir().unwrap();
    let extra = [("c", "auto"), ("calibrate_t", "10"), ("calibrate_seeds", "2"), ("t_mix", "10"), ("seeds", "1")];
    let a = run_preset("rates-ar1", &small_chain(dir.path(), &extra)).unwrap();
    let c: f64 = a.config["c"].parse().unwrap();
    assert!(c > 0.0);
    assert!(dir.path().join(STORE_FILE).exists());
    let stored: Vec<String> = parse_kv(&fs::read_to_string(dir.path().join(STORE_FILE)).unwrap()).unwrap().into_values().collect();
    assert_eq!(stored, vec![a.config["c"].clone()]);
    let b = run_preset("rates-ar1", &small_chain(dir.path(), &extra)).unwrap();
    assert_eq!(b.config["c"], a.config["c"]);
}

#[test]
fn config_store_persists() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ConfigStore::open(dir.path()).unwrap();
    assert!(s.get("k").is_none());
    s.put("k", "1.5").unwrap();
    assert_eq!(ConfigStore::open(dir.path()).unwrap().get("k"), Some("1.5"));
}

#[test]
fn calibration_is_reproducible_and_hits_its_target() {
    let ctx = FitContext::new(100, BaseLearnerSpec::tree(8, 5));
    let template = ChainConfig::ar1(50, 4, 4000, 0.5, 0.5, 0xca1b);
    let a = calibrate_c(50, &template, &ctx.routing, 3).unwrap();
    let b = calibrate_c(50, &template, &ctx.routing, 3).unwrap();
    assert_eq!(a.c, b.c);
    assert_eq!(a.response.len(), 3);
    let traj = generate(&template.with_seed(77)).unwrap();
    let mut routing = ctx.routing.clone();
    routing.c = a.c;
    let lambda = GapCache::new().get_or_compute(&traj, &routing, 5).unwrap().0;
    let p = p_hat_for(a.c, lambda, 100);
    assert!((25..=100).contains(&p), "P = {p}, c = {}", a.c);
}

#[test]
fn fast_mixing_gives_one_partition_for_any_c_up_to_the_gap() {
    let ctx = FitContext::new(50, BaseLearnerSpec::tree(8, 5));
    let traj = generate(&ChainConfig::ar1(1, 4, 3000, 0.5, 0.5, 3)).unwrap();
    let lambda = GapCache::new().get_or_compute(&traj, &ctx.routing, 1).unwrap().0;
    for c in [lambda, 0.5 * lambda, 1e-3] {
        assert_eq!(p_hat_for(c, lambda, 50), 1);
    }
    assert!(p_hat_for(2.0 * lambda, lambda, 50) > 1);
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Row::default();
    r.push("a", 1).push("b", "x y").push("c", 2.5);
    let path = dir.path().join("t.csv");
    write_csv(&path, &[r.clone(), r.clone()]).unwrap();
    let back = read_csv(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].get("b"), Some("x y"));
    assert_eq!(back[1].f64("c"), Some(2.5));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn slope_helper() {
    let pts: Vec<(f64, f64)> = [1.0, 10.0, 50.0].iter().map(|&t: &f64| (t, 3.0 * t.powf(0.75))).collect();
    assert!((loglog_slope(&pts).unwrap() - 0.75).abs() < 1e-12);
    assert!(loglog_slope(&pts[..1]).is_none());
}

#[test]
fn prediction_csv_with_and_without_header() {
    let cfg = ChainConfig::ar1(1, 2, 10, 0.5, 0.5, 0);
    let model = EnsembleModel {
        learners: vec![Learner::Linear { w: vec![1.0, 1.0], bias: 0.0 }; 3],
        scheme_tag: "t".into(),
        spec: BaseLearnerSpec::ridge(1.0),
        provenance: Some(cfg),
    };
    let mut out = Vec::new();
    let n = predict_csv(&model, "t,x0,x1,y\n0,0.5,0.1,1\n1,-2,0.3,-1\n".as_bytes(), &mut out).unwrap();
    assert_eq!(n, 2);
    assert_eq!(String::from_utf8(out).unwrap(), "index,margin,prediction\n0,1,1\n1,-1,-1\n");
    let mut out = Vec::new();
    assert_eq!(predict_csv(&model, "0.5,0.1\n\n-1,-1\n".as_bytes(), &mut out).unwrap(), 2);
    assert!(predict_csv(&model, "1,2,3\n".as_bytes(), Vec::new()).is_err());
    assert!(predict_csv(&model, "a,b\n1,2\n".as_bytes(), Vec::new()).is_err());
}
