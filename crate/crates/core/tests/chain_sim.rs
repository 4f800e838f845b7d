use specroute::chain_sim::{bayes_risk_oracle, draw_stationary, generate, ChainConfig, Topology, Trajectory};
use specroute::stats::{autocorrelation, integrated_autocorr_time, linear_fit, mean, variance};
use specroute::Error;
use statrs::function::erf::erfc;

fn lag_corr_at(field: &[f64], side: usize, dist: usize) -> f64 {
    let mu = mean(field);
    let var = variance(field);
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for r in 0..side {
        for c in 0..side - dist {
            acc += (field[r * side + c] - mu) * (field[r * side + c + dist] - mu);
            cnt += 1;
        }
    }
    acc / cnt as f64 / var
}

#[test]
fn iid_witness_has_no_serial_correlation() {
    let n = 20_000;
    let traj = generate(&ChainConfig::ar1(1, 2, n, 0.5, 0.5, 4)).unwrap();
    let xi = traj.latent_coord(0);
    assert!(autocorrelation(&xi, 1).abs() < 3.0 / (n as f64).sqrt());
}

#[test]
fn slow_witness_lag_one_correlation_matches_lambda() {
    let cfg = ChainConfig::ar1(50, 1, 50_000, 0.5, 0.5, 0);
    let rhos: Vec<f64> = (0..20)
        .map(|s| autocorrelation(&generate(&cfg.with_seed(s)).unwrap().latent_coord(0), 1))
        .collect();
    assert!((mean(&rhos) - 0.98).abs() < 0.01, "{}", mean(&rhos));
}

#[test]
fn symmetric_labels_without_signal() {
    let n = 40_000;
    let traj = generate(&ChainConfig::ar1(1, 3, n, 0.0, 1.0, 9)).unwrap();
    let y: Vec<f64> = traj.y.iter().map(|&v| v as f64).collect();
    assert!(traj.y.iter().all(|&v| v == 1 || v == -1));
    // i.i.d. chain, so the plain binomial bound applies
    assert!(mean(&y).abs() < 3.0 / (n as f64).sqrt());
}

#[test]
fn decoupled_lattice_neighbours_uncorrelated() {
    let side = 128;
    let traj = generate(&ChainConfig::lattice(1, 1, side, 0.5, 0.5, 2)).unwrap();
    let field = traj.latent_coord(0);
    assert!(lag_corr_at(&field, side, 1).abs() < 3.0 / (field.len() as f64).sqrt());
}

#[test]
fn lattice_correlation_decays_over_t_mix() {
    let side = 64;
    let vals: Vec<f64> = (0..20)
        .map(|s| {
            let traj = generate(&ChainConfig::lattice(8, 1, side, 0.5, 0.5, 100 + s)).unwrap();
            lag_corr_at(&traj.latent_coord(0), side, 8)
        })
        .collect();
    let r = mean(&vals);
    let target = (-1.0f64).exp();
    assert!((r / target - 1.0).abs() < 0.25, "corr at 8 = {r}");
}

#[test]
fn lattice_cells_are_row_major() {
    let traj = generate(&ChainConfig::lattice(2, 1, 3, 0.5, 0.5, 0)).unwrap();
    assert_eq!(traj.n(), 9);
    assert_eq!(traj.cell(0), Some((0, 0)));
    assert_eq!(traj.cell(5), Some((1, 2)));
    assert_eq!(traj.cell(9), None);
    assert_eq!(traj.topology, Topology::Lattice2D { side: 3 });
}

#[test]
fn lattice_requires_square_size() {
    let mut cfg = ChainConfig::lattice(2, 1, 4, 0.5, 0.5, 0);
    cfg.n = 15;
    assert!(matches!(generate(&cfg), Err(Error::Config(_))));
}

#[test]
fn reproducible_and_seed_sensitive() {
    let cfg = ChainConfig::ar1(10, 4, 2000, 0.5, 0.5, 17);
    let a = generate(&cfg).unwrap();
    assert_eq!(a, generate(&cfg).unwrap());
    assert_ne!(a.x, generate(&cfg.with_seed(18)).unwrap().x);
}

#[test]
fn stationary_halves_agree() {
    let n = 50_000;
    let xi = generate(&ChainConfig::ar1(10, 1, n, 0.5, 0.5, 5)).unwrap().latent_coord(0);
    let (a, b) = xi.split_at(n / 2);
    let iat = integrated_autocorr_time(&xi);
    // mean of each half has variance ~ iat / (n/2)
    let se = (2.0 * iat / (n as f64 / 2.0)).sqrt();
    assert!((mean(a) - mean(b)).abs() < 4.0 * se);
    let va = variance(a);
    let vb = variance(b);
    assert!((va - vb).abs() < 4.0 * (2.0 * 2.0 * iat / (n as f64 / 2.0)).sqrt());
}

#[test]
fn drift_trend_matches_nu_over_n() {
    let n = 5000;
    let nu = 2.0;
    let slopes: Vec<f64> = (0..20)
        .map(|s| {
            let mut cfg = ChainConfig::ar1(5, 1, n, 0.0, 0.5, 300 + s);
            cfg.drift_nu = nu;
            let traj = generate(&cfg).unwrap();
            let t: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let x: Vec<f64> = (0..n).map(|i| traj.row(i)[0]).collect();
            linear_fit(&t, &x).1
        })
        .collect();
    let want = nu / n as f64;
    assert!((mean(&slopes) / want - 1.0).abs() < 0.1, "slope {} vs {want}", mean(&slopes));
}

#[test]
fn integrated_autocorrelation_tracks_t_mix() {
    for t in [10u32, 50] {
        let n = 50 * (t as usize).pow(2);
        let xi = generate(&ChainConfig::ar1(t, 1, n, 0.5, 0.5, 8)).unwrap().latent_coord(0);
        let iat = integrated_autocorr_time(&xi);
        let pop = 2.0 * t as f64 - 1.0;
        assert!(iat > pop / 2.0 && iat < pop * 2.0, "t = {t}: iat {iat}");
    }
}

#[test]
fn noiseless_bayes_risk_vanishes() {
    let cfg = ChainConfig::ar1(10, 4, 100, 0.5, 1e-6, 0);
    assert!(bayes_risk_oracle(&cfg, 100_000).unwrap().value < 1e-3);
}

#[test]
fn bayes_risk_quadrature_oracle() {
    // delta = 0, d0 = 1, eta ~ N(0, 1): Y = sign(X + eta), Bayes rule sign(X),
    // error iff |eta| exceeds |X| on the opposite side; Simpson quadrature
    // over the joint density of (X, eta).
    let cfg = ChainConfig::ar1(10, 1, 100, 0.0, 1.0, 3);
    let est = bayes_risk_oracle(&cfg, 400_000).unwrap();
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf_tail = |z: f64| 0.5 * erfc(z / std::f64::consts::SQRT_2);
    let (lo, hi, k) = (0.0, 10.0, 4000);
    let h = (hi - lo) / k as f64;
    let mut q = 0.0;
    for i in 0..=k {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        q += w * phi(x) * cdf_tail(x);
    }
    let quad = 2.0 * q * h / 3.0;
    assert!((est.value - quad).abs() < 3.0 * est.se, "{} vs {quad}", est.value);
}

#[test]
fn bayes_standard_error_scales_with_draws() {
    let cfg = ChainConfig::ar1(10, 2, 100, 0.3, 1.0, 6);
    let a = bayes_risk_oracle(&cfg, 100_000).unwrap();
    let b = bayes_risk_oracle(&cfg, 200_000).unwrap();
    let ratio = a.se / b.se;
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.1, "{ratio}");
}

#[test]
fn stationary_draws_follow_config_law() {
    let cfg = ChainConfig::ar1(10, 2, 500, 0.5, 0.5, 0);
    let eval = draw_stationary(&cfg, 30_000, 77).unwrap();
    assert_eq!(eval.n(), 30_000);
    assert!(eval.config.same_law(&cfg));
    let xi = eval.latent_coord(1);
    assert!((variance(&xi) - 1.0).abs() < 0.1);
}

#[test]
fn binary_round_trip_and_kv() {
    let traj = generate(&ChainConfig::ar1(3, 2, 50, 0.5, 0.5, 1)).unwrap();
    let mut buf = Vec::new();
    traj.write_binary(&mut buf).unwrap();
    assert_eq!(Trajectory::read_binary(buf.as_slice()).unwrap(), traj);
    assert_eq!(ChainConfig::from_kv(&traj.config.to_kv()).unwrap(), traj.config);
    let mut bad = buf.clone();
    bad[0] ^= 0xff;
    assert!(Trajectory::read_binary(bad.as_slice()).is_err());
}

#[test]
fn prefix_is_a_leading_slice() {
    let traj = generate(&ChainConfig::ar1(3, 2, 100, 0.5, 0.5, 1)).unwrap();
    let p = traj.prefix(40).unwrap();
    assert_eq!(p.n(), 40);
    assert_eq!(p.row(39), traj.row(39));
    assert!(traj.prefix(1).is_err());
    assert!(traj.prefix(101).is_err());
}
