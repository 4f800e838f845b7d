use specroute::theory::{
    fano_budget, fano_maximizer, kl_trajectory_closed, kl_trajectory_dense, kl_trajectory_drift,
    kl_trajectory_drift_dense, lecam_separation, q_closed, write_kl_grid, BoundConstants, KlSpec,
};
use specroute::Error;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn iid_kl_is_half_n() {
    for n in [1usize, 7, 1000] {
        let s = KlSpec::new(n, 0.0, vec![1.0]);
        assert!((kl_trajectory_closed(&s).unwrap() - n as f64 / 2.0).abs() < 1e-12);
    }
    let s = KlSpec::new(40, 0.0, vec![0.6, 0.8]);
    assert!((kl_trajectory_dense(&s).unwrap() - 20.0).abs() < 1e-10);
}

#[test]
fn three_step_hand_value() {
    // Sigma = [[1, .5, .25], [.5, 1, .5], [.25, .5, 1]], 1^T Sigma^-1 1 = 5/3
    let s = KlSpec::new(3, 0.5, vec![1.0]);
    assert!((kl_trajectory_closed(&s).unwrap() - 5.0 / 6.0).abs() < 1e-14);
    assert!((kl_trajectory_dense(&s).unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn kl_scales_as_n_over_t_mix() {
    let n = 10_000;
    let t = 50.0;
    let s = KlSpec::new(n, 1.0 - 1.0 / t, vec![1.0]);
    let r = kl_trajectory_closed(&s).unwrap() / n as f64;
    assert!((1.0 / (4.0 * t)..=1.0 / (2.0 * t)).contains(&r), "{r}");
}

#[test]
fn closed_form_matches_dense_grid() {
    for n in 1..=64usize {
        for lambda in [0.0, 0.3, 0.9, 0.98] {
            for dm in [vec![0.7], vec![1.0, -0.5, 2.0]] {
                let s = KlSpec::new(n, lambda, dm);
                let a = kl_trajectory_closed(&s).unwrap();
                let b = kl_trajectory_dense(&s).unwrap();
                assert!(rel(a, b) <= 1e-10, "n={n} lambda={lambda}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn drift_adds_a_quadratic_term() {
    let s = KlSpec::new(60, 0.9, vec![0.5, -0.3]);
    let base = kl_trajectory_closed(&s).unwrap();
    let pure = KlSpec::new(60, 0.9, vec![0.0, 0.0]);
    let mut prev = None;
    for nu in [0.5, 1.0, 2.0] {
        let with = kl_trajectory_drift(&s, nu).unwrap();
        assert!(rel(with, kl_trajectory_drift_dense(&s, nu).unwrap()) < 1e-10);
        // a mean shift of zero isolates the drift term, which is exactly quadratic
        let term = kl_trajectory_drift(&pure, nu).unwrap();
        assert!(term >= 0.0);
        if let Some(p) = prev {
            assert!(rel(term, 4.0 * p) < 1e-10);
        }
        prev = Some(term);
        assert!(with.is_finite() && with >= 0.0);
    }
    assert!(rel(kl_trajectory_drift(&s, 0.0).unwrap(), base) < 1e-12);
}

#[test]
fn drift_term_is_order_n_over_t_mix() {
    let t = 20.0;
    let lam = 1.0 - 1.0 / t;
    let at = |n: usize| kl_trajectory_drift(&KlSpec::new(n, lam, vec![0.0]), 1.0).unwrap() / (n as f64 / t);
    for n in [2_000usize, 20_000, 200_000] {
        let r = at(n);
        assert!((0.05..=1.0).contains(&r), "n = {n}: {r}");
    }
}

#[test]
fn kl_monotonicity() {
    for lambda in [0.0, 0.5, 0.95] {
        let mut last = 0.0;
        for n in 1..200 {
            let k = kl_trajectory_closed(&KlSpec::new(n, lambda, vec![1.0])).unwrap();
            assert!(k > last);
            last = k;
        }
    }
    let a = kl_trajectory_closed(&KlSpec::new(50, 0.5, vec![1.0])).unwrap();
    let b = kl_trajectory_closed(&KlSpec::new(50, 0.5, vec![1.5])).unwrap();
    assert!(b > a);
    for n in [2usize, 10, 1000] {
        let ks: Vec<f64> = [0.0, 0.2, 0.5, 0.9, 0.99].iter().map(|&l| q_closed(n, l)).collect();
        assert!(ks.windows(2).all(|w| w[1] < w[0]), "n = {n}: {ks:?}");
    }
}

#[test]
fn q_brackets_n_over_t_mix() {
    for t in [1.0f64, 2.0, 10.0, 50.0, 200.0] {
        let lam = 1.0 - 1.0 / t;
        for mult in [100.0, 300.0, 1000.0] {
            let n = (mult * t) as usize;
            let r = q_closed(n, lam) * t / n as f64;
            assert!((0.5..=1.0).contains(&r), "t = {t}, n = {n}: {r}");
        }
    }
}

#[test]
fn domain_errors() {
    for lambda in [1.0, 1.5, f64::NAN, -0.1] {
        assert!(matches!(kl_trajectory_closed(&KlSpec::new(10, lambda, vec![1.0])), Err(Error::Domain(_))));
    }
    let big = KlSpec::new(300, 0.5, vec![1.0, 1.0]);
    assert!(kl_trajectory_dense(&big).is_err());
    let mut bad = KlSpec::new(10, 0.5, vec![1.0]);
    bad.d0 = 2;
    assert!(kl_trajectory_closed(&bad).is_err());
}

#[test]
fn lecam_identities() {
    let c = BoundConstants::default();
    let d = 50.0 / (50_000f64).sqrt();
    let l = lecam_separation(50_000, 50.0, d * d, &c);
    assert!((l.delta - d).abs() < 1e-15);
    assert!((l.kl - 0.5).abs() < 1e-12);
    assert!((l.risk_floor - 0.25).abs() < 1e-12);
    let far = lecam_separation(50_000, 50.0, 1e12, &c);
    assert!(far.kl < 1e-10 && (far.risk_floor - 0.5).abs() < 1e-5);
    let near = lecam_separation(50_000, 50.0, 1e-9, &c);
    assert_eq!(near.risk_floor, 0.0);
}

#[test]
fn fano_zero_where_the_parenthetical_vanishes() {
    let c = BoundConstants::default();
    let (n, t, d0) = (10_000usize, 100.0, 32usize);
    let delta = ((d0 as f64 / 8.0 - std::f64::consts::LN_2) * t / n as f64).sqrt();
    assert!(fano_budget(n, t, d0, delta, &c).abs() < 1e-12);
}

#[test]
fn fano_maximizer_scales_as_root_t_over_n() {
    let c = BoundConstants::default();
    let grid = 20_000;
    let a = fano_maximizer(100_000, 10.0, 32, &c, grid).unwrap();
    let b = fano_maximizer(100_000, 40.0, 32, &c, grid).unwrap();
    assert!((b.delta_star / a.delta_star - 2.0).abs() < 2e-3);
    assert!((a.c3 - b.c3).abs() < 1e-3);
    assert!(fano_maximizer(100, 1.0, 4, &c, grid).is_none());
}

#[test]
fn fano_positive_at_half_root() {
    let (n, t) = (10_000usize, 100.0);
    let delta = 0.5 * (t / n as f64).sqrt();
    assert!(fano_budget(n, t, 32, delta, &BoundConstants::default()) > 0.0);
}

#[test]
fn kl_grid_csv() {
    let mut buf = Vec::new();
    write_kl_grid(&mut buf, &[100, 1000], &[1.0, 10.0]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,t_mix,lambda,value");
    assert_eq!(lines.len(), 5);
    let last: Vec<f64> = lines[4].split(',').map(|s| s.parse().unwrap()).collect();
    assert_eq!(last[0], 1000.0);
    assert!((last[3] - 0.5 * q_closed(1000, 0.9)).abs() < 1e-12);
}
