use ntklab::scaling::{fit_scaling_law, predict_error, CurvePoint, LearningCurve, ScalingFit};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn log_spaced(lo: f64, hi: f64, k: usize) -> Vec<u64> {
    (0..k)
        .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (k - 1) as f64).exp().round() as u64)
        .collect()
}

fn law(a: f64, alpha: f64, beta: f64) -> impl Fn(f64) -> f64 {
    move |n| a * (1.0 / n + alpha).powf(beta)
}

fn curve(ns: &[u64], f: impl Fn(f64) -> f64) -> LearningCurve {
    let points = ns
        .iter()
        .map(|&n| CurvePoint { n, error: f(n as f64), stderr: None, seeds: 1 })
        .collect();
    LearningCurve::new("t", points).unwrap()
}

/// Sum of squared log residuals of a law on a curve, computed directly.
fn log_residual(c: &LearningCurve, a: f64, alpha: f64, beta: f64) -> f64 {
    c.points
        .iter()
        .map(|p| (p.error.ln() - law(a, alpha, beta)(p.n as f64).ln()).powi(2))
        .sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn assert_recovers(fit: &ScalingFit, a: f64, alpha: f64, beta: f64) {
    assert!(rel(fit.a, a) < 1e-4, "A {} vs {a}", fit.a);
    assert!(rel(fit.beta, beta) < 1e-4, "beta {} vs {beta}", fit.beta);
    if alpha == 0.0 {
        assert!(fit.alpha < 1e-12, "alpha {}", fit.alpha);
    } else {
        assert!(rel(fit.alpha, alpha) < 1e-4, "alpha {} vs {alpha}", fit.alpha);
    }
}

#[test]
fn noiseless_curves_are_recovered() {
    let ns = log_spaced(500.0, 64000.0, 8);
    for (a, alpha, beta) in [(2.0, 0.01, 0.3), (1.0, 1e-4, 0.5), (0.7, 0.0, 0.25), (3.0, 2e-5, 0.2), (0.5, 1e-3, 1.0)] {
        let c = curve(&ns, law(a, alpha, beta));
        let fit = fit_scaling_law(&c).unwrap();
        assert_recovers(&fit, a, alpha, beta);
        assert!(fit.residual < 1e-18, "residual {}", fit.residual);
    }
}

#[test]
fn noisy_curves_keep_beta_within_tolerance() {
    let ns = log_spaced(500.0, 64000.0, 8);
    let (a, alpha, beta) = (1.0, 1e-5, 0.3);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut errors = Vec::new();
    for _ in 0..100 {
        let eps: Vec<f64> = ns.iter().map(|_| noise.sample(&mut rng)).collect();
        let points = ns
            .iter()
            .zip(&eps)
            .map(|(&n, e)| CurvePoint { n, error: law(a, alpha, beta)(n as f64) * e.exp(), stderr: None, seeds: 1 })
            .collect();
        let c = LearningCurve::new("noisy", points).unwrap();
        let fit = fit_scaling_law(&c).unwrap();
        // the fit is at least as good as the generating law
        assert!(fit.residual <= log_residual(&c, a, alpha, beta) + 1e-12);
        errors.push((fit.beta - beta).abs());
    }
    errors.sort_by(f64::total_cmp);
    let median = (errors[49] + errors[50]) / 2.0;
    assert!(median <= 0.03, "median beta error {median}");
}

#[test]
fn fitted_curves_decrease_in_n() {
    let ns = log_spaced(100.0, 10000.0, 6);
    let c = curve(&ns, |n| 0.5 * n.powf(-0.2) + 0.01 * (n * 0.37).sin().abs() * 1e-3);
    let fit = fit_scaling_law(&c).unwrap();
    assert!(fit.beta > 0.0);
    let mut last = f64::INFINITY;
    for k in 0..200 {
        let n = 50.0 * 1.05f64.powi(k);
        let e = predict_error(&fit, n);
        assert!(e <= last);
        last = e;
    }
}

#[test]
fn grid_search_oracle_agrees_on_alpha() {
    // brute-force scan over α, with β and log A by normal equations
    let ns = log_spaced(500.0, 16000.0, 6);
    let c = curve(&ns, |n| 0.3 * (1.0 / n + 3e-4).powf(0.4) * (1.0 + 0.02 * (n.ln() * 3.0).sin()));
    let fit = fit_scaling_law(&c).unwrap();
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=20000 {
        let alpha = if k == 0 { 0.0 } else { 1e-9 * (1e9f64).powf(k as f64 / 20000.0) };
        let xs: Vec<f64> = c.points.iter().map(|p| (1.0 / p.n as f64 + alpha).ln()).collect();
        let ys: Vec<f64> = c.points.iter().map(|p| p.error.ln()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let b = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        let r: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - my - b * (x - mx)).powi(2)).sum();
        if r < best.0 {
            best = (r, alpha);
        }
    }
    assert!(fit.residual <= best.0 * (1.0 + 1e-9) + 1e-15, "{} vs {}", fit.residual, best.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rescaling_errors_rescales_a_only(
        a in 0.05f64..5.0,
        log_alpha in -8.0f64..-2.5,
        beta in 0.1f64..0.9,
        c in 0.1f64..10.0,
    ) {
        let ns = log_spaced(500.0, 64000.0, 8);
        let alpha = 10f64.powf(log_alpha);
        let base = fit_scaling_law(&curve(&ns, law(a, alpha, beta))).unwrap();
        let scaled = fit_scaling_law(&curve(&ns, |n| c * law(a, alpha, beta)(n))).unwrap();
        prop_assert!(rel(scaled.a, c * base.a) < 1e-6);
        prop_assert!(rel(scaled.beta, base.beta) < 1e-6);
        prop_assert!((scaled.alpha - base.alpha).abs() <= 1e-6 * base.alpha.max(1e-12));
    }

    #[test]
    fn exact_laws_fit_with_tiny_residual(
        a in 0.05f64..5.0,
        log_alpha in -7.0f64..-2.0,
        beta in 0.1f64..1.0,
    ) {
        let ns = log_spaced(500.0, 64000.0, 8);
        let fit = fit_scaling_law(&curve(&ns, law(a, 10f64.powf(log_alpha), beta))).unwrap();
        prop_assert!(fit.residual < 1e-14);
        prop_assert!(rel(fit.beta, beta) < 1e-3);
    }
}
