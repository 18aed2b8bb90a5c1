use callrate::ciir::{filter, fit_ciir, loglik, CiirModel, CiirParams, CiirSpec, CiirVariant};
use callrate::data::BlockSegmentation;
use callrate::synth::{generate, SyntheticSpec};
use chrono::NaiveDate;
use proptest::prelude::*;

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2007, 1, 1).unwrap()
}

fn params_strategy() -> impl Strategy<Value = CiirParams> {
    prop_oneof![
        (0.0f64..0.95, 0.0f64..1.0).prop_map(|(a, f)| CiirParams::IntGarch { alpha: a, beta: (0.999 - a) * f }),
        (0.01f64..0.5, 0.01f64..0.45, 0.01f64..0.5, 0.01f64..2.0)
            .prop_map(|(alpha, beta, delta, gamma)| CiirParams::IntExpGarch { alpha, beta, delta, gamma }),
        (0.01f64..1.0, 0.01f64..0.4, 0.05f64..0.4, 0.0f64..0.1, 0.0f64..0.04)
            .prop_map(|(omega, alpha, beta, gamma, d)| CiirParams::IntThreshGarch { omega, alpha, beta, gamma, delta: -d }),
        (0.01f64..1.0, 0.01f64..0.5, 0.01f64..0.9, 0.01f64..1.0, 0.01f64..0.5, 0.01f64..0.9).prop_map(
            |(omega1, alpha1, beta1, omega2, alpha2, beta2)| CiirParams::IntRsGarch { omega1, alpha1, beta1, omega2, alpha2, beta2 }
        ),
    ]
}

/// Constant-mean synthetic hours, optionally with an int_garch CIIR.
fn constant_mean_hours(days: usize, ciir: Option<(f64, f64)>, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ciir = ciir.map(|(alpha, beta)| CiirModel {
        spec: CiirSpec::new(CiirVariant::IntGarch),
        params: CiirParams::IntGarch { alpha, beta },
    });
    let d = generate(&SyntheticSpec { start: start(), days, mean_rate: 24.0, k: 1, ciir, seed }).unwrap();
    (d.series.values(), d.mu, d.eta)
}

#[test]
fn int_garch_eta_has_unit_long_run_mean() {
    let (_, _, eta) = constant_mean_hours(100_000 / 24 + 1, Some((0.3, 0.6)), 8);
    let n = 100_000;
    let mean = eta[..n].iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
}

#[test]
fn null_case_alpha_near_zero() {
    let spec = CiirSpec::new(CiirVariant::IntGarch);
    let mut small = 0;
    for seed in 0..100u64 {
        let (y, mu, _) = constant_mean_hours(84, None, 500 + seed);
        let blocks = BlockSegmentation::single(y.len());
        let fit = fit_ciir(&spec, &y, &mu, &blocks, None, seed).unwrap();
        assert!(fit.loglik >= fit.init_loglik);
        if let CiirParams::IntGarch { alpha, .. } = fit.params {
            if alpha <= 0.02 {
                small += 1;
            }
        }
    }
    assert!(small >= 95, "{small}/100");
}

#[test]
fn fit_never_loses_likelihood_across_variants() {
    let (y, mu, _) = constant_mean_hours(60, Some((0.25, 0.5)), 3);
    let blocks = BlockSegmentation { blocks: vec![0..600, 720..y.len()] };
    for v in [CiirVariant::IntGarch, CiirVariant::IntExpGarch, CiirVariant::IntThreshGarch, CiirVariant::IntRsGarch] {
        let spec = CiirSpec::new(v);
        let fit = fit_ciir(&spec, &y, &mu, &blocks, None, 1).unwrap();
        assert!(fit.loglik >= fit.init_loglik, "{v:?}");
        assert!((loglik(&spec, &fit.params, &y, &mu, &blocks).unwrap() - fit.loglik).abs() < 1e-9 * fit.loglik.abs());
        fit.params.validate().unwrap();
    }
}

proptest! {
    #[test]
    fn eta_positive_for_valid_params(params in params_strategy(), ys in proptest::collection::vec(0u32..80, 2..200), mu in 0.2f64..40.0) {
        let spec = CiirSpec::new(params.variant());
        let y: Vec<f64> = ys.iter().map(|&v| v as f64).collect();
        let m = vec![mu; y.len()];
        let out = filter(&spec, &params, &y, &m, &BlockSegmentation::single(y.len())).unwrap();
        prop_assert_eq!(out.eta.len(), y.len());
        prop_assert!(out.eta.iter().all(|&e| e > 0.0 && e.is_finite()));
        prop_assert!(out.lambda.iter().all(|&l| l > 0.0));
        prop_assert_eq!(out.eta[0], 1.0);
    }

    #[test]
    fn static_case_matches_poisson_loglik(ys in proptest::collection::vec(0u32..40, 2..100), mu in 0.5f64..30.0) {
        let spec = CiirSpec::new(CiirVariant::IntGarch);
        let y: Vec<f64> = ys.iter().map(|&v| v as f64).collect();
        let m = vec![mu; y.len()];
        let ll = loglik(&spec, &CiirParams::IntGarch { alpha: 0.0, beta: 0.0 }, &y, &m, &BlockSegmentation::single(y.len())).unwrap();
        let direct: f64 = y[1..].iter().map(|&v| v * mu.ln() - mu - statrs::function::gamma::ln_gamma(v + 1.0)).sum();
        prop_assert!((ll - direct).abs() < 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn filter_is_block_local(params in params_strategy(), a in 1usize..4, b in 1usize..4, seed in 0u64..200) {
        // two blocks of whole days, presented in both orders
        let (y, mu, _) = constant_mean_hours(a + b, None, seed);
        let (la, lb) = (24 * a, 24 * b);
        let spec = CiirSpec::new(params.variant());
        let fwd = filter(&spec, &params, &y, &mu, &BlockSegmentation { blocks: vec![0..la, la..la + lb] }).unwrap();
        let swapped_y: Vec<f64> = y[la..].iter().chain(&y[..la]).copied().collect();
        let swapped_mu: Vec<f64> = mu[la..].iter().chain(&mu[..la]).copied().collect();
        let rev = filter(&spec, &params, &swapped_y, &swapped_mu, &BlockSegmentation { blocks: vec![0..lb, lb..la + lb] }).unwrap();
        prop_assert_eq!(&fwd.eta[..la], &rev.eta[lb..]);
        prop_assert_eq!(&fwd.eta[la..], &rev.eta[..lb]);
    }
}
