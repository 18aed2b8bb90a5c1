use callrate::ciir::{CiirModel, CiirParams, CiirSpec, CiirVariant};
use callrate::data::{segment_blocks, HourlyCountSeries};
use callrate::factor::Variant;
use callrate::metrics::{evaluate, forecast_models, rmse, simple_prediction, EvalModel, EvalReport, ResidualKind};
use callrate::queue::{run_experiment, ExperimentConfig};
use callrate::synth::{generate, SyntheticSpec};
use chrono::{Days, NaiveDate};

/// A training year followed by a 28-day test span with one excluded day.
fn split() -> (HourlyCountSeries, HourlyCountSeries) {
    let start = NaiveDate::from_ymd_opt(2007, 1, 1).unwrap();
    let ciir = CiirModel { spec: CiirSpec::new(CiirVariant::IntGarch), params: CiirParams::IntGarch { alpha: 0.3, beta: 0.6 } };
    let d = generate(&SyntheticSpec { start, days: 392, mean_rate: 24.0, k: 2, ciir: Some(ciir), seed: 17 }).unwrap();
    let train = d.series.restrict(start, start + Days::new(363));
    let test = d.series.restrict(start + Days::new(364), start + Days::new(391)).exclude([start + Days::new(375)]);
    (train, test)
}

fn models() -> Vec<EvalModel> {
    vec![
        EvalModel::Sp,
        EvalModel::Fm { variant: Variant::Plain, k: 2 },
        EvalModel::Fm { variant: Variant::ConstrainedSmoothed, k: 2 },
        EvalModel::FmCiir { variant: Variant::ConstrainedSmoothed, k: 2, ciir: CiirSpec::new(CiirVariant::IntGarch) },
    ]
}

#[test]
fn report_shape_and_index_set() {
    let (train, test) = split();
    let fc = forecast_models(&models(), &train, &test, 5).unwrap();
    let blocks = segment_blocks(&test);
    assert_eq!(blocks.len(), 2);
    assert_eq!(fc.index.len(), test.n_hours() - 2);
    assert!(fc.index.iter().all(|&t| !blocks.is_block_start(t)));
    assert_eq!(fc.fits.len(), 2, "shared factor fits");
    assert_eq!(fc.ciir.len(), 1);

    let report = evaluate(&models(), &train, &test, 5).unwrap();
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,constraints,smoothing,K,rmsme,rmspe,rmsae");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("SP,NA,NA,NA,"));
    assert!(lines[2].starts_with("FM,no,no,2,"));
    assert!(lines[4].starts_with("FM+int_garch,yes,yes,2,"));

    // the dependence-aware forecast scores best on the variance-stabilized scale
    let rmsae: Vec<f64> = report.rows.iter().map(|r| r.rmsae.unwrap()).collect();
    assert!(rmsae[3] < rmsae[2] && rmsae[2] < rmsae[0], "{rmsae:?}");

    let json = serde_json::to_string(&report).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn single_model_gives_single_row() {
    let (train, test) = split();
    let report = evaluate(&[EvalModel::Sp], &train, &test, 0).unwrap();
    assert_eq!(report.rows.len(), 1);
    let y = test.values();
    let history = train.merge(&test).unwrap();
    let mut lam = Vec::new();
    for &d in test.day_dates() {
        for h in 0..24 {
            lam.push(simple_prediction(&history, d, h).unwrap());
        }
    }
    let index: Vec<usize> = (0..y.len()).filter(|&t| !segment_blocks(&test).is_block_start(t)).collect();
    assert_eq!(report.rows[0].rmspe.unwrap(), rmse(ResidualKind::Pearson, &y, &lam, &index).unwrap());
}

#[test]
fn evaluation_rejects_overlap() {
    let (train, _) = split();
    assert!(evaluate(&[EvalModel::Sp], &train, &train, 0).is_err());
}

#[test]
fn queue_experiment_common_random_numbers() {
    let (train, test) = split();
    let fc = forecast_models(&models()[..1], &train, &test, 1).unwrap();
    let sp = fc.lambda[0].clone().unwrap();
    let streams = vec![("a".to_string(), sp.clone()), ("b".to_string(), sp)];
    let config = ExperimentConfig { q: vec![0.0, 5.0], nu: vec![1.0], theta: vec![0.8], j: 300, replications: 3, s_min: 1, seed: 9 };
    let report = run_experiment(&test, &streams, &config).unwrap();
    assert_eq!(report.summary.len(), 4);
    for (a, b) in report.summary[..2].iter().zip(&report.summary[2..]) {
        assert_eq!((a.mean_cost, a.sd_cost, a.mean_pct_immediate, a.total_server_hours), (b.mean_cost, b.sd_cost, b.mean_pct_immediate, b.total_server_hours));
    }
    // q = 0: one server, cost 1 every hour
    let zero = &report.summary[0];
    assert_eq!((zero.mean_cost, zero.sd_cost), (1.0, 0.0));
    assert_eq!(zero.total_server_hours, test.n_hours() as u64);
    assert_eq!(report.replications.len(), 12);
    assert_eq!(run_experiment(&test, &streams, &config).unwrap(), report);

    let mut short = streams.clone();
    short[1].1.pop();
    assert!(run_experiment(&test, &short, &config).is_err());
}
