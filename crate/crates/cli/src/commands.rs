use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use callrate::ciir::{fit_ciir as fit_ciir_model, CiirModel};
use callrate::data::{
    build_design, detect_gap_days, ingest_calls, read_call_records, read_counts_csv, read_excluded, segment_blocks,
    write_counts_csv, write_excluded, HourlyCountSeries, StudyWindow,
};
use callrate::factor::{fit_factor_model, FactorConfig, FactorModel};
use callrate::metrics::{flatten_day_major, forecast_models, poisson_deviance, scree, EvalModel, EvalReport};
use callrate::queue::{run_experiment, ExperimentConfig};
use callrate::synth::{generate, SyntheticSpec};
use callrate::{Error, Result};
use chrono::NaiveDate;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    read_config, CiirFitDoc, EvaluateConfig, FitCiirConfig, FitFactorConfig, ModelFile, ModelSummary, QueueConfig,
    SynthConfig, TruthFile, SCHEMA_VERSION,
};
use crate::{CountsArgs, EvaluateArgs, FitCiirArgs, FitFactorArgs, IngestArgs, QueueArgs, ReportArgs, SynthArgs};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_series(counts: &Path, excluded: Option<&Path>) -> Result<HourlyCountSeries> {
    let excl = match excluded {
        Some(p) => read_excluded(open(p)?)?,
        None => BTreeSet::new(),
    };
    read_counts_csv(open(counts)?, excl)
}

fn load_counts(args: &CountsArgs) -> Result<HourlyCountSeries> {
    load_series(&args.counts, args.excluded.as_deref())
}

fn write_series(dir: &Path, series: &HourlyCountSeries) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("counts.csv"))?;
    write_counts_csv(series, &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("excluded.txt"))?;
    write_excluded(series, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_model(path: &Path) -> Result<(ModelFile, FactorModel)> {
    let doc: ModelFile = read_config(path).map_err(|e| match e {
        Error::Config(m) => Error::Data(m),
        other => other,
    })?;
    let model = FactorModel::from_doc(&doc.factor)?;
    Ok((doc, model))
}

/// In-sample `μ̂` of `model` on `series`, which must be its training data.
fn training_mu(model: &FactorModel, series: &HourlyCountSeries) -> Result<Vec<f64>> {
    if series.covariates() != model.train_covariates {
        return Err(Error::Data("counts do not match the days the model was fitted on".into()));
    }
    Ok(flatten_day_major(&model.fitted_mu()))
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg: SynthConfig = read_config(&args.config)?;
    let spec = SyntheticSpec { start: cfg.start, days: cfg.days, mean_rate: cfg.mean_rate, k: cfg.k, ciir: cfg.ciir, seed: args.seed };
    let data = generate(&spec)?;
    write_series(&args.out_dir, &data.series)?;
    write_json(&args.out_dir.join("truth.json"), &TruthFile { version: SCHEMA_VERSION, spec, mu: data.mu, eta: data.eta })
}

pub fn ingest(args: &IngestArgs) -> Result<()> {
    let window = StudyWindow::new(args.start, args.end)?;
    let holidays: Vec<NaiveDate> = match &args.holidays {
        Some(p) => read_excluded(open(p)?)?.into_iter().collect(),
        None => Vec::new(),
    };
    let records = read_call_records(open(&args.calls)?)?;
    let mut series = ingest_calls(records, window, &holidays)?;
    if args.drop_gap_days {
        let gaps = detect_gap_days(&series);
        series = series.exclude(gaps);
    }
    write_series(&args.out_dir, &series)
}

pub fn fit_factor(args: &FitFactorArgs) -> Result<()> {
    let cfg: FitFactorConfig = read_config(&args.config)?;
    let series = load_counts(&args.data)?;
    let mut fc = FactorConfig::new(cfg.k, cfg.variant);
    fc.c = cfg.c.unwrap_or(fc.c);
    fc.tol = cfg.tol.unwrap_or(fc.tol);
    fc.max_iter = cfg.max_iter.unwrap_or(fc.max_iter);
    fc.hour_dim = cfg.hour_dim.unwrap_or(fc.hour_dim);
    let design = if cfg.variant.is_constrained() { Some(build_design(&series)?) } else { None };
    let (model, report) = fit_factor_model(&series, design.as_ref(), &fc)?;
    if !report.converged {
        eprintln!("warning: factor fit did not converge in {} iterations", report.iterations);
    }
    let deviance = poisson_deviance(&series.values(), &flatten_day_major(&model.fitted_mu()));
    let doc = ModelFile { version: SCHEMA_VERSION, factor: model.to_doc()?, fit_report: report, in_sample_deviance: deviance, ciir: None };
    write_json(&args.out, &doc)
}

pub fn fit_ciir(args: &FitCiirArgs) -> Result<()> {
    let cfg: FitCiirConfig = read_config(&args.config)?;
    let series = load_counts(&args.data)?;
    let (mut doc, model) = read_model(&args.model)?;
    let mu = training_mu(&model, &series)?;
    let fit = fit_ciir_model(&cfg.ciir, &series.values(), &mu, &segment_blocks(&series), cfg.init, args.seed)?;
    if !fit.converged {
        eprintln!("warning: CIIR optimizer did not meet its tolerance; best point kept");
    }
    doc.ciir = Some(CiirFitDoc {
        model: CiirModel { spec: cfg.ciir, params: fit.params },
        loglik: fit.loglik,
        init_loglik: fit.init_loglik,
        converged: fit.converged,
    });
    write_json(&args.out, &doc)
}

/// Column label identifying one evaluated model.
pub fn model_label(m: &EvalModel) -> String {
    match m {
        EvalModel::Sp => "SP".into(),
        EvalModel::Fm { variant, k } => format!("FM:{}:K{k}", variant.name()),
        EvalModel::FmCiir { variant, k, ciir } => format!("FM+{}:{}:K{k}", ciir.variant.name(), variant.name()),
    }
}

#[derive(Serialize)]
struct EvaluationFile<'a> {
    version: u32,
    labels: Vec<String>,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg: EvaluateConfig = read_config(&args.config)?;
    if cfg.models.is_empty() {
        return Err(Error::Config("no models to evaluate".into()));
    }
    let labels: Vec<String> = cfg.models.iter().map(model_label).collect();
    if labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
        return Err(Error::Config("duplicate model entries".into()));
    }
    let train = load_series(&args.train, args.train_excluded.as_deref())?;
    let test = load_series(&args.test, args.test_excluded.as_deref())?;
    let fc = forecast_models(&cfg.models, &train, &test, args.seed)?;
    let report = callrate::metrics::evaluate_forecasts(&cfg.models, &test, &fc)?;

    fs::create_dir_all(&args.out_dir)?;
    let mut w = create(&args.out_dir.join("evaluation.csv"))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    write_json(&args.out_dir.join("evaluation.json"), &EvaluationFile { version: SCHEMA_VERSION, labels: labels.clone(), report: &report })?;

    let mut w = csv::Writer::from_writer(create(&args.out_dir.join("forecasts.csv"))?);
    let mut header = vec!["date".to_string(), "hour".into(), "y".into()];
    header.extend(labels);
    w.write_record(&header)?;
    let y = test.values();
    for (t, &yt) in y.iter().enumerate() {
        let mut rec = vec![test.day_dates()[t / 24].format("%Y-%m-%d").to_string(), (t % 24 + 1).to_string(), yt.to_string()];
        rec.extend(fc.lambda.iter().map(|l| l.as_ref().map(|v| v[t].to_string()).unwrap_or_else(|| "NA".into())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Forecast columns of `forecasts.csv`, checked against the test series calendar.
fn read_forecasts(path: &Path, test: &HourlyCountSeries) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < 4 || header[..3] != ["date", "hour", "y"] {
        return Err(Error::Data(format!("{}: expected `date,hour,y,<model>...` header", path.display())));
    }
    let names = &header[3..];
    let mut cols: Vec<Option<Vec<f64>>> = vec![Some(Vec::new()); names.len()];
    let y = test.values();
    let mut n = 0usize;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { row: i + 2, message: e.to_string() })?;
        let row_date = test.day_dates().get(n / 24).map(|d| d.format("%Y-%m-%d").to_string());
        if row_date.as_deref() != Some(&rec[0]) || rec[1] != (n % 24 + 1).to_string() || y.get(n).map(|v| v.to_string()).as_deref() != Some(&rec[2]) {
            return Err(Error::Data(format!("{}: row {} does not match the test counts", path.display(), i + 2)));
        }
        for (c, col) in cols.iter_mut().enumerate() {
            let raw = &rec[3 + c];
            if raw == "NA" {
                *col = None;
            } else if let Some(v) = col {
                v.push(raw.parse().map_err(|_| Error::Parse { row: i + 2, message: format!("bad forecast `{raw}`") })?);
            }
        }
        n += 1;
    }
    if n != y.len() {
        return Err(Error::Data(format!("{}: {n} forecast hours for {} test hours", path.display(), y.len())));
    }
    let mut out = Vec::new();
    for (name, col) in names.iter().zip(cols) {
        match col {
            Some(v) => out.push((name.clone(), v)),
            None => eprintln!("note: skipping `{name}`, which has no out-of-sample forecasts"),
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no usable forecast columns".into()));
    }
    Ok(out)
}

pub fn queue(args: &QueueArgs) -> Result<()> {
    let cfg: QueueConfig = read_config(&args.config)?;
    let test = load_series(&args.test, args.test_excluded.as_deref())?;
    let forecasts = read_forecasts(&args.forecasts, &test)?;
    let exp = ExperimentConfig {
        q: cfg.q,
        nu: cfg.nu,
        theta: cfg.theta,
        j: cfg.j,
        replications: cfg.replications,
        s_min: cfg.s_min,
        seed: args.seed,
    };
    let report = run_experiment(&test, &forecasts, &exp)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut w = create(&args.out_dir.join("queue_summary.csv"))?;
    report.write_summary_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&args.out_dir.join("queue_replications.csv"))?;
    report.write_replications_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ReportFile {
    version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scree: Option<Vec<callrate::metrics::ScreeRow>>,
}

pub fn report(args: &ReportArgs) -> Result<()> {
    if args.model.is_none() && args.scree_k_max.is_none() {
        return Err(Error::Config("nothing to report: pass --model and/or --scree-k-max".into()));
    }
    let series = load_counts(&args.data)?;
    let model = match &args.model {
        Some(path) => {
            let (doc, model) = read_model(path)?;
            let mu = training_mu(&model, &series)?;
            Some(ModelSummary {
                variant: model.variant,
                k: model.k,
                iterations: doc.fit_report.iterations,
                converged: doc.fit_report.converged,
                stored_deviance: doc.in_sample_deviance,
                recomputed_deviance: poisson_deviance(&series.values(), &mu),
                smoothing: model.smoothing.clone(),
                ciir: doc.ciir,
            })
        }
        None => None,
    };
    let scree_rows = match args.scree_k_max {
        Some(k_max) if k_max >= 2 => {
            let design = if args.scree_variant.is_constrained() { Some(build_design(&series)?) } else { None };
            let y = series.values();
            let devs = (1..=k_max)
                .into_par_iter()
                .map(|k| {
                    let (m, _) = fit_factor_model(&series, design.as_ref(), &FactorConfig::new(k, args.scree_variant))?;
                    Ok((k, poisson_deviance(&y, &flatten_day_major(&m.fitted_mu()))))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(scree(&devs)?)
        }
        Some(_) => return Err(Error::Config("--scree-k-max must be at least 2".into())),
        None => None,
    };
    write_json(&args.out, &ReportFile { version: SCHEMA_VERSION, model, scree: scree_rows })
}
