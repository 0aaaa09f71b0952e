//! Weighted quantile accuracy, overall and on event weeks, plus the ablation
//! runner and report files.
//!
//! `P_α = 2 · Σ L_α(y, ŷ) / Σ |y|`, where `L_α` is the pinball loss at level
//! `α / 100` applied to the matching forecast track. The target-date variant
//! keeps only (sample, horizon) terms whose forecast week `origin + h` is an
//! event week.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{normalize, DataError, Dataset};
use crate::model::{count_parameters, predict, ModelConfig, ModelError, ModelParams, Variant};
use crate::training::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric denominator Σ|y| is zero")]
    ZeroDenominator,
    #[error("no forecast lands on event week(s) {weeks:?}")]
    NoEventMatch { weeks: Vec<i64> },
    #[error("{0}")]
    Invalid(String),
    #[error("variant {variant}, seed {seed}: {source}")]
    Run {
        variant: Variant,
        seed: u64,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quantile {
    P50,
    P90,
}

impl Quantile {
    pub const BOTH: [Quantile; 2] = [Quantile::P50, Quantile::P90];

    pub fn alpha(self) -> u32 {
        match self {
            Quantile::P50 => 50,
            Quantile::P90 => 90,
        }
    }

    pub fn level(self) -> f64 {
        self.alpha() as f64 / 100.0
    }
}

pub fn pinball(level: f64, y: f64, yhat: f64) -> f64 {
    level * (y - yhat).max(0.0) + (1.0 - level) * (yhat - y).max(0.0)
}

/// Forecasts and actuals of one sample, in demand units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub series_id: String,
    pub origin_time: i64,
    pub actual: Vec<f64>,
    pub p50: Vec<f64>,
    pub p90: Vec<f64>,
}

impl EvalRecord {
    pub fn track(&self, q: Quantile) -> &[f64] {
        match q {
            Quantile::P50 => &self.p50,
            Quantile::P90 => &self.p90,
        }
    }
}

/// Which actuals enter the target-date denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Only the indicator-selected terms.
    #[default]
    Selected,
    /// Every horizon of every sample with at least one selected term.
    FullHorizon,
}

fn check_records(records: &[EvalRecord]) -> Result<(), EvalError> {
    for r in records {
        let h = r.actual.len();
        if r.p50.len() != h || r.p90.len() != h {
            return Err(EvalError::Invalid(format!(
                "sample `{}`: forecast lengths {}/{} differ from {h} actuals",
                r.series_id,
                r.p50.len(),
                r.p90.len()
            )));
        }
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> Result<f64, EvalError> {
    if den > 0.0 {
        Ok(2.0 * num / den)
    } else {
        Err(EvalError::ZeroDenominator)
    }
}

pub fn overall_accuracy(records: &[EvalRecord], q: Quantile) -> Result<f64, EvalError> {
    check_records(records)?;
    let (mut num, mut den) = (0.0, 0.0);
    for r in records {
        for (&y, &f) in r.actual.iter().zip(r.track(q)) {
            num += pinball(q.level(), y, f);
            den += y.abs();
        }
    }
    ratio(num, den)
}

/// Accuracy restricted to forecasts whose week `origin + h` (h from 1) is in `weeks`.
pub fn event_accuracy(
    records: &[EvalRecord],
    q: Quantile,
    weeks: &[i64],
    denominator: Denominator,
) -> Result<f64, EvalError> {
    check_records(records)?;
    let (mut num, mut den, mut matched) = (0.0, 0.0, false);
    for r in records {
        let mut hit = false;
        for (i, (&y, &f)) in r.actual.iter().zip(r.track(q)).enumerate() {
            if weeks.contains(&(r.origin_time + i as i64 + 1)) {
                num += pinball(q.level(), y, f);
                hit = true;
                if denominator == Denominator::Selected {
                    den += y.abs();
                }
            }
        }
        if hit && denominator == Denominator::FullHorizon {
            den += r.actual.iter().map(|y| y.abs()).sum::<f64>();
        }
        matched |= hit;
    }
    if !matched {
        return Err(EvalError::NoEventMatch {
            weeks: weeks.to_vec(),
        });
    }
    ratio(num, den)
}

pub fn target_date_accuracy(
    records: &[EvalRecord],
    q: Quantile,
    event_week: i64,
    denominator: Denominator,
) -> Result<f64, EvalError> {
    event_accuracy(records, q, &[event_week], denominator)
}

/// Accuracy of horizon step `h` (1-based) alone.
pub fn horizon_accuracy(records: &[EvalRecord], q: Quantile, h: usize) -> Result<f64, EvalError> {
    check_records(records)?;
    let (mut num, mut den) = (0.0, 0.0);
    for r in records {
        if let (Some(&y), Some(&f)) = (r.actual.get(h - 1), r.track(q).get(h - 1)) {
            num += pinball(q.level(), y, f);
            den += y.abs();
        }
    }
    ratio(num, den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MetricMode {
    Overall,
    TargetDate {
        event_week: i64,
        #[serde(default)]
        denominator: Denominator,
    },
}

/// One metric: quantile, mode, and optionally the subset of series to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub alpha: Quantile,
    pub mode: MetricMode,
    #[serde(default)]
    pub samples: Option<Vec<String>>,
}

impl MetricSpec {
    pub fn evaluate(&self, records: &[EvalRecord]) -> Result<f64, EvalError> {
        let subset: Vec<EvalRecord>;
        let records = match &self.samples {
            None => records,
            Some(ids) => {
                subset = records.iter().filter(|r| ids.contains(&r.series_id)).cloned().collect();
                &subset
            }
        };
        match &self.mode {
            MetricMode::Overall => overall_accuracy(records, self.alpha),
            MetricMode::TargetDate {
                event_week,
                denominator,
            } => target_date_accuracy(records, self.alpha, *event_week, *denominator),
        }
    }
}

/// A named peak week in absolute week units.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpec {
    pub name: String,
    pub week: i64,
}

/// Forecasts for a raw (demand-unit) dataset: normalize per sample, predict,
/// and scale back.
pub fn forecast_records(
    params: &ModelParams,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Vec<EvalRecord>, EvalError> {
    let (scaled, scalers) = normalize(dataset);
    let forecasts = predict(params, &scaled, batch_size)?;
    dataset
        .samples
        .iter()
        .zip(forecasts)
        .zip(scalers)
        .map(|((s, f), sc)| {
            let actual = s.target.clone().ok_or_else(|| {
                EvalError::Invalid(format!("sample `{}` has no target to score", s.series_id))
            })?;
            Ok(EvalRecord {
                series_id: s.series_id.clone(),
                origin_time: s.origin_time,
                actual,
                p50: f.p50.iter().map(|&v| sc.invert(v)).collect(),
                p90: f.p90.iter().map(|&v| sc.invert(v)).collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventMetric {
    pub name: String,
    pub week: i64,
    pub p50: f64,
    pub p90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonPoint {
    pub horizon: usize,
    pub p50: f64,
    pub p90: f64,
}

/// Scores of one trained model on one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: Variant,
    pub seed: u64,
    pub config_digest: String,
    pub parameters: usize,
    pub n_samples: usize,
    /// Σ|y| over every scored term.
    pub denominator: f64,
    pub overall_p50: f64,
    pub overall_p90: f64,
    /// Over the union of event weeks; `None` without events.
    pub event_p50: Option<f64>,
    pub event_p90: Option<f64>,
    pub events: Vec<EventMetric>,
    pub curves: Vec<HorizonPoint>,
    /// Share of forecasts with P50 above P90.
    pub crossing_rate: f64,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize");
    hex::encode(Sha256::digest(&json))
}

pub fn variant_of(config: &ModelConfig) -> Variant {
    match (config.use_taa, config.use_self_attention, config.use_calibration) {
        (false, _, _) => Variant::NoTaa,
        (_, false, _) => Variant::NoSelfAttention,
        (_, _, false) => Variant::NoCalibration,
        _ => Variant::Full,
    }
}

pub fn score_records(
    records: &[EvalRecord],
    events: &[EventSpec],
    denominator: Denominator,
) -> Result<(f64, f64, Option<f64>, Option<f64>, Vec<EventMetric>, Vec<HorizonPoint>), EvalError> {
    let overall_p50 = overall_accuracy(records, Quantile::P50)?;
    let overall_p90 = overall_accuracy(records, Quantile::P90)?;
    let unmatched: Vec<i64> = events
        .iter()
        .filter(|e| event_accuracy(records, Quantile::P50, &[e.week], denominator).is_err())
        .map(|e| e.week)
        .collect();
    if !unmatched.is_empty() {
        return Err(EvalError::NoEventMatch { weeks: unmatched });
    }
    let mut per_event = Vec::with_capacity(events.len());
    for e in events {
        per_event.push(EventMetric {
            name: e.name.clone(),
            week: e.week,
            p50: target_date_accuracy(records, Quantile::P50, e.week, denominator)?,
            p90: target_date_accuracy(records, Quantile::P90, e.week, denominator)?,
        });
    }
    let weeks: Vec<i64> = events.iter().map(|e| e.week).collect();
    let (event_p50, event_p90) = if weeks.is_empty() {
        (None, None)
    } else {
        (
            Some(event_accuracy(records, Quantile::P50, &weeks, denominator)?),
            Some(event_accuracy(records, Quantile::P90, &weeks, denominator)?),
        )
    };
    let h = records.first().map_or(0, |r| r.actual.len());
    let curves = (1..=h)
        .map(|step| {
            Ok(HorizonPoint {
                horizon: step,
                p50: horizon_accuracy(records, Quantile::P50, step)?,
                p90: horizon_accuracy(records, Quantile::P90, step)?,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok((overall_p50, overall_p90, event_p50, event_p90, per_event, curves))
}

/// Scores `params` on a raw test dataset.
pub fn evaluate(
    params: &ModelParams,
    test: &Dataset,
    events: &[EventSpec],
    denominator: Denominator,
    batch_size: usize,
) -> Result<MetricReport, EvalError> {
    let start = Instant::now();
    let records = forecast_records(params, test, batch_size)?;
    let (overall_p50, overall_p90, event_p50, event_p90, events, curves) =
        score_records(&records, events, denominator)?;
    let terms: usize = records.iter().map(|r| r.actual.len()).sum();
    let crossings = records
        .iter()
        .flat_map(|r| r.p50.iter().zip(&r.p90))
        .filter(|(a, b)| a > b)
        .count();
    Ok(MetricReport {
        variant: variant_of(params.config()),
        seed: params.config().seed,
        config_digest: config_digest(params.config()),
        parameters: count_parameters(params),
        n_samples: records.len(),
        denominator: records.iter().flat_map(|r| &r.actual).map(|y| y.abs()).sum(),
        overall_p50,
        overall_p90,
        event_p50,
        event_p90,
        events,
        curves,
        crossing_rate: crossings as f64 / terms.max(1) as f64,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["overall_p50", "overall_p90", "event_p50", "event_p90"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub name: String,
    pub week: i64,
    pub p50: Summary,
    pub p90: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub parameters: usize,
    pub overall_p50: Summary,
    pub overall_p90: Summary,
    pub event_p50: Option<Summary>,
    pub event_p90: Option<Summary>,
    pub events: Vec<EventSummary>,
}

impl AblationRow {
    pub fn metric(&self, name: &str) -> Option<Summary> {
        match name {
            "overall_p50" => Some(self.overall_p50),
            "overall_p90" => Some(self.overall_p90),
            "event_p50" => self.event_p50,
            "event_p90" => self.event_p90,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_digest: String,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<MetricReport>,
}

impl AblationReport {
    /// Groups runs by variant, in order of first appearance.
    pub fn from_runs(config_digest: String, runs: Vec<MetricReport>) -> Self {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &runs {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        let rows = variants
            .into_iter()
            .map(|v| {
                let rs: Vec<&MetricReport> = runs.iter().filter(|r| r.variant == v).collect();
                let col = |f: &dyn Fn(&MetricReport) -> f64| Summary::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
                let opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
                    rs.iter().map(|r| f(r)).collect::<Option<Vec<f64>>>().map(|v| Summary::of(&v))
                };
                let events = rs[0]
                    .events
                    .iter()
                    .enumerate()
                    .map(|(i, e)| EventSummary {
                        name: e.name.clone(),
                        week: e.week,
                        p50: col(&|r| r.events[i].p50),
                        p90: col(&|r| r.events[i].p90),
                    })
                    .collect();
                AblationRow {
                    variant: v,
                    seeds: rs.iter().map(|r| r.seed).collect(),
                    parameters: rs[0].parameters,
                    overall_p50: col(&|r| r.overall_p50),
                    overall_p90: col(&|r| r.overall_p90),
                    event_p50: opt(&|r| r.event_p50),
                    event_p90: opt(&|r| r.event_p90),
                    events,
                }
            })
            .collect();
        Self {
            config_digest,
            rows,
            runs,
        }
    }

    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub n_seeds: usize,
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub denominator: Denominator,
    /// Worker threads for independent runs; results do not depend on it.
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

/// Trains every variant for seeds `0..n_seeds` (offset from the configured
/// model and train seeds) on the same normalized training set, then scores
/// each on the raw test set. Run order and report order are fixed.
pub fn run_ablation(
    train_set: &Dataset,
    test_set: &Dataset,
    model: &ModelConfig,
    training: &TrainConfig,
    ablation: &AblationConfig,
) -> Result<AblationReport, EvalError> {
    if ablation.n_seeds == 0 || ablation.variants.is_empty() || ablation.jobs == 0 {
        return Err(EvalError::Invalid(
            "ablation needs at least one variant, one seed, and one job".into(),
        ));
    }
    let (scaled, _) = normalize(train_set);
    let jobs: Vec<(Variant, u64)> = ablation
        .variants
        .iter()
        .flat_map(|&v| (0..ablation.n_seeds as u64).map(move |s| (v, s)))
        .collect();
    let run = |&(variant, offset): &(Variant, u64)| -> Result<MetricReport, EvalError> {
        let mc = ModelConfig {
            seed: model.seed + offset,
            ..model.with_variant(variant)
        };
        let tc = TrainConfig {
            seed: training.seed + offset,
            ..training.clone()
        };
        let start = Instant::now();
        let inner = || -> Result<MetricReport, EvalError> {
            let (params, _) = train(&mc, &tc, &scaled)?;
            let mut report = evaluate(&params, test_set, &ablation.events, ablation.denominator, 256)?;
            report.wall_clock_seconds = start.elapsed().as_secs_f64();
            Ok(report)
        };
        inner().map_err(|e| EvalError::Run {
            variant,
            seed: mc.seed,
            source: Box::new(e),
        })
    };
    let runs: Vec<MetricReport> = if ablation.jobs == 1 {
        jobs.iter().map(run).collect::<Result<_, _>>()?
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(ablation.jobs)
            .build()
            .map_err(|e| EvalError::Invalid(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_, _>>())?
    };
    Ok(AblationReport::from_runs(config_digest(&(model, training)), runs))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// `variant,metric,mean,sd,ratio_to_full` rows, one per variant and headline metric.
pub fn metrics_csv(report: &AblationReport) -> String {
    let mut s = String::from("variant,metric,mean,sd,ratio_to_full\n");
    let full = report.row(Variant::Full);
    for row in &report.rows {
        for name in METRIC_NAMES {
            let (mean, sd) = row.metric(name).map_or((String::new(), String::new()), |m| (num(m.mean), num(m.sd)));
            let ratio = match (row.metric(name), full.and_then(|f| f.metric(name))) {
                (Some(m), Some(f)) if f.mean > 0.0 => num(m.mean / f.mean),
                _ => String::new(),
            };
            s.push_str(&format!("{},{name},{mean},{sd},{ratio}\n", row.variant));
        }
    }
    s
}

/// `variant,seed,horizon,p50,p90` rows, one per run and horizon step.
pub fn curves_csv(report: &AblationReport) -> String {
    let mut s = String::from("variant,seed,horizon,p50,p90\n");
    for run in &report.runs {
        for c in &run.curves {
            s.push_str(&format!("{},{},{},{},{}\n", run.variant, run.seed, c.horizon, num(c.p50), num(c.p90)));
        }
    }
    s
}

/// Writes `metrics.json`, `metrics.csv`, and `curves.csv` into `out_dir`.
pub fn emit_report(report: &AblationReport, out_dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| EvalError::Invalid(e.to_string()))?;
    fs::write(out_dir.join("metrics.json"), json + "\n")?;
    fs::write(out_dir.join("metrics.csv"), metrics_csv(report))?;
    fs::write(out_dir.join("curves.csv"), curves_csv(report))?;
    Ok(())
}
