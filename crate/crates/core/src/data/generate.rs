use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    ContextColumn, ContextKind, DataError, Dataset, DatasetSchema, ObservedColumn, Sample,
    StaticFeature,
};
use crate::numerics::stream_rng;

pub const WEEKS_PER_YEAR: i64 = 52;
pub const MAX_SENSITIVITY: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventOccurrence {
    pub week: i64,
    pub event_id: String,
    pub discount: f64,
}

/// Whether training and test samples come from different series.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntitySplit {
    #[default]
    Disjoint,
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_series: usize,
    pub t_total: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub n_categories: usize,
    /// Promotional sensitivity of each category, in `[0, MAX_SENSITIVITY]`.
    pub sensitivity: Vec<f64>,
    pub base_log_mean: f64,
    pub base_log_sd: f64,
    /// Yearly seasonal amplitude, in `[0, 1)`.
    pub seasonal_amplitude: f64,
    pub events: Vec<EventOccurrence>,
    /// Each series moves every event outside the test horizon by its own
    /// uniform draw in `[-event_jitter, event_jitter]` weeks.
    #[serde(default)]
    pub event_jitter: i64,
    pub event_amplitude: f64,
    pub noise_log_sd: f64,
    pub page_view_log_sd: f64,
    pub seed: u64,
    /// Forecast creation week of every test sample.
    pub test_origin: i64,
    /// Share of series reserved for testing under a disjoint split.
    pub test_fraction: f64,
    #[serde(default)]
    pub entity_split: EntitySplit,
    pub train_samples_per_series: usize,
}

impl GeneratorConfig {
    /// Desk-scale peaked dataset: 2000 series over five years, `L = 52`, `H = 13`,
    /// events "A" and "B" landing on horizon steps 3 and 11 of the test origin.
    pub fn desk() -> Self {
        let t_total = 260;
        let test_origin = 208;
        Self {
            n_series: 2000,
            t_total,
            lookback: 52,
            horizon: 13,
            n_categories: 4,
            sensitivity: vec![0.0, 0.5, 1.0, 2.0],
            base_log_mean: 3.0,
            base_log_sd: 1.0,
            seasonal_amplitude: 0.3,
            events: moving_calendar(
                t_total,
                test_origin,
                &[("A", 3, 0.5), ("B", 11, 0.3), ("C", 22, 0.4), ("D", 35, 0.6)],
                1,
                42,
            ),
            event_jitter: 2,
            event_amplitude: 4.0,
            noise_log_sd: 0.15,
            page_view_log_sd: 0.2,
            seed: 42,
            test_origin,
            test_fraction: 0.2,
            entity_split: EntitySplit::Disjoint,
            train_samples_per_series: 4,
        }
    }

    /// Tiny dataset matching the micro model: `L = 8`, `H = 4`, one event at
    /// horizon step 2.
    pub fn micro() -> Self {
        let t_total = 60;
        let test_origin = 50;
        Self {
            n_series: 60,
            t_total,
            lookback: 8,
            horizon: 4,
            n_categories: 3,
            sensitivity: vec![0.0, 1.0, 2.0],
            base_log_mean: 2.0,
            base_log_sd: 0.5,
            seasonal_amplitude: 0.3,
            events: moving_calendar(t_total, test_origin, &[("A", 2, 0.5)], 2, 7),
            event_jitter: 1,
            event_amplitude: 2.0,
            noise_log_sd: 0.1,
            page_view_log_sd: 0.2,
            seed: 7,
            test_origin,
            test_fraction: 0.25,
            entity_split: EntitySplit::Disjoint,
            train_samples_per_series: 4,
        }
    }

    /// Week indices of events falling inside the test horizon.
    pub fn test_event_weeks(&self) -> Vec<(String, i64)> {
        let end = self.test_origin + self.horizon as i64;
        self.events
            .iter()
            .filter(|e| e.week > self.test_origin && e.week <= end)
            .map(|e| (e.event_id.clone(), e.week))
            .collect()
    }

    pub fn event_ids(&self) -> Vec<String> {
        self.events
            .iter()
            .map(|e| e.event_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.n_series == 0 || self.lookback == 0 || self.horizon == 0 {
            return fail("n_series, lookback and horizon must be positive".into());
        }
        if self.lookback + self.horizon > self.t_total {
            return fail(format!(
                "lookback + horizon = {} exceeds t_total = {}",
                self.lookback + self.horizon,
                self.t_total
            ));
        }
        if self.n_categories == 0 || self.sensitivity.len() != self.n_categories {
            return fail(format!(
                "{} sensitivities for {} categories",
                self.sensitivity.len(),
                self.n_categories
            ));
        }
        if self
            .sensitivity
            .iter()
            .any(|s| !(0.0..=MAX_SENSITIVITY).contains(s))
        {
            return fail(format!("sensitivities must lie in [0, {MAX_SENSITIVITY}]"));
        }
        if !(0.0..1.0).contains(&self.seasonal_amplitude) {
            return fail("seasonal_amplitude must lie in [0, 1)".into());
        }
        for (name, v) in [
            ("base_log_sd", self.base_log_sd),
            ("event_amplitude", self.event_amplitude),
            ("noise_log_sd", self.noise_log_sd),
            ("page_view_log_sd", self.page_view_log_sd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.base_log_mean.is_finite() {
            return fail("base_log_mean must be finite".into());
        }
        let mut weeks = BTreeSet::new();
        for e in &self.events {
            if !(0.0..=1.0).contains(&e.discount) {
                return fail(format!("event at week {}: discount outside [0, 1]", e.week));
            }
            if e.event_id.is_empty() {
                return fail(format!("event at week {}: empty id", e.week));
            }
            if !weeks.insert(e.week) {
                return fail(format!("two events share week {}", e.week));
            }
        }
        if self.event_jitter < 0 {
            return fail("event_jitter must be non-negative".into());
        }
        if let Some(gap) = weeks.iter().zip(weeks.iter().skip(1)).map(|(a, b)| b - a).min() {
            if gap <= 2 * self.event_jitter {
                return fail(format!(
                    "events {gap} weeks apart could collide under a jitter of {} weeks",
                    self.event_jitter
                ));
            }
        }
        let (l, h) = (self.lookback as i64, self.horizon as i64);
        if self.test_origin < l - 1 || self.test_origin + h > self.t_total as i64 - 1 {
            return fail(format!(
                "test_origin {} leaves no room for the lookback/horizon windows",
                self.test_origin
            ));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return fail("test_fraction must lie in [0, 1]".into());
        }
        if self.train_samples_per_series > self.train_origin_range().count() {
            return fail(format!(
                "{} train samples per series but only {} admissible origins",
                self.train_samples_per_series,
                self.train_origin_range().count()
            ));
        }
        Ok(())
    }

    /// Origins whose full horizon ends strictly before the test origin.
    fn train_origin_range(&self) -> std::ops::RangeInclusive<i64> {
        (self.lookback as i64 - 1)..=(self.test_origin - self.horizon as i64 - 1)
    }

    fn n_test_series(&self) -> usize {
        match self.entity_split {
            EntitySplit::Shared => self.n_series,
            EntitySplit::Disjoint => {
                (self.n_series as f64 * self.test_fraction).round() as usize
            }
        }
    }

    pub fn schema(&self) -> DatasetSchema {
        let mut context: Vec<ContextColumn> = self
            .event_ids()
            .into_iter()
            .map(|id| ContextColumn {
                name: format!("event_{id}"),
                kind: ContextKind::EventFlag,
            })
            .collect();
        context.push(ContextColumn {
            name: "discount".into(),
            kind: ContextKind::Discount,
        });
        for name in ["sin_woy", "cos_woy"] {
            context.push(ContextColumn {
                name: name.into(),
                kind: ContextKind::Seasonal,
            });
        }
        DatasetSchema {
            lookback: self.lookback,
            horizon: self.horizon,
            static_features: vec![StaticFeature {
                name: "category".into(),
                cardinality: self.n_categories,
            }],
            observed: vec![
                ObservedColumn {
                    name: "demand".into(),
                    scaled: true,
                },
                ObservedColumn {
                    name: "page_views".into(),
                    scaled: true,
                },
            ],
            context,
            ignorable_columns: Vec::new(),
        }
    }
}

/// Events that recur once a year but move: the occurrence in year `k` lands
/// `shift_k` weeks from the anchor, with `shift_k` uniform in `[-max_shift, max_shift]`
/// and zero in the test year so the test horizon still sees each event at `step`.
///
/// Entries are `(id, horizon step relative to test_origin, discount)`.
pub fn moving_calendar(
    t_total: usize,
    test_origin: i64,
    events: &[(&str, i64, f64)],
    max_shift: i64,
    seed: u64,
) -> Vec<EventOccurrence> {
    let mut rng = stream_rng(seed, CALENDAR_STREAM);
    let mut out = Vec::new();
    for &(id, step, discount) in events {
        let anchor = (test_origin + step).rem_euclid(WEEKS_PER_YEAR);
        let mut year = 0;
        loop {
            let shift = rng.random_range(-max_shift..=max_shift);
            let base = anchor + year * WEEKS_PER_YEAR;
            if base >= t_total as i64 {
                break;
            }
            let week = if base == test_origin + step {
                base
            } else {
                base + shift
            };
            if (0..t_total as i64).contains(&week) {
                out.push(EventOccurrence {
                    week,
                    event_id: id.to_string(),
                    discount,
                });
            }
            year += 1;
        }
    }
    out.sort_by_key(|e| e.week);
    out
}

const CALENDAR_STREAM: u64 = 0x4341_4c45;

struct SeriesPath {
    category: usize,
    demand: Vec<f64>,
    page_views: Vec<f64>,
}

/// The calendar as seen by series `index`: events inside the test horizon stay
/// put, the others move by a per-series draw without crossing into or out of
/// the test horizon or the simulated range.
pub fn series_events(config: &GeneratorConfig, index: usize) -> Vec<EventOccurrence> {
    let j = config.event_jitter;
    if j == 0 {
        return config.events.clone();
    }
    let mut rng = stream_rng(config.seed, JITTER_STREAM_BASE + index as u64);
    let (start, end) = (config.test_origin, config.test_origin + config.horizon as i64);
    let last = config.t_total as i64 - 1;
    config
        .events
        .iter()
        .map(|e| {
            let shift = rng.random_range(-j..=j);
            let week = if e.week > start && e.week <= end {
                e.week
            } else if e.week <= start {
                (e.week + shift).clamp(0, start)
            } else {
                (e.week + shift).clamp(end + 1, last)
            };
            EventOccurrence { week, ..e.clone() }
        })
        .collect()
}

const JITTER_STREAM_BASE: u64 = 1 << 32;

/// Known-context rows for every week of the simulation.
fn context_table(config: &GeneratorConfig, events: &[EventOccurrence]) -> Vec<Vec<f64>> {
    let ids = config.event_ids();
    let by_week: BTreeMap<i64, &EventOccurrence> = events.iter().map(|e| (e.week, e)).collect();
    (0..config.t_total as i64)
        .map(|t| {
            let mut row = vec![0.0; ids.len()];
            let mut discount = 0.0;
            if let Some(e) = by_week.get(&t) {
                let col = ids.iter().position(|id| *id == e.event_id).expect("id listed");
                row[col] = 1.0;
                discount = e.discount;
            }
            let angle = 2.0 * PI * t.rem_euclid(WEEKS_PER_YEAR) as f64 / WEEKS_PER_YEAR as f64;
            row.extend([discount, angle.sin(), angle.cos()]);
            row
        })
        .collect()
}

/// `demand(i, t) = base_i · season(t) · (1 + s(cat_i) · amplitude · discount_t · flag_t) · exp(ε_t)`.
///
/// Random draws happen in a fixed order per series (category, base level, demand
/// noise, page-view noise, training origins) and never depend on the calendar.
fn simulate_series(
    config: &GeneratorConfig,
    context: &[Vec<f64>],
    rng: &mut impl Rng,
) -> SeriesPath {
    let category = rng.random_range(0..config.n_categories);
    let base_dist = Normal::new(config.base_log_mean, config.base_log_sd).expect("validated sd");
    let base = base_dist.sample(rng).exp();
    let noise = Normal::new(0.0, config.noise_log_sd).expect("validated sd");
    let pv_noise = Normal::new(0.0, config.page_view_log_sd).expect("validated sd");
    let n_events = config.event_ids().len();
    let sens = config.sensitivity[category];

    let demand: Vec<f64> = (0..config.t_total)
        .map(|t| {
            let row = &context[t];
            let flag: f64 = row[..n_events].iter().sum();
            let discount = row[n_events];
            let angle = 2.0 * PI * (t as i64).rem_euclid(WEEKS_PER_YEAR) as f64
                / WEEKS_PER_YEAR as f64;
            let season = 1.0 + config.seasonal_amplitude * angle.sin();
            let uplift = 1.0 + sens * config.event_amplitude * discount * flag;
            base * season * uplift * noise.sample(rng).exp()
        })
        .collect();
    let page_views = demand
        .iter()
        .map(|d| d * pv_noise.sample(rng).exp())
        .collect();
    SeriesPath {
        category,
        demand,
        page_views,
    }
}

fn window(path: &SeriesPath, context: &[Vec<f64>], id: String, origin: i64, l: usize, h: usize) -> Sample {
    let first = (origin + 1) as usize - l;
    let last = origin as usize;
    Sample {
        series_id: id,
        static_features: vec![path.category],
        observed: (first..=last)
            .map(|t| vec![path.demand[t], path.page_views[t]])
            .collect(),
        context: context[first..=last + h].to_vec(),
        target: Some(path.demand[last + 1..=last + h].to_vec()),
        origin_time: origin,
    }
}

/// Deterministic synthetic peak-demand dataset.
///
/// Training samples have origins whose horizon ends before `test_origin`; test
/// samples all share `test_origin`. Under [`EntitySplit::Disjoint`] the last
/// `test_fraction` of the series only produce test samples.
pub fn generate_synthetic(config: &GeneratorConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let shared = context_table(config, &config.events);
    let n_test = config.n_test_series();
    let first_test = config.n_series - n_test;
    let (l, h) = (config.lookback, config.horizon);
    let origins = config.train_origin_range();
    let n_origins = origins.clone().count();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..config.n_series {
        let mut rng = stream_rng(config.seed, i as u64);
        let own;
        let context = if config.event_jitter == 0 {
            &shared
        } else {
            own = context_table(config, &series_events(config, i));
            &own
        };
        let path = simulate_series(config, context, &mut rng);
        let has_train = config.entity_split == EntitySplit::Shared || i < first_test;
        let has_test = i >= first_test;
        let n_train = if has_train { config.train_samples_per_series } else { 0 };
        let single = n_train + usize::from(has_test) == 1;
        let id = |origin: i64| {
            if single {
                format!("s{i:05}")
            } else {
                format!("s{i:05}-w{origin}")
            }
        };
        if n_train > 0 {
            let mut picks: Vec<i64> = sample_indices(&mut rng, n_origins, n_train)
                .into_iter()
                .map(|k| origins.start() + k as i64)
                .collect();
            picks.sort_unstable();
            for origin in picks {
                train.push(window(&path, context, id(origin), origin, l, h));
            }
        }
        if has_test {
            let origin = config.test_origin;
            test.push(window(&path, context, id(origin), origin, l, h));
        }
    }
    train.extend(test);
    Dataset::new(config.schema(), train)
}
