//! Sample schema, synthetic peak-demand generation, file ingestion, and batching.

mod generate;
mod io;
mod prep;

pub use generate::{
    generate_synthetic, moving_calendar, series_events, EntitySplit, EventOccurrence,
    GeneratorConfig,
};
pub use io::{
    load_dataset, parse_csv, parse_jsonl, write_csv, write_dataset, write_jsonl, DataFormat,
};
pub use prep::{
    denormalize_values, make_batches, normalize, split_by_time, Batch, Scaler, SCALE_FLOOR,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("series `{series}`: {message}")]
    Series { series: String, message: String },
    #[error("missing column(s): {0:?}")]
    MissingColumns(Vec<String>),
    #[error("unexpected column(s): {0:?}")]
    UnexpectedColumns(Vec<String>),
    #[error("split at week {boundary}: {message}")]
    Split { boundary: i64, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One product's inputs for a single forecast creation date.
///
/// Lookback weeks are `origin_time - L + 1 ..= origin_time`, horizon weeks are
/// `origin_time + 1 ..= origin_time + H`, and `context` covers both, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub series_id: String,
    #[serde(rename = "static")]
    pub static_features: Vec<usize>,
    /// `[L][d_b]`; column 0 is the demand series itself.
    pub observed: Vec<Vec<f64>>,
    /// `[L + H][d_c]`
    pub context: Vec<Vec<f64>>,
    /// `[H]`, absent for pure inference inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    pub origin_time: i64,
}

impl Sample {
    /// Week index of 1-based horizon step `h`.
    pub fn horizon_week(&self, h: usize) -> i64 {
        self.origin_time + h as i64
    }

    pub fn lookback_demand(&self) -> impl Iterator<Item = f64> + '_ {
        self.observed.iter().map(|row| row[0])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticFeature {
    pub name: String,
    pub cardinality: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedColumn {
    pub name: String,
    /// Divided by the per-sample demand scale during normalization.
    pub scaled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    EventFlag,
    Discount,
    Seasonal,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextColumn {
    pub name: String,
    pub kind: ContextKind,
}

/// Named feature layout shared by every sample of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub lookback: usize,
    pub horizon: usize,
    pub static_features: Vec<StaticFeature>,
    /// The first column is the demand (target) series.
    pub observed: Vec<ObservedColumn>,
    pub context: Vec<ContextColumn>,
    /// CSV columns that may be present and are skipped on load.
    #[serde(default)]
    pub ignorable_columns: Vec<String>,
}

impl DatasetSchema {
    pub fn d_static(&self) -> usize {
        self.static_features.len()
    }

    pub fn d_observed(&self) -> usize {
        self.observed.len()
    }

    pub fn d_context(&self) -> usize {
        self.context.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.static_features.iter().map(|s| s.cardinality).collect()
    }

    pub fn target_column(&self) -> &str {
        &self.observed[0].name
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.lookback == 0 || self.horizon == 0 {
            return Err(DataError::Invalid("lookback and horizon must be positive".into()));
        }
        if self.observed.is_empty() {
            return Err(DataError::Invalid(
                "schema needs at least the demand column".into(),
            ));
        }
        if self.static_features.iter().any(|s| s.cardinality == 0) {
            return Err(DataError::Invalid("static cardinality must be positive".into()));
        }
        Ok(())
    }

    /// Checks one sample against the layout.
    pub fn check_sample(&self, s: &Sample) -> Result<(), DataError> {
        let fail = |message: String| {
            Err(DataError::Series {
                series: s.series_id.clone(),
                message,
            })
        };
        let (l, h) = (self.lookback, self.horizon);
        if s.observed.len() != l {
            return fail(format!("observed has {} rows, expected {l}", s.observed.len()));
        }
        if s.context.len() != l + h {
            return fail(format!("context has {} rows, expected {}", s.context.len(), l + h));
        }
        if s.observed.iter().any(|r| r.len() != self.d_observed()) {
            return fail(format!("observed rows must have {} columns", self.d_observed()));
        }
        if s.context.iter().any(|r| r.len() != self.d_context()) {
            return fail(format!("context rows must have {} columns", self.d_context()));
        }
        if s.static_features.len() != self.d_static() {
            return fail(format!(
                "{} static features, expected {}",
                s.static_features.len(),
                self.d_static()
            ));
        }
        for (f, (&ix, spec)) in s.static_features.iter().zip(&self.static_features).enumerate() {
            if ix >= spec.cardinality {
                return fail(format!(
                    "static feature {f} (`{}`) index {ix} >= cardinality {}",
                    spec.name, spec.cardinality
                ));
            }
        }
        let finite = s.observed.iter().chain(&s.context).flatten().all(|v| v.is_finite());
        if !finite {
            return fail("non-finite feature value".into());
        }
        if s.lookback_demand().any(|d| d < 0.0) {
            return fail("negative demand in lookback".into());
        }
        if let Some(t) = &s.target {
            if t.len() != h {
                return fail(format!("target has {} entries, expected {h}", t.len()));
            }
            if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return fail("target demand must be finite and non-negative".into());
            }
        }
        Ok(())
    }
}

/// Samples plus their schema; all samples share the schema's window sizes and widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: DatasetSchema, samples: Vec<Sample>) -> Result<Self, DataError> {
        schema.validate()?;
        for s in &samples {
            schema.check_sample(s)?;
        }
        Ok(Self { schema, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn lookback(&self) -> usize {
        self.schema.lookback
    }

    pub fn horizon(&self) -> usize {
        self.schema.horizon
    }

    /// A dataset with the same schema holding `samples`.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            schema: self.schema.clone(),
            samples,
        }
    }
}
