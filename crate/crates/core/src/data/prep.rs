use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Sample};
use crate::numerics::{stream_rng, Array};

/// Lower bound on the per-sample demand scale.
pub const SCALE_FLOOR: f64 = 1e-3;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Splits by forecast creation week: train samples satisfy
/// `origin_time + H <= boundary`, test samples `origin_time >= boundary`.
///
/// Samples whose horizon straddles the boundary would leak targets and are rejected.
pub fn split_by_time(dataset: &Dataset, boundary: i64) -> Result<(Dataset, Dataset), DataError> {
    let h = dataset.horizon() as i64;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut straddling = Vec::new();
    for s in &dataset.samples {
        if s.origin_time >= boundary {
            test.push(s.clone());
        } else if s.origin_time + h <= boundary {
            train.push(s.clone());
        } else {
            straddling.push(s.series_id.as_str());
        }
    }
    if !straddling.is_empty() {
        return Err(DataError::Split {
            boundary,
            message: format!(
                "{} sample(s) straddle the boundary, first `{}`",
                straddling.len(),
                straddling[0]
            ),
        });
    }
    if train.is_empty() || test.is_empty() {
        return Err(DataError::Split {
            boundary,
            message: format!("empty side (train {}, test {})", train.len(), test.len()),
        });
    }
    Ok((dataset.with_samples(train), dataset.with_samples(test)))
}

/// Per-sample demand scale: mean lookback demand, floored at [`SCALE_FLOOR`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub scale: f64,
    /// Set when the lookback demand was all zero.
    pub flagged: bool,
}

impl Scaler {
    pub fn fit(sample: &Sample) -> Self {
        let n = sample.observed.len().max(1) as f64;
        let mean = sample.lookback_demand().sum::<f64>() / n;
        Self {
            scale: mean.max(SCALE_FLOOR),
            flagged: !sample.lookback_demand().any(|d| d > 0.0),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        v / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale
    }
}

/// Divides the scaled observed columns and the target by each sample's scale.
/// Context features are left unchanged.
pub fn normalize(dataset: &Dataset) -> (Dataset, Vec<Scaler>) {
    let scaled: Vec<bool> = dataset.schema.observed.iter().map(|c| c.scaled).collect();
    let mut scalers = Vec::with_capacity(dataset.len());
    let samples = dataset
        .samples
        .iter()
        .map(|s| {
            let scaler = Scaler::fit(s);
            scalers.push(scaler);
            let mut out = s.clone();
            for row in &mut out.observed {
                for (v, &on) in row.iter_mut().zip(&scaled) {
                    if on {
                        *v = scaler.apply(*v);
                    }
                }
            }
            if let Some(t) = &mut out.target {
                t.iter_mut().for_each(|v| *v = scaler.apply(*v));
            }
            out
        })
        .collect();
    (dataset.with_samples(samples), scalers)
}

/// Maps normalized values back to demand units.
pub fn denormalize_values(values: &[f64], scaler: &Scaler) -> Vec<f64> {
    values.iter().map(|&v| scaler.invert(v)).collect()
}

/// Stacked model inputs for a group of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the stacked samples in the source dataset.
    pub indices: Vec<usize>,
    /// `[B][d_s]` category indices.
    pub statics: Vec<Vec<usize>>,
    /// `[B, L, d_b]`
    pub observed: Array,
    /// `[B, L + H, d_c]`
    pub context: Array,
    /// `[B, H]`
    pub target: Option<Array>,
}

impl Batch {
    pub fn from_samples(dataset: &Dataset, indices: &[usize]) -> Result<Self, DataError> {
        let schema = &dataset.schema;
        let (l, h) = (schema.lookback, schema.horizon);
        let b = indices.len();
        let mut observed = Vec::with_capacity(b * l * schema.d_observed());
        let mut context = Vec::with_capacity(b * (l + h) * schema.d_context());
        let mut target = Vec::with_capacity(b * h);
        let mut has_target = true;
        let mut statics = Vec::with_capacity(b);
        for &i in indices {
            let s = dataset
                .samples
                .get(i)
                .ok_or_else(|| DataError::Invalid(format!("sample index {i} out of range")))?;
            observed.extend(s.observed.iter().flatten());
            context.extend(s.context.iter().flatten());
            match &s.target {
                Some(t) => target.extend_from_slice(t),
                None => has_target = false,
            }
            statics.push(s.static_features.clone());
        }
        let shape_err = |e| DataError::Invalid(format!("ragged batch: {e}"));
        Ok(Self {
            indices: indices.to_vec(),
            statics,
            observed: Array::new(vec![b, l, schema.d_observed()], observed).map_err(shape_err)?,
            context: Array::new(vec![b, l + h, schema.d_context()], context).map_err(shape_err)?,
            target: if has_target {
                Some(Array::new(vec![b, h], target).map_err(shape_err)?)
            } else {
                None
            },
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits the dataset into batches of `batch_size` (last one partial).
/// With a shuffle seed the sample order is a seeded permutation; without, it is
/// the dataset order.
pub fn make_batches(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch_size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM));
    }
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_samples(dataset, chunk))
        .collect()
}
