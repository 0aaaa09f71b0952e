use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::data::DatasetSchema;

fn default_hidden() -> usize {
    60
}
fn default_heads() -> usize {
    1
}
fn default_dropout_static() -> f64 {
    0.5
}
fn default_dropout_other() -> f64 {
    0.1
}
fn one() -> usize {
    1
}
fn default_calib_hidden() -> usize {
    32
}
fn default_kernel() -> usize {
    3
}
fn default_dilations() -> Vec<usize> {
    vec![1, 2]
}
fn yes() -> bool {
    true
}

/// Architecture hyperparameters plus the data widths the network is built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    /// One entry per static feature.
    pub static_cardinalities: Vec<usize>,
    pub d_observed: usize,
    pub d_context: usize,
    #[serde(default = "default_hidden")]
    pub d_hidden: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_dropout_static")]
    pub dropout_static: f64,
    #[serde(default = "default_dropout_other")]
    pub dropout_other: f64,
    #[serde(default = "one")]
    pub n_encoder_blocks: usize,
    #[serde(default = "one")]
    pub n_decoder_blocks: usize,
    #[serde(default = "default_calib_hidden")]
    pub calib_hidden: usize,
    #[serde(default = "default_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "default_dilations")]
    pub conv_dilations: Vec<usize>,
    #[serde(default = "yes")]
    pub use_taa: bool,
    #[serde(default = "yes")]
    pub use_self_attention: bool,
    #[serde(default = "yes")]
    pub use_calibration: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Largest network a config may describe.
pub const MAX_PARAMETERS: usize = 20_000_000;

impl ModelConfig {
    /// Default architecture sized for `schema`.
    pub fn for_schema(schema: &DatasetSchema) -> Self {
        Self {
            lookback: schema.lookback,
            horizon: schema.horizon,
            static_cardinalities: schema.cardinalities(),
            d_observed: schema.d_observed(),
            d_context: schema.d_context(),
            d_hidden: default_hidden(),
            n_heads: default_heads(),
            dropout_static: default_dropout_static(),
            dropout_other: default_dropout_other(),
            n_encoder_blocks: 1,
            n_decoder_blocks: 1,
            calib_hidden: default_calib_hidden(),
            conv_kernel: default_kernel(),
            conv_dilations: default_dilations(),
            use_taa: true,
            use_self_attention: true,
            use_calibration: true,
            seed: 0,
        }
    }

    /// Published hyperparameters: hidden 60, one head, dropout 0.5 on static
    /// features and 0.1 elsewhere.
    pub fn paper(schema: &DatasetSchema) -> Self {
        Self::for_schema(schema)
    }

    /// Smaller hidden width for single-core runs on the synthetic desk dataset.
    pub fn desk(schema: &DatasetSchema) -> Self {
        Self {
            d_hidden: 16,
            ..Self::for_schema(schema)
        }
    }

    /// Tiny network used for gradient checking.
    pub fn micro() -> Self {
        Self {
            lookback: 8,
            horizon: 4,
            static_cardinalities: vec![3],
            d_observed: 2,
            d_context: 4,
            d_hidden: 8,
            n_heads: 1,
            dropout_static: default_dropout_static(),
            dropout_other: default_dropout_other(),
            n_encoder_blocks: 1,
            n_decoder_blocks: 1,
            calib_hidden: 4,
            conv_kernel: default_kernel(),
            conv_dilations: default_dilations(),
            use_taa: true,
            use_self_attention: true,
            use_calibration: true,
            seed: 0,
        }
    }

    pub fn d_static(&self) -> usize {
        self.static_cardinalities.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        let dims = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("d_observed", self.d_observed),
            ("d_context", self.d_context),
            ("d_hidden", self.d_hidden),
            ("n_heads", self.n_heads),
            ("n_encoder_blocks", self.n_encoder_blocks),
            ("n_decoder_blocks", self.n_decoder_blocks),
            ("calib_hidden", self.calib_hidden),
            ("conv_kernel", self.conv_kernel),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.static_cardinalities.is_empty() || self.static_cardinalities.contains(&0) {
            return fail("need at least one static feature, each with positive cardinality".into());
        }
        if self.d_hidden % self.n_heads != 0 {
            return fail(format!(
                "d_hidden {} is not divisible by n_heads {}",
                self.d_hidden, self.n_heads
            ));
        }
        for (name, p) in [
            ("dropout_static", self.dropout_static),
            ("dropout_other", self.dropout_other),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1)"));
            }
        }
        if self.conv_dilations.is_empty() || self.conv_dilations.contains(&0) {
            return fail("conv_dilations must be a non-empty list of positive values".into());
        }
        let bound = self.parameter_bound();
        if bound > MAX_PARAMETERS {
            return fail(format!(
                "network would hold up to {bound} parameters, above the limit of {MAX_PARAMETERS}"
            ));
        }
        Ok(())
    }

    /// Upper bound on the trainable value count, saturating instead of overflowing.
    pub fn parameter_bound(&self) -> usize {
        let d = self.d_hidden;
        let sq = |v: usize| v.saturating_mul(v);
        let sum = |xs: &[usize]| xs.iter().fold(0usize, |a, &b| a.saturating_add(b));
        let blocks = self.n_encoder_blocks.saturating_add(self.n_decoder_blocks);
        let per_block = sq(d).saturating_mul(12).saturating_add(d.saturating_mul(14));
        let widest = self.d_observed.max(self.d_context).max(d);
        let conv = self
            .conv_kernel
            .saturating_mul(widest)
            .saturating_mul(d)
            .saturating_add(d)
            .saturating_mul(self.conv_dilations.len());
        let steps = self.lookback.saturating_add(self.horizon);
        let tokens = conv.saturating_mul(3).saturating_add(steps.saturating_mul(d).saturating_mul(2));
        let statics = sum(&self.static_cardinalities)
            .saturating_add(self.static_cardinalities.len().saturating_mul(d))
            .saturating_add(1)
            .saturating_mul(d);
        let l = self.lookback;
        let translation = sq(l).saturating_add(l).saturating_mul(4).saturating_add(steps.saturating_mul(steps));
        let calibration = self.d_context.saturating_add(2).saturating_mul(self.calib_hidden).saturating_add(1);
        sum(&[
            blocks.saturating_mul(per_block),
            tokens,
            statics,
            translation,
            calibration,
            d.saturating_mul(2).saturating_add(2),
        ])
    }

    /// Names the first disagreement between the network widths and `schema`.
    pub fn check_schema(&self, schema: &DatasetSchema) -> Result<(), ModelError> {
        let pairs = [
            ("lookback", self.lookback, schema.lookback),
            ("horizon", self.horizon, schema.horizon),
            ("observed width", self.d_observed, schema.d_observed()),
            ("context width", self.d_context, schema.d_context()),
            ("static feature count", self.d_static(), schema.d_static()),
        ];
        for (what, model, data) in pairs {
            if model != data {
                return Err(ModelError::Schema(format!(
                    "{what}: model expects {model}, dataset has {data}"
                )));
            }
        }
        if self.static_cardinalities != schema.cardinalities() {
            return Err(ModelError::Schema(format!(
                "static cardinalities: model expects {:?}, dataset has {:?}",
                self.static_cardinalities,
                schema.cardinalities()
            )));
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        match variant {
            Variant::Full => {}
            Variant::NoTaa => c.use_taa = false,
            Variant::NoSelfAttention => c.use_self_attention = false,
            Variant::NoCalibration => c.use_calibration = false,
        }
        c
    }
}

/// Ablation variants: the full network and one with each component removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoTaa,
    NoSelfAttention,
    NoCalibration,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoTaa,
        Variant::NoSelfAttention,
        Variant::NoCalibration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTaa => "no_taa",
            Variant::NoSelfAttention => "no_self_attention",
            Variant::NoCalibration => "no_calibration",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
