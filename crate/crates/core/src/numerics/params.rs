//! Named parameter storage and the small layer handles built on it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{stream_rng, Array, Graph, NumericsError, StreamRng, Var};

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    #[serde(flatten)]
    pub value: Array,
}

/// Flat, ordered list of named trainable arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<NamedParam>", into = "Vec<NamedParam>")]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl TryFrom<Vec<NamedParam>> for ParamStore {
    type Error = NumericsError;

    fn try_from(list: Vec<NamedParam>) -> Result<Self, Self::Error> {
        let mut store = Self::default();
        for p in list {
            store.insert(p.name, p.value)?;
        }
        Ok(store)
    }
}

impl From<ParamStore> for Vec<NamedParam> {
    fn from(store: ParamStore) -> Self {
        store
            .names
            .into_iter()
            .zip(store.values)
            .map(|(name, value)| NamedParam { name, value })
            .collect()
    }
}

impl ParamStore {
    pub fn insert(&mut self, name: String, value: Array) -> Result<ParamId, NumericsError> {
        if self.names.contains(&name) {
            return Err(NumericsError::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|a| a.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Registers every parameter as a trainable leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|v| g.param(v.clone())).collect()
    }

    /// Checks that `other` holds the same names and shapes, in order.
    pub fn check_layout(&self, other: &ParamStore) -> Result<(), NumericsError> {
        if self.names != other.names {
            let missing = self.names.iter().find(|n| !other.names.contains(n));
            let extra = other.names.iter().find(|n| !self.names.contains(n));
            return Err(NumericsError::InvalidArgument(format!(
                "parameter names differ (expected-only: {missing:?}, found-only: {extra:?})"
            )));
        }
        for ((name, a), b) in self.names.iter().zip(&self.values).zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(NumericsError::InvalidArgument(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Stream index for a parameter name, so each array's initial values depend only
/// on `(seed, name)` and not on which other parameters exist.
fn name_stream(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seeded initializer that fills a [`ParamStore`].
pub struct ParamBuilder {
    store: ParamStore,
    seed: u64,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            seed,
            prefix: Vec::new(),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(scope.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn rng(&self, full: &str) -> StreamRng {
        stream_rng(self.seed, name_stream(full))
    }

    fn add(&mut self, full: String, value: Array) -> ParamId {
        self.store
            .insert(full, value)
            .expect("parameter names are unique by construction")
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let full = self.full_name(name);
        let mut rng = self.rng(&full);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let value = Array::new(shape.to_vec(), data).expect("length matches shape");
        self.add(full, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], sd: f64) -> ParamId {
        let full = self.full_name(name);
        let mut rng = self.rng(&full);
        let dist = Normal::new(0.0, sd).expect("sd is positive");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let value = Array::new(shape.to_vec(), data).expect("length matches shape");
        self.add(full, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.add(full, Array::full(shape, value))
    }

    /// `[d_in, d_out]` weight and `[d_out]` bias, both `U(±1/√d_in)`.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = 1.0 / (d_in as f64).sqrt();
        self.scoped(name, |b| Linear {
            weight: b.uniform("weight", &[d_in, d_out], bound),
            bias: b.uniform("bias", &[d_out], bound),
            d_in,
            d_out,
        })
    }

    /// A linear map starting at exactly zero.
    pub fn linear_zeros(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        self.scoped(name, |b| Linear {
            weight: b.constant("weight", &[d_in, d_out], 0.0),
            bias: b.constant("bias", &[d_out], 0.0),
            d_in,
            d_out,
        })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        self.scoped(name, |b| LayerNorm {
            gain: b.constant("gain", &[d], 1.0),
            bias: b.constant("bias", &[d], 0.0),
            d,
        })
    }
}

/// One forward evaluation: the tape, the bound parameter leaves, and the
/// dropout mode and stream.
pub struct Pass<'a> {
    pub graph: &'a mut Graph,
    pub params: &'a [Var],
    pub training: bool,
    pub rng: &'a mut StreamRng,
}

impl Pass<'_> {
    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, NumericsError> {
        self.graph.dropout(x, rate, self.training, &mut *self.rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var, NumericsError> {
        let (w, b) = (pass.p(self.weight), pass.p(self.bias));
        pass.graph.linear(x, w, b)
    }

    pub fn count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

impl LayerNorm {
    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var, NumericsError> {
        let (g, b) = (pass.p(self.gain), pass.p(self.bias));
        pass.graph.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}
