//! Named parameter storage shared by all trainable models.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::tape::{Tape, Var};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, insertion-ordered collection of named parameter tensors.
///
/// Models hold `ParamId`s; each training step binds the store onto a fresh
/// tape and indexes the returned leaves.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f32>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Push every parameter onto the tape as a differentiable leaf, in id order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.leaf_grad(v.clone()))
            .collect()
    }

    /// Push every parameter as a constant leaf (frozen network).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// SHA-256 over names, shapes and little-endian values. Stable across
    /// runs and platforms; used to pin a frozen network to its dependents.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((value.ndim() as u64).to_le_bytes());
            for &d in value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Replace all values; shapes and order must match the current contents.
    pub fn restore_values(&mut self, values: Vec<ArrayD<f32>>) {
        assert_eq!(values.len(), self.values.len(), "parameter count mismatch");
        for (cur, new) in self.values.iter().zip(&values) {
            assert_eq!(cur.shape(), new.shape(), "parameter shape mismatch");
        }
        self.values = values;
    }
}

/// LeCun-normal initialization: N(0, 1/fan_in). The variance-preserving
/// choice for self-normalizing (SELU) networks.
pub fn lecun_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = (1.0 / fan_in as f64).sqrt() as f32;
    let mut out = ArrayD::zeros(IxDyn(shape));
    for x in out.iter_mut() {
        let z: f32 = rng.sample(StandardNormal);
        *x = z * std;
    }
    out
}

/// Zero-initialized parameter (biases).
pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}
