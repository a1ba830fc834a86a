//! Named tensor store for learnable parameters, plus the matching gradient
//! buffers.
//!
//! Values are held as `f64` for training math but always rounded through
//! `f32` on mutation, so a store round-trips bit-exactly through the `f32`
//! checkpoint payload format.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate tensor name: {0}")]
    DuplicateName(String),
    #[error("missing tensor: {0}")]
    MissingTensor(String),
    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
}

/// Round through `f32`, the checkpoint payload precision.
#[inline]
pub fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Weight decay applies only to convolution/linear weights; never to
    /// normalization scales/offsets, biases or tokens.
    pub decay_eligible: bool,
    /// Mirrored into an EMA teacher during self-distillation.
    pub ema_mirrored: bool,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Insertion-ordered collection of named tensors. Iteration order is the
/// build order, which keeps initialization and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: IndexMap<String, ParamTensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        decay_eligible: bool,
    ) -> Result<(), StoreError> {
        if self.tensors.contains_key(name) {
            return Err(StoreError::DuplicateName(name.to_string()));
        }
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data does not match shape for {name}"
        );
        self.tensors.insert(
            name.to_string(),
            ParamTensor { shape, data, decay_eligible, ema_mirrored: false },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    /// Panicking lookup for internal wiring where a miss is a bug.
    pub fn expect(&self, name: &str) -> &ParamTensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn expect_mut(&mut self, name: &str) -> &mut ParamTensor {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn values(&self, name: &str) -> &[f64] {
        &self.expect(name).data
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Marks every tensor under `prefix` as EMA-mirrored.
    pub fn mark_mirrored(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.ema_mirrored = true;
            }
        }
    }

    /// Clone of all tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore {
        let mut out = ParameterStore::new();
        for (name, t) in &self.tensors {
            if name.starts_with(prefix) {
                out.tensors.insert(name.clone(), t.clone());
            }
        }
        out
    }

    /// Exact value equality (same names, shapes and bit patterns).
    pub fn bytes_eq(&self, other: &ParameterStore) -> bool {
        if self.tensors.len() != other.tensors.len() {
            return false;
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.shape == t.shape && o.data.len() == t.data.len() => {
                    if t.data.iter().zip(&o.data).any(|(a, b)| a.to_bits() != b.to_bits()) {
                        return false;
                    }
                }
                _ => return false,
            }
        }
        true
    }
}

/// Standard deviation of the random weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Builder inserting freshly initialized tensors in a fixed order.
pub struct ParamInit<'a, R: Rng> {
    pub store: &'a mut ParameterStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> ParamInit<'a, R> {
    pub fn new(store: &'a mut ParameterStore, rng: &'a mut R) -> Self {
        ParamInit { store, rng }
    }

    /// Weight tensor drawn from `N(0, INIT_STD)`, decay-eligible.
    pub fn weight(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
        let data: Vec<f64> = (0..n).map(|_| f32_round(dist.sample(self.rng))).collect();
        self.store.insert(name, shape, data, true).expect("unique parameter name");
    }

    /// Gaussian tensor excluded from weight decay (cls token).
    pub fn token(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
        let data: Vec<f64> = (0..n).map(|_| f32_round(dist.sample(self.rng))).collect();
        self.store.insert(name, shape, data, false).expect("unique parameter name");
    }

    /// Zero-initialized bias, no decay.
    pub fn bias(&mut self, name: &str, n: usize) {
        self.store.insert(name, vec![n], vec![0.0; n], false).expect("unique parameter name");
    }

    /// Norm scale (ones) and offset (zeros), no decay.
    pub fn norm(&mut self, gamma: &str, beta: &str, n: usize) {
        self.store.insert(gamma, vec![n], vec![1.0; n], false).expect("unique parameter name");
        self.store.insert(beta, vec![n], vec![0.0; n], false).expect("unique parameter name");
    }
}

/// Gradient buffers aligned with a [`ParameterStore`] (or a trainable subset
/// of one).
#[derive(Clone, Debug, Default)]
pub struct GradStore {
    grads: IndexMap<String, Vec<f64>>,
}

impl GradStore {
    /// Zeroed gradients for every tensor accepted by `trainable`.
    pub fn zeros_like<F: Fn(&str) -> bool>(store: &ParameterStore, trainable: F) -> Self {
        let mut grads = IndexMap::new();
        for (name, t) in store.iter() {
            if trainable(name) {
                grads.insert(name.clone(), vec![0.0; t.len()]);
            }
        }
        GradStore { grads }
    }

    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn expect_mut(&mut self, name: &str) -> &mut [f64] {
        self.grads.get_mut(name).unwrap_or_else(|| panic!("missing gradient {name}"))
    }

    /// Two disjoint mutable gradient slices (weight + bias of one layer).
    pub fn pair_mut(&mut self, a: &str, b: &str) -> (&mut [f64], &mut [f64]) {
        let [ga, gb] = self.grads.get_disjoint_mut([a, b]);
        (
            ga.unwrap_or_else(|| panic!("missing gradient {a}")).as_mut_slice(),
            gb.unwrap_or_else(|| panic!("missing gradient {b}")).as_mut_slice(),
        )
    }

    /// N disjoint mutable gradient slices by name.
    pub fn many_mut<const N: usize>(&mut self, names: [&str; N]) -> [&mut [f64]; N] {
        self.grads.get_disjoint_mut(names).map(|g| {
            g.unwrap_or_else(|| panic!("missing gradient in many_mut")).as_mut_slice()
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Vec<f64>)> {
        self.grads.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a.w", vec![2], vec![0.0; 2], true).unwrap();
        assert!(matches!(
            s.insert("a.w", vec![2], vec![0.0; 2], true),
            Err(StoreError::DuplicateName(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_f32_exact() {
        let build = || {
            let mut s = ParameterStore::new();
            let mut r = rng::stream(11);
            let mut init = ParamInit::new(&mut s, &mut r);
            init.weight("w", vec![16]);
            init.bias("b", 4);
            init.norm("g", "be", 4);
            s
        };
        let a = build();
        let b = build();
        assert!(a.bytes_eq(&b));
        for (_, t) in a.iter() {
            for &v in &t.data {
                assert_eq!(v, f32_round(v));
            }
        }
    }

    #[test]
    fn count_params_sums_tensor_sizes() {
        let mut s = ParameterStore::new();
        assert_eq!(s.count_params(), 0);
        s.insert("w", vec![3, 4], vec![0.0; 12], true).unwrap();
        s.insert("b", vec![4], vec![0.0; 4], false).unwrap();
        assert_eq!(s.count_params(), 16);
    }
}
