//! Named parameter storage shared by the encoder, decoder, optimizer, and
//! checkpoints.
//!
//! Parameters live outside any computation graph. Each forward pass registers
//! them as leaves on a fresh tape ([`ParamSet::register`]), keeping the tape
//! single-use while the `ParamSet` persists across steps.

use adapt_tensor::{Graph, Real, Tensor, TensorId};
use rand::Rng;

/// Stable index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Register a new named parameter. Names must be unique; they key the
    /// checkpoint format.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_values(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Push every parameter onto a fresh tape as a trainable leaf, in id
    /// order, so `result[id.index()]` is the tape handle for `id`.
    pub fn register(&self, g: &mut Graph<T>) -> Vec<TensorId> {
        self.values.iter().map(|t| g.leaf(t.clone())).collect()
    }
}

/// Glorot/fan-average uniform init for a `[d_in, d_out]` weight used as
/// `x · W`.
pub fn xavier_uniform<T: Real>(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Tensor<T> {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(vec![d_in, d_out], data).expect("valid shape")
}

pub fn zeros<T: Real>(shape: Vec<usize>) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones<T: Real>(shape: Vec<usize>) -> Tensor<T> {
    Tensor::filled(shape, T::one())
}

/// Small-scale uniform init for embeddings and weight generators.
pub fn uniform<T: Real>(rng: &mut impl Rng, shape: Vec<usize>, limit: f64) -> Tensor<T> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn register_aligns_ids_with_tape_handles() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let a = ps.add("a", Tensor::filled(vec![2], 1.0));
        let b = ps.add("b", Tensor::filled(vec![3], 2.0));
        let mut g = Graph::new();
        let ids = ps.register(&mut g);
        assert_eq!(g.value(ids[a.index()]).data(), &[1.0, 1.0]);
        assert_eq!(g.value(ids[b.index()]).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(ps.total_values(), 5);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("w", Tensor::zeros(vec![1]));
        ps.add("w", Tensor::zeros(vec![1]));
    }

    #[test]
    fn xavier_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = xavier_uniform(&mut rng, 8, 8);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < limit));
    }
}
