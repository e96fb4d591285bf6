//! Minimal neural-network kit with hand-written backprop.
//!
//! Parameters live in a flat [`ParamSet`]; layers hold indices into it.
//! Forward passes return per-layer caches, backward passes consume them and
//! accumulate into a [`GradSet`] of matching shape. Everything is generic
//! over f32/f64 so gradient checks can run in double precision.

pub mod adam;
pub mod attention;
pub mod layers;

use ndarray::{ArrayD, IxDyn, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;

/// Element type of network tensors.
pub trait Scalar: NdFloat + FromPrimitive {}
impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn sc<F: Scalar>(x: f64) -> F {
    F::from_f64(x).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat registry of named parameter arrays.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Scalar> {
    arrays: Vec<ArrayD<F>>,
    names: Vec<String>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self { arrays: Vec::new(), names: Vec::new() }
    }

    pub fn alloc(&mut self, name: impl Into<String>, array: ArrayD<F>) -> ParamId {
        self.arrays.push(array);
        self.names.push(name.into());
        ParamId(self.arrays.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.arrays[id.0]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.arrays.iter())
    }

    pub fn arrays(&self) -> &[ArrayD<F>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ArrayD<F>] {
        &mut self.arrays
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn zero_grads(&self) -> GradSet<F> {
        GradSet {
            arrays: self.arrays.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
        }
    }

    pub fn map_to<T: Scalar>(&self, f: impl Fn(F) -> T) -> ParamSet<T> {
        ParamSet {
            arrays: self.arrays.iter().map(|a| a.mapv(&f)).collect(),
            names: self.names.clone(),
        }
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients parallel to a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradSet<F: Scalar> {
    arrays: Vec<ArrayD<F>>,
}

impl<F: Scalar> GradSet<F> {
    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.arrays[id.0]
    }

    pub fn arrays(&self) -> &[ArrayD<F>] {
        &self.arrays
    }

    pub fn add_assign(&mut self, other: &GradSet<F>) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: F) {
        for a in self.arrays.iter_mut() {
            a.mapv_inplace(|v| v * c);
        }
    }

    /// Flatten into one vector (parameter order, row-major per array).
    pub fn to_flat(&self) -> Vec<F> {
        self.arrays.iter().flat_map(|a| a.iter().copied()).collect()
    }
}

/// PyTorch-style fan-in uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_init<F: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || sc::<F>(rng.random_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_set_round_trip() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.alloc("a", ArrayD::zeros(IxDyn(&[2, 3])));
        let b = ps.alloc("b", ArrayD::from_elem(IxDyn(&[4]), 1.5));
        assert_eq!(ps.count(), 10);
        assert_eq!(ps.get(a).len(), 6);
        assert_eq!(ps.get(b)[[0]], 1.5);
        let mut g = ps.zero_grads();
        g.get_mut(b)[[1]] = 2.0;
        let mut g2 = ps.zero_grads();
        g2.add_assign(&g);
        assert_eq!(g2.get(b)[[1]], 2.0);
    }
}
