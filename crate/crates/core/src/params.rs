//! Named parameter collections and their binding onto an autodiff graph.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learnable arrays of one network, keyed by layer path (`conv1.weight`).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors.values().map(Tensor::sum_squares).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors.values_mut() {
            t.scale_in_place(k);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Dimension(format!(
                "parameter sets differ in size: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::Dimension(format!(
                    "parameter `{ka}` {:?} does not match `{kb}` {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Places every tensor on `graph`, trainable or constant.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// A [`ParamSet`] living on a graph.
pub struct Bound<'g, T: Scalar> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Gradients of every bound parameter, zero where the loss does not depend on it.
    pub fn gradients(&self, grads: &Gradients<T>) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
                .collect(),
        }
    }
}

/// Seeded layer-by-layer parameter construction.
pub struct ParamBuilder<T> {
    rng: ChaCha8Rng,
    set: ParamSet<T>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            set: ParamSet::new(),
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    /// Convolution `[c_out, c_in, k, k]` plus bias, He-normal initialized.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize) {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let w = self.normal(&[c_out, c_in, kernel, kernel], std);
        self.set.insert(format!("{name}.weight"), w);
        self.set.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
    }

    /// Like [`ParamBuilder::conv`] with a caller-chosen weight scale and bias fill.
    pub fn conv_scaled(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, std: f64, bias: f64) {
        let w = self.normal(&[c_out, c_in, kernel, kernel], std);
        self.set.insert(format!("{name}.weight"), w);
        self.set.insert(format!("{name}.bias"), Tensor::full(&[c_out], T::of(bias)));
    }

    /// Transposed convolution `[c_in, c_out, k, k]` plus bias.
    pub fn conv_transpose(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize) {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let w = self.normal(&[c_in, c_out, kernel, kernel], std);
        self.set.insert(format!("{name}.weight"), w);
        self.set.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}
