//! Named trainable tensors and their initialisation.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter tensors.
///
/// Order is registration order; it fixes initialisation draws, gradient
/// layout and checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<F>>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Arc::new(value));
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a weight drawn from the Glorot/Xavier uniform law
    /// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = xavier_bound(fan_in, fan_out);
        let t = Tensor::from_fn(shape, |_| F::of(rng.random_range(-bound..=bound)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.tensors.iter_mut().map(Arc::make_mut)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        Bound { vars: self.tensors.iter().map(|t| tape.param(Arc::clone(t))).collect() }
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter names differ between stores".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(format!(
                    "parameter shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = Arc::clone(src);
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Parameters recorded on one tape, addressable by [`ParamId`].
pub struct Bound<'t, F: Scalar> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Scalar> Bound<'t, F> {
    pub fn var(&self, id: ParamId) -> Var<'t, F> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, F>] {
        &self.vars
    }
}
