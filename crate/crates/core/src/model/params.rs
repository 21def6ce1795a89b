//! Named, ordered parameter storage.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// `N(0, gain² · 2 / fan_in)`.
    He { fan_in: usize, gain: f64 },
    Zeros,
    Const(f64),
    Given(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
    /// False for tensors stored with the model but never updated (a fixed Φ).
    pub trainable: bool,
}

/// Collects parameter specs while an architecture is being laid out.
#[derive(Default)]
pub(crate) struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    pub fn push(&mut self, name: String, shape: Shape, init: Init, trainable: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            trainable,
        });
        self.specs.len() - 1
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Values for every spec of an architecture, in spec order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real = f32> {
    specs: Arc<[ParamSpec]>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub(crate) fn init<R: Rng + ?Sized>(specs: Arc<[ParamSpec]>, rng: &mut R) -> Self {
        let tensors = specs
            .iter()
            .map(|s| {
                let n = s.shape.numel();
                let data: Vec<f64> = match &s.init {
                    Init::He { fan_in, gain } => {
                        let std = gain * (2.0 / (*fan_in).max(1) as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| normal.sample(rng)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Const(v) => vec![*v; n],
                    Init::Given(v) => v.clone(),
                };
                Tensor::from_f64(s.shape, &data).expect("spec shape matches data")
            })
            .collect();
        ParamStore { specs, tensors }
    }

    /// Every trainable weight set to zero; fixed tensors keep their given value.
    pub(crate) fn zeros(specs: Arc<[ParamSpec]>) -> Self {
        let tensors = specs
            .iter()
            .map(|s| match (&s.init, s.trainable) {
                (Init::Given(v), false) => Tensor::from_f64(s.shape, v).expect("spec shape"),
                _ => Tensor::zeros(s.shape),
            })
            .collect();
        ParamStore { specs, tensors }
    }

    pub(crate) fn from_values(specs: Arc<[ParamSpec]>, values: Vec<Vec<T>>) -> Result<Self> {
        if values.len() != specs.len() {
            return Err(Error::shape(
                "parameters",
                format!("{} tensors for {} parameters", values.len(), specs.len()),
            ));
        }
        let tensors = specs
            .iter()
            .zip(values)
            .map(|(s, v)| {
                Tensor::new(s.shape, v).map_err(|_| {
                    Error::shape("parameters", format!("wrong element count for {}", s.name))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamStore { specs, tensors })
    }

    /// Same specs with the given tensors, which must match in count and shape.
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != self.specs.len() {
            return Err(Error::shape(
                "parameters",
                format!("{} tensors for {} parameters", tensors.len(), self.specs.len()),
            ));
        }
        for (s, t) in self.specs.iter().zip(&tensors) {
            if t.shape() != s.shape {
                return Err(Error::shape("parameters", format!("{} has shape {}, expected {}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(ParamStore {
            specs: self.specs.clone(),
            tensors,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.shape.numel())
            .sum()
    }

    /// Copy whose trainable entries are fresh gradient-tracking leaves.
    pub fn tracked(&self) -> Self {
        let tensors = self
            .specs
            .iter()
            .zip(&self.tensors)
            .map(|(s, t)| if s.trainable { t.detach().into_param() } else { t.detach() })
            .collect();
        ParamStore {
            specs: self.specs.clone(),
            tensors,
        }
    }

    /// Copy with no gradient tracking at all.
    pub fn frozen(&self) -> Self {
        ParamStore {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(|t| t.detach()).collect(),
        }
    }

    pub fn replace(&mut self, index: usize, data: Vec<T>) -> Result<()> {
        self.tensors[index] = Tensor::new(self.specs[index].shape, data)?;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    let data = t.data().iter().map(|v| U::from_f64(v.as_f64())).collect();
                    Tensor::new(t.shape(), data).expect("same shape")
                })
                .collect(),
        }
    }
}
