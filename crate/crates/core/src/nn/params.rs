//! Named parameter storage. Parameters are registered in a fixed order at
//! network construction; that order defines gradient layout, optimizer state
//! layout, and checkpoint layout.

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    /// Insert every parameter into a tape, in id order. With
    /// `trainable = false` the parameters act as constants (useful when a
    /// network participates in a loss but must not receive updates).
    pub fn spawn_leaves(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Replace all values from `(name, tensor)` pairs. The key set and every
    /// shape must match exactly; extra, missing or reshaped entries are
    /// errors (guards against loading a checkpoint from a different config).
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, file has {}",
                self.names.len(),
                entries.len()
            )));
        }
        let mut sorted: Vec<&(String, Tensor)> = entries.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, tensor) in sorted {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name:?}")))?;
            if self.tensors[idx].shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    self.tensors[idx].shape()
                )));
            }
            self.tensors[idx] = tensor.clone();
        }
        Ok(())
    }
}

/// Registers parameters under hierarchical names and initializes weights.
pub struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: &'a mut ChaCha20Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(params: &'a mut ParamSet, rng: &'a mut ChaCha20Rng) -> Self {
        Builder {
            params,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            format!("{name}.")
        } else {
            format!("{}{name}.", self.prefix)
        };
        Builder {
            params: self.params,
            rng: self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        format!("{}{name}", self.prefix)
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.params.add(self.full(name), tensor)
    }

    /// He-normal init: N(0, sqrt(2 / fan_in)).
    pub fn he_normal(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("std is positive and finite");
        let len = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| dist.sample(self.rng)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    /// Conv weight `[Cout, Cin/g, kh, kw]`, fan-in derived from the shape.
    pub fn conv_weight(&mut self, name: &str, shape: [usize; 4]) -> ParamId {
        let fan_in = shape[1] * shape[2] * shape[3];
        self.he_normal(name, shape.to_vec(), fan_in)
    }

    pub fn linear_weight(&mut self, name: &str, shape: [usize; 2]) -> ParamId {
        self.he_normal(name, shape.to_vec(), shape[1])
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn scalar(&mut self, name: &str, v: f64) -> ParamId {
        self.add(name, Tensor::scalar(v))
    }
}
