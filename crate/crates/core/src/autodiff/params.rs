//! Named trainable parameters, stored outside any tape.
//!
//! A [`ParamStore`] owns every parameter of a model: its current value and a
//! same-shape gradient accumulator. Tapes reference parameters by id, copy the
//! values they need at graph-construction time and scatter gradients back
//! through [`Tape::apply_param_grads`](super::Tape::apply_param_grads).

use super::{AutodiffError, Tensor};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Owns all parameters of one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique within a store.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, AutodiffError> {
        self.add_with(name, value, true)
    }

    pub fn add_with(
        &mut self,
        name: &str,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId, AutodiffError> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Plain SGD step over every trainable parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }

    /// True if any gradient entry is NaN or infinite.
    pub fn grads_nonfinite(&self) -> bool {
        self.params
            .iter()
            .any(|p| p.grad.data().iter().any(|g| !g.is_finite()))
    }
}
