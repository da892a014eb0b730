use serde::{Deserialize, Serialize};

use crate::error::{HvqError, Result};

/// One named trainable tensor with its gradient and AdamW moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n = value.len();
        debug_assert_eq!(shape.iter().product::<usize>(), n);
        Param {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered collection of parameters plus the optimizer step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub step: u64,
}

/// Handle returned by [`ParamStore::push`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: Param) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.len() != grad.len() {
            return Err(HvqError::Usage(format!(
                "gradient for {} has {} entries, expected {}",
                p.name,
                grad.len(),
                p.grad.len()
            )));
        }
        p.grad.iter_mut().zip(grad).for_each(|(g, d)| *g += d);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global l2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }
}
