//! Named trainable parameters and their per-pass tape bindings.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Value};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A named trainable tensor with its optimizer state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Parameter {
    fn new(name: String, tensor: Tensor) -> Self {
        let n = tensor.data.len();
        Parameter {
            name,
            tensor: tensor.with_grad(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Ordered collection of parameters; registration order is the canonical
/// checkpoint order.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<(), ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter::new(name.to_string(), tensor));
        Ok(())
    }

    /// Xavier-uniform init over `[rows, cols]`.
    pub fn register_xavier(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<(), ParamError> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.register(name, Tensor::new(vec![rows, cols], data)?)
    }

    pub fn register_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<(), ParamError> {
        self.register(name, Tensor::zeros(vec![rows, cols]))
    }

    pub fn register_full(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fill: f64,
    ) -> Result<(), ParamError> {
        self.register(name, Tensor::new(vec![rows, cols], vec![fill; rows * cols])?)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter, ParamError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter, ParamError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(ParamError::Unknown(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.data.len()).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }
}

/// One forward/backward pass: a tape plus the parameter leaves bound on it.
pub struct Session {
    pub tape: Tape,
    bound: HashMap<String, Value>,
}

impl Session {
    pub fn new() -> Self {
        Session {
            tape: Tape::new(),
            bound: HashMap::new(),
        }
    }

    /// Bind a parameter as a tape leaf, reusing the leaf on repeated access
    /// so gradients from all uses accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Value, ParamError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(v.clone());
        }
        let p = store.get(name)?;
        let v = self.tape.leaf(&p.tensor)?;
        self.bound.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Copy tape gradients back onto the store, accumulating into any
    /// existing grads. Iterates in store order for determinism.
    pub fn harvest(&self, store: &mut ParamStore) {
        for p in store.params.iter_mut() {
            if let Some(v) = self.bound.get(&p.name) {
                p.tensor.accumulate_grad(&v.grad());
            }
        }
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new();
        ps.register("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(
            ps.register("w", Tensor::zeros(vec![2, 2])),
            Err(ParamError::Duplicate(_))
        ));
    }

    #[test]
    fn bind_reuses_leaf_and_harvest_accumulates() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        ps.register_xavier("w", 1, 3, &mut rng).unwrap();

        let mut sess = Session::new();
        let a = sess.param(&ps, "w").unwrap();
        let b = sess.param(&ps, "w").unwrap();
        // Both handles hit the same leaf: grads from both uses accumulate.
        let loss = a.add(&b).unwrap().sum_all();
        loss.backward().unwrap();
        sess.harvest(&mut ps);
        let g = ps.get("w").unwrap().tensor.grad.clone().unwrap();
        assert_eq!(g, vec![2.0, 2.0, 2.0]);
    }
}
