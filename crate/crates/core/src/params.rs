//! Named parameter tensors with trainability flags and gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.numel()];
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable: false,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn insert_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Param> {
        Ok(self.get(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Copies the value of `from` into `to`; shapes must agree.
    pub fn copy_value(&mut self, from: ParamId, to: ParamId) -> Result<()> {
        let src = self.params[from.0].value.clone();
        let dst = &mut self.params[to.0];
        if src.shape() != dst.value.shape() {
            return Err(Error::Dimension {
                op: "copy_value",
                left: src.shape().to_vec(),
                right: dst.value.shape().to_vec(),
            });
        }
        dst.value = src;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Places parameter `id` on the tape once; later calls return the same node.
    /// The leaf requires a gradient iff the parameter is trainable.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(&v) = tape.bound.get(&id.0) {
            return v;
        }
        let p = &self.params[id.0];
        let v = tape.leaf(p.value.clone(), p.trainable);
        tape.bound.insert(id.0, v);
        v
    }

    /// Adds `scale ×` the tape gradients of every bound trainable parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, scale: f64) {
        for (&idx, &var) in &tape.bound {
            let p = &mut self.params[idx];
            if !p.trainable {
                continue;
            }
            if let Some(g) = tape.grad(var) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
    }

    /// Global L2 norm of the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_is_memoized_and_respects_trainability() {
        let mut store = ParameterStore::new();
        let a = store.insert("a", Tensor::filled(&[2, 2], 1.0)).unwrap();
        let b = store.insert("b", Tensor::filled(&[2, 2], 2.0)).unwrap();
        store.set_trainable(a, true);
        let mut tape = Tape::new();
        let va = store.bind(&mut tape, a);
        assert_eq!(store.bind(&mut tape, a), va);
        let vb = store.bind(&mut tape, b);
        assert!(tape.requires_grad(va));
        assert!(!tape.requires_grad(vb));
        let prod = tape.mul(va, vb).unwrap();
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        store.accumulate_grads(&tape, 0.5);
        assert_eq!(store.get(a).grad, vec![1.0; 4]);
        assert_eq!(store.get(b).grad, vec![0.0; 4]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
        assert!(store.id("missing").is_err());
    }
}
