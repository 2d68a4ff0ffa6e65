//! Named parameter storage and the small layer building blocks shared by the model.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named trainable tensors. Initial values are drawn from the stream named after
/// each parameter, so a parameter's initialisation depends only on `(seed, name)`.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(None);
        Ok(ParamId(self.names.len() - 1))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let mut r = rng::stream(self.seed, name);
        let t = Tensor::from_fn(shape.to_vec(), |_| r.random_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::ones(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn grads(&self) -> &[Option<Tensor>] {
        &self.grads
    }

    /// Replaces a value keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?}, model expects {:?}",
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Stores the gradients of a backward pass in the per-parameter slots.
    pub fn store_grads(&mut self, grads: &Gradients, bound: &Bound<'_>) {
        for (slot, var) in self.grads.iter_mut().zip(&bound.vars) {
            *slot = grads.get(*var);
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Splits into values and gradient slots for the optimizer.
    pub fn values_and_grads(&mut self) -> (&mut [Tensor], &[Option<Tensor>]) {
        (&mut self.values, &self.grads)
    }

    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|id| self.grads[id.0].as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// Parameters of one store recorded on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Binds `vars` in store order; used when values come from elsewhere.
    pub(crate) fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        Bound { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradient of every bound parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(*v)).collect()
    }
}

/// `x · W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[fan_in, fan_out], bound)?;
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), &[fan_out])?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.p(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.p(b)),
            None => Ok(y),
        }
    }
}

/// Zero-padded convolution with bias, He-uniform initialisation.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        Ok(Conv {
            weight: store.uniform(&format!("{name}.weight"), &[cout, cin, k, k], bound)?,
            bias: store.zeros(&format!("{name}.bias"), &[cout])?,
            stride,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.p(self.weight), Some(p.p(self.bias)), self.stride)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.ones(&format!("{name}.gamma"), &[width])?,
            beta: store.zeros(&format!("{name}.beta"), &[width])?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.p(self.gamma), p.p(self.beta), Self::EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(3);
        a.uniform("x", &[4], 1.0).unwrap();
        let ya = a.uniform("y", &[4], 1.0).unwrap();
        let mut b = ParamStore::new(3);
        let yb = b.uniform("y", &[4], 1.0).unwrap();
        assert_eq!(a.value(ya), b.value(yb));
        assert!(b.uniform("y", &[4], 1.0).is_err());
    }

    #[test]
    fn linear_forward_and_grads() {
        let mut s = ParamStore::new(0);
        let lin = Linear::new(&mut s, "l", 3, 2, true).unwrap();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let x = tape.constant(Tensor::ones([4, 3]));
        let y = lin.forward(&p, x).unwrap();
        assert_eq!(y.shape(), vec![4, 2]);
        let loss = y.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        s.store_grads(&g, &p);
        assert_eq!(s.grad(lin.bias.unwrap()).unwrap().data(), &[4.0, 4.0]);
        assert_eq!(s.grad(lin.weight).unwrap().data(), &[4.0; 6]);
    }
}
