use rand::Rng;
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A trainable tensor and the gradient from the most recent backward pass.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of parameters. Registration order is part of the
/// model format: it fixes the layout used by serialization and Adam.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Tape handles for every parameter of a store, from [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Wrap externally created leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Overwrite one parameter, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{} is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        p.grad = None;
        Ok(())
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Register every parameter as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.variable(p.value.clone())).collect())
    }

    /// Register every parameter as a constant leaf (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.constant(p.value.clone())).collect())
    }

    /// Copy gradients out of a finished backward pass. Parameters the loss
    /// does not depend on receive a zero gradient.
    pub fn absorb(&mut self, grads: &Gradients, bound: &Bound) {
        for (p, var) in self.params.iter_mut().zip(bound.vars()) {
            p.grad = Some(
                grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())),
            );
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replace values by name from a loaded snapshot, checking shapes.
    pub fn load_values(&mut self, loaded: &[(String, Tensor)]) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, file holds {}",
                self.params.len(),
                loaded.len()
            )));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(loaded) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    value.shape()
                )));
            }
            p.value = value.clone();
            p.grad = None;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes, and exact value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }
}

/// Glorot-uniform initialization.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}
