use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param<F> {
    name: String,
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

/// Named trainable tensors and their accumulated gradients.
///
/// Cloning is a deep copy in effect: tensor buffers are copy-on-write.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let cur = &self.params[id.0].value;
        if cur.shape() != value.shape() {
            return shape_err("set_value", cur.shape(), value.shape());
        }
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&[F]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.params[id.0].requires_grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds parameter gradients from a backward pass into the store.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a = *a + v;
                    }
                }
                slot => *slot = Some(g.to_vec()),
            }
        }
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    requires_grad: p.requires_grad,
                })
                .collect(),
        }
    }

    /// Bitwise equality of all values (names and order must match too).
    pub fn values_equal(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}
