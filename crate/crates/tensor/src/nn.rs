//! Parameterized building blocks on top of the tape.

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x W + b`, with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in_dim)`, zero bias.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'t, F: Scalar>(&self, tape: &'t Tape<F>, store: &ParamStore<F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.matmul(w)?.add_row(b)
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

/// Layer norm over the last axis with learned gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, tape: &'t Tape<F>, store: &ParamStore<F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let axis = x.shape().len() - 1;
        let g = tape.param(store, self.gain);
        let s = tape.param(store, self.shift);
        x.layer_norm(axis)?.mul_row(g)?.add_row(s)
    }
}
