use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, Default)]
pub struct AdamState<F> {
    pub step_count: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step_count: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    /// Applies one update from the gradients held in `store`, then clears them.
    ///
    /// Parameters with `requires_grad == false` are skipped; any other
    /// parameter without a gradient is an error and leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        for id in store.ids() {
            if store.requires_grad(id) && store.grad(id).is_none() {
                return Err(TensorError::MissingGrad(store.name(id).to_string()));
            }
        }
        if self.state.m.len() != store.len() {
            self.state.m = store.ids().map(|id| vec![F::zero(); store.value(id).numel()]).collect();
            self.state.v = self.state.m.clone();
        }
        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.requires_grad(id) {
                continue;
            }
            let g = store.grad(id).expect("checked above").to_vec();
            let (m, v) = (&mut self.state.m[id.index()], &mut self.state.v[id.index()]);
            let value = store.value_mut(id).data_mut();
            for i in 0..value.len() {
                let gi = g[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = F::from_f64(mi);
                v[i] = F::from_f64(vi);
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                value[i] = F::from_f64(value[i].as_f64() - update);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
