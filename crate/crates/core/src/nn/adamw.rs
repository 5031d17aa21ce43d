//! AdamW: Adam with decoupled weight decay.

use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Result, SimiError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, ..Self::default() }
    }

    /// One update of every parameter in `store` from its stored gradient:
    ///
    /// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`
    ///
    /// Nothing is modified if any gradient is missing.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(SimiError::MissingGradient(name.to_string()));
        }
        let t = store.step() + 1;
        store.set_step(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::one() - T::of(self.beta1.powi(t as i32));
        let bc2 = T::one() - T::of(self.beta2.powi(t as i32));
        let (lr, eps, decay) = (T::of(self.lr), T::of(self.eps), T::of(self.lr * self.weight_decay));
        for (_, p) in store.iter_mut() {
            let grad = p.grad.as_ref().expect("checked above");
            let values = p.value.data_mut().iter_mut();
            let moments = p.first_moment.data_mut().iter_mut().zip(p.second_moment.data_mut().iter_mut());
            for ((theta, (m, v)), &g) in values.zip(moments).zip(grad.data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps) - decay * *theta;
            }
        }
        Ok(())
    }
}
