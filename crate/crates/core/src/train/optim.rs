use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3 / 4.0,
        }
    }
}

/// AdamW over a fixed group of parameters of one store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    tracked: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, tracked: Vec<ParamId>, config: AdamWConfig) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape().to_vec());
        Self {
            config,
            step: 0,
            m: tracked.iter().map(zeros).collect(),
            v: tracked.iter().map(zeros).collect(),
            tracked,
        }
    }

    /// Tracks every parameter of the store.
    pub fn for_all(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        Self::new(store, store.ids().collect(), config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> &[ParamId] {
        &self.tracked
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restores a saved state; shapes must match the tracked parameters.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != self.tracked.len() || v.len() != self.tracked.len() {
            return Err(Error::Incompatible(format!(
                "optimizer state holds {} moment pairs, expected {}",
                m.len().min(v.len()),
                self.tracked.len()
            )));
        }
        for ((a, b), old) in m.iter().zip(&v).zip(&self.m) {
            if a.shape() != old.shape() || b.shape() != old.shape() {
                return Err(Error::Incompatible(format!(
                    "moment shape {:?} does not match parameter {:?}",
                    a.shape(),
                    old.shape()
                )));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. `grads` is indexed by parameter index, as returned by
    /// [`crate::nn::Bound::grads`]; every tracked parameter needs a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        for &id in &self.tracked {
            match grads.get(id.index()) {
                Some(Some(g)) if g.shape() == store.get(id).shape() => {}
                Some(Some(g)) => {
                    return Err(Error::Contract(format!(
                        "gradient {:?} for {} does not match parameter {:?}",
                        g.shape(),
                        store.name(id),
                        store.get(id).shape()
                    )))
                }
                _ => return Err(Error::Contract(format!("missing gradient for {}", store.name(id)))),
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::c(c.lr);
        let decay = T::c(c.lr * c.weight_decay);
        let b1 = T::c(c.beta1);
        let b2 = T::c(c.beta2);
        let one = T::one();
        let correct1 = T::c(1.0 - c.beta1.powi(t));
        let correct2 = T::c(1.0 - c.beta2.powi(t));
        let eps = T::c(c.eps);
        for (k, &id) in self.tracked.iter().enumerate() {
            let g = grads[id.index()].as_ref().expect("checked above");
            let theta = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                theta[i] = theta[i] - decay * theta[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
