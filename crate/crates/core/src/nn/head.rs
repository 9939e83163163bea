use super::block::Linear;
use super::params::{Bound, Init, ParamStore};
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

pub const N_CLASSES: usize = 5;
pub const MLP_HEAD_HIDDEN: usize = 128;

/// `D → 128 (Mish) → 5` classifier producing logits.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{prefix}.hidden"), dim, MLP_HEAD_HIDDEN, Init::XavierUniform)?,
            out: Linear::new(store, rng, &format!("{prefix}.out"), MLP_HEAD_HIDDEN, N_CLASSES, Init::XavierUniform)?,
        })
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, y)?;
        let h = g.mish(h);
        self.out.forward(g, p, h)
    }
}

/// Single affine layer `D → 5` producing logits.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub layer: Linear,
}

impl LinearHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            layer: Linear::new(store, rng, prefix, dim, N_CLASSES, Init::XavierUniform)?,
        })
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> Result<Var> {
        self.layer.forward(g, p, y)
    }
}

/// Row-wise softmax of a logit row as plain `f64`s.
pub fn softmax_row<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
