//! Optimization, the training loop and checkpoints.

pub mod checkpoint;
pub mod optim;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{evaluate, init_model, train, EpochRecord, History, TrainConfig, TrainData, Trainer};

use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-item gradients, summed in item order.
///
/// Items may be processed on any number of threads; the reduction order is
/// fixed, so the result does not depend on scheduling.
pub fn summed_gradients<T, I, F>(n_params: usize, items: &[I], f: F) -> Result<(f64, Vec<Option<Tensor<T>>>)>
where
    T: Scalar,
    I: Sync,
    F: Fn(&I) -> Result<(f64, Vec<Option<Tensor<T>>>)> + Sync,
{
    let parts: Vec<(f64, Vec<Option<Tensor<T>>>)> = items.par_iter().map(&f).collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut sum: Vec<Option<Tensor<T>>> = vec![None; n_params];
    for (loss, grads) in parts {
        total += loss;
        for (acc, g) in sum.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (_, None) => {}
                (None, Some(g)) => *acc = Some(g),
                (Some(a), Some(g)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x = *x + *y;
                    }
                }
            }
        }
    }
    Ok((total, sum))
}

/// Scales every present gradient by `factor`.
pub fn scale_gradients<T: Scalar>(grads: &mut [Option<Tensor<T>>], factor: f64) {
    let f = T::c(factor);
    for g in grads.iter_mut().flatten() {
        for x in g.data_mut() {
            *x = *x * f;
        }
    }
}
