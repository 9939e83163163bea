use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{AdamW, AdamWConfig};
use super::{scale_gradients, summed_gradients};
use crate::data::{augment, ImageSample};
use crate::error::{Error, Result};
use crate::model::{Teacher, TransformerModel, Variant};
use crate::nn::ParamStore;
use crate::rng::{key_of, substream, Rng};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Upper bound on epochs.
    pub epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        Self {
            epochs: 200,
            patience: Some(20),
            batch_size,
            optim: AdamWConfig::default(),
            augment: true,
            seed,
        }
    }
}

#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [ImageSample],
    pub val: &'a [ImageSample],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the epoch's (augmented) training samples, before each update.
    pub train_loss: f64,
    /// Accuracy on un-augmented training images after the epoch.
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn best_train_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max)
    }

    /// First epoch (1-based) whose un-augmented train accuracy reached `target`.
    pub fn epoch_reaching(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.train_acc >= target).map(|e| e.epoch)
    }
}

/// Mean `−ln p[label]` and accuracy, with per-sample probabilities.
pub fn evaluate<T: Scalar>(model: &TransformerModel<T>, samples: &[ImageSample]) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0, Vec::new()));
    }
    let probs: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| model.predict(&s.to_tensor::<T>()))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let loss = samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| -p[s.label].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n;
    let correct = samples.iter().zip(&probs).filter(|(s, p)| argmax(p) == s.label).count();
    Ok((loss, correct as f64 / n, probs))
}

/// Early-stopping key: validation accuracy, then lower validation loss.
fn better(a: &EpochRecord, b: &EpochRecord) -> bool {
    a.val_acc > b.val_acc || (a.val_acc == b.val_acc && a.val_loss < b.val_loss)
}

pub struct Trainer<'a, T: Scalar> {
    pub model: TransformerModel<T>,
    pub history: History,
    opt: AdamW<T>,
    rng: Rng,
    epoch: usize,
    config: TrainConfig,
    data: TrainData<'a>,
    teacher: Option<&'a dyn Teacher<T>>,
    best: Option<(EpochRecord, ParamStore<T>)>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        model: TransformerModel<T>,
        config: TrainConfig,
        data: TrainData<'a>,
        teacher: Option<&'a dyn Teacher<T>>,
    ) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if model.variant() == Variant::Deit && teacher.is_none() {
            return Err(Error::Config("a distilled model needs a teacher".into()));
        }
        let opt = AdamW::for_all(&model.params, config.optim);
        Ok(Self {
            model,
            history: History::default(),
            opt,
            rng: substream(config.seed, &[key_of("shuffle")]),
            epoch: 0,
            config,
            data,
            teacher,
            best: None,
        })
    }

    /// Continues from a checkpoint written by [`Self::checkpoint`].
    pub fn resume(
        ckpt: &Checkpoint<T>,
        config: TrainConfig,
        data: TrainData<'a>,
        teacher: Option<&'a dyn Teacher<T>>,
    ) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut t = Self::new(model, config, data, teacher)?;
        if let Some(opt) = ckpt.to_optimizer(&t.model)? {
            t.opt = opt;
        }
        t.rng = ckpt
            .rng
            .clone()
            .ok_or_else(|| Error::Incompatible("checkpoint carries no rng state".into()))?;
        t.epoch = ckpt.epoch;
        if let Ok(h) = serde_json::from_value::<History>(ckpt.meta.clone()) {
            t.history = h;
        }
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::of_model(&self.model).with_optimizer(&self.model, &self.opt);
        ck.rng = Some(self.rng.clone());
        ck.epoch = self.epoch;
        ck.meta = serde_json::to_value(&self.history).expect("history serializes");
        ck
    }

    /// One pass over the shuffled training split, then evaluation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let n_params = self.model.params.ids().count();
        let epoch = self.epoch as u64;
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let model = &self.model;
            let cfg = &self.config;
            let train = self.data.train;
            let teacher = self.teacher;
            let (loss, mut grads) = summed_gradients(n_params, batch, |&i| {
                let s = &train[i];
                let s = if cfg.augment {
                    augment(s, &mut substream(cfg.seed, &[epoch, key_of(&s.id)]))
                } else {
                    s.clone()
                };
                let image = s.to_tensor::<T>();
                let teacher_label = match teacher {
                    Some(t) => Some(argmax(&t.teacher_logits(&image)?)),
                    None => None,
                };
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true);
                let l = model.loss(&mut g, &p, &image, s.label, teacher_label)?;
                let value = g.value(l).data()[0].as_f64();
                g.backward(l)?;
                Ok((value, p.grads(&g)))
            })?;
            scale_gradients(&mut grads, 1.0 / batch.len() as f64);
            self.opt.step(&mut self.model.params, &grads)?;
            total += loss;
        }
        self.epoch += 1;
        let (_, train_acc, _) = evaluate(&self.model, self.data.train)?;
        let (val_loss, val_acc, _) = evaluate(&self.model, self.data.val)?;
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: total / self.data.train.len() as f64,
            train_acc,
            val_loss,
            val_acc,
        };
        log::debug!(
            "{} epoch {}: loss {:.4} train {:.3} val {:.3}",
            self.model.variant(),
            record.epoch,
            record.train_loss,
            record.train_acc,
            record.val_acc
        );
        if self.best.as_ref().map_or(true, |(b, _)| better(&record, b)) {
            self.best = Some((record.clone(), self.model.params.clone()));
            self.history.best_epoch = Some(record.epoch);
        }
        self.history.epochs.push(record.clone());
        Ok(record)
    }

    fn patience_exhausted(&self) -> bool {
        match (self.config.patience, self.history.best_epoch) {
            (Some(p), Some(best)) => self.epoch - best >= p,
            _ => false,
        }
    }

    /// Trains until the epoch budget or patience runs out, then restores the
    /// best-validation parameters.
    pub fn fit(mut self) -> Result<(TransformerModel<T>, History)> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
            if self.patience_exhausted() {
                self.history.stopped_early = true;
                break;
            }
        }
        if let Some((_, params)) = self.best.take() {
            self.model.params = params;
        }
        Ok((self.model, self.history))
    }
}

/// Trains `model` with [`Trainer`] and returns the best-validation model.
pub fn train<T: Scalar>(
    model: TransformerModel<T>,
    data: TrainData<'_>,
    config: &TrainConfig,
    teacher: Option<&dyn Teacher<T>>,
) -> Result<(TransformerModel<T>, History)> {
    Trainer::new(model, config.clone(), data, teacher)?.fit()
}

/// Fresh model for `config` drawn from the run seed.
pub fn init_model<T: Scalar>(config: crate::model::ModelConfig, seed: u64) -> Result<TransformerModel<T>> {
    TransformerModel::new(config.clone(), &mut substream(seed, &[key_of("init"), key_of(config.variant.name())]))
}
