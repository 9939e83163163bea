//! Training one ensemble member, including BEiT's two-stage schedule.

use eit_core::data::{ImageSample, PreparedSplits};
use eit_core::model::beit::CODE_DIM;
use eit_core::model::{pretrain_mim, MimHead, Teacher, Variant, VqTokenizer};
use eit_core::rng::{key_of, substream};
use eit_core::tensor::Tensor as TensorOf;
use eit_core::train::{init_model, train, History, TrainData};
use eit_core::{Error, Model, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Column label used in reports and prediction files.
pub fn display_name(variant: Variant) -> &'static str {
    match variant {
        Variant::Vit => "ViT",
        Variant::Deit => "DeiT",
        Variant::Cait => "CaiT",
        Variant::Beit => "BEiT",
    }
}

/// What masked-token pre-training did before fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub vocab: usize,
    pub tokenizer_loss: Vec<f64>,
    /// Tokenizer parameters (encoder, center, codebook) before and after
    /// the masked-token stage.
    pub tokenizer_digest_before: String,
    pub tokenizer_digest_after: String,
    pub mim_loss: Vec<f64>,
}

pub struct Trained {
    pub model: Model,
    pub history: History,
    pub pretrain: Option<PretrainRecord>,
}

/// All patches of `images` stacked row-wise.
fn patch_pool(model: &Model, images: &[Tensor]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let width = model.config.patch_width();
    for im in images {
        let p = model.patches(im)?;
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    TensorOf::new([rows, width], data)
}

/// Tokenizer fit and masked-token pre-training of `model` on `train`.
pub fn pretrain_beit(cfg: &RunConfig, model: &mut Model, train: &[ImageSample]) -> Result<PretrainRecord> {
    let images: Vec<Tensor> = train.iter().map(|s| s.to_tensor()).collect();
    let pool = patch_pool(model, &images)?;
    let vocab = cfg.preset.vocab_size();
    let mut rng = substream(cfg.seed, &[key_of("tokenizer")]);
    let mut tokenizer = VqTokenizer::new(model.config.patch_width(), vocab, CODE_DIM, &mut rng)?;
    let tokenizer_loss = tokenizer.fit(&pool, cfg.vq_steps, cfg.vq_lr, &mut rng)?;
    let before = tokenizer.params.digest();
    let mut head = MimHead::new(model.config.dim, vocab, &mut substream(cfg.seed, &[key_of("mim_head")]))?;
    let optim = cfg.train_config().optim;
    let mim_loss = pretrain_mim(
        model,
        &mut head,
        &tokenizer,
        &images,
        cfg.mim_epochs,
        cfg.batch_size(),
        optim,
        &mut substream(cfg.seed, &[key_of("mim")]),
    )?;
    Ok(PretrainRecord {
        vocab,
        tokenizer_loss,
        tokenizer_digest_before: before,
        tokenizer_digest_after: tokenizer.params.digest(),
        mim_loss,
    })
}

/// Trains `variant` on the prepared training split, selecting by validation.
/// DeiT needs `teacher`; BEiT is pre-trained first when `cfg.pretrain` is set.
pub fn train_member(
    cfg: &RunConfig,
    variant: Variant,
    splits: &PreparedSplits,
    teacher: Option<&Model>,
) -> Result<Trained> {
    let mut model: Model = init_model(cfg.model_config(variant), cfg.seed)?;
    let pretrain = if variant == Variant::Beit && cfg.pretrain {
        log::info!("pre-training {variant} on {} images", splits.train.len());
        Some(pretrain_beit(cfg, &mut model, &splits.train)?)
    } else {
        None
    };
    let teacher: Option<&dyn Teacher<f32>> = match (variant, teacher) {
        (Variant::Deit, Some(t)) => Some(t),
        (Variant::Deit, None) => return Err(Error::Config("deit needs a teacher checkpoint".into())),
        _ => None,
    };
    log::info!("training {variant} for up to {} epochs", cfg.epochs);
    let data = TrainData {
        train: &splits.train,
        val: &splits.val,
    };
    let (model, history) = train(model, data, &cfg.train_config(), teacher)?;
    Ok(Trained {
        model,
        history,
        pretrain,
    })
}

pub fn history_csv(history: &History) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for e in &history.epochs {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        ));
    }
    out
}
