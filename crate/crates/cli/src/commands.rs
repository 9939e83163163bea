//! One function per subcommand. Each writes its artifacts into a [`RunDir`].

use std::path::{Path, PathBuf};

use eit_core::data::{read_image, sample::resize_bilinear, ImageSample};
use eit_core::ensemble::{
    grid_search_alpha, labels_for, majority_vote_predict, read_labels_csv, weighted_mean_predict,
    write_labels_csv, GridResult, PredictionSet,
};
use eit_core::explain::{grad_cam, overlay_png, SaliencyMap};
use eit_core::metrics::MetricReport;
use eit_core::model::Variant;
use eit_core::nn::N_CLASSES;
use eit_core::tensor::argmax;
use eit_core::train::{evaluate, init_model, load_checkpoint, save_checkpoint, train, Checkpoint, TrainData};
use eit_core::{Error, Model, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_dataset, write_dataset, IMAGES_DIR, LABELS_FILE, SPLIT_FILE};
use crate::members::{display_name, history_csv, train_member};
use crate::run::RunDir;

pub fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint::<f32>(path)?.to_model()
}

/// Member probabilities for `samples`, in sample order.
pub fn predict_samples(model: &Model, samples: &[ImageSample]) -> Result<Vec<[f64; N_CLASSES]>> {
    let (_, _, probs) = evaluate(model, samples)?;
    probs
        .into_iter()
        .map(|p| <[f64; N_CLASSES]>::try_from(p.as_slice()).map_err(|_| Error::Contract("model is not 5-way".into())))
        .collect()
}

pub fn labels_of(samples: &[ImageSample]) -> Vec<(String, usize)> {
    samples.iter().map(|s| (s.id.clone(), s.label)).collect()
}

/// Synthetic dataset directory with its split.
pub fn synth(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let (samples, _) = crate::data::synthetic(cfg)?;
    let split = eit_core::data::stratified_split(&samples, cfg.seed)?;
    write_dataset(run.root(), &samples, &split)?;
    for s in &samples {
        run.path(&format!("{IMAGES_DIR}/{}.png", s.id))?;
    }
    run.path(LABELS_FILE)?;
    run.path(SPLIT_FILE)?;
    let hist = eit_core::data::class_histogram(&samples);
    let mut text = String::from("class,count\n");
    for (k, n) in hist.iter().enumerate() {
        text.push_str(&format!("{k},{n}\n"));
    }
    run.report(
        "synth",
        &format!(
            "{} images, train {} / val {} / test {}\n\n{text}",
            samples.len(),
            split.train.len(),
            split.val.len(),
            split.test.len()
        ),
        None,
    )
}

/// Trains every configured variant. DeiT uses `teacher`, or the ViT
/// trained earlier in the same run.
pub fn train_cmd(cfg: &RunConfig, run: &mut RunDir, teacher: Option<&Path>) -> Result<()> {
    let data = load_dataset(cfg)?;
    let splits = data.prepare()?;
    let mut teacher_model = teacher.map(load_model).transpose()?;
    let mut summary = String::from("variant,epochs,best_epoch,best_train_acc,best_val_acc\n");
    for &variant in &cfg.variants {
        let trained = train_member(cfg, variant, &splits, teacher_model.as_ref())?;
        let name = variant.name();
        let mut ckpt = Checkpoint::of_model(&trained.model);
        ckpt.epoch = trained.history.epochs.len();
        ckpt.meta = serde_json::to_value(&trained.history).expect("history serializes");
        save_checkpoint(&run.path(&format!("{name}.ckpt"))?, &ckpt)?;
        run.write(&format!("history/{name}.csv"), &history_csv(&trained.history))?;
        if let Some(p) = &trained.pretrain {
            run.write_json(&format!("{name}_pretrain.json"), p)?;
        }
        let best_val = trained
            .history
            .best_epoch
            .and_then(|b| trained.history.epochs.get(b - 1))
            .map_or(0.0, |e| e.val_acc);
        summary.push_str(&format!(
            "{name},{},{},{:.4},{:.4}\n",
            trained.history.epochs.len(),
            trained.history.best_epoch.unwrap_or(0),
            trained.history.best_train_acc(),
            best_val
        ));
        if variant == Variant::Vit && teacher_model.is_none() {
            teacher_model = Some(trained.model);
        }
    }
    run.report("train", &summary, Some(&summary))
}

pub fn eval(cfg: &RunConfig, run: &mut RunDir, ckpt: &Path, split: &str) -> Result<MetricReport> {
    let model = load_model(ckpt)?;
    let samples = load_dataset(cfg)?.split_samples(split)?;
    let probs = predict_samples(&model, &samples)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let truths: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let report = MetricReport::new(&truths, &preds)?;
    run.report("eval", &report.to_text(), Some(&report.to_csv()))?;
    Ok(report)
}

/// Model names are checkpoint file stems.
pub fn predict(cfg: &RunConfig, run: &mut RunDir, ckpts: &[PathBuf], split: &str) -> Result<PredictionSet> {
    if ckpts.is_empty() {
        return Err(Error::Config("predict needs at least one checkpoint".into()));
    }
    let samples = load_dataset(cfg)?.split_samples(split)?;
    let mut names = Vec::new();
    let mut tables = Vec::new();
    for path in ckpts {
        let model = load_model(path)?;
        names.push(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| model.variant().name().to_string()),
        );
        tables.push(predict_samples(&model, &samples)?);
    }
    let preds = PredictionSet::new(samples.iter().map(|s| s.id.clone()).collect(), names, tables)?;
    preds.write_csv(&run.path("preds.csv")?)?;
    write_labels_csv(&run.path("labels.csv")?, &labels_of(&samples))?;
    Ok(preds)
}

/// Combines stored predictions with fixed weights (`cfg.alpha`) or by vote.
pub fn ensemble(cfg: &RunConfig, run: &mut RunDir, preds: &Path, labels: &Path, vote: bool) -> Result<Vec<usize>> {
    let set = PredictionSet::read_csv(preds)?;
    let truths = labels_for(&set, &read_labels_csv(labels)?)?;
    let (combined, how) = if vote {
        (majority_vote_predict(&set), "majority vote".to_string())
    } else {
        let alpha = cfg
            .alpha
            .as_ref()
            .ok_or_else(|| Error::Config("weighted mean needs alpha".into()))?;
        (
            weighted_mean_predict(&set, alpha)?,
            format!("weighted mean, alpha {}", eit_core::ensemble::format_alpha(alpha)),
        )
    };
    let report = MetricReport::new(&truths, &combined)?;
    let mut csv = String::from("sample_id,label\n");
    for (id, p) in set.sample_ids().iter().zip(&combined) {
        csv.push_str(&format!("{id},{p}\n"));
    }
    run.write("ensemble_predictions.csv", &csv)?;
    run.report(
        "ensemble",
        &format!("members: {}\ncombiner: {how}\n\n{}", set.model_names().join(", "), report.to_text()),
        Some(&report.to_csv()),
    )?;
    Ok(combined)
}

pub fn gridsearch(cfg: &RunConfig, run: &mut RunDir, preds: &Path, labels: &Path) -> Result<GridResult> {
    let set = PredictionSet::read_csv(preds)?;
    let truths = labels_for(&set, &read_labels_csv(labels)?)?;
    let result = grid_search_alpha(&set, &truths, cfg.grid_step)?;
    run.write_json("alpha.json", &result)?;
    let mut csv = String::from("model,alpha\n");
    for (name, a) in set.model_names().iter().zip(&result.alpha) {
        csv.push_str(&format!("{name},{a}\n"));
    }
    run.report(
        "gridsearch",
        &format!(
            "members: {}\nalpha*: {}\naccuracy: {:.2}%\nlattice points: {}\n",
            set.model_names().join(", "),
            eit_core::ensemble::format_alpha(&result.alpha),
            100.0 * result.accuracy,
            result.evaluated
        ),
        Some(&csv),
    )?;
    Ok(result)
}

/// Grad-CAM for one PNG; the target defaults to the predicted class.
pub fn gradcam(
    _cfg: &RunConfig,
    run: &mut RunDir,
    ckpt: &Path,
    image: &Path,
    class: Option<usize>,
) -> Result<SaliencyMap> {
    let model = load_model(ckpt)?;
    let (w, h, pixels) = read_image(image)?;
    let side = model.config.image_side;
    let pixels = resize_bilinear(w, h, &pixels, side);
    let sample = ImageSample::new("input", side, pixels, 0)?;
    let tensor = sample.to_tensor::<f32>();
    let target = match class {
        Some(c) => c,
        None => argmax(&model.predict(&tensor)?),
    };
    let map = grad_cam(&model, &tensor, target)?;
    overlay_png(&sample.pixels, &map, &run.path("gradcam.png")?)?;
    let mut grid = String::new();
    for row in map.grid.chunks(map.grid_side) {
        grid.push_str(&row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(","));
        grid.push('\n');
    }
    run.report("gradcam", &format!("target class: {target}\n\n{grid}"), Some(&grid))?;
    Ok(map)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub heads: usize,
    pub dim: usize,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Embedding width for `heads`: the configured width rounded up to a multiple.
pub fn sweep_dim(dim: usize, heads: usize) -> usize {
    dim.div_ceil(heads) * heads
}

/// Accuracy against head count for the first configured variant.
pub fn sweep_heads(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<SweepRow>> {
    let variant = cfg.variants[0];
    if variant == Variant::Deit {
        return Err(Error::Config("sweep-heads needs a variant without a teacher".into()));
    }
    let data = load_dataset(cfg)?;
    let splits = data.prepare()?;
    let mut rows = Vec::new();
    for &heads in &cfg.sweep_heads {
        let base = cfg.model_config(variant);
        let dim = sweep_dim(base.dim, heads);
        let mcfg = base.with_heads(heads).with_dim(dim);
        log::info!("sweep: {variant} with {heads} heads, width {dim}");
        let model: Model = init_model(mcfg, cfg.seed)?;
        let (model, _) = train(
            model,
            TrainData {
                train: &splits.train,
                val: &splits.val,
            },
            &cfg.train_config(),
            None,
        )?;
        let (_, val_acc, _) = evaluate(&model, &splits.val)?;
        let (_, test_acc, _) = evaluate(&model, &splits.test)?;
        rows.push(SweepRow {
            heads,
            dim,
            val_acc,
            test_acc,
        });
    }
    let mut text = format!("{:>6}  {:>6}  {:>12}  {:>13}\n", "heads", "width", "val acc (%)", "test acc (%)");
    let mut csv = String::from("heads,width,val_acc,test_acc\n");
    for r in &rows {
        text.push_str(&format!(
            "{:>6}  {:>6}  {:>12.2}  {:>13.2}\n",
            r.heads,
            r.dim,
            100.0 * r.val_acc,
            100.0 * r.test_acc
        ));
        csv.push_str(&format!("{},{},{:.2},{:.2}\n", r.heads, r.dim, 100.0 * r.val_acc, 100.0 * r.test_acc));
    }
    run.report(
        "sweep_heads",
        &format!("variant: {}\n\n{text}", display_name(variant)),
        Some(&csv),
    )?;
    Ok(rows)
}
