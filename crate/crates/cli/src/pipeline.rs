//! End-to-end run: data, four members, predictions, weight search,
//! ensemble table, metrics and saliency overlays.

use std::time::Instant;

use eit_core::ensemble::{
    ensemble_report, grid_search_alpha, majority_vote_predict, weighted_mean_predict, write_labels_csv,
    AlphaSource, EnsembleReport, PredictionSet,
};
use eit_core::explain::{grad_cam, overlay_png};
use eit_core::metrics::MetricReport;
use eit_core::model::Variant;
use eit_core::tensor::argmax;
use eit_core::train::{save_checkpoint, Checkpoint, History};
use eit_core::{Model, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{labels_of, predict_samples};
use crate::config::RunConfig;
use crate::data::{load_dataset, SPLIT_FILE};
use crate::members::{display_name, history_csv, train_member, PretrainRecord};
use crate::run::RunDir;

/// Train-accuracy level reported per member.
pub const TRAIN_ACC_TARGET: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub name: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_train_acc: f64,
    pub epoch_reaching_target: Option<usize>,
    pub test_acc: f64,
}

pub struct PipelineOutcome {
    pub members: Vec<MemberSummary>,
    pub alpha: Vec<f64>,
    pub table: EnsembleReport,
    pub weighted_mean: MetricReport,
    pub majority_vote: MetricReport,
    pub pretrain: Option<PretrainRecord>,
}

fn metric_row(name: &str, r: &MetricReport) -> (String, String) {
    let s = &r.summary;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let cells = [
        pct(s.accuracy),
        format!("{:.4}", r.kappa),
        pct(s.macro_precision),
        pct(s.macro_recall),
        pct(s.macro_f1),
        pct(s.macro_specificity),
        pct(s.balanced_accuracy),
    ];
    let text = format!(
        "{name:<10}{}\n",
        cells.iter().map(|c| format!("{c:>12}")).collect::<String>()
    );
    let csv = format!("{name},{}\n", cells.join(","));
    (text, csv)
}

pub fn pipeline(cfg: &RunConfig, run: &mut RunDir) -> Result<PipelineOutcome> {
    let data = load_dataset(cfg)?;
    data.split.save(&run.path(SPLIT_FILE)?)?;
    let splits = data.prepare()?;
    log::info!(
        "split: train {} / val {} / test {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );

    // ViT first: it doubles as the distillation teacher.
    let mut order: Vec<Variant> = cfg.variants.clone();
    order.sort();
    order.dedup();
    let mut teacher: Option<Model> = None;
    if order.contains(&Variant::Deit) && !order.contains(&Variant::Vit) {
        log::info!("training a ViT teacher for deit");
        teacher = Some(train_member(cfg, Variant::Vit, &splits, None)?.model);
    }

    let mut models: Vec<(Variant, Model, History)> = Vec::new();
    let mut pretrain = None;
    for &variant in &order {
        let start = Instant::now();
        let trained = train_member(cfg, variant, &splits, teacher.as_ref())?;
        log::info!(
            "{variant}: {} epochs in {:.1}s, best train acc {:.3}",
            trained.history.epochs.len(),
            start.elapsed().as_secs_f64(),
            trained.history.best_train_acc()
        );
        let name = variant.name();
        let mut ckpt = Checkpoint::of_model(&trained.model);
        ckpt.epoch = trained.history.epochs.len();
        ckpt.meta = serde_json::to_value(&trained.history).expect("history serializes");
        save_checkpoint(&run.path(&format!("checkpoints/{name}.ckpt"))?, &ckpt)?;
        run.write(&format!("history/{name}.csv"), &history_csv(&trained.history))?;
        if let Some(p) = trained.pretrain {
            run.write_json(&format!("pretrain/{name}.json"), &p)?;
            pretrain = Some(p);
        }
        if variant == Variant::Vit && teacher.is_none() {
            teacher = Some(trained.model.clone());
        }
        models.push((variant, trained.model, trained.history));
    }

    let names: Vec<String> = models.iter().map(|(v, _, _)| display_name(*v).to_string()).collect();
    let predict_split = |samples: &[eit_core::data::ImageSample]| -> Result<PredictionSet> {
        let tables = models
            .iter()
            .map(|(_, m, _)| predict_samples(m, samples))
            .collect::<Result<Vec<_>>>()?;
        PredictionSet::new(samples.iter().map(|s| s.id.clone()).collect(), names.clone(), tables)
    };
    let val_preds = predict_split(&splits.val)?;
    let test_preds = predict_split(&splits.test)?;
    val_preds.write_csv(&run.path("predictions/val.csv")?)?;
    test_preds.write_csv(&run.path("predictions/test.csv")?)?;
    write_labels_csv(&run.path("predictions/val_labels.csv")?, &labels_of(&splits.val))?;
    write_labels_csv(&run.path("predictions/test_labels.csv")?, &labels_of(&splits.test))?;
    let val_labels: Vec<usize> = splits.val.iter().map(|s| s.label).collect();
    let test_labels: Vec<usize> = splits.test.iter().map(|s| s.label).collect();

    let alpha = match &cfg.alpha {
        Some(a) => a.clone(),
        None => grid_search_alpha(&val_preds, &val_labels, cfg.grid_step)?.alpha,
    };
    run.write_json("alpha.json", &alpha)?;
    let source = match &cfg.alpha {
        Some(a) => AlphaSource::Fixed(a),
        None => AlphaSource::Tuned {
            preds: &val_preds,
            labels: &val_labels,
            step: cfg.grid_step,
        },
    };
    let table = ensemble_report(&test_preds, &test_labels, source)?;
    run.report("ensemble", &table.to_text(), Some(&table.to_csv()))?;

    // Table-2 style summary on the test split.
    let header = format!(
        "{:<10}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}\n",
        "Model", "Acc (%)", "Kappa", "Prec (%)", "Rec (%)", "F1 (%)", "Spec (%)", "BalAcc (%)"
    );
    let mut text = header;
    let mut csv = String::from("model,accuracy,kappa,macro_precision,macro_recall,macro_f1,macro_specificity,balanced_accuracy\n");
    let mut members = Vec::new();
    for (j, (variant, _, history)) in models.iter().enumerate() {
        let preds: Vec<usize> = test_preds.probs(j).iter().map(|p| argmax(p)).collect();
        let report = MetricReport::new(&test_labels, &preds)?;
        let name = display_name(*variant);
        run.report(&format!("metrics/{}", variant.name()), &report.to_text(), Some(&report.to_csv()))?;
        let (t, c) = metric_row(name, &report);
        text.push_str(&t);
        csv.push_str(&c);
        members.push(MemberSummary {
            name: name.to_string(),
            epochs: history.epochs.len(),
            best_epoch: history.best_epoch,
            best_train_acc: history.best_train_acc(),
            epoch_reaching_target: history.epoch_reaching(TRAIN_ACC_TARGET),
            test_acc: report.summary.accuracy,
        });
    }
    let wm = MetricReport::new(&test_labels, &weighted_mean_predict(&test_preds, &alpha)?)?;
    let mv = MetricReport::new(&test_labels, &majority_vote_predict(&test_preds))?;
    for (name, report) in [("EiT_wm", &wm), ("EiT_mv", &mv)] {
        run.report(&format!("metrics/{}", name.to_lowercase()), &report.to_text(), Some(&report.to_csv()))?;
        let (t, c) = metric_row(name, report);
        text.push_str(&t);
        csv.push_str(&c);
    }
    run.report(
        "summary",
        &format!("alpha: {}\n\n{text}", eit_core::ensemble::format_alpha(&alpha)),
        Some(&csv),
    )?;

    let mut train_csv = String::from("model,epochs,best_epoch,best_train_acc,epoch_reaching_target,test_acc\n");
    for m in &members {
        train_csv.push_str(&format!(
            "{},{},{},{:.4},{},{:.4}\n",
            m.name,
            m.epochs,
            m.best_epoch.map_or(String::new(), |e| e.to_string()),
            m.best_train_acc,
            m.epoch_reaching_target.map_or(String::new(), |e| e.to_string()),
            m.test_acc
        ));
    }
    run.report("training", &train_csv, Some(&train_csv))?;

    // Saliency overlays for the most severe class.
    if let Some((_, model, _)) = models
        .iter()
        .find(|(v, _, _)| *v == cfg.gradcam_variant)
        .or_else(|| models.first())
    {
        let severe = splits.test.iter().filter(|s| s.label == 4).take(cfg.gradcam_images);
        for s in severe {
            let map = grad_cam(model, &s.to_tensor::<f32>(), 4)?;
            overlay_png(&s.pixels, &map, &run.path(&format!("gradcam/{}.png", s.id))?)?;
        }
    }

    Ok(PipelineOutcome {
        members,
        alpha,
        table,
        weighted_mean: wm,
        majority_vote: mv,
        pretrain,
    })
}
