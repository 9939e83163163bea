//! Confusion-matrix metrics and quadratic weighted kappa.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::N_CLASSES;

pub const CLASS_NAMES: [&str; N_CLASSES] = ["No DR", "Mild", "Moderate", "Severe", "Proliferative"];

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

fn check_labels(truths: &[usize], preds: &[usize]) -> Result<()> {
    if truths.len() != preds.len() {
        return Err(Error::Contract(format!(
            "{} truths but {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    if let Some(bad) = truths.iter().chain(preds).find(|&&c| c >= N_CLASSES) {
        return Err(Error::Contract(format!("class {bad} outside 0..{N_CLASSES}")));
    }
    Ok(())
}

impl ConfusionMatrix {
    pub fn from_labels(truths: &[usize], preds: &[usize]) -> Result<Self> {
        check_labels(truths, preds)?;
        let mut cm = Self::default();
        for (&t, &p) in truths.iter().zip(preds) {
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &Self) {
        for i in 0..N_CLASSES {
            for j in 0..N_CLASSES {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Contract("accuracy of an empty confusion matrix".into()));
        }
        let trace: u64 = (0..N_CLASSES).map(|i| self.counts[i][i]).sum();
        Ok(trace as f64 / total as f64)
    }

    /// `(TP, FP, FN, TN)` of class `k`.
    pub fn outcomes(&self, k: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[k][k];
        let fp: u64 = (0..N_CLASSES).map(|i| self.counts[i][k]).sum::<u64>() - tp;
        let fn_: u64 = self.counts[k].iter().sum::<u64>() - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }

    pub fn per_class(&self) -> Vec<ClassMetrics> {
        (0..N_CLASSES)
            .map(|k| {
                let (tp, fp, fn_, tn) = self.outcomes(k);
                let precision = Ratio::of(tp, tp + fp);
                let recall = Ratio::of(tp, tp + fn_);
                let specificity = Ratio::of(tn, tn + fp);
                let f1 = if precision.value + recall.value == 0.0 {
                    Ratio {
                        value: 0.0,
                        undefined: true,
                    }
                } else {
                    Ratio {
                        value: 2.0 * precision.value * recall.value / (precision.value + recall.value),
                        undefined: false,
                    }
                };
                ClassMetrics {
                    class: k,
                    precision,
                    recall,
                    f1,
                    specificity,
                }
            })
            .collect()
    }

    pub fn summary(&self) -> Result<Summary> {
        let per = self.per_class();
        let mean = |f: fn(&ClassMetrics) -> f64| per.iter().map(f).sum::<f64>() / N_CLASSES as f64;
        let macro_recall = mean(|c| c.recall.value);
        let macro_specificity = mean(|c| c.specificity.value);
        Ok(Summary {
            accuracy: self.accuracy()?,
            macro_precision: mean(|c| c.precision.value),
            macro_recall,
            macro_f1: mean(|c| c.f1.value),
            macro_specificity,
            balanced_accuracy: (macro_recall + macro_specificity) / 2.0,
        })
    }
}

/// A metric fraction; `undefined` marks a 0/0 reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub undefined: bool,
}

impl Ratio {
    fn of(num: u64, den: u64) -> Self {
        if den == 0 {
            Self {
                value: 0.0,
                undefined: true,
            }
        } else {
            Self {
                value: num as f64 / den as f64,
                undefined: false,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: Ratio,
    pub recall: Ratio,
    pub f1: Ratio,
    pub specificity: Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub macro_precision: f64,
    /// Also reported as sensitivity.
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_specificity: f64,
    /// `(macro recall + macro specificity) / 2`.
    pub balanced_accuracy: f64,
}

/// Cohen's kappa with weights `(i − j)² / (n_c − 1)²`.
///
/// When the chance-disagreement term vanishes (both raters constant on one
/// class) the ratio is 0/0; that case returns 0 and logs a warning.
pub fn quadratic_weighted_kappa(truths: &[usize], preds: &[usize]) -> Result<f64> {
    check_labels(truths, preds)?;
    let cm = ConfusionMatrix::from_labels(truths, preds)?;
    let n = cm.total() as f64;
    if n == 0.0 {
        return Err(Error::Contract("kappa of zero samples".into()));
    }
    let rows: Vec<f64> = (0..N_CLASSES).map(|i| cm.counts[i].iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..N_CLASSES)
        .map(|j| (0..N_CLASSES).map(|i| cm.counts[i][j]).sum::<u64>() as f64)
        .collect();
    let scale = ((N_CLASSES - 1) * (N_CLASSES - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..N_CLASSES {
        for j in 0..N_CLASSES {
            let w = ((i as f64 - j as f64).powi(2)) / scale;
            observed += w * cm.counts[i][j] as f64;
            expected += w * rows[i] * cols[j] / n;
        }
    }
    if expected == 0.0 {
        log::warn!("quadratic weighted kappa is 0/0 (single-class ratings); reporting 0");
        return Ok(0.0);
    }
    Ok(1.0 - observed / expected)
}

/// Everything reported for one set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub confusion: ConfusionMatrix,
    pub summary: Summary,
    pub kappa: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn new(truths: &[usize], preds: &[usize]) -> Result<Self> {
        let confusion = ConfusionMatrix::from_labels(truths, preds)?;
        Ok(Self {
            summary: confusion.summary()?,
            kappa: quadratic_weighted_kappa(truths, preds)?,
            per_class: confusion.per_class(),
            confusion,
        })
    }

    fn rows(&self) -> Vec<(String, String)> {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let s = &self.summary;
        vec![
            ("Accuracy (%)".into(), pct(s.accuracy)),
            ("Kappa".into(), format!("{:.4}", self.kappa)),
            ("Macro Precision (%)".into(), pct(s.macro_precision)),
            ("Macro Recall (%)".into(), pct(s.macro_recall)),
            ("Macro F1 (%)".into(), pct(s.macro_f1)),
            ("Macro Specificity (%)".into(), pct(s.macro_specificity)),
            ("Balanced Accuracy (%)".into(), pct(s.balanced_accuracy)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.rows() {
            out.push_str(&format!("{k:<24}{v:>10}\n"));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<15}{:>15}{:>12}{:>10}{:>17}\n",
            "Class", "Precision (%)", "Recall (%)", "F1 (%)", "Specificity (%)"
        ));
        for c in &self.per_class {
            let cell = |r: Ratio| format!("{:.2}{}", 100.0 * r.value, if r.undefined { "*" } else { "" });
            out.push_str(&format!(
                "{:<15}{:>15}{:>12}{:>10}{:>17}\n",
                CLASS_NAMES[c.class],
                cell(c.precision),
                cell(c.recall),
                cell(c.f1),
                cell(c.specificity)
            ));
        }
        if self
            .per_class
            .iter()
            .any(|c| c.precision.undefined || c.recall.undefined || c.f1.undefined || c.specificity.undefined)
        {
            out.push_str("* 0/0, reported as 0\n");
        }
        out.push_str("\nConfusion matrix (rows = true, columns = predicted)\n");
        for row in &self.confusion.counts {
            out.push_str(&row.iter().map(|c| format!("{c:>6}")).collect::<String>());
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.rows() {
            out.push_str(&format!("{k},{v}\n"));
        }
        for c in &self.per_class {
            for (name, r) in [
                ("Precision (%)", c.precision),
                ("Recall (%)", c.recall),
                ("F1 (%)", c.f1),
                ("Specificity (%)", c.specificity),
            ] {
                out.push_str(&format!("{} {name},{:.2}\n", CLASS_NAMES[c.class], 100.0 * r.value));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_perfect() {
        let t = [0, 1, 2, 3, 4, 4];
        let r = MetricReport::new(&t, &t).unwrap();
        assert_eq!(r.summary.accuracy, 1.0);
        assert_eq!(r.summary.balanced_accuracy, 1.0);
        assert_eq!(r.summary.macro_f1, 1.0);
        assert_eq!(r.kappa, 1.0);
    }

    #[test]
    fn off_diagonal_only_is_zero_accuracy() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 2], &[1, 2, 3]).unwrap();
        assert_eq!(cm.accuracy().unwrap(), 0.0);
    }

    #[test]
    fn empty_accuracy_is_contract_error() {
        assert!(matches!(ConfusionMatrix::default().accuracy(), Err(Error::Contract(_))));
    }

    #[test]
    fn absent_class_recall_flagged() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 1], &[0, 1, 0]).unwrap();
        let per = cm.per_class();
        assert!(per[3].recall.undefined && per[3].recall.value == 0.0);
        assert!(!per[1].recall.undefined);
    }

    #[test]
    fn constant_ratings_kappa_is_zero() {
        assert_eq!(quadratic_weighted_kappa(&[2, 2, 2], &[2, 2, 2]).unwrap(), 0.0);
    }

    #[test]
    fn reversed_extremes_are_strongly_negative() {
        let t = [0, 0, 4, 4];
        let p = [4, 4, 0, 0];
        assert!(quadratic_weighted_kappa(&t, &p).unwrap() < -0.9);
    }
}
