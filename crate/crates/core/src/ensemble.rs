//! Weighted-mean and majority-vote combiners and the α grid search.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::N_CLASSES;
use crate::tensor::argmax;

pub const SIMPLEX_TOL: f64 = 1e-9;
pub const DEFAULT_GRID_STEP: f64 = 0.05;

/// Softmax outputs of several models over the same samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    sample_ids: Vec<String>,
    model_names: Vec<String>,
    /// `probs[model][sample]`.
    probs: Vec<Vec<[f64; N_CLASSES]>>,
}

impl PredictionSet {
    pub fn new(sample_ids: Vec<String>, model_names: Vec<String>, probs: Vec<Vec<[f64; N_CLASSES]>>) -> Result<Self> {
        if model_names.is_empty() {
            return Err(Error::Contract("prediction set needs at least one model".into()));
        }
        if probs.len() != model_names.len() {
            return Err(Error::Contract(format!(
                "{} model names but {} probability tables",
                model_names.len(),
                probs.len()
            )));
        }
        for (name, table) in model_names.iter().zip(&probs) {
            if table.len() != sample_ids.len() {
                return Err(Error::Contract(format!(
                    "model {name} covers {} samples, expected {}",
                    table.len(),
                    sample_ids.len()
                )));
            }
        }
        Ok(Self {
            sample_ids,
            model_names,
            probs,
        })
    }

    /// Builds from rows of any length-5 slices.
    pub fn from_vecs(sample_ids: Vec<String>, model_names: Vec<String>, probs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let probs = probs
            .into_iter()
            .map(|table| {
                table
                    .into_iter()
                    .map(|row| {
                        <[f64; N_CLASSES]>::try_from(row.as_slice())
                            .map_err(|_| Error::Contract(format!("probability row of length {}", row.len())))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sample_ids, model_names, probs)
    }

    pub fn n_models(&self) -> usize {
        self.model_names.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn model_names(&self) -> &[String] {
        &self.model_names
    }

    pub fn probs(&self, model: usize) -> &[[f64; N_CLASSES]] {
        &self.probs[model]
    }

    /// The models at `members`, in that order.
    pub fn subset(&self, members: &[usize]) -> Result<Self> {
        if let Some(&bad) = members.iter().find(|&&m| m >= self.n_models()) {
            return Err(Error::Contract(format!("model index {bad} out of range")));
        }
        Self::new(
            self.sample_ids.clone(),
            members.iter().map(|&m| self.model_names[m].clone()).collect(),
            members.iter().map(|&m| self.probs[m].clone()).collect(),
        )
    }

    /// Concatenates the models of `other`, which must cover the same ids in the same order.
    pub fn join(mut self, other: Self) -> Result<Self> {
        if self.sample_ids != other.sample_ids {
            return Err(Error::Contract("prediction sets cover different samples".into()));
        }
        self.model_names.extend(other.model_names);
        self.probs.extend(other.probs);
        Ok(self)
    }

    /// Reorders samples to follow `ids`.
    pub fn aligned_to(&self, ids: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let order = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("no predictions for sample {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            ids.to_vec(),
            self.model_names.clone(),
            self.probs.iter().map(|t| order.iter().map(|&i| t[i]).collect()).collect(),
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["sample_id".to_string(), "model_name".to_string()];
        header.extend((0..N_CLASSES).map(|k| format!("p{k}")));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (m, name) in self.model_names.iter().enumerate() {
            for (s, id) in self.sample_ids.iter().enumerate() {
                let mut rec = vec![id.clone(), name.clone()];
                rec.extend(self.probs[m][s].iter().map(|p| format!("{p:e}")));
                w.write_record(&rec).map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads `sample_id,model_name,p0..p4` rows. Models keep first-seen
    /// order; samples follow the first model's order.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut names: Vec<String> = Vec::new();
        let mut tables: Vec<BTreeMap<String, [f64; N_CLASSES]>> = Vec::new();
        let mut first_order: Vec<String> = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = row + 2;
            if rec.len() != 2 + N_CLASSES {
                return Err(Error::Format(format!(
                    "{}: line {line}: expected {} fields, got {}",
                    path.display(),
                    2 + N_CLASSES,
                    rec.len()
                )));
            }
            let mut p = [0.0; N_CLASSES];
            for (k, v) in p.iter_mut().enumerate() {
                *v = rec[2 + k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("{}: line {line}: bad probability {:?}", path.display(), &rec[2 + k])))?;
            }
            let (id, name) = (rec[0].to_string(), rec[1].to_string());
            let m = match names.iter().position(|n| *n == name) {
                Some(m) => m,
                None => {
                    names.push(name);
                    tables.push(BTreeMap::new());
                    names.len() - 1
                }
            };
            if m == 0 {
                first_order.push(id.clone());
            }
            if tables[m].insert(id.clone(), p).is_some() {
                return Err(Error::Validation(format!("{}: line {line}: duplicate sample {id}", path.display())));
            }
        }
        let mut probs = Vec::with_capacity(names.len());
        for (name, table) in names.iter().zip(&tables) {
            if table.len() != first_order.len() {
                return Err(Error::Validation(format!("model {name} covers a different sample set")));
            }
            probs.push(
                first_order
                    .iter()
                    .map(|id| {
                        table
                            .get(id)
                            .copied()
                            .ok_or_else(|| Error::Validation(format!("model {name} has no row for {id}")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::new(first_order, names, probs)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Reads `sample_id,label`.
pub fn read_labels_csv(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = row + 2;
        if rec.len() != 2 {
            return Err(Error::Format(format!("{}: line {line}: expected 2 fields", path.display())));
        }
        let label: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("{}: line {line}: bad label {:?}", path.display(), &rec[1])))?;
        if label >= N_CLASSES {
            return Err(Error::Validation(format!("{}: line {line}: label {label} out of range", path.display())));
        }
        out.push((rec[0].to_string(), label));
    }
    Ok(out)
}

pub fn write_labels_csv(path: &Path, labels: &[(String, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["sample_id", "label"]).map_err(|e| csv_error(path, e))?;
    for (id, label) in labels {
        w.write_record([id.as_str(), &label.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labels in the order of `preds`' sample ids.
pub fn labels_for(preds: &PredictionSet, labels: &[(String, usize)]) -> Result<Vec<usize>> {
    let map: HashMap<&str, usize> = labels.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    preds
        .sample_ids()
        .iter()
        .map(|id| {
            map.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Validation(format!("no label for sample {id}")))
        })
        .collect()
}

/// Checks that `alpha` has one entry per model and lies on the simplex.
pub fn validate_alpha(alpha: &[f64], n_models: usize) -> Result<()> {
    if alpha.len() != n_models {
        return Err(Error::Contract(format!("{} weights for {n_models} models", alpha.len())));
    }
    if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::Validation(format!("weights must be finite and nonnegative: {alpha:?}")));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Validation(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// `Σ_j α_j P^j` per sample.
pub fn weighted_mean_probs(preds: &PredictionSet, alpha: &[f64]) -> Result<Vec<[f64; N_CLASSES]>> {
    validate_alpha(alpha, preds.n_models())?;
    Ok((0..preds.n_samples())
        .map(|s| {
            let mut p = [0.0; N_CLASSES];
            for (m, &a) in alpha.iter().enumerate() {
                for (acc, v) in p.iter_mut().zip(&preds.probs[m][s]) {
                    *acc += a * v;
                }
            }
            p
        })
        .collect())
}

pub fn weighted_mean_predict(preds: &PredictionSet, alpha: &[f64]) -> Result<Vec<usize>> {
    Ok(weighted_mean_probs(preds, alpha)?.iter().map(|p| argmax(p)).collect())
}

/// Mode of the members' argmaxes. Tied modes go to the class with the
/// highest unweighted mean probability, then to the lowest index.
pub fn majority_vote_predict(preds: &PredictionSet) -> Vec<usize> {
    (0..preds.n_samples()).map(|s| vote_one(preds, s)).collect()
}

fn vote_one(preds: &PredictionSet, s: usize) -> usize {
    let mut counts = [0usize; N_CLASSES];
    let mut mean = [0.0f64; N_CLASSES];
    for table in &preds.probs {
        counts[argmax(&table[s])] += 1;
        for (acc, v) in mean.iter_mut().zip(&table[s]) {
            *acc += v;
        }
    }
    let top = *counts.iter().max().unwrap_or(&0);
    let mut best: Option<usize> = None;
    for k in (0..N_CLASSES).filter(|&k| counts[k] == top) {
        if best.map_or(true, |b| mean[k] > mean[b]) {
            best = Some(k);
        }
    }
    best.unwrap_or(0)
}

pub fn accuracy_of(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Contract("accuracy over zero samples".into()));
    }
    Ok(correct_count(preds, labels) as f64 / preds.len() as f64)
}

fn correct_count(preds: &[usize], labels: &[usize]) -> usize {
    preds.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Number of steps of size `step` in the unit interval.
fn lattice_resolution(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step {step} must lie in (0, 1]")));
    }
    let m = (1.0 / step).round();
    if (m * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1")));
    }
    Ok(m as usize)
}

/// All α on the simplex with coordinates in multiples of `step`, in
/// ascending lexicographic order.
pub fn simplex_lattice(n_models: usize, step: f64) -> Result<Vec<Vec<f64>>> {
    if n_models == 0 {
        return Err(Error::Contract("lattice over zero models".into()));
    }
    let m = lattice_resolution(step)?;
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n_models);
    compositions(m, n_models, &mut current, &mut out);
    Ok(out
        .into_iter()
        .map(|parts| parts.into_iter().map(|k| k as f64 / m as f64).collect())
        .collect())
}

fn compositions(remaining: usize, slots: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if slots == 1 {
        current.push(remaining);
        out.push(current.clone());
        current.pop();
        return;
    }
    for k in 0..=remaining {
        current.push(k);
        compositions(remaining - k, slots - 1, current, out);
        current.pop();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub alpha: Vec<f64>,
    pub accuracy: f64,
    pub evaluated: usize,
}

/// Exhaustive search over [`simplex_lattice`]; the first maximizer wins.
pub fn grid_search_alpha(preds: &PredictionSet, labels: &[usize], step: f64) -> Result<GridResult> {
    if labels.len() != preds.n_samples() {
        return Err(Error::Contract(format!(
            "{} labels for {} samples",
            labels.len(),
            preds.n_samples()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("grid search over zero samples".into()));
    }
    let lattice = simplex_lattice(preds.n_models(), step)?;
    let scores = lattice
        .par_iter()
        .map(|alpha| weighted_mean_predict(preds, alpha).map(|p| correct_count(&p, labels)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(GridResult {
        alpha: lattice[best].clone(),
        accuracy: scores[best] as f64 / labels.len() as f64,
        evaluated: lattice.len(),
    })
}

/// Where each subset's weights come from.
pub enum AlphaSource<'a> {
    /// Restrict these full-ensemble weights to the subset and renormalize.
    Fixed(&'a [f64]),
    /// Grid-search per subset on a separate tuning set.
    Tuned {
        preds: &'a PredictionSet,
        labels: &'a [usize],
        step: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub members: Vec<String>,
    pub alpha: Vec<f64>,
    pub weighted_mean_accuracy: f64,
    pub majority_vote_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub rows: Vec<SubsetRow>,
}

/// Nonempty member subsets ordered by size, then lexicographically by index.
pub fn member_subsets(n_models: usize) -> Vec<Vec<usize>> {
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n_models))
        .map(|mask| (0..n_models).filter(|&i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
}

/// Both combiners on every nonempty member subset.
pub fn ensemble_report(preds: &PredictionSet, labels: &[usize], alpha: AlphaSource<'_>) -> Result<EnsembleReport> {
    if labels.len() != preds.n_samples() {
        return Err(Error::Contract(format!(
            "{} labels for {} samples",
            labels.len(),
            preds.n_samples()
        )));
    }
    if let AlphaSource::Tuned { preds: tune, .. } = &alpha {
        if tune.model_names() != preds.model_names() {
            return Err(Error::Contract("tuning predictions list different models".into()));
        }
    }
    let mut rows = Vec::new();
    for members in member_subsets(preds.n_models()) {
        let sub = preds.subset(&members)?;
        let weights = match &alpha {
            AlphaSource::Fixed(full) => {
                validate_alpha(full, preds.n_models())?;
                let w: Vec<f64> = members.iter().map(|&m| full[m]).collect();
                let sum: f64 = w.iter().sum();
                if sum > 0.0 {
                    w.iter().map(|v| v / sum).collect()
                } else {
                    vec![1.0 / w.len() as f64; w.len()]
                }
            }
            AlphaSource::Tuned { preds: tune, labels: tl, step } => {
                grid_search_alpha(&tune.subset(&members)?, tl, *step)?.alpha
            }
        };
        rows.push(SubsetRow {
            members: sub.model_names().to_vec(),
            weighted_mean_accuracy: accuracy_of(&weighted_mean_predict(&sub, &weights)?, labels)?,
            majority_vote_accuracy: accuracy_of(&majority_vote_predict(&sub), labels)?,
            alpha: weights,
        });
    }
    Ok(EnsembleReport { rows })
}

impl EnsembleReport {
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.members.join(" + ").len())
            .max()
            .unwrap_or(0)
            .max("Members".len());
        let mut out = format!("{:<width$}  {:>10}  {:>10}  alpha\n", "Members", "EiT_wm (%)", "EiT_mv (%)");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>10.2}  {:>10.2}  {}\n",
                r.members.join(" + "),
                100.0 * r.weighted_mean_accuracy,
                100.0 * r.majority_vote_accuracy,
                format_alpha(&r.alpha)
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("members,weighted_mean_accuracy,majority_vote_accuracy,alpha\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.2},{:.2},{}\n",
                r.members.join("+"),
                100.0 * r.weighted_mean_accuracy,
                100.0 * r.majority_vote_accuracy,
                r.alpha.iter().map(|a| format!("{a}")).collect::<Vec<_>>().join(" ")
            ));
        }
        out
    }
}

pub fn format_alpha(alpha: &[f64]) -> String {
    format!(
        "({})",
        alpha.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(", ")
    )
}
