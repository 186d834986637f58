//! Effect-estimation metrics and replication summaries.

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruth, ObservationalDataset};
use crate::error::{Error, Result};
use crate::graph::{Split, SplitIndex};
use crate::model::Variant;
use crate::scalar::Real;
use crate::train::FittedModel;

fn check_index(index: &[usize], len: usize) -> Result<()> {
    if index.is_empty() {
        return Err(Error::Argument("metric index set is empty".into()));
    }
    if let Some(&i) = index.iter().find(|&&i| i >= len) {
        return Err(Error::Argument(format!("metric index {i} out of range for {len} units")));
    }
    Ok(())
}

/// Root mean squared error of individual effects over `index`.
pub fn pehe_sqrt<T: Real>(tau_hat: &Array1<T>, tau: &Array1<T>, index: &[usize]) -> Result<f64> {
    check_index(index, tau.len().min(tau_hat.len()))?;
    let sq: f64 = index
        .iter()
        .map(|&i| (tau_hat[i].to_f64_lossy() - tau[i].to_f64_lossy()).powi(2))
        .sum();
    Ok((sq / index.len() as f64).sqrt())
}

/// Absolute error of the average effect over `index`.
pub fn ate_error<T: Real>(tau_hat: &Array1<T>, tau: &Array1<T>, index: &[usize]) -> Result<f64> {
    check_index(index, tau.len().min(tau_hat.len()))?;
    let n = index.len() as f64;
    let est: f64 = index.iter().map(|&i| tau_hat[i].to_f64_lossy()).sum::<f64>() / n;
    let truth: f64 = index.iter().map(|&i| tau[i].to_f64_lossy()).sum::<f64>() / n;
    Ok((est - truth).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    /// Confounding strength of the bundle, when known.
    pub kappa: Option<f64>,
    pub seed: u64,
    pub split: Split,
    pub pehe_sqrt: f64,
    pub ate_error: f64,
}

/// Scores estimated effects on the train and test units.
pub fn score<T: Real>(
    tau_hat: &Array1<T>,
    truth: &GroundTruth<T>,
    split: &SplitIndex,
    variant: Variant,
    seed: u64,
    kappa: Option<f64>,
) -> Result<Vec<MetricsReport>> {
    [Split::Train, Split::Test]
        .into_iter()
        .map(|s| {
            let idx = split.get(s);
            Ok(MetricsReport {
                variant,
                kappa,
                seed,
                split: s,
                pehe_sqrt: pehe_sqrt(tau_hat, &truth.tau, idx)?,
                ate_error: ate_error(tau_hat, &truth.tau, idx)?,
            })
        })
        .collect()
}

/// Runs the model on every unit and scores the train and test splits.
pub fn evaluate<T: Real>(
    model: &FittedModel<T>,
    dataset: &ObservationalDataset<T>,
    truth: Option<&GroundTruth<T>>,
    split: &SplitIndex,
    seed: u64,
    kappa: Option<f64>,
) -> Result<Vec<MetricsReport>> {
    let truth = truth.ok_or_else(|| Error::Evaluation("ground-truth effects are required for evaluation".into()))?;
    if truth.len() != dataset.num_units() {
        return Err(Error::Evaluation(format!(
            "ground truth has {} units, dataset {}",
            truth.len(),
            dataset.num_units()
        )));
    }
    let pred = model.predict(dataset)?;
    score(&pred.tau_hat, truth, split, model.variant, seed, kappa)
}

/// Mean and sample standard deviation of one metric group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub kappa: Option<f64>,
    pub split: Split,
    pub count: usize,
    pub pehe_mean: f64,
    pub pehe_std: f64,
    pub ate_mean: f64,
    pub ate_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups reports by (variant, kappa, split), ordered by those keys.
pub fn aggregate_replications(reports: &[MetricsReport]) -> Vec<SummaryRow> {
    type Key = (Variant, Option<u64>, Split);
    // kappa, then per-report pehe and ate values
    type Group = (Option<f64>, Vec<f64>, Vec<f64>);
    let mut groups: BTreeMap<Key, Group> = BTreeMap::new();
    for r in reports {
        let key = (r.variant, r.kappa.map(f64::to_bits), r.split);
        let entry = groups.entry(key).or_insert_with(|| (r.kappa, Vec::new(), Vec::new()));
        entry.1.push(r.pehe_sqrt);
        entry.2.push(r.ate_error);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((variant, _, split), (kappa, pehe, ate))| {
            let (pehe_mean, pehe_std) = mean_std(&pehe);
            let (ate_mean, ate_std) = mean_std(&ate);
            SummaryRow {
                variant,
                kappa,
                split,
                count: pehe.len(),
                pehe_mean,
                pehe_std,
                ate_mean,
                ate_std,
            }
        })
        .collect();
    // bit patterns of non-negative floats sort numerically; keep that explicit
    rows.sort_by(|a, b| {
        (a.variant, a.split)
            .cmp(&(b.variant, b.split))
            .then(a.kappa.partial_cmp(&b.kappa).unwrap_or(std::cmp::Ordering::Equal))
    });
    rows
}
