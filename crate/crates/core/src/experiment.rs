//! Variant runs, replication studies and loss-weight sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruth, ObservationalDataset};
use crate::error::{Error, Result};
use crate::graph::{split_units, Split, SplitIndex};
use crate::metrics::{evaluate, MetricsReport, SummaryRow};
use crate::model::{ModelConfig, Variant};
use crate::objectives::LossWeights;
use crate::scalar::Real;
use crate::synthesis::{synthesize, SynthesisConfig};
use crate::train::{train, TrainConfig, TrainedModel};

#[derive(Debug, Clone)]
pub struct VariantRun<T: Real> {
    pub trained: TrainedModel<T>,
    /// Train and test reports, in that order.
    pub reports: Vec<MetricsReport>,
}

impl<T: Real> VariantRun<T> {
    pub fn report(&self, split: Split) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.split == split)
    }
}

/// Trains `config.variant` and scores it against `truth`.
pub fn run_variant<T: Real>(
    dataset: &ObservationalDataset<T>,
    truth: &GroundTruth<T>,
    split: &SplitIndex,
    model: &ModelConfig,
    config: &TrainConfig,
    kappa: Option<f64>,
) -> Result<VariantRun<T>> {
    let trained = train(dataset, split, model, config)?;
    let reports = evaluate(&trained.fitted, dataset, Some(truth), split, config.seed, kappa)?;
    Ok(VariantRun { trained, reports })
}

/// Seeds used by replication `rep`: the bundle seed and the split/training seed.
pub fn replication_seeds(synthesis: &SynthesisConfig, train: &TrainConfig, rep: usize) -> (u64, u64) {
    (synthesis.seed.wrapping_add(rep as u64), train.seed.wrapping_add(rep as u64))
}

/// Synthesizes `replications` bundles at `kappa` and runs every variant on each.
///
/// `on_run` sees each finished run, e.g. to keep a model for later inspection.
pub fn replication_study(
    synthesis: &SynthesisConfig,
    kappa: f64,
    replications: usize,
    variants: &[Variant],
    model: &ModelConfig,
    train_config: &TrainConfig,
    mut on_run: impl FnMut(usize, &VariantRun<f64>),
) -> Result<Vec<MetricsReport>> {
    if replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    let mut reports = Vec::new();
    for rep in 0..replications {
        let (bundle_seed, run_seed) = replication_seeds(synthesis, train_config, rep);
        let bundle = synthesize(&SynthesisConfig {
            kappa,
            seed: bundle_seed,
            ..synthesis.clone()
        })?;
        let [a, b, c] = train_config.split;
        let split = split_units(bundle.dataset.num_units(), (a, b, c), run_seed)?;
        for &variant in variants {
            let config = TrainConfig {
                variant,
                seed: run_seed,
                ..train_config.clone()
            };
            let run = run_variant(&bundle.dataset, &bundle.truth, &split, model, &config, Some(kappa))?;
            log::info!(
                "kappa {kappa} rep {rep} {variant}: test pehe {:.4}",
                run.report(Split::Test).map_or(f64::NAN, |r| r.pehe_sqrt)
            );
            on_run(rep, &run);
            reports.extend(run.reports);
        }
    }
    Ok(reports)
}

/// Cartesian grid over the three loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightGrid {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
}

impl Default for WeightGrid {
    fn default() -> Self {
        Self {
            w1: vec![1e-5, 1e-4, 1e-3, 1e-2],
            w2: vec![1e-3, 1e-2, 1e-1],
            w3: vec![0.1, 1.0, 10.0],
        }
    }
}

impl WeightGrid {
    pub fn singleton(weights: LossWeights) -> Self {
        Self {
            w1: vec![weights.w1],
            w2: vec![weights.w2],
            w3: vec![weights.w3],
        }
    }

    pub fn len(&self) -> usize {
        self.w1.len() * self.w2.len() * self.w3.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in w1-major order.
    pub fn points(&self) -> Result<Vec<LossWeights>> {
        if self.is_empty() {
            return Err(Error::Config("weight grid has no points".into()));
        }
        let mut out = Vec::with_capacity(self.len());
        for &w1 in &self.w1 {
            for &w2 in &self.w2 {
                for &w3 in &self.w3 {
                    let w = LossWeights { w1, w2, w3 };
                    w.validate()?;
                    out.push(w);
                }
            }
        }
        Ok(out)
    }
}

/// One trained grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub weights: LossWeights,
    pub train: MetricsReport,
    pub test: MetricsReport,
}

/// Trains one model per grid point with the same seed and split; rows come
/// back sorted by test `pehe_sqrt`, ties kept in grid order.
pub fn sweep<T: Real>(
    dataset: &ObservationalDataset<T>,
    truth: &GroundTruth<T>,
    split: &SplitIndex,
    model: &ModelConfig,
    config: &TrainConfig,
    grid: &WeightGrid,
    kappa: Option<f64>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for weights in grid.points()? {
        let point = TrainConfig {
            weights,
            ..config.clone()
        };
        let run = run_variant(dataset, truth, split, model, &point, kappa)?;
        let pick = |s| {
            run.report(s)
                .cloned()
                .ok_or_else(|| Error::Evaluation(format!("missing {s} report")))
        };
        rows.push(SweepRow {
            weights,
            train: pick(Split::Train)?,
            test: pick(Split::Test)?,
        });
    }
    rows.sort_by(|a, b| a.test.pehe_sqrt.total_cmp(&b.test.pehe_sqrt));
    Ok(rows)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes any serializable records as JSON lines.
pub fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Evaluation(format!("serializing record: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSON lines written by [`write_jsonl`].
pub fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::load(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::load(path, e.to_string())
}

fn kappa_cell(k: Option<f64>) -> String {
    k.map(|k| k.to_string()).unwrap_or_default()
}

/// Columns `variant,kappa,seed,split,pehe_sqrt,ate_error`.
pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["variant", "kappa", "seed", "split", "pehe_sqrt", "ate_error"])
        .map_err(|e| csv_err(path, e))?;
    for r in reports {
        w.write_record([
            r.variant.to_string(),
            kappa_cell(r.kappa),
            r.seed.to_string(),
            r.split.to_string(),
            r.pehe_sqrt.to_string(),
            r.ate_error.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "variant", "kappa", "split", "count", "pehe_mean", "pehe_std", "ate_mean", "ate_std",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.variant.to_string(),
            kappa_cell(r.kappa),
            r.split.to_string(),
            r.count.to_string(),
            r.pehe_mean.to_string(),
            r.pehe_std.to_string(),
            r.ate_mean.to_string(),
            r.ate_std.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns `rank,w1,w2,w3,train_pehe_sqrt,train_ate_error,test_pehe_sqrt,test_ate_error`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "rank",
        "w1",
        "w2",
        "w3",
        "train_pehe_sqrt",
        "train_ate_error",
        "test_pehe_sqrt",
        "test_ate_error",
    ])
    .map_err(|e| csv_err(path, e))?;
    for (rank, r) in rows.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            r.weights.w1.to_string(),
            r.weights.w2.to_string(),
            r.weights.w3.to_string(),
            r.train.pehe_sqrt.to_string(),
            r.train.ate_error.to_string(),
            r.test.pehe_sqrt.to_string(),
            r.test.ate_error.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
