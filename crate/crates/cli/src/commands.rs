//! Subcommand implementations. Each writes only inside its output directory.

use std::path::{Path, PathBuf};

use gdc_core::experiment::{read_jsonl, write_jsonl, write_metrics_csv, write_summary_csv, write_sweep_csv};
use gdc_core::model::checkpoint::{read_checkpoint, write_checkpoint};
use gdc_core::synthesis::write_bundle;
use gdc_core::{
    aggregate_replications, evaluate, load_dataset, project_embeddings, split_units, sweep, synthesize, train, Error,
    FittedModel, MetricsReport, ProjectedPoint, Result, SplitIndex, SummaryRow, SweepRow, SynthesisConfig, Variant,
    WeightGrid,
};

use crate::config::ExperimentConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_JSONL_FILE: &str = "metrics.jsonl";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

const SPLIT_SEED_KEY: &str = "split_seed";
const SPLIT_RATIOS_KEY: &str = "split_ratios";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()?).map_err(io_err(&path))
}

/// `out/kappa_<κ>/rep_<r>`.
pub fn bundle_dir(out: &Path, kappa: f64, rep: usize) -> PathBuf {
    out.join(format!("kappa_{kappa}")).join(format!("rep_{rep}"))
}

/// Reads κ from a `kappa_<κ>` path component, as laid out by `synth`.
pub fn infer_kappa(path: &Path) -> Option<f64> {
    path.components()
        .rev()
        .filter_map(|c| c.as_os_str().to_str()?.strip_prefix("kappa_")?.parse().ok())
        .next()
}

/// Writes one bundle per (κ, replication); replication `r` uses seed `synthesis.seed + r`.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path, only_kappa: Option<f64>) -> Result<Vec<PathBuf>> {
    let kappas = only_kappa.map_or_else(|| cfg.kappas.clone(), |k| vec![k]);
    create_dir(out)?;
    write_config(cfg, out)?;
    let mut dirs = Vec::new();
    for &kappa in &kappas {
        for rep in 0..cfg.replications {
            let bundle = synthesize(&SynthesisConfig {
                kappa,
                seed: cfg.synthesis.seed.wrapping_add(rep as u64),
                ..cfg.synthesis.clone()
            })?;
            let dir = bundle_dir(out, kappa, rep);
            write_bundle(&bundle, &dir)?;
            log::info!("wrote {}", dir.display());
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

fn split_for(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitIndex> {
    split_units(n, (ratios[0], ratios[1], ratios[2]), seed)
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    /// Absent when the bundle has no potential outcomes.
    pub metrics: Option<Vec<MetricsReport>>,
}

fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_jsonl(&dir.join(METRICS_JSONL_FILE), reports)?;
    write_metrics_csv(&dir.join(METRICS_CSV_FILE), reports)
}

/// Trains `variant` on a bundle and writes checkpoint, loss log and metrics to `out`.
pub fn cmd_train(
    bundle: &Path,
    cfg: &ExperimentConfig,
    variant: Variant,
    kappa: Option<f64>,
    out: &Path,
) -> Result<TrainArtifacts> {
    let (dataset, truth) = load_dataset(bundle)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.variant = variant;
    let split = split_for(dataset.num_units(), train_cfg.split, train_cfg.seed)?;
    let trained = train(&dataset, &split, &cfg.model, &train_cfg)?;

    create_dir(out)?;
    write_config(cfg, out)?;
    let mut ck = trained.fitted.to_checkpoint();
    ck.metadata.push((SPLIT_SEED_KEY.into(), train_cfg.seed.to_string()));
    ck.metadata.push((
        SPLIT_RATIOS_KEY.into(),
        train_cfg.split.map(|r| r.to_string()).join(","),
    ));
    let checkpoint = out.join(CHECKPOINT_FILE);
    write_checkpoint(&ck, &checkpoint)?;
    let train_log = out.join(TRAIN_LOG_FILE);
    write_jsonl(&train_log, &trained.history)?;

    let kappa = kappa.or_else(|| infer_kappa(bundle));
    let metrics = match truth {
        Some(truth) => {
            let reports = evaluate(&trained.fitted, &dataset, Some(&truth), &split, train_cfg.seed, kappa)?;
            write_reports(out, &reports)?;
            Some(reports)
        }
        None => {
            log::warn!("{} has no potential outcomes; metrics skipped", bundle.display());
            None
        }
    };
    Ok(TrainArtifacts {
        dir: out.to_path_buf(),
        checkpoint,
        train_log,
        metrics,
    })
}

/// Model plus the split seed and ratios recorded at training time.
type LoadedModel = (FittedModel<f64>, Option<u64>, Option<[f64; 3]>);

fn load_fitted(checkpoint: &Path, num_features: usize) -> Result<LoadedModel> {
    let ck = read_checkpoint(checkpoint)?;
    let fitted = FittedModel::from_checkpoint(&ck, num_features)?;
    let seed = ck.meta(SPLIT_SEED_KEY).and_then(|s| s.parse().ok());
    let ratios = ck.meta(SPLIT_RATIOS_KEY).and_then(|s| {
        let v: Vec<f64> = s.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
        <[f64; 3]>::try_from(v).ok()
    });
    Ok((fitted, seed, ratios))
}

/// Scores a saved model on a bundle, reusing the split recorded at training time
/// unless `seed` overrides it.
pub fn cmd_eval(
    bundle: &Path,
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    seed: Option<u64>,
    kappa: Option<f64>,
    out: &Path,
) -> Result<Vec<MetricsReport>> {
    let (dataset, truth) = load_dataset(bundle)?;
    let (fitted, ck_seed, ck_ratios) = load_fitted(checkpoint, dataset.num_features())?;
    let seed = seed.or(ck_seed).unwrap_or(cfg.train.seed);
    let split = split_for(dataset.num_units(), ck_ratios.unwrap_or(cfg.train.split), seed)?;
    let kappa = kappa.or_else(|| infer_kappa(bundle));
    let reports = evaluate(&fitted, &dataset, truth.as_ref(), &split, seed, kappa)?;
    create_dir(out)?;
    write_reports(out, &reports)?;
    Ok(reports)
}

pub const SWEEP_CSV_FILE: &str = "sweep.csv";

/// Trains one model per grid point and writes the sorted table to `out/sweep.csv`.
pub fn cmd_sweep(
    bundle: &Path,
    cfg: &ExperimentConfig,
    grid: &WeightGrid,
    variant: Variant,
    kappa: Option<f64>,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let (dataset, truth) = load_dataset(bundle)?;
    let truth = truth.ok_or_else(|| Error::Evaluation(format!("{} has no potential outcomes", bundle.display())))?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.variant = variant;
    let split = split_for(dataset.num_units(), train_cfg.split, train_cfg.seed)?;
    let kappa = kappa.or_else(|| infer_kappa(bundle));
    let rows = sweep(&dataset, &truth, &split, &cfg.model, &train_cfg, grid, kappa)?;
    create_dir(out)?;
    write_config(cfg, out)?;
    write_sweep_csv(&out.join(SWEEP_CSV_FILE), &rows)?;
    Ok(rows)
}

/// One-line summary of the best grid point.
pub fn sweep_footer(rows: &[SweepRow]) -> String {
    match rows.first() {
        Some(best) => format!(
            "best: w1={} w2={} w3={} test pehe_sqrt={:.4} ate_error={:.4}",
            best.weights.w1, best.weights.w2, best.weights.w3, best.test.pehe_sqrt, best.test.ate_error
        ),
        None => "best: none".into(),
    }
}

pub const SUMMARY_CSV_FILE: &str = "summary.csv";

/// Expands glob patterns (or plain paths) into a sorted, de-duplicated file list.
pub fn expand_patterns(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for pat in patterns {
        let paths = glob::glob(pat).map_err(|e| Error::Argument(format!("bad pattern {pat:?}: {e}")))?;
        for p in paths {
            let p = p.map_err(|e| Error::Io {
                path: e.path().to_path_buf(),
                source: e.into(),
            })?;
            if p.is_file() {
                files.push(p);
            }
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}

/// Aggregates every metrics JSONL file matched by `patterns`.
pub fn cmd_report(patterns: &[String], out: Option<&Path>) -> Result<Vec<SummaryRow>> {
    let files = expand_patterns(patterns)?;
    if files.is_empty() {
        return Err(Error::Argument(format!("no metrics files match {patterns:?}")));
    }
    let mut reports: Vec<MetricsReport> = Vec::new();
    for f in &files {
        reports.extend(read_jsonl::<MetricsReport>(f)?);
    }
    if reports.is_empty() {
        return Err(Error::Argument("matched metrics files contain no reports".into()));
    }
    let rows = aggregate_replications(&reports);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_summary_csv(&dir.join(SUMMARY_CSV_FILE), &rows)?;
    }
    Ok(rows)
}

/// Variant × κ table of `mean ± std` for both metrics, one block per split.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut text = String::new();
    let mut splits: Vec<_> = rows.iter().map(|r| r.split).collect();
    splits.sort();
    splits.dedup();
    for split in splits {
        text.push_str(&format!("[{split}]\n"));
        text.push_str(&format!(
            "{:<16} {:>8} {:>4} {:>20} {:>20}\n",
            "variant", "kappa", "n", "√PEHE", "ε_ATE"
        ));
        for r in rows.iter().filter(|r| r.split == split) {
            let kappa = r.kappa.map_or_else(|| "-".to_string(), |k| k.to_string());
            text.push_str(&format!(
                "{:<16} {:>8} {:>4} {:>20} {:>20}\n",
                r.variant.as_str(),
                kappa,
                r.count,
                format!("{:.4} ± {:.4}", r.pehe_mean, r.pehe_std),
                format!("{:.4} ± {:.4}", r.ate_mean, r.ate_std),
            ));
        }
    }
    text
}

/// Projects the embeddings of a saved model onto two principal axes and
/// writes `x,y,embedding_kind,treatment` rows to `out_csv`.
pub fn cmd_project(checkpoint: &Path, bundle: &Path, out_csv: &Path) -> Result<Vec<ProjectedPoint>> {
    let (dataset, _) = load_dataset(bundle)?;
    let (fitted, _, _) = load_fitted(checkpoint, dataset.num_features())?;
    let pred = fitted.predict(&dataset)?;
    let points = project_embeddings(&pred.outputs, &dataset.treatments)?;
    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file = std::fs::File::create(out_csv).map_err(io_err(out_csv))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Io {
        path: out_csv.to_path_buf(),
        source: e.into(),
    };
    w.write_record(["x", "y", "embedding_kind", "treatment"]).map_err(csv_err)?;
    for p in &points {
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.embedding_kind.to_string(),
            p.treatment.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(out_csv))?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_from_bundle_layout() {
        let p = bundle_dir(Path::new("out"), 0.5, 3);
        assert_eq!(p, Path::new("out/kappa_0.5/rep_3"));
        assert_eq!(infer_kappa(&p), Some(0.5));
        assert_eq!(infer_kappa(&bundle_dir(Path::new("x"), 2.0, 0)), Some(2.0));
        assert_eq!(infer_kappa(Path::new("data/bundle")), None);
    }

    #[test]
    fn footer_names_best_weights() {
        assert_eq!(sweep_footer(&[]), "best: none");
    }
}
