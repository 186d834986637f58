use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gdc_cli::commands;
use gdc_cli::{exit_code, ExperimentConfig};
use gdc_core::{Result, Variant, WeightGrid};

#[derive(Parser)]
#[command(name = "gdc", version, about = "Treatment-effect estimation on networked data")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the synthesis seed (synth) or the split/training seed (others)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (defaults to the config's output_dir or a per-command location)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Model variant: full, no_disentangle or adjustment_only
    #[arg(long, global = true)]
    variant: Option<Variant>,

    /// Restricts synth to one kappa, or labels metrics of other commands
    #[arg(long, global = true)]
    kappa: Option<f64>,

    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate replicated synthetic bundles under <out>/kappa_<k>/rep_<r>/
    Synth,
    /// Train on a bundle; writes checkpoint, loss log and metrics
    Train { bundle: PathBuf },
    /// Score a saved checkpoint on a bundle
    Eval {
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train over the loss-weight grid and write a sorted table
    Sweep { bundle: PathBuf },
    /// Aggregate metrics.jsonl files (paths or glob patterns)
    Report {
        #[arg(required = true)]
        patterns: Vec<String>,
    },
    /// Export a 2-D projection of the learned embeddings
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let variant = cli.variant.unwrap_or(cfg.train.variant);
    match cli.command {
        Command::Synth => {
            if let Some(seed) = cli.seed {
                cfg.synthesis.seed = seed;
            }
            let out = cli.out.unwrap_or_else(|| cfg.output_dir.clone());
            let dirs = commands::cmd_synth(&cfg, &out, cli.kappa)?;
            println!("wrote {} bundles under {}", dirs.len(), out.display());
        }
        Command::Train { bundle } => {
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            let out = cli.out.unwrap_or_else(|| bundle.join("runs").join(variant.as_str()));
            let art = commands::cmd_train(&bundle, &cfg, variant, cli.kappa, &out)?;
            println!("checkpoint {}", art.checkpoint.display());
            println!("loss log   {}", art.train_log.display());
            for r in art.metrics.iter().flatten() {
                println!("{} {}: pehe_sqrt {:.4} ate_error {:.4}", r.variant, r.split, r.pehe_sqrt, r.ate_error);
            }
        }
        Command::Eval { bundle, checkpoint } => {
            let out = cli.out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
            let reports = commands::cmd_eval(&bundle, &checkpoint, &cfg, cli.seed, cli.kappa, &out)?;
            for r in &reports {
                println!("{} {}: pehe_sqrt {:.4} ate_error {:.4}", r.variant, r.split, r.pehe_sqrt, r.ate_error);
            }
        }
        Command::Sweep { bundle } => {
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            let grid: WeightGrid = cfg.sweep.clone();
            let out = cli.out.unwrap_or_else(|| bundle.join("sweep"));
            let rows = commands::cmd_sweep(&bundle, &cfg, &grid, variant, cli.kappa, &out)?;
            println!("{:>4} {:>8} {:>8} {:>8} {:>12} {:>12}", "rank", "w1", "w2", "w3", "test √PEHE", "test ε_ATE");
            for (i, r) in rows.iter().enumerate() {
                println!(
                    "{:>4} {:>8} {:>8} {:>8} {:>12.4} {:>12.4}",
                    i + 1,
                    r.weights.w1,
                    r.weights.w2,
                    r.weights.w3,
                    r.test.pehe_sqrt,
                    r.test.ate_error
                );
            }
            println!("{}", commands::sweep_footer(&rows));
        }
        Command::Report { patterns } => {
            let rows = commands::cmd_report(&patterns, cli.out.as_deref())?;
            print!("{}", commands::render_summary(&rows));
        }
        Command::Project { checkpoint, bundle } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("projection.csv"));
            let points = commands::cmd_project(&checkpoint, &bundle, &out)?;
            println!("wrote {} points to {}", points.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
