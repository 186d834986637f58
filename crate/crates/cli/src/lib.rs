//! Command-line front end: synthesis, training, evaluation, sweeps,
//! replication reports and embedding projections, driven by one TOML file.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_project, cmd_report, cmd_sweep, cmd_synth, cmd_train, render_summary, sweep_footer};
pub use config::ExperimentConfig;

/// Process exit status for an error: 2 for filesystem failures, 1 otherwise.
pub fn exit_code(err: &gdc_core::Error) -> i32 {
    if err.is_io() {
        2
    } else {
        1
    }
}
