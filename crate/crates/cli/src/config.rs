//! Experiment configuration file.
//!
//! TOML with one section per subsystem; every key is optional.
//!
//! ```toml
//! kappas = [0.5, 1.0, 2.0]
//! replications = 10
//! output_dir = "out"
//!
//! [synthesis]
//! n_units = 1000
//!
//! [train]
//! epochs = 200
//!
//! [train.weights]
//! w1 = 1e-4
//!
//! [sweep]
//! w3 = [0.1, 1.0, 10.0]
//! ```

use std::path::{Path, PathBuf};

use gdc_core::{Error, ModelConfig, Result, SynthesisConfig, TrainConfig, WeightGrid};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kappas: Vec<f64>,
    pub replications: usize,
    pub output_dir: PathBuf,
    pub synthesis: SynthesisConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: WeightGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kappas: vec![0.5, 1.0, 2.0],
            replications: 10,
            output_dir: PathBuf::from("out"),
            synthesis: SynthesisConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: WeightGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.kappas.is_empty() {
            return Err(Error::Config("kappas must not be empty".into()));
        }
        if let Some(k) = self.kappas.iter().find(|k| !(**k >= 0.0 && k.is_finite())) {
            return Err(Error::Config(format!("kappa must be non-negative, got {k}")));
        }
        self.synthesis.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sweep.points().map(|_| ())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::parse(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    /// Serializes with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gdc_core::Variant;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip_materializes_defaults() {
        let cfg = ExperimentConfig::parse("replications = 2\n[train]\nvariant = \"no_disentangle\"\n").unwrap();
        assert_eq!(cfg.train.variant, Variant::NoDisentangle);
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("hidden_dim"));
        assert!(text.contains("epsilon"));
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(ExperimentConfig::parse("replications = 0"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("kappas = []"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("kappas = [-1.0]"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("typo = 1"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::parse("[train]\nepochs = 0"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_file_is_io() {
        let err = ExperimentConfig::load(Some(Path::new("/nonexistent/gdc.toml"))).unwrap_err();
        assert!(err.is_io());
    }
}
