use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use genneg::genneg::RunConfig;
use genneg::guidance::ImbalanceMode;
use genneg::oracle::OracleSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: usize,
    pub validation: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 1000,
            validation: 1000,
        }
    }
}

/// Everything a command needs. Serialized verbatim into the output
/// directory so a run can be repeated from its snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub oracle: OracleSpec,
    pub data: DataConfig,
    pub run: RunConfig,
    pub out: PathBuf,
    /// Master seed; overrides `run.seed`.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            oracle: OracleSpec::checkerboard(),
            data: DataConfig::default(),
            run: RunConfig::default(),
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Command-line overrides, applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_is: bool,
    pub distill: bool,
    pub iterations: Option<usize>,
    pub samples: Option<usize>,
    pub steps: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(out) = &o.out {
            cfg.out = out.clone();
        }
        if o.no_is {
            cfg.run.classifier.mode = ImbalanceMode::Uncorrected;
        }
        if o.distill {
            cfg.run.distill = true;
        }
        if let Some(k) = o.iterations {
            cfg.run.max_iterations = k;
        }
        if let Some(n) = o.samples {
            cfg.run.eval.samples = n;
        }
        if let Some(s) = o.steps {
            cfg.run.sampler_steps = s;
            cfg.run.eval.steps = s;
        }
        cfg.run.seed = cfg.seed;
        if cfg.data.train == 0 || cfg.data.validation == 0 {
            anyhow::bail!(genneg::Error::Config("dataset sizes must be positive".into()));
        }
        cfg.oracle.validate()?;
        cfg.run.validate()?;
        Ok(cfg)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn baseline_path(&self) -> PathBuf {
        self.out.join("baseline").join("model.json")
    }

    /// Each imbalance/distill combination keeps its own record stream.
    pub fn run_dir(&self) -> PathBuf {
        self.out.join("runs").join(self.run.mode_label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_seed_propagates() {
        let o = Overrides {
            seed: Some(7),
            no_is: true,
            iterations: Some(2),
            steps: Some(50),
            ..Overrides::default()
        };
        let c = ExperimentConfig::load(None, &o).unwrap();
        assert_eq!((c.seed, c.run.seed, c.run.max_iterations), (7, 7, 2));
        assert_eq!(c.run.classifier.mode, ImbalanceMode::Uncorrected);
        assert!(c.run_dir().ends_with("runs/no_is"));
        assert_eq!((c.run.sampler_steps, c.run.eval.steps), (50, 50));
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        // partial files fill in defaults
        let p: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "run": {"per_class": 10}}"#).unwrap();
        assert_eq!(p.run.per_class, 10);
        assert_eq!(p.data.train, 1000);
    }
}
