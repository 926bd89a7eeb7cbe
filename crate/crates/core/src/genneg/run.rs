//! Persistent runs. Layout of a run directory:
//!
//! ```text
//! config.json             config snapshot (oracle + RunConfig)
//! baseline/model.json     baseline checkpoint, train_log.json, metrics.json, samples.csv
//! iter_001/               classifier.json, state.json, record.json, labeled/,
//!                         samples.csv, student.json (distill mode)
//! metrics.csv             one row per iteration, row 0 is the baseline
//! manifest.json           sha256 of every artifact, termination reason
//! ```
//!
//! A run restarted on the same directory picks up after the last iteration
//! whose `record.json` and `state.json` exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{evaluate, genneg_iterate, phase_seed, IterationRecord, Metrics, RunConfig, PHASE_BASELINE_EVAL};
use crate::data::{write_sample_dump, Dataset, SampleMeta};
use crate::diffusion::{train_baseline, ScoreModel, TrainLogEntry, SCORE_MODEL_KIND};
use crate::error::{Error, Result};
use crate::guidance::{GuidedModel, CLASSIFIER_KIND, GUIDED_KIND};
use crate::io::{file_hash, load_checkpoint, read_json, save_checkpoint, write_json, SCHEMA_VERSION};
use crate::oracle::OracleSpec;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
/// Samples kept on disk per evaluation for scatter plots.
pub const SCATTER_POINTS: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    BudgetExhausted {
        iteration: usize,
        used: usize,
        positives: usize,
        negatives: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub oracle: OracleSpec,
    pub config: RunConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    metrics_schema_version: u32,
    mode: String,
    termination: Option<Termination>,
    files: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    iteration: usize,
    mode: &'a str,
    alpha: Option<f64>,
    infraction: f64,
    infraction_stderr: f64,
    r_elbo: f64,
    r_elbo_stderr: f64,
    likelihood_elbo: f64,
    likelihood_elbo_stderr: f64,
    samples_used: Option<usize>,
    budget: Option<usize>,
}

impl<'a> MetricsRow<'a> {
    fn new(iteration: usize, mode: &'a str, m: &Metrics) -> Self {
        Self {
            iteration,
            mode,
            alpha: None,
            infraction: m.infraction.rate,
            infraction_stderr: m.infraction.stderr,
            r_elbo: m.r_elbo.estimate,
            r_elbo_stderr: m.r_elbo.stderr,
            likelihood_elbo: m.likelihood_elbo.estimate,
            likelihood_elbo_stderr: m.likelihood_elbo.stderr,
            samples_used: None,
            budget: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: GuidedModel,
    pub baseline_metrics: Metrics,
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    /// Iterations already on disk when the run started.
    pub resumed_from: usize,
}

pub fn iteration_dir(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("iter_{i:03}"))
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn dump_samples(path: &Path, x: ArrayView2<f64>, seed: u64, steps: usize, model_hash: String) -> Result<()> {
    let keep = x.nrows().min(SCATTER_POINTS);
    let meta = SampleMeta {
        seed,
        steps,
        count: keep,
        dim: x.ncols(),
        model_hash,
    };
    write_sample_dump(path, x.slice(s![..keep, ..]), &meta)
}

fn write_metrics_csv(path: &Path, mode: &str, baseline: &Metrics, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(MetricsRow::new(0, mode, baseline))?;
    for r in records {
        w.serialize(MetricsRow {
            alpha: Some(r.alpha),
            samples_used: Some(r.samples_used),
            budget: Some(r.budget),
            ..MetricsRow::new(r.iteration, mode, &r.metrics)
        })?;
    }
    w.flush()?;
    Ok(())
}

fn write_manifest(dir: &Path, cfg: &RunConfig, termination: Option<Termination>) -> Result<()> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json" && n != ".lock") {
                files.insert(rel(dir, &p), file_hash(&p)?);
            }
        }
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            schema_version: SCHEMA_VERSION,
            metrics_schema_version: METRICS_SCHEMA_VERSION,
            mode: cfg.mode_label().into(),
            termination,
            files,
        },
    )
}

fn same_run(a: &RunSnapshot, b: &RunSnapshot) -> bool {
    // the iteration cap may grow between invocations
    let norm = |s: &RunSnapshot| RunSnapshot {
        config: RunConfig {
            max_iterations: 0,
            ..s.config.clone()
        },
        ..s.clone()
    };
    norm(a) == norm(b)
}

fn completed_iterations(dir: &Path) -> usize {
    let mut k = 0;
    while iteration_dir(dir, k + 1).join("record.json").exists() && iteration_dir(dir, k + 1).join("state.json").exists() {
        k += 1;
    }
    k
}

/// Trains (or loads) the baseline, then iterates until `max_iterations` or
/// until a labeled set cannot be filled within budget. Every artifact is
/// written as soon as it exists, so an aborted run leaves its finished
/// iterations resumable. `baseline` skips training when the run directory
/// has no baseline of its own yet.
pub fn run(
    train: &Dataset,
    validation: &Dataset,
    oracle: &OracleSpec,
    cfg: &RunConfig,
    dir: &Path,
    baseline: Option<ScoreModel>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    oracle.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    std::fs::create_dir_all(dir)?;
    let snapshot = RunSnapshot {
        oracle: oracle.clone(),
        config: cfg.clone(),
    };
    let snap_path = dir.join("config.json");
    if snap_path.exists() {
        let old: RunSnapshot = read_json(&snap_path)?;
        if !same_run(&old, &snapshot) {
            return Err(Error::Config(format!(
                "{} belongs to a run with a different configuration",
                dir.display()
            )));
        }
    }
    write_json(&snap_path, &snapshot)?;

    let schedule = crate::diffusion::NoiseSchedule::default();
    let bdir = dir.join("baseline");
    let model_path = bdir.join("model.json");
    let base = if model_path.exists() {
        load_checkpoint::<ScoreModel>(&model_path, SCORE_MODEL_KIND)?
    } else {
        let (model, log): (ScoreModel, Vec<TrainLogEntry>) = match baseline {
            Some(m) => (m, Vec::new()),
            None => {
                let init = cfg.initial_model(train.dim(), schedule)?;
                let out = train_baseline(init, train, validation, &cfg.baseline_train())?;
                log::info!("baseline selected at iteration {}", out.selected_iteration);
                (out.model, out.log)
            }
        };
        write_json(&bdir.join("train_log.json"), &log)?;
        save_checkpoint(&model_path, SCORE_MODEL_KIND, &model)?;
        model
    };
    if base.dim() != train.dim() {
        return Err(Error::Config(format!(
            "baseline dimension {} does not match data dimension {}",
            base.dim(),
            train.dim()
        )));
    }
    let metrics_path = bdir.join("metrics.json");
    let baseline_metrics: Metrics = if metrics_path.exists() {
        read_json(&metrics_path)?
    } else {
        let seed = phase_seed(cfg.seed, 0, PHASE_BASELINE_EVAL);
        let (m, x) = evaluate(&base, &base.schedule, oracle, validation, &cfg.eval, seed)?;
        dump_samples(&bdir.join("samples.csv"), x.view(), seed, cfg.eval.steps, file_hash(&model_path)?)?;
        write_json(&metrics_path, &m)?;
        m
    };

    let resumed_from = completed_iterations(dir);
    let mut records = Vec::new();
    for i in 1..=resumed_from.min(cfg.max_iterations) {
        records.push(read_json::<IterationRecord>(&iteration_dir(dir, i).join("record.json"))?);
    }
    let mut state = if resumed_from == 0 {
        GuidedModel::new(base)
    } else {
        let k = resumed_from.min(cfg.max_iterations);
        if k == 0 {
            GuidedModel::new(base)
        } else {
            load_checkpoint(&iteration_dir(dir, k).join("state.json"), GUIDED_KIND)?
        }
    };
    if resumed_from > 0 {
        log::info!("resuming after iteration {resumed_from}");
    }

    let mode = cfg.mode_label();
    write_metrics_csv(&dir.join("metrics.csv"), mode, &baseline_metrics, &records)?;
    let mut termination = Termination::Completed;
    for i in resumed_from + 1..=cfg.max_iterations {
        let out = match genneg_iterate(state.clone(), train, validation, oracle, cfg, i) {
            Ok(o) => o,
            Err(Error::Budget {
                used,
                positives,
                negatives,
                ..
            }) => {
                log::warn!("iteration {i}: budget of {used} draws gave {positives} positive / {negatives} negative");
                termination = Termination::BudgetExhausted {
                    iteration: i,
                    used,
                    positives,
                    negatives,
                };
                break;
            }
            Err(e) => {
                write_manifest(dir, cfg, None)?;
                return Err(e);
            }
        };
        let idir = iteration_dir(dir, i);
        let hash = save_checkpoint(&idir.join("classifier.json"), CLASSIFIER_KIND, &out.classifier)?;
        debug_assert_eq!(hash, out.record.classifier_sha256);
        out.labeled.save(&idir.join("labeled"))?;
        if let Some(student) = &out.student {
            save_checkpoint(&idir.join("student.json"), SCORE_MODEL_KIND, student)?;
        }
        let state_hash = save_checkpoint(&idir.join("state.json"), GUIDED_KIND, &out.model)?;
        dump_samples(
            &idir.join("samples.csv"),
            out.samples.view(),
            phase_seed(cfg.seed, i, super::PHASE_EVAL),
            cfg.eval.steps,
            state_hash,
        )?;
        // the record goes last: its presence marks the iteration complete
        write_json(&idir.join("record.json"), &out.record)?;
        records.push(out.record);
        write_metrics_csv(&dir.join("metrics.csv"), mode, &baseline_metrics, &records)?;
        write_manifest(dir, cfg, None)?;
        state = out.model;
    }
    write_manifest(dir, cfg, Some(termination.clone()))?;
    Ok(RunOutcome {
        model: state,
        baseline_metrics,
        records,
        termination,
        resumed_from,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::genneg::tests::tiny_config;
    use crate::oracle::make_checkerboard_dataset;

    fn data() -> (Dataset, Dataset) {
        let o = OracleSpec::checkerboard();
        (
            make_checkerboard_dataset(&o, 200, 11, Split::Train).unwrap(),
            make_checkerboard_dataset(&o, 100, 12, Split::Validation).unwrap(),
        )
    }

    fn strip(r: &[IterationRecord]) -> Vec<IterationRecord> {
        r.iter().map(IterationRecord::without_timing).collect()
    }

    #[test]
    fn zero_iterations_leave_the_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let (train, val) = data();
        let cfg = RunConfig { max_iterations: 0, ..tiny_config() };
        let out = run(&train, &val, &OracleSpec::checkerboard(), &cfg, dir.path(), None).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.model.depth(), 0);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (train, val) = data();
        let o = OracleSpec::checkerboard();
        let full_dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let full = run(&train, &val, &o, &cfg, full_dir.path(), None).unwrap();
        assert_eq!(full.records.len(), 2);
        assert_eq!(full.termination, Termination::Completed);

        let part_dir = tempfile::tempdir().unwrap();
        let first = run(&train, &val, &o, &RunConfig { max_iterations: 1, ..cfg.clone() }, part_dir.path(), None).unwrap();
        assert_eq!(first.records.len(), 1);
        let rest = run(&train, &val, &o, &cfg, part_dir.path(), None).unwrap();
        assert_eq!(rest.resumed_from, 1);
        assert_eq!(strip(&rest.records), strip(&full.records));
        assert_eq!(rest.model, full.model);

        // every recorded hash resolves to the stored classifier
        for r in &full.records {
            let p = iteration_dir(full_dir.path(), r.iteration).join("classifier.json");
            assert_eq!(file_hash(&p).unwrap(), r.classifier_sha256);
        }
        let manifest: Manifest = read_json(&full_dir.path().join("manifest.json")).unwrap();
        assert!(manifest.files.contains_key("iter_002/state.json"));
        assert_eq!(manifest.termination, Some(Termination::Completed));
    }

    #[test]
    fn changed_config_is_refused() {
        let (train, val) = data();
        let o = OracleSpec::checkerboard();
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { max_iterations: 0, ..tiny_config() };
        run(&train, &val, &o, &cfg, dir.path(), None).unwrap();
        let other = RunConfig { seed: 99, ..cfg };
        assert!(matches!(run(&train, &val, &o, &other, dir.path(), None), Err(Error::Config(_))));
    }

    #[test]
    fn exhausted_budget_stops_cleanly() {
        let (train, val) = data();
        // the whole plane is inside: no negatives can ever be found
        let o = OracleSpec::HalfSpace { normal: vec![0.0, 0.0], offset: 1.0 };
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { budget: Some(1000), ..tiny_config() };
        let out = run(&train, &val, &o, &cfg, dir.path(), None).unwrap();
        assert!(out.records.is_empty());
        match out.termination {
            Termination::BudgetExhausted { iteration, negatives, used, .. } => {
                assert_eq!((iteration, negatives, used), (1, 0, 1000));
            }
            t => panic!("{t:?}"),
        }
    }
}
