use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use genneg::analytic::{verify_all, VerifyConfig};
use genneg::data::{Dataset, Split};
use genneg::diffusion::{train_baseline, NoiseSchedule, ScoreFn, ScoreModel, TrainConfig, SCORE_MODEL_KIND};
use genneg::genneg::run::{iteration_dir, RunSnapshot};
use genneg::genneg::{distill, evaluate, run, IterationRecord, Metrics};
use genneg::guidance::{GuidedModel, GUIDED_KIND};
use genneg::io::{file_hash, load_checkpoint, read_json, save_checkpoint, write_json};
use genneg::oracle::make_checkerboard_dataset;
use genneg::plot::{line_svg, scatter_svg, write_svg, Series};
use genneg::seed::derive_seed;
use genneg::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Overrides};

const STREAM_DATA: u64 = 101;
const STREAM_DISTILL: u64 = 102;
const STREAM_EVAL: u64 = 103;

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!(
                "{} is locked by another invocation (delete {} if that process is gone)",
                dir.display(),
                path.display()
            )
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Serialize, Deserialize)]
struct DataMeta {
    seed: u64,
    train: usize,
    validation: usize,
    train_sha256: String,
    validation_sha256: String,
}

fn write_snapshot(cfg: &ExperimentConfig) -> Result<()> {
    write_json(&cfg.out.join("experiment.json"), cfg)?;
    Ok(())
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg.data_dir();
    let read = |name: &str, split| -> Result<Dataset> {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::MissingArtifact(p)).context("run `genneg gen-data` first");
        }
        Ok(Dataset::read_csv(&p, split)?)
    };
    Ok((read("train.csv", Split::Train)?, read("validation.csv", Split::Validation)?))
}

fn load_baseline(cfg: &ExperimentConfig) -> Result<ScoreModel> {
    let p = cfg.baseline_path();
    if !p.exists() {
        return Err(Error::MissingArtifact(p)).context("run `genneg train-baseline` first");
    }
    Ok(load_checkpoint(&p, SCORE_MODEL_KIND)?)
}

fn latest_iteration(run_dir: &Path) -> usize {
    let mut k = 0;
    while iteration_dir(run_dir, k + 1).join("state.json").exists() {
        k += 1;
    }
    k
}

fn metrics_json(m: &Metrics) -> Value {
    json!({
        "infraction": m.infraction.rate,
        "infraction_stderr": m.infraction.stderr,
        "r_elbo": m.r_elbo.estimate,
        "r_elbo_stderr": m.r_elbo.stderr,
        "likelihood_elbo": m.likelihood_elbo.estimate,
        "likelihood_elbo_stderr": m.likelihood_elbo.stderr,
    })
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Value> {
    let train = make_checkerboard_dataset(&cfg.oracle, cfg.data.train, derive_seed(cfg.seed, &[STREAM_DATA, 0]), Split::Train)?;
    let val = make_checkerboard_dataset(
        &cfg.oracle,
        cfg.data.validation,
        derive_seed(cfg.seed, &[STREAM_DATA, 1]),
        Split::Validation,
    )?;
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir)?;
    train.write_csv(&dir.join("train.csv"))?;
    val.write_csv(&dir.join("validation.csv"))?;
    let meta = DataMeta {
        seed: cfg.seed,
        train: train.len(),
        validation: val.len(),
        train_sha256: file_hash(&dir.join("train.csv"))?,
        validation_sha256: file_hash(&dir.join("validation.csv"))?,
    };
    write_json(&dir.join("data.json"), &meta)?;
    write_snapshot(cfg)?;
    Ok(json!({
        "train": meta.train,
        "validation": meta.validation,
        "train_sha256": meta.train_sha256,
        "validation_sha256": meta.validation_sha256,
        "dir": dir,
    }))
}

pub fn train_baseline_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    let (train, val) = load_data(cfg)?;
    let init = cfg.run.initial_model(train.dim(), NoiseSchedule::default())?;
    let out = train_baseline(init, &train, &val, &cfg.run.baseline_train())?;
    let path = cfg.baseline_path();
    let hash = save_checkpoint(&path, SCORE_MODEL_KIND, &out.model)?;
    write_json(&path.with_file_name("train_log.json"), &out.log)?;
    write_snapshot(cfg)?;
    let best = out.log.iter().filter_map(|e| e.validation).fold(f64::NEG_INFINITY, f64::max);
    Ok(json!({
        "model": path,
        "sha256": hash,
        "selected_iteration": out.selected_iteration,
        "best_validation_r_elbo": if best.is_finite() { json!(best) } else { Value::Null },
    }))
}

pub fn genneg_run(cfg: &ExperimentConfig) -> Result<Value> {
    let (train, val) = load_data(cfg)?;
    let baseline = load_baseline(cfg)?;
    let dir = cfg.run_dir();
    let out = run(&train, &val, &cfg.oracle, &cfg.run, &dir, Some(baseline))?;
    write_snapshot(cfg)?;
    let records: Vec<Value> = out
        .records
        .iter()
        .map(|r| {
            let mut v = metrics_json(&r.metrics);
            v["iteration"] = json!(r.iteration);
            v["alpha"] = json!(r.alpha);
            v
        })
        .collect();
    Ok(json!({
        "run_dir": dir,
        "mode": cfg.run.mode_label(),
        "baseline": metrics_json(&out.baseline_metrics),
        "records": records,
        "termination": out.termination,
        "resumed_from": out.resumed_from,
        "depth": out.model.depth(),
    }))
}

pub fn distill_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    let (train, val) = load_data(cfg)?;
    let dir = cfg.run_dir();
    let k = latest_iteration(&dir);
    if k == 0 {
        return Err(Error::MissingArtifact(iteration_dir(&dir, 1).join("state.json")))
            .context("run `genneg genneg-run` first");
    }
    let teacher: GuidedModel = load_checkpoint(&iteration_dir(&dir, k).join("state.json"), GUIDED_KIND)?;
    let tc = TrainConfig {
        seed: derive_seed(cfg.seed, &[STREAM_DISTILL, k as u64]),
        ..cfg.run.distillation.clone()
    };
    let out = distill(&teacher, teacher.baseline.clone(), &train, &val, &tc)?;
    let eval_seed = derive_seed(cfg.seed, &[STREAM_EVAL, k as u64]);
    let schedule = teacher.baseline.schedule;
    let (tm, _) = evaluate(&teacher, &schedule, &cfg.oracle, &val, &cfg.run.eval, eval_seed)?;
    let (sm, _) = evaluate(&out.model, &schedule, &cfg.oracle, &val, &cfg.run.eval, eval_seed)?;
    let ddir = dir.join("distilled");
    let hash = save_checkpoint(&ddir.join("student.json"), SCORE_MODEL_KIND, &out.model)?;
    let summary = json!({
        "from_iteration": k,
        "teacher_depth": teacher.depth(),
        "student": ddir.join("student.json"),
        "student_sha256": hash,
        "selected_iteration": out.selected_iteration,
        "teacher_metrics": metrics_json(&tm),
        "student_metrics": metrics_json(&sm),
    });
    write_json(&ddir.join("metrics.json"), &summary)?;
    Ok(summary)
}

enum Loaded {
    Guided(GuidedModel),
    Plain(ScoreModel),
}

fn load_any(path: &Path) -> Result<Loaded> {
    match load_checkpoint::<GuidedModel>(path, GUIDED_KIND) {
        Ok(m) => Ok(Loaded::Guided(m)),
        Err(Error::Schema(_)) => Ok(Loaded::Plain(load_checkpoint(path, SCORE_MODEL_KIND)?)),
        Err(e) => Err(e.into()),
    }
}

pub fn eval_cmd(cfg: &ExperimentConfig, model: Option<&Path>, untrained: bool) -> Result<Value> {
    let (_, val) = load_data(cfg)?;
    let (loaded, label) = if untrained {
        (Loaded::Plain(cfg.run.initial_model(val.dim(), NoiseSchedule::default())?), "untrained".to_string())
    } else {
        let path = match model {
            Some(p) => p.to_path_buf(),
            None => {
                let k = latest_iteration(&cfg.run_dir());
                if k > 0 {
                    iteration_dir(&cfg.run_dir(), k).join("state.json")
                } else {
                    cfg.baseline_path()
                }
            }
        };
        if !path.exists() {
            return Err(Error::MissingArtifact(path)).context("train a model before evaluating it");
        }
        let label = path.display().to_string();
        (load_any(&path)?, label)
    };
    let seed = derive_seed(cfg.seed, &[STREAM_EVAL]);
    let (m, depth) = match &loaded {
        Loaded::Guided(g) => (evaluate(g, &g.baseline.schedule, &cfg.oracle, &val, &cfg.run.eval, seed)?.0, g.depth()),
        Loaded::Plain(s) => (evaluate(s, &s.schedule, &cfg.oracle, &val, &cfg.run.eval, seed)?.0, 0),
    };
    let dim = match &loaded {
        Loaded::Guided(g) => g.dim(),
        Loaded::Plain(s) => ScoreFn::dim(s),
    };
    let summary = json!({
        "model": label,
        "dim": dim,
        "depth": depth,
        "samples": cfg.run.eval.samples,
        "metrics": metrics_json(&m),
    });
    write_json(&cfg.out.join("eval").join("latest.json"), &summary)?;
    Ok(summary)
}

pub fn verify_cmd(cfg: &ExperimentConfig, o: &Overrides) -> Result<Value> {
    let vc = VerifyConfig {
        samples: o.samples.unwrap_or(VerifyConfig::default().samples),
        steps: o.steps.unwrap_or(VerifyConfig::default().steps),
        seed: cfg.seed,
    };
    let report = verify_all(&vc)?;
    let path = cfg.out.join("verify").join("report.json");
    report.write(&path)?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !report.passed {
        bail!("analytic checks failed: {} (report at {})", failed.join(", "), path.display());
    }
    Ok(json!({ "report": path, "checks": report.checks.len(), "passed": true }))
}

fn run_modes(out: &Path) -> Result<Vec<PathBuf>> {
    let runs = out.join("runs");
    if !runs.is_dir() {
        return Err(Error::MissingArtifact(runs)).context("run `genneg genneg-run` first");
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("config.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingArtifact(runs)).context("no run directories found");
    }
    Ok(dirs)
}

pub fn plot_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    let plots = cfg.out.join("plots");
    let mut written = Vec::new();
    let mut infraction = Vec::new();
    let mut elbo = Vec::new();
    for dir in run_modes(&cfg.out)? {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let snap: RunSnapshot = read_json(&dir.join("config.json"))?;
        let base: Metrics = read_json(&dir.join("baseline").join("metrics.json"))?;
        let mut rows = vec![(0usize, base)];
        let mut i = 1;
        while iteration_dir(&dir, i).join("record.json").exists() {
            let r: IterationRecord = read_json(&iteration_dir(&dir, i).join("record.json"))?;
            rows.push((r.iteration, r.metrics));
            i += 1;
        }
        infraction.push(Series {
            name: name.clone(),
            points: rows
                .iter()
                .map(|(i, m)| (*i as f64, 100.0 * m.infraction.rate, 100.0 * m.infraction.stderr))
                .collect(),
        });
        elbo.push(Series {
            name: name.clone(),
            points: rows.iter().map(|(i, m)| (*i as f64, m.r_elbo.estimate, m.r_elbo.stderr)).collect(),
        });
        for (k, _) in &rows {
            let csv = if *k == 0 { dir.join("baseline").join("samples.csv") } else { iteration_dir(&dir, *k).join("samples.csv") };
            if !csv.exists() {
                continue;
            }
            let pts = genneg::data::read_points_csv(&csv)?;
            if pts.ncols() != 2 {
                continue;
            }
            let svg = scatter_svg(pts.view(), &snap.oracle, &format!("{name}, iteration {k}"), 3.0)?;
            let p = plots.join(&name).join(format!("samples_iter_{k:03}.svg"));
            write_svg(&p, &svg)?;
            written.push(p);
        }
    }
    let p = plots.join("infraction.svg");
    write_svg(&p, &line_svg(&infraction, "Infraction rate", "iteration", "infraction (%)")?)?;
    written.push(p);
    let p = plots.join("elbo.svg");
    write_svg(&p, &line_svg(&elbo, "Validation r-ELBO", "iteration", "r-ELBO (nats)")?)?;
    written.push(p);
    Ok(json!({ "files": written }))
}
