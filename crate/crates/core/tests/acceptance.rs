//! Acceptance criteria, one test per criterion, each printing a PASS/FAIL
//! line. Criteria that need workstation-scale training are `#[ignore]`d at
//! full scale (run them with `cargo test --release -- --ignored`); each has a
//! reduced-scale companion that exercises the same code path.

use std::io::Write as _;
use std::time::Instant;

use genneg::analytic::{
    diffused_pdf, guided_infraction, linspace, verify_alpha_invariance, verify_posterior_ratio, verify_guided_score_identity,
    Constraint1D, Mixture1D,
};
use genneg::data::{Dataset, Split};
use genneg::diffusion::{
    dsm_loss_at, dsm_loss_grad, elbo, gaussian_score, train_baseline, ElboConfig, ElboWeighting, LossWeighting,
    NoiseSchedule, NoisedBatch, ScoreFn, ScoreModel, TimeSampling, TrainConfig,
};
use genneg::genneg::{run, EvalConfig, IterationRecord, RunConfig, Termination};
use genneg::guidance::{
    ce_loss_at, estimate_alpha, is_loss_at, is_loss_grad, BalancedBatch, ClassifierConfig, ImbalanceMode,
    TimeClassifier,
};
use genneg::numkit::{Linear, NetConfig};
use genneg::oracle::{make_checkerboard_dataset, OracleSpec};
use genneg::seed::rng_from;
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Writes straight to the process stderr so the line shows up even when the
/// harness captures test output.
fn report(criterion: &str, passed: bool, detail: &str) {
    let line = format!(
        "ACCEPTANCE criterion {criterion}: {} -- {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(passed, "criterion {criterion} failed: {detail}");
}

fn checkerboard_data(train: usize, validation: usize, seed: u64) -> (Dataset, Dataset) {
    let o = OracleSpec::checkerboard();
    (
        make_checkerboard_dataset(&o, train, seed, Split::Train).unwrap(),
        make_checkerboard_dataset(&o, validation, seed + 1, Split::Validation).unwrap(),
    )
}

#[test]
fn criterion_01_guided_score_identity() {
    let start = Instant::now();
    let m = Mixture1D::lab();
    let c = Constraint1D::from(0.0);
    let r = verify_guided_score_identity(&m, &c, &[0.1, 0.5, 1.0, 2.0], &linspace(-4.0, 4.0, 81)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        "1",
        r.max_error < 1e-3 && secs < 10.0,
        &format!("max error {:.3e} (< 1e-3) over {}, {secs:.2}s (< 10s)", r.max_error, r.grid),
    );
}

#[test]
fn criterion_02_alpha_is_time_invariant() {
    let r = verify_alpha_invariance(&Mixture1D::lab(), &Constraint1D::from(0.0), &[0.0, 0.5, 2.0]).unwrap();
    report("2", r.max_error < 1e-6, &format!("spread {:.3e} (< 1e-6) at {}", r.max_error, r.grid));
}

#[test]
fn criterion_03_truncated_target_and_exact_guidance() {
    let m = Mixture1D::lab();
    let c = Constraint1D::from(0.0);
    let ratio = verify_posterior_ratio(&m, &c, &linspace(-4.0, 4.0, 81)).unwrap();
    let outside_zero = linspace(-4.0, -0.05, 40)
        .into_iter()
        .all(|x| diffused_pdf(&m, Some(&c), x, 0.0).unwrap() == 0.0);
    let rate = guided_infraction(&m, &c, 100_000, 200, 3).unwrap();
    report(
        "3",
        ratio.max_error < 1e-9 && outside_zero && rate < 0.005,
        &format!(
            "|p(x|y=1) - p(x)/alpha| max {:.3e} (< 1e-9), zero density outside: {outside_zero}, \
             exact-guidance infraction {:.4}% (< 0.5%) on 1e5 samples, 200 steps",
            ratio.max_error,
            100.0 * rate
        ),
    );
}

struct GradTally {
    checks: usize,
    failures: Vec<String>,
    worst: f64,
}

impl GradTally {
    fn check(&mut self, what: String, analytic: f64, fd: f64) {
        self.checks += 1;
        let scale = analytic.abs().max(fd.abs());
        // both sides at round-off level: compare absolutely instead
        let rel = if scale < 1e-7 { (analytic - fd).abs() / 1e-7 } else { (analytic - fd).abs() / scale };
        self.worst = self.worst.max(rel);
        if rel >= 1e-4 {
            self.failures.push(format!("{what}: {analytic:.8e} vs {fd:.8e}"));
        }
    }
}

fn random_score_model(rng: &mut impl Rng, seed: u64) -> ScoreModel {
    let mut m = ScoreModel::init(NetConfig::new(2, 2).with_hidden(24).with_embed(8), NoiseSchedule::default(), seed).unwrap();
    m.net.output = Linear::uniform(24, 2, rng);
    m
}

fn random_classifier(rng: &mut impl Rng, seed: u64) -> TimeClassifier {
    let mut c = TimeClassifier::init(2, 24, 8, NoiseSchedule::default(), seed).unwrap();
    c.net.output = Linear::uniform(24, 1, rng);
    c
}

fn random_batch(rng: &mut impl Rng, n: usize) -> NoisedBatch {
    let x0 = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-2.0..2.0));
    NoisedBatch::draw(x0, &TimeSampling::LogUniform, &NoiseSchedule::default(), rng)
}

#[test]
fn criterion_04_gradients_match_finite_differences() {
    let mut rng = rng_from(404);
    let h = 1e-6;
    let mut t = GradTally {
        checks: 0,
        failures: Vec::new(),
        worst: 0.0,
    };
    let w = LossWeighting::Edm;
    // score network parameters, through the score-matching loss
    for k in 0..7 {
        let m = random_score_model(&mut rng, k);
        let b = random_batch(&mut rng, 6);
        let (_, g) = dsm_loss_grad(&m, &b, &w).unwrap();
        let g = g.to_flat();
        for _ in 0..10 {
            let i = rng.random_range(0..g.len());
            let mut p = m.clone();
            *p.net.flat_mut(i).unwrap() += h;
            let up = dsm_loss_at(&p, &b, &w).unwrap();
            *p.net.flat_mut(i).unwrap() -= 2.0 * h;
            let dn = dsm_loss_at(&p, &b, &w).unwrap();
            t.check(format!("score net {k} param {i}"), g[i], (up - dn) / (2.0 * h));
        }
    }
    // classifier parameters, through the importance-sampled loss
    for k in 0..7 {
        let c = random_classifier(&mut rng, 100 + k);
        let b = BalancedBatch {
            positives: random_batch(&mut rng, 4),
            negatives: random_batch(&mut rng, 4),
        };
        let alpha = rng.random_range(0.05..0.95);
        let (_, g) = is_loss_grad(&c, alpha, &b).unwrap();
        let g = g.to_flat();
        for _ in 0..10 {
            let i = rng.random_range(0..g.len());
            let mut p = c.clone();
            *p.net.flat_mut(i).unwrap() += h;
            let up = is_loss_at(&p, alpha, &b).unwrap();
            *p.net.flat_mut(i).unwrap() -= 2.0 * h;
            let dn = is_loss_at(&p, alpha, &b).unwrap();
            t.check(format!("classifier {k} param {i}"), g[i], (up - dn) / (2.0 * h));
        }
    }
    // classifier input gradients of ln C
    let hx = 1e-5;
    for k in 0..30 {
        let c = random_classifier(&mut rng, 200 + k);
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma = (rng.random_range((0.002f64).ln()..(80.0f64).ln())).exp();
        let xv = ndarray::ArrayView2::from_shape((1, 2), &x).unwrap();
        let g = c.grad_log_prob(xv, &[sigma]).unwrap();
        for j in 0..2 {
            let mut xp = x.clone();
            xp[j] += hx;
            let mut xm = x.clone();
            xm[j] -= hx;
            let lp = |v: &[f64]| c.probs(ndarray::ArrayView2::from_shape((1, 2), v).unwrap(), &[sigma]).unwrap()[0].ln();
            t.check(format!("classifier {k} input {j} at sigma {sigma:.3e}"), g[[0, j]], (lp(&xp) - lp(&xm)) / (2.0 * hx));
        }
    }
    report(
        "4",
        t.checks == 200 && t.failures.is_empty(),
        &format!("{} checks, {} failures, worst relative error {:.2e} (< 1e-4) {:?}", t.checks, t.failures.len(), t.worst, t.failures),
    );
}

#[test]
fn criterion_05_elbo_calibration() {
    let var: f64 = 0.5;
    let n = 2000;
    let mut rng = rng_from(505);
    let data = Array2::from_shape_simple_fn((n, 2), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        var.sqrt() * z
    });
    let exact: f64 = data
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| -0.5 * x * x / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let est = elbo(
        &gaussian_score(0.0, var, 2),
        data.view(),
        &NoiseSchedule::default(),
        &ElboConfig {
            weighting: ElboWeighting::Likelihood,
            draws: 10_000,
            seed: 5,
            ..ElboConfig::default()
        },
    )
    .unwrap();
    let gap = (est.estimate - exact).abs();
    report(
        "5",
        gap < 3.0 * est.stderr,
        &format!(
            "ELBO {:.4} +- {:.4} vs exact mean log density {exact:.4}: gap {gap:.4} (< 3 stderr) at 1e4 draws",
            est.estimate, est.stderr
        ),
    );
}

/// Fixed noise per pool element: balanced resamples are then exactly unbiased
/// for the pool cross-entropy, and only the resampling noise remains.
#[test]
fn criterion_08_importance_sampling_is_unbiased() {
    let mut rng = rng_from(808);
    let pool_size = 100_000;
    let oracle = OracleSpec::checkerboard();
    let x0 = Array2::from_shape_simple_fn((pool_size, 2), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.3 + 1.2 * z
    });
    let labels = oracle.evaluate_batch(x0.view()).unwrap();
    let pool = NoisedBatch::draw(x0, &TimeSampling::default(), &NoiseSchedule::default(), &mut rng);
    let c = random_classifier(&mut rng, 8);
    let full = ce_loss_at(&c, &pool, &labels).unwrap();

    let pos: Vec<usize> = (0..pool_size).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..pool_size).filter(|&i| !labels[i]).collect();
    let alpha = estimate_alpha(pos.len(), neg.len()).unwrap();
    let per_class = 2000;
    let resamples = 200;
    let mut vals = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let pick = |idx: &[usize], rng: &mut genneg::seed::Rng| -> Vec<usize> {
            sample_indices(rng, idx.len(), per_class).into_iter().map(|k| idx[k]).collect()
        };
        let b = BalancedBatch {
            positives: pool.select(&pick(&pos, &mut rng)),
            negatives: pool.select(&pick(&neg, &mut rng)),
        };
        vals.push(is_loss_at(&c, alpha, &b).unwrap());
    }
    let mean = vals.iter().sum::<f64>() / resamples as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt();
    let se = sd / (resamples as f64).sqrt();
    report(
        "8",
        (mean - full).abs() < 3.0 * se,
        &format!(
            "mean IS loss {mean:.6} vs pool CE {full:.6}: |diff| {:.2e} (< 3 x {se:.2e}), alpha {alpha:.4}, {resamples} resamples of {per_class}/class",
            (mean - full).abs()
        ),
    );
}

// ---- criteria that need workstation-scale training --------------------------

fn full_scale_config() -> RunConfig {
    RunConfig::default()
}

fn infraction_series(base: f64, records: &[IterationRecord]) -> Vec<f64> {
    std::iter::once(base).chain(records.iter().map(|r| r.metrics.infraction.rate)).collect()
}

#[test]
#[ignore = "30k baseline iterations plus 5 iterations at 50k per class: hours of single-core compute"]
fn criterion_06_checkerboard_end_to_end() {
    let (train, val) = checkerboard_data(1000, 1000, 600);
    let dir = tempfile::tempdir().unwrap();
    let cfg = full_scale_config();
    let out = run(&train, &val, &OracleSpec::checkerboard(), &cfg, dir.path(), None).unwrap();
    let inf = infraction_series(out.baseline_metrics.infraction.rate, &out.records);
    let first_drops = out.records.len() == 5 && inf[1] < inf[0];
    let trend = inf[1..].windows(2).all(|w| w[1] <= w[0] + 0.002);
    let base_elbo = out.baseline_metrics.r_elbo.estimate;
    let elbo_ok = out.records.iter().take(3).all(|r| (r.metrics.r_elbo.estimate - base_elbo).abs() <= 0.05);
    report(
        "6",
        first_drops && trend && elbo_ok && out.termination == Termination::Completed,
        &format!(
            "infraction {inf:?}; r-ELBO baseline {base_elbo:.4}, iterations {:?}",
            out.records.iter().map(|r| r.metrics.r_elbo.estimate).collect::<Vec<_>>()
        ),
    );
}

#[test]
#[ignore = "two full iterations at 50k per class on a 30k-iteration baseline: hours of single-core compute"]
fn criterion_07_no_is_ablation_ordering() {
    let (train, val) = checkerboard_data(1000, 1000, 700);
    let cfg = RunConfig {
        max_iterations: 1,
        ..full_scale_config()
    };
    let base = train_baseline(cfg.initial_model(2, NoiseSchedule::default()).unwrap(), &train, &val, &cfg.baseline_train())
        .unwrap()
        .model;
    let o = OracleSpec::checkerboard();
    let is_dir = tempfile::tempdir().unwrap();
    let no_dir = tempfile::tempdir().unwrap();
    let with_is = run(&train, &val, &o, &cfg, is_dir.path(), Some(base.clone())).unwrap();
    let no_cfg = RunConfig {
        classifier: ClassifierConfig {
            mode: ImbalanceMode::Uncorrected,
            ..cfg.classifier.clone()
        },
        ..cfg
    };
    let without = run(&train, &val, &o, &no_cfg, no_dir.path(), Some(base)).unwrap();
    let (a, b) = (&with_is.records[0].metrics, &without.records[0].metrics);
    let margin = (a.r_elbo.stderr.powi(2) + b.r_elbo.stderr.powi(2)).sqrt();
    report(
        "7",
        b.infraction.rate <= a.infraction.rate && b.r_elbo.estimate < a.r_elbo.estimate - margin,
        &format!(
            "infraction IS {:.4} / no-IS {:.4}; r-ELBO IS {:.4} / no-IS {:.4} (margin {margin:.4})",
            a.infraction.rate, b.infraction.rate, a.r_elbo.estimate, b.r_elbo.estimate
        ),
    );
}

#[test]
#[ignore = "250k distillation iterations against a stacked teacher: hours of single-core compute"]
fn criterion_09_distillation() {
    let (train, val) = checkerboard_data(1000, 1000, 900);
    let cfg = RunConfig {
        max_iterations: 1,
        distill: true,
        ..full_scale_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = run(&train, &val, &OracleSpec::checkerboard(), &cfg, dir.path(), None).unwrap();
    let r = &out.records[0];
    let teacher = r.teacher_metrics.expect("distill mode records the teacher");
    let gap = (r.metrics.infraction.rate - teacher.infraction.rate).abs();
    report(
        "9",
        gap <= 0.02 && out.model.depth() == 0,
        &format!(
            "student infraction {:.4} vs teacher {:.4} (|gap| {gap:.4} <= 0.02); student is a single network",
            r.metrics.infraction.rate, teacher.infraction.rate
        ),
    );
}

#[test]
#[ignore = "250k baseline iterations with periodic validation: many hours of single-core compute"]
fn criterion_10_overfitting_ordering() {
    let (train, val) = checkerboard_data(1000, 1000, 1000);
    let cfg = RunConfig::default();
    let long = TrainConfig {
        iterations: 250_000,
        validate_every: 10_000,
        keep_best: false,
        ..cfg.baseline_train()
    };
    let init = cfg.initial_model(2, NoiseSchedule::default()).unwrap();
    let last = train_baseline(init.clone(), &train, &val, &long).unwrap();
    let (peak_it, peak) = last
        .log
        .iter()
        .filter_map(|e| e.validation.map(|v| (e.iteration, v)))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let final_v = last.log.last().and_then(|e| e.validation).unwrap();
    // training is deterministic, so stopping at the peak reproduces that checkpoint
    let best = train_baseline(init, &train, &val, &TrainConfig { iterations: peak_it.max(1), ..long.clone() })
        .unwrap()
        .model;
    let o = OracleSpec::checkerboard();
    let ec = EvalConfig::default();
    let s = NoiseSchedule::default();
    let (mb, _) = genneg::genneg::evaluate(&best, &s, &o, &val, &ec, 10).unwrap();
    let (ml, _) = genneg::genneg::evaluate(&last.model, &s, &o, &val, &ec, 10).unwrap();
    report(
        "10",
        peak_it < 100_000 && final_v < peak && ml.infraction.rate <= mb.infraction.rate,
        &format!(
            "validation r-ELBO peaks at iteration {peak_it} ({peak:.4}), ends at {final_v:.4}; infraction {:.4} at peak vs {:.4} at end",
            mb.infraction.rate, ml.infraction.rate
        ),
    );
}

// ---- reduced-scale companions ------------------------------------------------

fn small_config() -> RunConfig {
    RunConfig {
        per_class: 256,
        max_iterations: 2,
        budget: Some(40_000),
        sample_batch: 2048,
        sampler_steps: 50,
        hidden: 32,
        embed_dim: 16,
        baseline: TrainConfig {
            iterations: 300,
            batch_size: 500,
            learning_rate: 3e-3,
            validate_every: 100,
            validation_draws: 2000,
            ..TrainConfig::baseline()
        },
        classifier: ClassifierConfig {
            train: TrainConfig {
                iterations: 150,
                batch_size: 256,
                validate_every: 50,
                ..TrainConfig::classifier()
            },
            hidden: 32,
            embed_dim: 16,
            ..ClassifierConfig::default()
        },
        distillation: TrainConfig {
            iterations: 100,
            batch_size: 250,
            learning_rate: 1e-3,
            validate_every: 50,
            validation_draws: 1000,
            ..TrainConfig::distillation()
        },
        eval: EvalConfig {
            samples: 4000,
            elbo_draws: 2000,
            steps: 50,
        },
        ..RunConfig::default()
    }
}

#[test]
fn criterion_06_reduced_scale_loop_mechanics() {
    let (train, val) = checkerboard_data(500, 500, 61);
    let dir = tempfile::tempdir().unwrap();
    let out = run(&train, &val, &OracleSpec::checkerboard(), &small_config(), dir.path(), None).unwrap();
    let well_formed = out.records.len() == 2
        && out.records.iter().enumerate().all(|(k, r)| {
            r.iteration == k + 1
                && r.depth == k + 1
                && r.alpha > 0.0
                && r.alpha < 1.0
                && r.metrics.infraction.stderr > 0.0
                && r.metrics.r_elbo.stderr > 0.0
                && r.samples_used >= 2 * 256
        });
    let inf = infraction_series(out.baseline_metrics.infraction.rate, &out.records);
    report(
        "6 (reduced scale; full scale is #[ignore]d)",
        well_formed,
        &format!("2 iterations stacked with metrics and uncertainty; infraction {inf:?}"),
    );
}

#[test]
fn criterion_07_reduced_scale_ablation_mechanics() {
    let (train, val) = checkerboard_data(500, 500, 71);
    let cfg = RunConfig {
        max_iterations: 1,
        ..small_config()
    };
    let base = train_baseline(cfg.initial_model(2, NoiseSchedule::default()).unwrap(), &train, &val, &cfg.baseline_train())
        .unwrap()
        .model;
    let o = OracleSpec::checkerboard();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run(&train, &val, &o, &cfg, d1.path(), Some(base.clone())).unwrap();
    let no_cfg = RunConfig {
        classifier: ClassifierConfig {
            mode: ImbalanceMode::Uncorrected,
            ..cfg.classifier.clone()
        },
        ..cfg
    };
    let b = run(&train, &val, &o, &no_cfg, d2.path(), Some(base)).unwrap();
    let (ra, rb) = (&a.records[0], &b.records[0]);
    report(
        "7 (reduced scale; full scale is #[ignore]d)",
        ra.alpha_used == ra.alpha && rb.alpha_used == 0.5 && ra.mode == "is" && rb.mode == "no_is",
        &format!(
            "IS weights with alpha {:.4}, ablation with 0.5; infraction IS {:.4} / no-IS {:.4}",
            ra.alpha, ra.metrics.infraction.rate, rb.metrics.infraction.rate
        ),
    );
}

#[test]
fn criterion_09_reduced_scale_distill_mechanics() {
    let (train, val) = checkerboard_data(500, 500, 91);
    let cfg = RunConfig {
        max_iterations: 2,
        distill: true,
        ..small_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = run(&train, &val, &OracleSpec::checkerboard(), &cfg, dir.path(), None).unwrap();
    // a student is one network however deep its teacher was
    let student_ok = out.model.depth() == 0 && out.records.iter().all(|r| r.depth == 0 && r.teacher_metrics.is_some());
    let x = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 - j as f64);
    let sig = [0.1, 1.0, 10.0];
    let direct = out.model.baseline.score(x.view(), &sig).unwrap();
    let via = out.model.score(x.view(), &sig).unwrap();
    let r = &out.records[1];
    report(
        "9 (reduced scale; full scale is #[ignore]d)",
        student_ok && direct == via,
        &format!(
            "student infraction {:.4} vs teacher {:.4} after 2 distilled iterations",
            r.metrics.infraction.rate,
            r.teacher_metrics.unwrap().infraction.rate
        ),
    );
}

#[test]
fn criterion_10_reduced_scale_selection_mechanics() {
    let (train, val) = checkerboard_data(500, 500, 101);
    let cfg = small_config();
    let tc = TrainConfig {
        iterations: 400,
        validate_every: 50,
        ..cfg.baseline_train()
    };
    let out = train_baseline(cfg.initial_model(2, NoiseSchedule::default()).unwrap(), &train, &val, &tc).unwrap();
    let vals: Vec<(usize, f64)> = out.log.iter().filter_map(|e| e.validation.map(|v| (e.iteration, v))).collect();
    let peak = vals.iter().copied().fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    report(
        "10 (reduced scale; full scale is #[ignore]d)",
        vals.len() == 8 && out.selected_iteration == peak.0,
        &format!("validation curve {vals:?}; selected iteration {}", out.selected_iteration),
    );
}
