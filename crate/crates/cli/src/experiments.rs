//! One runner per experiment kind. Each writes its artifacts through an
//! [`OutputDir`] and returns the JSON summary it also stores as `summary.json`.

use cqnet::control::{
    rollout, train_controller, ControlTrainConfig, ControlTrajectory, Controller, Environment, StartRegion,
};
use cqnet::cq::{cq_solve, CqOptions, SfpProblem};
use cqnet::data::{gen_1d_embedded, gen_2d_embedded, read_idx, split_fraction, subsample, Dataset, Standardizer};
use cqnet::export;
use cqnet::linalg::{norm, sub, DenseMatrix};
use cqnet::linops::{power_iteration_bound, AvgPool2d, Conv2d, LinearOperator, POWER_ITERATIONS};
use cqnet::net::checkpoint::save_checkpoint;
use cqnet::net::{init_dense, init_kernels, CqnetModel, EmbedSpec, LayerSpec, SetSpec, Stage, TrajectoryRecord};
use cqnet::train::{evaluate, fit_with, LossFn, Next, TrainConfig, TrainingLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{
    ControllerConfig, DataConfig, EnvironmentConfig, ExperimentConfig, ExperimentKind, LossKind, ModelConfig,
    ProblemConfig, TrainingConfig,
};
use crate::output::OutputDir;
use crate::CliError;

pub(crate) fn run(cfg: &ExperimentConfig, out: &mut OutputDir, baseline: bool) -> Result<Value, CliError> {
    if baseline && cfg.kind != ExperimentKind::Control {
        return Err(CliError::Config(
            "--baseline only applies to control experiments".into(),
        ));
    }
    let summary = match cfg.kind {
        ExperimentKind::Illustrative1d | ExperimentKind::Illustrative2d => run_synthetic(cfg, out)?,
        ExperimentKind::FashionReduced => run_fashion(cfg, out)?,
        ExperimentKind::Control => run_control(cfg, out, baseline)?,
        ExperimentKind::CqSolve => run_cq(cfg, out)?,
    };
    out.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn config_error(key: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {e}"))
}

fn loss_fn(kind: LossKind) -> LossFn {
    match kind {
        LossKind::SoftmaxCrossEntropy => LossFn::SoftmaxCrossEntropy,
        LossKind::BinaryCrossEntropy => LossFn::BinaryCrossEntropy,
    }
}

fn n_outputs(loss: LossKind, n_classes: usize) -> Result<usize, CliError> {
    match loss {
        LossKind::SoftmaxCrossEntropy => Ok(n_classes),
        LossKind::BinaryCrossEntropy if n_classes == 2 => Ok(1),
        LossKind::BinaryCrossEntropy => Err(CliError::Config(format!(
            "training.loss: binary cross-entropy needs 2 classes, the data has {n_classes}"
        ))),
    }
}

fn classifier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Result<DenseMatrix, CliError> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
    Ok(DenseMatrix::new(rows, cols, data)?)
}

fn c_specs(m: &ModelConfig, dim: usize) -> Result<Vec<SetSpec>, CliError> {
    m.c.iter()
        .map(|s| s.to_spec(dim).map_err(|e| config_error("model.c", e)))
        .collect()
}

/// Replaces a missing stepsize with the largest certified one and leaves the
/// model certified.
fn finish_steps(model: &mut CqnetModel, alpha: Option<f64>, enforce: bool) -> Result<(), CliError> {
    if alpha.is_none() {
        for s in model.stages_mut() {
            if let Stage::Cq(l) = s {
                l.alpha = l.certificate.max_stable_step();
            }
        }
    }
    if enforce || alpha.is_none() {
        model.enforce_certificate()?;
    }
    Ok(())
}

fn dense_model(
    m: &ModelConfig,
    input_dim: usize,
    outputs: usize,
    with_c: bool,
    enforce: bool,
    seed: u64,
) -> Result<CqnetModel, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = input_dim + usize::from(m.bias_mode);
    let rows = m.width.unwrap_or(n);
    let q = m.q.to_set(rows).map_err(|e| config_error("model.q", e))?;
    let c = if with_c { c_specs(m, n)? } else { Vec::new() };
    let mut stages = Vec::with_capacity(m.layers);
    for _ in 0..m.layers {
        let op = if m.bias_mode {
            let inner = LinearOperator::Dense(init_dense(&mut rng, rows, input_dim)?);
            let b = (0..rows).map(|_| rng.random_range(-0.5..0.5)).collect();
            LinearOperator::bias_augmented(inner, b)?
        } else {
            LinearOperator::Dense(init_dense(&mut rng, rows, n)?)
        };
        stages.push(Stage::Cq(LayerSpec::new(
            op,
            m.alpha.unwrap_or(1.0),
            c.clone(),
            q.clone(),
        )?));
    }
    let w = classifier(&mut rng, outputs, n, m.classifier_init)?;
    let mut model = CqnetModel::new(stages, w, m.bias_mode)?;
    finish_steps(&mut model, m.alpha, enforce)?;
    Ok(model)
}

fn train_config(t: &TrainingConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: t.learning_rate,
        epochs: t.epochs,
        batch_size: t.batch_size,
        smoothness_gamma: t.smoothness_gamma,
        operator_lr_scale: t.operator_lr_scale,
        lr_decay: t.lr_decay,
        certificate_enforcement: t.certificate_enforcement,
        seed,
    }
}

/// Largest violation of `inner‖d‖ ≤ ‖x‖ ≤ outer‖d‖` over every state of every
/// sample, relative to `max(‖d‖, 1)`, for each input-norm annulus in `C`.
fn annulus_violation(model: &CqnetModel, m: &ModelConfig, sets: &[&Dataset]) -> cqnet::Result<f64> {
    let bands: Vec<(f64, f64)> =
        m.c.iter()
            .filter(|s| s.kind == "input-norm-annulus")
            .map(|s| (s.inner_factor.unwrap_or(0.0), s.outer_factor.unwrap_or(f64::INFINITY)))
            .collect();
    let mut worst: f64 = 0.0;
    for ds in sets {
        let per: Vec<f64> = ds
            .samples
            .par_iter()
            .map(|s| {
                let dn = norm(&s.features);
                let traj = model.forward(&s.features, true)?.trajectory.expect("recorded");
                let mut w: f64 = 0.0;
                for x in &traj.states {
                    // In bias mode the trailing 1 is not part of the state proper.
                    let r = norm(&x[..s.features.len()]);
                    for &(lo, hi) in &bands {
                        w = w.max(lo * dn - r).max(r - hi * dn);
                    }
                }
                Ok(w.max(0.0) / dn.max(1.0))
            })
            .collect::<cqnet::Result<_>>()?;
        worst = per.into_iter().fold(worst, f64::max);
    }
    Ok(worst)
}

fn write_log(out: &mut OutputDir, name: &str, log: &TrainingLog) -> Result<(), CliError> {
    out.write_with(name, |w| Ok(log.write_csv(w)?))
}

fn write_trajectories(
    out: &mut OutputDir,
    name: &str,
    model: &CqnetModel,
    ds: &Dataset,
    count: usize,
    with_states: bool,
) -> Result<(), CliError> {
    let take = count.min(ds.len());
    let records: Vec<TrajectoryRecord> = ds.samples[..take]
        .par_iter()
        .map(|s| Ok(model.forward(&s.features, true)?.trajectory.expect("recorded")))
        .collect::<cqnet::Result<_>>()?;
    let dim = with_states.then(|| model.stages()[0].in_dim());
    let header = TrajectoryRecord::csv_header(dim);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = records
        .iter()
        .zip(&ds.samples)
        .enumerate()
        .flat_map(|(i, (r, s))| r.csv_rows(i, s.label, with_states));
    out.write_with(name, |w| Ok(export::write_rows(w, &header, rows)?))
}

fn margins(model: &CqnetModel) -> Vec<f64> {
    model
        .stages()
        .iter()
        .filter_map(|s| match s {
            Stage::Cq(l) => Some(l.margin()),
            _ => None,
        })
        .collect()
}

struct SyntheticRun {
    log: TrainingLog,
    model: CqnetModel,
    validation: Option<(f64, f64)>,
    annulus_checks: usize,
    annulus_worst: Option<f64>,
}

fn train_synthetic(
    cfg: &ExperimentConfig,
    with_c: bool,
    train: &Dataset,
    val: Option<&Dataset>,
    n_classes: usize,
) -> Result<SyntheticRun, CliError> {
    let m = cfg.model.as_ref().expect("validated");
    let t = cfg.training.as_ref().expect("validated");
    let loss = loss_fn(t.loss);
    let mut model = dense_model(
        m,
        train.feature_dim,
        n_outputs(t.loss, n_classes)?,
        with_c,
        t.certificate_enforcement,
        cfg.seed,
    )?;
    let track = with_c && m.c.iter().any(|s| s.kind == "input-norm-annulus");
    let mut sets = vec![train];
    sets.extend(val);
    let mut checks = 0;
    let mut worst: f64 = 0.0;
    let log = fit_with(&mut model, train, loss, &train_config(t, cfg.seed), |model, _| {
        if track {
            worst = worst.max(annulus_violation(model, m, &sets)?);
            checks += 1;
        }
        Ok(Next::Continue)
    })?;
    let validation = val.map(|v| evaluate(&model, v, loss)).transpose()?;
    Ok(SyntheticRun {
        log,
        model,
        validation,
        annulus_checks: checks,
        annulus_worst: track.then_some(worst),
    })
}

fn run_synthetic(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Value, CliError> {
    let d: &DataConfig = cfg.data.as_ref().expect("validated");
    let m = cfg.model.as_ref().expect("validated");
    let t = cfg.training.as_ref().expect("validated");
    let n = d.samples.expect("validated");
    let ds = match cfg.kind {
        ExperimentKind::Illustrative1d => gen_1d_embedded(n, cfg.seed)?,
        _ => gen_2d_embedded(n, cfg.seed)?,
    };
    let (train, val) = match d.validation_fraction {
        Some(f) => {
            let (a, b) = split_fraction(&ds, 1.0 - f, cfg.seed)?;
            (a, Some(b))
        }
        None => (ds.clone(), None),
    };
    out.write_with("dataset.csv", |w| Ok(ds.write_csv(w)?))?;

    let mut variants = vec![("", true)];
    if m.compare_unconstrained {
        variants.push(("unconstrained_", false));
    }
    let mut runs = serde_json::Map::new();
    for (prefix, with_c) in variants {
        let r = train_synthetic(cfg, with_c, &train, val.as_ref(), ds.n_classes)?;
        write_log(out, &format!("{prefix}training_log.csv"), &r.log)?;
        let count = t.trajectory_samples.unwrap_or(train.len());
        write_trajectories(
            out,
            &format!("{prefix}trajectories.csv"),
            &r.model,
            &train,
            count,
            t.trajectory_states,
        )?;
        if let Some(v) = &val {
            write_trajectories(
                out,
                &format!("{prefix}validation_trajectories.csv"),
                &r.model,
                v,
                count,
                t.trajectory_states,
            )?;
        }
        out.write_bytes(&format!("{prefix}model.ckpt"), &save_checkpoint(&r.model))?;
        let last = r.log.last().expect("epoch 0 is always logged");
        let key = if with_c { "constrained" } else { "unconstrained" };
        runs.insert(
            key.into(),
            json!({
                "epochs_run": last.epoch,
                "train_loss": last.mean_loss,
                "train_accuracy": last.accuracy,
                "validation_loss": r.validation.map(|v| v.0),
                "validation_accuracy": r.validation.map(|v| v.1),
                "annulus_checks": r.annulus_checks,
                "annulus_max_violation": r.annulus_worst,
                "certified_nonexpansive": r.model.certified_nonexpansive(),
                "alpha_lambda_margins": margins(&r.model),
            }),
        );
    }
    Ok(json!({
        "kind": cfg.kind.name(),
        "seed": cfg.seed,
        "layers": m.layers,
        "train_samples": train.len(),
        "validation_samples": val.as_ref().map(Dataset::len),
        "runs": runs,
        "files": out.written(),
    }))
}

fn conv_model(m: &ModelConfig, height: usize, width: usize, outputs: usize, seed: u64) -> Result<CqnetModel, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = m.channels.expect("validated");
    let w = m.kernel_width.expect("validated");
    let (mut h, mut wd) = (height, width);
    let mut stages = vec![Stage::Embed(EmbedSpec::conv(init_kernels(&mut rng, c, 1, w)?, h, wd)?)];
    for k in 1..=m.layers {
        let op = LinearOperator::Conv2d(Conv2d::new(init_kernels(&mut rng, c, c, w)?, h, wd)?);
        let q = m.q.to_set(op.out_dim()).map_err(|e| config_error("model.q", e))?;
        let cs = c_specs(m, c * h * wd)?;
        stages.push(Stage::Cq(LayerSpec::new(op, m.alpha.unwrap_or(1.0), cs, q)?));
        if m.pool_after.contains(&k) {
            let p = AvgPool2d::new(c, h, wd)?;
            (h, wd) = (p.out_height(), p.out_width());
            stages.push(Stage::Pool(p));
        }
    }
    let cls = classifier(&mut rng, outputs, c * h * wd, m.classifier_init)?;
    let mut model = CqnetModel::new(stages, cls, false)?;
    // Convolutions are always certified through block-row normalization.
    finish_steps(&mut model, m.alpha, true)?;
    Ok(model)
}

/// Worst `‖x_f(d1) − x_f(d2)‖ / ‖d1 − d2‖` over seeded pairs drawn from `ds`:
/// even pairs are two different samples, odd pairs a sample and a small
/// perturbation of it.
fn expansion_ratio(model: &CqnetModel, ds: &Dataset, pairs: usize, seed: u64) -> cqnet::Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<(Vec<f64>, Vec<f64>)> = (0..pairs)
        .map(|p| {
            let a = &ds.samples[rng.random_range(0..ds.len())].features;
            let b = if p % 2 == 0 {
                ds.samples[rng.random_range(0..ds.len())].features.clone()
            } else {
                a.iter().map(|v| v + rng.random_range(-0.01..0.01)).collect()
            };
            (a.clone(), b)
        })
        .collect();
    let ratios: Vec<f64> = inputs
        .par_iter()
        .map(|(a, b)| {
            let base = norm(&sub(a, b));
            let gap = norm(&sub(&model.features(a)?, &model.features(b)?));
            Ok(if base == 0.0 { 0.0 } else { gap / base })
        })
        .collect::<cqnet::Result<_>>()?;
    let violations = ratios.iter().filter(|&&r| r > 1.0 + 1e-9).count();
    Ok((ratios.into_iter().fold(0.0, f64::max), violations))
}

struct HeldOutEpoch {
    epoch: usize,
    loss: f64,
    accuracy: f64,
    certified: bool,
    worst_ratio: f64,
    violations: usize,
}

fn run_fashion(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Value, CliError> {
    let d = cfg.data.as_ref().expect("validated");
    let m = cfg.model.as_ref().expect("validated");
    let t = cfg.training.as_ref().expect("validated");
    let path = |p: &Option<std::path::PathBuf>| p.clone().expect("validated");
    let train_pool = read_idx(&path(&d.train_images), &path(&d.train_labels))?;
    let test_pool = read_idx(&path(&d.test_images), &path(&d.test_labels))?;
    let mut train = subsample(&train_pool, d.train_per_class.expect("validated"), cfg.seed)?;
    let mut test = subsample(&test_pool, d.test_per_class.expect("validated"), cfg.seed)?;
    if let Some(floor) = d.standardize_floor {
        let st = Standardizer::fit(&train, floor)?;
        train = st.apply(&train)?;
        test = st.apply(&test)?;
    }
    let side = (train.feature_dim as f64).sqrt().round() as usize;
    if side * side != train.feature_dim || test.feature_dim != train.feature_dim {
        return Err(CliError::Runtime(format!(
            "expected square images of equal size, got {} and {} pixels",
            train.feature_dim, test.feature_dim
        )));
    }
    let loss = loss_fn(t.loss);
    let mut model = conv_model(m, side, side, n_outputs(t.loss, train.n_classes)?, cfg.seed)?;

    let mut held = Vec::new();
    let log = fit_with(&mut model, &train, loss, &train_config(t, cfg.seed), |model, rec| {
        let (l, a) = evaluate(model, &test, loss)?;
        let (worst_ratio, violations) =
            expansion_ratio(model, &test, t.nonexpansive_pairs, cfg.seed ^ rec.epoch as u64)?;
        held.push(HeldOutEpoch {
            epoch: rec.epoch,
            loss: l,
            accuracy: a,
            certified: model.certified_nonexpansive(),
            worst_ratio,
            violations,
        });
        eprintln!(
            "epoch {:>3}: train loss {:.4} acc {:.4} | test loss {:.4} acc {:.4}",
            rec.epoch, rec.mean_loss, rec.accuracy, l, a
        );
        let reached = t.target_accuracy.is_some_and(|target| a >= target);
        Ok(if reached && rec.epoch > 0 {
            Next::Stop
        } else {
            Next::Continue
        })
    })?;
    write_log(out, "training_log.csv", &log)?;
    let rows = held.iter().map(|h| {
        vec![
            h.epoch.to_string(),
            export::float(h.loss),
            export::float(h.accuracy),
            u8::from(h.certified).to_string(),
            t.nonexpansive_pairs.to_string(),
            export::float(h.worst_ratio),
            h.violations.to_string(),
        ]
    });
    out.write_with("test_log.csv", |w| {
        Ok(export::write_rows(
            w,
            &[
                "epoch",
                "test_loss",
                "test_accuracy",
                "certified",
                "pairs",
                "worst_expansion_ratio",
                "violations",
            ],
            rows,
        )?)
    })?;
    let count = t.trajectory_samples.unwrap_or(test.len());
    write_trajectories(out, "trajectories.csv", &model, &test, count, t.trajectory_states)?;
    out.write_bytes("model.ckpt", &save_checkpoint(&model))?;
    let last = held.last().expect("epoch 0 is always evaluated");
    Ok(json!({
        "kind": cfg.kind.name(),
        "seed": cfg.seed,
        "train_samples": train.len(),
        "test_samples": test.len(),
        "epochs_run": last.epoch,
        "train_accuracy": log.last().map(|r| r.accuracy),
        "test_accuracy": last.accuracy,
        "best_test_accuracy": held.iter().map(|h| h.accuracy).fold(0.0, f64::max),
        "target_accuracy": t.target_accuracy,
        "nonexpansive_every_epoch": held.iter().all(|h| h.certified && h.violations == 0),
        "worst_expansion_ratio": held.iter().map(|h| h.worst_ratio).fold(0.0, f64::max),
        "alpha_lambda_margins": margins(&model),
        "files": out.written(),
    }))
}

fn grid(lo: f64, hi: f64, spacing: f64) -> Vec<f64> {
    let steps = ((hi - lo) / spacing + 1e-9).floor() as usize;
    (0..=steps).map(|i| lo + spacing * i as f64).collect()
}

pub(crate) fn environment(e: &EnvironmentConfig) -> Environment {
    let mut points = Vec::new();
    for w in &e.walls {
        for x in grid(w.x[0], w.x[1], w.spacing) {
            for y in grid(w.y[0], w.y[1], w.spacing) {
                points.push([x, y]);
            }
        }
    }
    points.extend(e.obstacle_points.iter().copied());
    Environment {
        targets: e.targets,
        obstacle_points: points,
        halo_radius: e.halo_radius,
        min_agent_distance: e.min_agent_distance,
        target_tolerance: e.target_tolerance,
        start_regions: e
            .start_regions
            .iter()
            .map(|r| StartRegion { lo: r.lo, hi: r.hi })
            .collect(),
        horizon: e.horizon,
    }
}

fn rollouts(env: &Environment, ctrl: &Controller, starts: &[[f64; 4]]) -> Result<Vec<ControlTrajectory>, CliError> {
    Ok(starts
        .par_iter()
        .map(|s| rollout(env, ctrl, s))
        .collect::<cqnet::Result<_>>()?)
}

fn write_rollouts(
    out: &mut OutputDir,
    name: &str,
    env: &Environment,
    trajs: &[ControlTrajectory],
) -> Result<(), CliError> {
    let rows = trajs.iter().enumerate().flat_map(|(i, t)| t.csv_rows(env, i));
    out.write_with(name, |w| Ok(export::write_rows(w, &ControlTrajectory::HEADER, rows)?))
}

fn rollout_summary(env: &Environment, trajs: &[ControlTrajectory]) -> Value {
    let d: Vec<f64> = trajs.iter().map(|t| t.terminal_distance).collect();
    json!({
        "starts": trajs.len(),
        "reached": trajs.iter().filter(|t| t.reached_target(env)).count(),
        "max_final_distance": d.iter().copied().fold(0.0, f64::max),
        "final_distances": d,
        "all_states_feasible": trajs.iter().all(|t| t.feasible.iter().all(|&f| f)),
        "min_agent_distance": trajs
            .iter()
            .flat_map(|t| t.states.iter().map(|s| cqnet::linalg::distance(&s[..2], &s[2..])))
            .fold(f64::INFINITY, f64::min),
    })
}

fn run_control(cfg: &ExperimentConfig, out: &mut OutputDir, baseline: bool) -> Result<Value, CliError> {
    let e = cfg.environment.as_ref().expect("validated");
    let c: &ControllerConfig = cfg.controller.as_ref().expect("validated");
    let env = environment(e);
    env.validate().map_err(|err| config_error("environment", err))?;
    let starts = env.sample_starts(e.train_starts, cfg.seed)?;
    let heldout = env.sample_starts(e.heldout_starts, cfg.seed.wrapping_add(1))?;

    if baseline {
        let ctrl = Controller {
            alpha1: c.alpha1,
            alpha2: c.alpha2,
            ..Controller::baseline(env.horizon)
        };
        let trajs = rollouts(&env, &ctrl, &starts)?;
        write_rollouts(out, "trajectories_baseline.csv", &env, &trajs)?;
        let s = rollout_summary(&env, &trajs);
        return Ok(json!({
            "kind": cfg.kind.name(),
            "mode": "baseline",
            "seed": cfg.seed,
            "stuck": e.train_starts - s["reached"].as_u64().unwrap_or(0) as usize,
            "baseline": s,
            "files": out.written(),
        }));
    }

    let mut ctrl = Controller {
        beta1: c.beta1,
        beta2: c.beta2,
        alpha1: c.alpha1,
        alpha2: c.alpha2,
        alpha3: c.alpha3,
        ..Controller::new_random(env.horizon, cfg.seed)?
    };
    let tc = ControlTrainConfig {
        learning_rate: c.learning_rate,
        epochs: c.epochs,
        batch_size: c.batch_size,
        seed: cfg.seed,
    };
    let log = train_controller(&env, &mut ctrl, &starts, &tc, |_| {})?;
    let rows = log.iter().map(|r| {
        vec![
            r.epoch.to_string(),
            export::float(r.mean_objective),
            export::float(r.max_target_distance),
            r.reached.to_string(),
        ]
    });
    out.write_with("training_log.csv", |w| {
        Ok(export::write_rows(
            w,
            &["epoch", "mean_objective", "max_target_distance", "reached"],
            rows,
        )?)
    })?;
    let trained = rollouts(&env, &ctrl, &starts)?;
    write_rollouts(out, "trajectories_trained.csv", &env, &trained)?;
    let held = rollouts(&env, &ctrl, &heldout)?;
    write_rollouts(out, "trajectories_heldout.csv", &env, &held)?;
    let rows = ctrl.a.iter().enumerate().flat_map(|(t, a)| {
        (0..a.rows()).flat_map(move |i| {
            (0..a.cols()).map(move |j| {
                vec![
                    (t + 1).to_string(),
                    i.to_string(),
                    j.to_string(),
                    export::float(a.get(i, j)),
                ]
            })
        })
    });
    out.write_with("controller.csv", |w| {
        Ok(export::write_rows(w, &["t", "row", "col", "value"], rows)?)
    })?;
    Ok(json!({
        "kind": cfg.kind.name(),
        "mode": "trained",
        "seed": cfg.seed,
        "epochs": c.epochs,
        "trained": rollout_summary(&env, &trained),
        "heldout": rollout_summary(&env, &held),
        "files": out.written(),
    }))
}

fn run_cq(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Value, CliError> {
    let p: &ProblemConfig = cfg.problem.as_ref().expect("validated");
    let a = DenseMatrix::from_rows(&p.matrix)?;
    let (rows, cols) = (a.rows(), a.cols());
    let op = LinearOperator::Dense(a);
    let q = p.q.to_set(rows).map_err(|e| config_error("problem.q", e))?;
    let c = p.c.to_set(cols).map_err(|e| config_error("problem.c", e))?;
    let problem = SfpProblem::new(op.clone(), q, c)?;
    let cert = power_iteration_bound(&op, POWER_ITERATIONS, cfg.seed)?;
    let alpha = p.alpha.unwrap_or_else(|| cert.default_step());
    let opts = CqOptions {
        alpha,
        max_iters: p.max_iters,
        tol: p.tol,
        keep_iterates: true,
    };
    let report = cq_solve(&problem, &p.x0, &opts)?;
    out.write_with("cq_trace.csv", |w| Ok(report.write_csv(w)?))?;
    let iterates = report.iterates.as_deref().unwrap_or_default();
    let mut header = vec!["iter".to_string()];
    header.extend((0..cols).map(|i| format!("x{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = iterates.iter().enumerate().map(|(k, x)| {
        let mut r = vec![k.to_string()];
        r.extend(x.iter().map(|&v| export::float(v)));
        r
    });
    out.write_with("iterates.csv", |w| Ok(export::write_rows(w, &header, rows)?))?;
    let monotone = report.distances.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    Ok(json!({
        "kind": cfg.kind.name(),
        "seed": cfg.seed,
        "lambda_bound": cert.lambda_bound,
        "alpha": alpha,
        "alpha_lambda": alpha * cert.lambda_bound,
        "converged": report.converged,
        "iterations": report.iterations_run,
        "final_sq_distance": report.final_residual,
        "monotone": monotone,
        "solution": report.solution,
        "files": out.written(),
    }))
}
