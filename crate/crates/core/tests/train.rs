use cqnet::data::{gen_2d_embedded, Dataset, Provenance, Sample};
use cqnet::linalg::{norm, DenseMatrix};
use cqnet::linops::{Conv2d, LinearOperator};
use cqnet::net::{init_dense, init_kernels, CqnetModel, LayerSpec, SetSpec, Stage};
use cqnet::sets::ConstraintSet;
use cqnet::train::*;
use cqnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dense_model(rng: &mut ChaCha8Rng, depth: usize, n: usize, c: Vec<SetSpec>, outputs: usize) -> CqnetModel {
    let stages = (0..depth)
        .map(|_| {
            let op = LinearOperator::Dense(init_dense(rng, n, n).unwrap());
            Stage::Cq(LayerSpec::new(op, 0.2, c.clone(), ConstraintSet::NonnegOrthant).unwrap())
        })
        .collect();
    let w = DenseMatrix::new(outputs, n, random_vec(rng, outputs * n)).unwrap();
    CqnetModel::new(stages, w, false).unwrap()
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let k = rng.random_range(1..6);
        let z: Vec<f64> = random_vec(&mut rng, k).iter().map(|v| 3.0 * v).collect();
        let probs: Vec<f64> = {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        };
        let cases = [
            (LossFn::SoftmaxCrossEntropy, Target::Class(rng.random_range(0..k))),
            (LossFn::SoftmaxCrossEntropy, Target::Values(probs.clone())),
            (LossFn::BinaryCrossEntropy, Target::Values(probs)),
            (LossFn::SquaredError, Target::Values(random_vec(&mut rng, k))),
        ];
        for (loss, t) in cases {
            let (_, g) = loss.loss_and_grad(&z, &t).unwrap();
            for j in 0..k {
                let h = 1e-5;
                let mut zp = z.clone();
                zp[j] += h;
                let mut zm = z.clone();
                zm[j] -= h;
                let fd = (loss.loss_and_grad(&zp, &t).unwrap().0 - loss.loss_and_grad(&zm, &t).unwrap().0) / (2.0 * h);
                let rel = (fd - g[j]).abs() / g[j].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-7, "{loss:?} {t:?} at {z:?}: {fd} vs {}", g[j]);
            }
        }
    }
    // A single binary logit with a class label.
    let (l, g) = LossFn::BinaryCrossEntropy
        .loss_and_grad(&[0.0], &Target::Class(1))
        .unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(g, vec![-0.5]);
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = dense_model(&mut rng, 3, 4, vec![], 2);
    let gamma = 0.7;
    let (_, grads) = smoothness_penalty(&model, gamma).unwrap();
    let g: Vec<f64> = grads.iter().flatten().copied().collect();
    let p = model.params();
    let stage_params = g.len();
    // The penalty is quadratic, so a wide central difference is exact up to rounding.
    for j in 0..stage_params {
        let h = 1e-2;
        let at = |v: f64| {
            let mut q = p.clone();
            q[j] = v;
            let mut m = model.clone();
            m.set_params(&q).unwrap();
            smoothness_penalty(&m, gamma).unwrap().0
        };
        let fd = (at(p[j] + h) - at(p[j] - h)) / (2.0 * h);
        let rel = (fd - g[j]).abs() / g[j].abs().max(fd.abs()).max(1e-3);
        assert!(rel < 1e-8, "param {j}: {fd} vs {}", g[j]);
    }
}

#[test]
fn two_point_problem_descends_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = vec![
        Sample {
            features: vec![1.0, 0.5],
            label: 1,
        },
        Sample {
            features: vec![-1.0, -0.5],
            label: 0,
        },
    ];
    let ds = Dataset::new(samples, 2, 2, Provenance::Csv).unwrap();
    let mut model = dense_model(&mut rng, 1, 2, vec![], 2);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 10,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let log = fit(&mut model, &ds, LossFn::SoftmaxCrossEntropy, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 11);
    for w in log.epochs.windows(2) {
        assert!(w[1].mean_loss < w[0].mean_loss, "{:?}", log.epochs);
    }
}

#[test]
fn strong_smoothness_ties_layers_together() {
    let ds = gen_2d_embedded(100, 4).unwrap();
    let run = |gamma: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = dense_model(&mut rng, 4, 3, vec![], 1);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            epochs: 20,
            smoothness_gamma: gamma,
            ..TrainConfig::default()
        };
        fit(&mut model, &ds, LossFn::BinaryCrossEntropy, &cfg).unwrap();
        max_layer_difference(&model)
    };
    let (loose, tight) = (run(0.0), run(10.0));
    assert!(tight < 1e-3, "γ = 10: {tight}");
    assert!(loose > 0.1, "γ = 0: {loose}");
}

fn annulus_bounds_hold(model: &CqnetModel, ds: &Dataset) -> bool {
    ds.samples.iter().all(|s| {
        let dn = norm(&s.features);
        let traj = model.forward(&s.features, true).unwrap().trajectory.unwrap();
        traj.states.iter().all(|x| {
            let r = norm(x);
            let tol = 1e-10 * dn.max(1.0);
            0.9 * dn - tol <= r && r <= 1.1 * dn + tol
        })
    })
}

#[test]
fn per_sample_annulus_holds_before_during_and_after_training() {
    let ds = gen_2d_embedded(80, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = vec![SetSpec::InputNormAnnulus {
        inner_factor: 0.9,
        outer_factor: 1.1,
    }];
    let mut model = dense_model(&mut rng, 6, 3, c, 1);
    assert!(annulus_bounds_hold(&model, &ds));
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 4,
        ..TrainConfig::default()
    };
    let mut checked = 0;
    fit_with(&mut model, &ds, LossFn::BinaryCrossEntropy, &cfg, |m, _| {
        assert!(annulus_bounds_hold(m, &ds));
        checked += 1;
        Ok(Next::Continue)
    })
    .unwrap();
    assert_eq!(checked, 5);
    assert!(annulus_bounds_hold(&model, &ds));
}

#[test]
fn input_norm_sets_do_not_leak_between_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = vec![SetSpec::InputNormAnnulus {
        inner_factor: 0.9,
        outer_factor: 1.1,
    }];
    let model = dense_model(&mut rng, 5, 3, c, 1);
    let mut ds = gen_2d_embedded(6, 7).unwrap();
    let states = |ds: &Dataset| -> Vec<Vec<Vec<f64>>> {
        ds.samples
            .iter()
            .map(|s| model.forward(&s.features, true).unwrap().trajectory.unwrap().states)
            .collect()
    };
    let before = states(&ds);
    let before_eval = evaluate(&model, &ds, LossFn::BinaryCrossEntropy).unwrap();
    ds.samples[2].features.iter_mut().for_each(|v| *v *= 5.0);
    let after = states(&ds);
    for i in 0..ds.len() {
        if i == 2 {
            let dn = norm(&ds.samples[2].features);
            assert!(after[2][1..].iter().all(|x| norm(x) >= 0.9 * dn - 1e-10));
        } else {
            assert_eq!(before[i], after[i], "sample {i} changed");
        }
    }
    assert_ne!(before_eval, evaluate(&model, &ds, LossFn::BinaryCrossEntropy).unwrap());
}

#[test]
fn training_logs_are_reproducible() {
    let ds = gen_2d_embedded(60, 8).unwrap();
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = dense_model(&mut rng, 3, 3, vec![], 1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            smoothness_gamma: 0.1,
            seed,
            ..TrainConfig::default()
        };
        let log = fit(&mut model, &ds, LossFn::BinaryCrossEntropy, &cfg).unwrap();
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        (model.params(), csv)
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1).0, run(2).0);
}

#[test]
fn enforcement_keeps_conv_block_rows_unit() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (c, h, w) = (3, 5, 5);
    let stages = (0..2)
        .map(|_| {
            let op = LinearOperator::Conv2d(Conv2d::new(init_kernels(&mut rng, c, c, 3).unwrap(), h, w).unwrap());
            Stage::Cq(LayerSpec::new(op, 0.01, vec![], ConstraintSet::NonnegOrthant).unwrap())
        })
        .collect();
    let cls = DenseMatrix::new(2, c * h * w, random_vec(&mut rng, 2 * c * h * w)).unwrap();
    let mut model = CqnetModel::new(stages, cls, false).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.5,
        certificate_enforcement: true,
        ..TrainConfig::default()
    };
    for step in 0..5 {
        let d = random_vec(&mut rng, c * h * w);
        let (_, g) = sample_grad(&model, LossFn::SoftmaxCrossEntropy, &d, &Target::Class(step % 2)).unwrap();
        sgd_step(&mut model, &g, &cfg).unwrap();
        assert!(model.certified_nonexpansive());
        for stage in model.stages() {
            let Stage::Cq(l) = stage else { unreachable!() };
            let LinearOperator::Conv2d(conv) = &l.op else {
                unreachable!()
            };
            for row in conv.kernels().data().chunks(c * 9) {
                assert!((norm(row) - 1.0).abs() < 1e-12);
            }
            assert!(l.alpha * l.certificate.lambda_bound <= 2.0);
        }
    }
}

#[test]
fn stale_tapes_and_bad_gradients_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut model = dense_model(&mut rng, 2, 3, vec![], 2);
    let d = random_vec(&mut rng, 3);
    let out = model.forward(&d, false).unwrap();
    let (_, g) = sample_grad(&model, LossFn::SoftmaxCrossEntropy, &d, &Target::Class(0)).unwrap();
    sgd_step(&mut model, &g, &TrainConfig::default()).unwrap();
    assert!(matches!(
        model.backward(&out.tape, &[1.0, 0.0]),
        Err(Error::TapeMismatch(_))
    ));

    let mut bad = g.clone();
    bad.stages[1][0] = f64::NAN;
    let before = model.params();
    assert!(matches!(
        sgd_step(&mut model, &bad, &TrainConfig::default()),
        Err(Error::NonFiniteGradient(_))
    ));
    assert_eq!(model.params(), before);
    assert!(matches!(
        LossFn::SoftmaxCrossEntropy.loss_and_grad(&[0.0, 0.0], &Target::Class(2)),
        Err(Error::InvalidTarget(_))
    ));
}
