//! Losses, the smoothness penalty between consecutive layers, and SGD.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::export;
use crate::linalg::axpy;
use crate::net::{CqnetModel, ParamGradients, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFn {
    SoftmaxCrossEntropy,
    /// One independent sigmoid per logit.
    BinaryCrossEntropy,
    /// `½‖z − t‖²`; class targets are one-hot encoded.
    SquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_probabilities(t: &[f64]) -> Result<()> {
    match t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::InvalidTarget(format!("probability {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

impl LossFn {
    /// Target vector for a class label under this loss.
    fn dense_target(self, logits: &[f64], target: &Target) -> Result<Vec<f64>> {
        match target {
            Target::Values(t) => {
                if t.len() != logits.len() {
                    return Err(Error::InvalidTarget(format!(
                        "{} target values for {} logits",
                        t.len(),
                        logits.len()
                    )));
                }
                if self != LossFn::SquaredError {
                    check_probabilities(t)?;
                }
                Ok(t.clone())
            }
            Target::Class(c) => {
                if self == LossFn::BinaryCrossEntropy && logits.len() == 1 {
                    if *c > 1 {
                        return Err(Error::InvalidTarget(format!("binary label {c} is not 0 or 1")));
                    }
                    return Ok(vec![*c as f64]);
                }
                if *c >= logits.len() {
                    return Err(Error::InvalidTarget(format!(
                        "class {c} out of range for {} logits",
                        logits.len()
                    )));
                }
                let mut t = vec![0.0; logits.len()];
                t[*c] = 1.0;
                Ok(t)
            }
        }
    }

    /// Loss value and its gradient with respect to the logits.
    pub fn loss_and_grad(self, logits: &[f64], target: &Target) -> Result<(f64, Vec<f64>)> {
        let t = self.dense_target(logits, target)?;
        Ok(match self {
            LossFn::SoftmaxCrossEntropy => {
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits.iter().map(|z| (z - m).exp()).sum();
                let lse = m + sum.ln();
                let tsum: f64 = t.iter().sum();
                let loss = logits.iter().zip(&t).map(|(z, ti)| ti * (lse - z)).sum();
                let grad = logits
                    .iter()
                    .zip(&t)
                    .map(|(z, ti)| tsum * (z - lse).exp() - ti)
                    .collect();
                (loss, grad)
            }
            LossFn::BinaryCrossEntropy => {
                let loss = logits.iter().zip(&t).map(|(z, y)| softplus(*z) - y * z).sum();
                let grad = logits.iter().zip(&t).map(|(z, y)| sigmoid(*z) - y).collect();
                (loss, grad)
            }
            LossFn::SquaredError => {
                let r: Vec<f64> = logits.iter().zip(&t).map(|(z, y)| z - y).collect();
                (0.5 * r.iter().map(|v| v * v).sum::<f64>(), r)
            }
        })
    }

    /// Predicted class: threshold at 0 for a single binary logit, argmax otherwise.
    pub fn predict_class(self, logits: &[f64]) -> usize {
        if self == LossFn::BinaryCrossEntropy && logits.len() == 1 {
            return usize::from(logits[0] > 0.0);
        }
        let mut best = 0;
        for (i, z) in logits.iter().enumerate() {
            if *z > logits[best] {
                best = i;
            }
        }
        best
    }
}

/// `(γ/2) Σ ‖A_{i+1} − A_i‖_F²` over consecutive CQ layers, and its gradient
/// (one vector per stage, zero outside CQ layers). Runs of CQ layers are broken
/// by pooling and embedding stages.
pub fn smoothness_penalty(model: &CqnetModel, gamma: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {gamma}")));
    }
    let stages = model.stages();
    let mut grads: Vec<Vec<f64>> = stages.iter().map(|s| vec![0.0; s.param_count()]).collect();
    let mut value = 0.0;
    for k in 1..stages.len() {
        let (Stage::Cq(a), Stage::Cq(b)) = (&stages[k - 1], &stages[k]) else {
            continue;
        };
        if a.op.param_count() != b.op.param_count()
            || a.op.in_dim() != b.op.in_dim()
            || a.op.out_dim() != b.op.out_dim()
            || a.op.kind_name() != b.op.kind_name()
        {
            return Err(Error::SmoothnessShape {
                first: k - 1,
                second: k,
            });
        }
        let diff: Vec<f64> = b.op.params().iter().zip(a.op.params()).map(|(x, y)| x - y).collect();
        value += 0.5 * gamma * diff.iter().map(|d| d * d).sum::<f64>();
        axpy(-gamma, &diff, &mut grads[k - 1]);
        axpy(gamma, &diff, &mut grads[k]);
    }
    Ok((value, grads))
}

/// Largest Frobenius distance between consecutive CQ operators in a run.
pub fn max_layer_difference(model: &CqnetModel) -> f64 {
    let stages = model.stages();
    let mut best: f64 = 0.0;
    for k in 1..stages.len() {
        if let (Stage::Cq(a), Stage::Cq(b)) = (&stages[k - 1], &stages[k]) {
            if a.op.param_count() == b.op.param_count() {
                let d: f64 =
                    b.op.params()
                        .iter()
                        .zip(a.op.params())
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                best = best.max(d.sqrt());
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub smoothness_gamma: f64,
    /// Multiplies the learning rate of every stage operator (the classifier
    /// keeps `learning_rate`).
    pub operator_lr_scale: f64,
    /// Epoch `e` (from 1) uses `learning_rate / (1 + lr_decay (e − 1))`.
    pub lr_decay: f64,
    pub certificate_enforcement: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 1,
            smoothness_gamma: 0.0,
            operator_lr_scale: 1.0,
            lr_decay: 0.0,
            certificate_enforcement: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        if !(self.smoothness_gamma >= 0.0) {
            return Err(Error::InvalidParameter("smoothness gamma must be >= 0".into()));
        }
        if !(self.operator_lr_scale > 0.0 && self.operator_lr_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "operator learning-rate scale must be positive, got {}",
                self.operator_lr_scale
            )));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning-rate decay must be >= 0, got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * epoch.saturating_sub(1) as f64)
    }
}

/// `θ ← θ − η g`, followed by certificate enforcement when configured.
/// Returns the largest absolute parameter change.
pub fn sgd_step(model: &mut CqnetModel, grads: &ParamGradients, config: &TrainConfig) -> Result<f64> {
    if let Some(block) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(block));
    }
    let delta = if config.operator_lr_scale == 1.0 {
        model.apply_update(grads, config.learning_rate)?
    } else {
        let mut scaled = grads.clone();
        for g in &mut scaled.stages {
            g.iter_mut().for_each(|v| *v *= config.operator_lr_scale);
        }
        model.apply_update(&scaled, config.learning_rate)?
    };
    if config.certificate_enforcement {
        model.enforce_certificate()?;
    }
    Ok(delta)
}

/// Loss and parameter gradient for one sample.
pub fn sample_grad(
    model: &CqnetModel,
    loss: LossFn,
    features: &[f64],
    target: &Target,
) -> Result<(f64, ParamGradients)> {
    let out = model.forward(features, false)?;
    let (value, lg) = loss.loss_and_grad(&out.logits, target)?;
    Ok((value, model.backward(&out.tape, &lg)?))
}

/// The single-sample training objective `loss + (γ/2) Σ ‖A_{i+1} − A_i‖²`
/// and its gradient.
pub fn penalized_sample_grad(
    model: &CqnetModel,
    loss: LossFn,
    features: &[f64],
    target: &Target,
    gamma: f64,
) -> Result<(f64, ParamGradients)> {
    let (value, mut grads) = sample_grad(model, loss, features, target)?;
    let (penalty, pg) = smoothness_penalty(model, gamma)?;
    for (g, p) in grads.stages.iter_mut().zip(&pg) {
        axpy(1.0, p, g);
    }
    Ok((value + penalty, grads))
}

/// Mean loss and accuracy over a dataset, evaluated in parallel with a fixed
/// reduction order.
pub fn evaluate(model: &CqnetModel, ds: &Dataset, loss: LossFn) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let per: Vec<(f64, bool)> = ds
        .samples
        .par_iter()
        .map(|s| {
            let logits = model.predict(&s.features)?;
            let (l, _) = loss.loss_and_grad(&logits, &Target::Class(s.label))?;
            Ok((l, loss.predict_class(&logits) == s.label))
        })
        .collect::<Result<_>>()?;
    let total: f64 = per.iter().map(|p| p.0).sum();
    let correct = per.iter().filter(|p| p.1).count();
    Ok((total / ds.len() as f64, correct as f64 / ds.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub max_weight_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = self.epochs.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                export::float(e.mean_loss),
                export::float(e.accuracy),
                export::float(e.max_weight_delta),
            ]
        });
        export::write_rows(out, &["epoch", "mean_loss", "accuracy", "max_weight_delta"], rows)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// What the epoch observer asks `fit_with` to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Next {
    Continue,
    Stop,
}

/// Seeded-shuffle SGD; see [`fit_with`].
pub fn fit(model: &mut CqnetModel, ds: &Dataset, loss: LossFn, config: &TrainConfig) -> Result<TrainingLog> {
    fit_with(model, ds, loss, config, |_, _| Ok(Next::Continue))
}

/// Runs `config.epochs` epochs of SGD on `loss + smoothness penalty`.
///
/// Samples are reshuffled every epoch by a generator seeded once from
/// `config.seed`. Batches average their per-sample gradients. After each epoch
/// the whole training set is evaluated and `observe` may stop training early.
pub fn fit_with(
    model: &mut CqnetModel,
    ds: &Dataset,
    loss: LossFn,
    config: &TrainConfig,
    mut observe: impl FnMut(&CqnetModel, &EpochRecord) -> Result<Next>,
) -> Result<TrainingLog> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    if config.certificate_enforcement {
        model.enforce_certificate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainingLog::default();
    let (l0, a0) = evaluate(model, ds, loss)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        mean_loss: l0,
        accuracy: a0,
        max_weight_delta: 0.0,
    });
    if observe(model, &log.epochs[0])? == Next::Stop {
        return Ok(log);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let step = TrainConfig {
            learning_rate: config.learning_rate_at(epoch),
            ..config.clone()
        };
        let mut max_delta: f64 = 0.0;
        for batch in order.chunks(config.batch_size) {
            let per: Vec<ParamGradients> = if batch.len() == 1 {
                let s = &ds.samples[batch[0]];
                vec![sample_grad(model, loss, &s.features, &Target::Class(s.label))?.1]
            } else {
                batch
                    .par_iter()
                    .map(|&i| {
                        let s = &ds.samples[i];
                        Ok(sample_grad(model, loss, &s.features, &Target::Class(s.label))?.1)
                    })
                    .collect::<Result<_>>()?
            };
            let mut grads = ParamGradients::zeros(model);
            for g in &per {
                grads.add_scaled(g, 1.0 / batch.len() as f64);
            }
            if config.smoothness_gamma > 0.0 {
                let (_, pg) = smoothness_penalty(model, config.smoothness_gamma)?;
                for (g, p) in grads.stages.iter_mut().zip(&pg) {
                    axpy(1.0, p, g);
                }
            }
            max_delta = max_delta.max(sgd_step(model, &grads, &step)?);
        }
        let (mean_loss, accuracy) = evaluate(model, ds, loss)?;
        let rec = EpochRecord {
            epoch,
            mean_loss,
            accuracy,
            max_weight_delta: max_delta,
        };
        log.epochs.push(rec.clone());
        if observe(model, &rec)? == Next::Stop {
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::linops::LinearOperator;
    use crate::net::LayerSpec;
    use crate::sets::ConstraintSet;

    #[test]
    fn loss_examples() {
        let (l, g) = LossFn::BinaryCrossEntropy
            .loss_and_grad(&[0.0], &Target::Class(1))
            .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, vec![-0.5]);
        let (l, g) = LossFn::SoftmaxCrossEntropy
            .loss_and_grad(&[0.0, 0.0], &Target::Class(0))
            .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn invalid_targets() {
        assert!(LossFn::SoftmaxCrossEntropy
            .loss_and_grad(&[0.0, 0.0], &Target::Class(2))
            .is_err());
        assert!(LossFn::BinaryCrossEntropy
            .loss_and_grad(&[0.0], &Target::Class(2))
            .is_err());
        assert!(LossFn::BinaryCrossEntropy
            .loss_and_grad(&[0.0], &Target::Values(vec![1.5]))
            .is_err());
    }

    fn scalar_layer(a: f64) -> Stage {
        Stage::Cq(
            LayerSpec::new(
                LinearOperator::Dense(DenseMatrix::from_rows(&[vec![a]]).unwrap()),
                0.1,
                vec![],
                ConstraintSet::NonnegOrthant,
            )
            .unwrap(),
        )
    }

    #[test]
    fn smoothness_example() {
        let m = CqnetModel::new(
            vec![scalar_layer(1.0), scalar_layer(3.0)],
            DenseMatrix::identity(1),
            false,
        )
        .unwrap();
        let (v, g) = smoothness_penalty(&m, 1.0).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g, vec![vec![-2.0], vec![2.0]]);
        let same = CqnetModel::new(
            vec![scalar_layer(2.0), scalar_layer(2.0)],
            DenseMatrix::identity(1),
            false,
        )
        .unwrap();
        assert_eq!(
            smoothness_penalty(&same, 1.0).unwrap(),
            (0.0, vec![vec![0.0], vec![0.0]])
        );
    }

    #[test]
    fn sgd_examples() {
        let mut m = CqnetModel::new(vec![scalar_layer(1.0)], DenseMatrix::identity(1), false).unwrap();
        let mut g = ParamGradients::zeros(&m);
        let before = m.clone();
        sgd_step(
            &mut m,
            &g,
            &TrainConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.params(), before.params());
        g.stages[0][0] = 0.5;
        sgd_step(
            &mut m,
            &g,
            &TrainConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.params()[0], 0.95);
        g.stages[0][0] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut m, &g, &TrainConfig::default()),
            Err(Error::NonFiniteGradient(_))
        ));
    }
}
