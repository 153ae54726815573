//! CQnet: a stack of CQ steps with learned operators, followed by a linear
//! classifier.
//!
//! Layer `k` maps `x ↦ P_{C_k}(x − α_k A_kᵀ(Id − P_{Q_k})A_k x)`. Besides CQ
//! layers a model may contain fixed average-pooling stages and a learnable
//! embedding `x ↦ γ E x` that lifts the input to more channels. With
//! `γ ≤ 1/√ρ(EᵀE)` every stage is nonexpansive once the CQ stepsizes respect
//! their certificates, so the whole feature map is too.
//!
//! In bias mode inputs are augmented with a trailing 1, every CQ operator acts
//! on the augmented state and `FixedLastEntry(1)` is appended to every `C_k`.
//!
//! Reverse mode is hand-written. A forward pass records a [`ForwardTape`] with
//! the intermediate vectors of each stage; [`CqnetModel::backward`] replays
//! it. Projections are differentiated with the almost-everywhere conventions of
//! [`crate::sets`].

pub mod checkpoint;

use std::io::Write;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::export;
use crate::linalg::{all_finite, axpy, norm, sub, DenseMatrix};
use crate::linops::{
    normalize_kernels_prop1, power_iteration_bound, prop1_bound, AvgPool2d, Conv2d, KernelTensor, LinearOperator,
    SpectralCertificate, POWER_ITERATIONS,
};
use crate::sets::{chain_jacobian_transpose, project_chain, ConstraintSet};

/// A member of a layer's `C` chain, possibly depending on the current sample.
#[derive(Debug, Clone, PartialEq)]
pub enum SetSpec {
    Fixed(ConstraintSet),
    /// `inner·‖d‖ ≤ ‖x‖ ≤ outer·‖d‖` where `d` is the raw (unaugmented) input.
    InputNormAnnulus {
        inner_factor: f64,
        outer_factor: f64,
    },
}

impl SetSpec {
    pub fn resolve(&self, dim: usize, input_norm: f64) -> Result<ConstraintSet> {
        match self {
            Self::Fixed(s) => Ok(s.clone()),
            Self::InputNormAnnulus {
                inner_factor,
                outer_factor,
            } => ConstraintSet::annulus(vec![0.0; dim], inner_factor * input_norm, outer_factor * input_norm),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fixed(s) => s.validate(),
            Self::InputNormAnnulus {
                inner_factor,
                outer_factor,
            } => {
                if !(*inner_factor >= 0.0 && inner_factor <= outer_factor && outer_factor.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "annulus factors need 0 <= inner <= outer, got {inner_factor}, {outer_factor}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            Self::Fixed(s) => s.is_convex(),
            Self::InputNormAnnulus { inner_factor, .. } => *inner_factor == 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub op: LinearOperator,
    pub alpha: f64,
    /// Applied in order; the documented order is user sets, then zero mean,
    /// then norm constraints.
    pub c_sets: Vec<SetSpec>,
    pub q_set: ConstraintSet,
    pub certificate: SpectralCertificate,
}

impl LayerSpec {
    /// Builds a layer whose certificate comes from a seeded power iteration.
    pub fn new(op: LinearOperator, alpha: f64, c_sets: Vec<SetSpec>, q_set: ConstraintSet) -> Result<Self> {
        let certificate = power_iteration_bound(&op, POWER_ITERATIONS, 0)?;
        let spec = Self {
            op,
            alpha,
            c_sets,
            q_set,
            certificate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        check_dim("LayerSpec: square state map", self.op.in_dim(), self.dim())?;
        if let Some(d) = self.q_set.dim() {
            check_dim("LayerSpec Q", self.op.out_dim(), d)?;
        }
        for c in &self.c_sets {
            c.validate()?;
            if let SetSpec::Fixed(s) = c {
                if let Some(d) = s.dim() {
                    check_dim("LayerSpec C", self.dim(), d)?;
                }
            }
        }
        self.q_set.validate()
    }

    pub fn dim(&self) -> usize {
        self.op.in_dim()
    }

    /// `α·λ`; at most 2 for a nonexpansive layer.
    pub fn margin(&self) -> f64 {
        self.alpha * self.certificate.lambda_bound
    }

    fn resolve_c(&self, input_norm: f64, bias_mode: bool) -> Result<Vec<ConstraintSet>> {
        let mut sets = self
            .c_sets
            .iter()
            .map(|s| s.resolve(self.dim(), input_norm))
            .collect::<Result<Vec<_>>>()?;
        if bias_mode {
            sets.push(ConstraintSet::FixedLastEntry(1.0));
        }
        Ok(sets)
    }
}

/// Learnable lifting `x ↦ gain·E x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSpec {
    pub op: LinearOperator,
    pub gain: f64,
    pub certificate: SpectralCertificate,
}

impl EmbedSpec {
    /// Normalizes a convolutional embedding and picks the largest
    /// nonexpansive gain.
    pub fn conv(kernels: KernelTensor, height: usize, width: usize) -> Result<Self> {
        let k = normalize_kernels_prop1(&kernels)?;
        let certificate = prop1_bound(k.width(), k.c_out())?;
        Ok(Self {
            gain: 1.0 / certificate.lambda_bound.sqrt(),
            op: LinearOperator::Conv2d(Conv2d::new(k, height, width)?),
            certificate,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Cq(LayerSpec),
    Pool(AvgPool2d),
    Embed(EmbedSpec),
}

impl Stage {
    pub fn in_dim(&self) -> usize {
        match self {
            Self::Cq(l) => l.dim(),
            Self::Pool(p) => p.in_dim(),
            Self::Embed(e) => e.op.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Cq(l) => l.dim(),
            Self::Pool(p) => p.out_dim(),
            Self::Embed(e) => e.op.out_dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Cq(_) => "cq",
            Self::Pool(_) => "pool",
            Self::Embed(_) => "embed",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Cq(l) => l.op.param_count(),
            Self::Pool(_) => 0,
            Self::Embed(e) => e.op.param_count(),
        }
    }

    fn op_mut(&mut self) -> Option<&mut LinearOperator> {
        match self {
            Self::Cq(l) => Some(&mut l.op),
            Self::Pool(_) => None,
            Self::Embed(e) => Some(&mut e.op),
        }
    }

    fn op(&self) -> Option<&LinearOperator> {
        match self {
            Self::Cq(l) => Some(&l.op),
            Self::Pool(_) => None,
            Self::Embed(e) => Some(&e.op),
        }
    }
}

/// Cached intermediates of one CQ layer.
#[derive(Debug, Clone)]
pub struct CqTape {
    pub x: Vec<f64>,
    /// `A x`.
    pub z: Vec<f64>,
    /// `(Id − P_Q)(A x)`.
    pub r: Vec<f64>,
    /// Inputs to each projection of the `C` chain; the first is the gradient step.
    pub c_inputs: Vec<Vec<f64>>,
    pub c_sets: Vec<ConstraintSet>,
}

#[derive(Debug, Clone)]
enum StageTape {
    Cq(CqTape),
    Pool,
    Embed { x: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct ForwardTape {
    stages: Vec<StageTape>,
    x_final: Vec<f64>,
    generation: u64,
    param_count: usize,
}

impl ForwardTape {
    pub fn final_state(&self) -> &[f64] {
        &self.x_final
    }
}

/// States visited by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// `x_1` (augmented in bias mode) followed by every stage output.
    pub states: Vec<Vec<f64>>,
    pub stage_kinds: Vec<&'static str>,
    /// `d²(A_k, Q_k, x_k)` at the stage input; NaN for non-CQ stages.
    pub sq_distance_before: Vec<f64>,
    /// `d²(A_k, Q_k, x_{k+1})`; NaN for non-CQ stages.
    pub sq_distance_after: Vec<f64>,
    /// Output lies in every set of the stage's `C` chain (to 1e-10).
    pub c_feasible: Vec<bool>,
}

impl TrajectoryRecord {
    pub const HEADER_PREFIX: [&'static str; 8] = [
        "sample",
        "label",
        "layer",
        "stage",
        "sq_distance_before",
        "sq_distance_after",
        "c_feasible",
        "state_norm",
    ];

    /// Header for [`csv_rows`](Self::csv_rows); `state_dim` adds coordinate columns.
    pub fn csv_header(state_dim: Option<usize>) -> Vec<String> {
        let mut h: Vec<String> = Self::HEADER_PREFIX.iter().map(|s| s.to_string()).collect();
        if let Some(n) = state_dim {
            h.extend((0..n).map(|i| format!("x{i}")));
        }
        h
    }

    /// Row 0 is the input state; row `k` is the output of stage `k`.
    pub fn csv_rows(&self, sample: usize, label: usize, with_states: bool) -> Vec<Vec<String>> {
        self.states
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let (kind, before, after, feasible) = if k == 0 {
                    ("input", f64::NAN, f64::NAN, true)
                } else {
                    (
                        self.stage_kinds[k - 1],
                        self.sq_distance_before[k - 1],
                        self.sq_distance_after[k - 1],
                        self.c_feasible[k - 1],
                    )
                };
                let mut row = vec![
                    sample.to_string(),
                    label.to_string(),
                    k.to_string(),
                    kind.to_string(),
                    export::float(before),
                    export::float(after),
                    u8::from(feasible).to_string(),
                    export::float(norm(s)),
                ];
                if with_states {
                    row.extend(s.iter().map(|&v| export::float(v)));
                }
                row
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W, with_states: bool) -> Result<()> {
        let dim = with_states.then(|| self.states[0].len());
        let header = Self::csv_header(dim);
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        export::write_rows(out, &header, self.csv_rows(0, 0, with_states))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub trajectory: Option<TrajectoryRecord>,
    pub tape: ForwardTape,
}

/// Gradients with the same layout as the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    /// One flat vector per stage, in [`LinearOperator::params`] order (empty for pooling).
    pub stages: Vec<Vec<f64>>,
    pub classifier: DenseMatrix,
}

impl ParamGradients {
    pub fn zeros(model: &CqnetModel) -> Self {
        Self {
            stages: model.stages.iter().map(|s| vec![0.0; s.param_count()]).collect(),
            classifier: DenseMatrix::zeros(model.classifier.rows(), model.classifier.cols()),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            axpy(s, b, a);
        }
        axpy(s, other.classifier.data(), self.classifier.data_mut());
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.stages {
            g.iter_mut().for_each(|v| *v *= s);
        }
        self.classifier.data_mut().iter_mut().for_each(|v| *v *= s);
    }

    /// Flattened in [`CqnetModel::params`] order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.stages.iter().flatten().copied().collect();
        v.extend_from_slice(self.classifier.data());
        v
    }

    /// Name of the first block holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        for (k, g) in self.stages.iter().enumerate() {
            if !all_finite(g) {
                return Some(format!("stage {k}"));
            }
        }
        (!all_finite(self.classifier.data())).then(|| "classifier".to_string())
    }
}

/// VJP of `g = Aᵀ(Id − P_Q)(A x)` given `ḡ`.
///
/// Returns the parameter gradient (both occurrences of `A`, product rule) and
/// `x̄`. `z = A x` and `r = (Id − P_Q)z` come from the forward pass.
pub fn cq_term_vjp(
    op: &LinearOperator,
    q: &ConstraintSet,
    x: &[f64],
    z: &[f64],
    r: &[f64],
    g_bar: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    // ⟨ḡ, Aᵀ r⟩ = ⟨r, A ḡ⟩: the outer A contributes param_grad(r, ḡ).
    let mut grad = op.param_grad(r, g_bar)?;
    let r_bar = op.apply(g_bar)?;
    let z_bar = sub(&r_bar, &q.jacobian_transpose_apply(z, &r_bar)?);
    let inner = op.param_grad(&z_bar, x)?;
    axpy(1.0, &inner, &mut grad);
    Ok((grad, op.adjoint_apply(&z_bar)?))
}

/// One CQ layer with already-resolved `C` sets.
pub fn layer_forward_with(spec: &LayerSpec, c_sets: &[ConstraintSet], x: &[f64]) -> Result<(Vec<f64>, CqTape)> {
    check_dim("layer_forward", spec.dim(), x.len())?;
    let z = spec.op.apply(x)?;
    let r = sub(&z, &spec.q_set.project(&z)?);
    let g = spec.op.adjoint_apply(&r)?;
    let mut y = x.to_vec();
    axpy(-spec.alpha, &g, &mut y);
    let (out, c_inputs) = project_chain(c_sets, &y)?;
    Ok((
        out,
        CqTape {
            x: x.to_vec(),
            z,
            r,
            c_inputs,
            c_sets: c_sets.to_vec(),
        },
    ))
}

/// One CQ layer outside a model: per-sample sets are resolved from `‖x‖`.
pub fn layer_forward(spec: &LayerSpec, x: &[f64]) -> Result<(Vec<f64>, CqTape)> {
    let sets = spec.resolve_c(norm(x), false)?;
    layer_forward_with(spec, &sets, x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqnetModel {
    stages: Vec<Stage>,
    classifier: DenseMatrix,
    bias_mode: bool,
    certified_nonexpansive: bool,
    generation: u64,
}

impl CqnetModel {
    pub fn new(stages: Vec<Stage>, classifier: DenseMatrix, bias_mode: bool) -> Result<Self> {
        let model = Self {
            stages,
            classifier,
            bias_mode,
            certified_nonexpansive: false,
            generation: 0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.stages.windows(2) {
            check_dim("CqnetModel stage chain", pair[0].out_dim(), pair[1].in_dim())?;
        }
        for s in &self.stages {
            match s {
                Stage::Cq(l) => l.validate()?,
                Stage::Pool(_) | Stage::Embed(_) if self.bias_mode => {
                    return Err(Error::InvalidParameter(format!(
                        "{} stages cannot carry the homogeneous coordinate of bias mode",
                        s.kind_name()
                    )))
                }
                _ => {}
            }
        }
        if self.bias_mode && self.state_in_dim() == 0 {
            return Err(Error::InvalidParameter(
                "bias mode needs at least one state entry".into(),
            ));
        }
        check_dim("CqnetModel classifier", self.feature_dim(), self.classifier.cols())
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Mutable access invalidates outstanding tapes and the certificate flag.
    pub fn stages_mut(&mut self) -> &mut [Stage] {
        self.touch();
        &mut self.stages
    }

    pub fn classifier(&self) -> &DenseMatrix {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut DenseMatrix {
        self.generation += 1;
        &mut self.classifier
    }

    pub fn bias_mode(&self) -> bool {
        self.bias_mode
    }

    pub fn certified_nonexpansive(&self) -> bool {
        self.certified_nonexpansive
    }

    fn touch(&mut self) {
        self.generation += 1;
        self.certified_nonexpansive = false;
    }

    /// Dimension of the state entering the first stage.
    fn state_in_dim(&self) -> usize {
        self.stages.first().map_or(self.classifier.cols(), Stage::in_dim)
    }

    /// Dimension of the raw input `d`.
    pub fn input_dim(&self) -> usize {
        self.state_in_dim() - usize::from(self.bias_mode)
    }

    /// Dimension of `x_f`.
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.classifier.cols(), Stage::out_dim)
    }

    pub fn n_outputs(&self) -> usize {
        self.classifier.rows()
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(Stage::param_count).sum::<usize>() + self.classifier.data().len()
    }

    /// All trainable parameters: stage operators in order, then `W`.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self
            .stages
            .iter()
            .filter_map(Stage::op)
            .flat_map(LinearOperator::params)
            .collect();
        p.extend_from_slice(self.classifier.data());
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("CqnetModel::set_params", self.param_count(), params.len())?;
        self.touch();
        let mut offset = 0;
        for s in &mut self.stages {
            if let Some(op) = s.op_mut() {
                let n = op.param_count();
                op.set_params(&params[offset..offset + n])?;
                offset += n;
            }
        }
        self.classifier.data_mut().copy_from_slice(&params[offset..]);
        Ok(())
    }

    /// `θ ← θ − lr·g`; returns the largest absolute change.
    pub fn apply_update(&mut self, grads: &ParamGradients, lr: f64) -> Result<f64> {
        check_dim("CqnetModel::apply_update", self.stages.len(), grads.stages.len())?;
        self.touch();
        let mut max_delta: f64 = 0.0;
        for (s, g) in self.stages.iter_mut().zip(&grads.stages) {
            check_dim("CqnetModel::apply_update stage", s.param_count(), g.len())?;
            if let Some(op) = s.op_mut() {
                let mut it = g.iter();
                op.for_each_param_mut(&mut |p| {
                    let d = lr * it.next().expect("length checked");
                    *p -= d;
                    max_delta = max_delta.max(d.abs());
                });
            }
        }
        check_dim(
            "CqnetModel::apply_update classifier",
            self.classifier.data().len(),
            grads.classifier.data().len(),
        )?;
        for (w, g) in self.classifier.data_mut().iter_mut().zip(grads.classifier.data()) {
            let d = lr * g;
            *w -= d;
            max_delta = max_delta.max(d.abs());
        }
        Ok(max_delta)
    }

    /// Normalizes convolution kernels, refreshes every certificate and clamps
    /// stepsizes (and embedding gains) into the nonexpansive range.
    pub fn enforce_certificate(&mut self) -> Result<()> {
        self.generation += 1;
        for (k, s) in self.stages.iter_mut().enumerate() {
            match s {
                Stage::Cq(l) => {
                    l.certificate = certify(&mut l.op, k as u64)?;
                    l.alpha = l.alpha.min(l.certificate.max_stable_step());
                }
                Stage::Embed(e) => {
                    e.certificate = certify(&mut e.op, k as u64)?;
                    e.gain = e.gain.min(1.0 / e.certificate.lambda_bound.sqrt());
                }
                Stage::Pool(_) => {}
            }
        }
        self.certified_nonexpansive = true;
        Ok(())
    }

    fn augment(&self, d: &[f64]) -> Result<Vec<f64>> {
        check_dim("CqnetModel input", self.input_dim(), d.len())?;
        let mut x = d.to_vec();
        if self.bias_mode {
            x.push(1.0);
        }
        Ok(x)
    }

    fn run(
        &self,
        d: &[f64],
        keep_tape: bool,
        record: bool,
    ) -> Result<(Vec<f64>, Vec<StageTape>, Option<TrajectoryRecord>)> {
        let mut x = self.augment(d)?;
        let input_norm = norm(d);
        let mut tapes = Vec::with_capacity(if keep_tape { self.stages.len() } else { 0 });
        let mut traj = record.then(|| TrajectoryRecord {
            states: vec![x.clone()],
            stage_kinds: Vec::new(),
            sq_distance_before: Vec::new(),
            sq_distance_after: Vec::new(),
            c_feasible: Vec::new(),
        });
        for stage in &self.stages {
            let (next, tape) = match stage {
                Stage::Cq(l) => {
                    let sets = l.resolve_c(input_norm, self.bias_mode)?;
                    let (y, t) = layer_forward_with(l, &sets, &x)?;
                    (y, StageTape::Cq(t))
                }
                Stage::Pool(p) => (p.apply(&x)?, StageTape::Pool),
                Stage::Embed(e) => {
                    let mut y = e.op.apply(&x)?;
                    y.iter_mut().for_each(|v| *v *= e.gain);
                    (y, StageTape::Embed { x: x.clone() })
                }
            };
            if let Some(tr) = traj.as_mut() {
                tr.stage_kinds.push(stage.kind_name());
                match (stage, &tape) {
                    (Stage::Cq(l), StageTape::Cq(t)) => {
                        tr.sq_distance_before.push(0.5 * crate::linalg::dot(&t.r, &t.r));
                        tr.sq_distance_after
                            .push(crate::cq::sq_distance(&l.op, &l.q_set, &next)?);
                        let mut ok = true;
                        for s in &t.c_sets {
                            ok &= s.residual(&next)? <= 1e-10 * (1.0 + norm(&next));
                        }
                        tr.c_feasible.push(ok);
                    }
                    _ => {
                        tr.sq_distance_before.push(f64::NAN);
                        tr.sq_distance_after.push(f64::NAN);
                        tr.c_feasible.push(true);
                    }
                }
                tr.states.push(next.clone());
            }
            if keep_tape {
                tapes.push(tape);
            }
            x = next;
        }
        Ok((x, tapes, traj))
    }

    /// `x_f` for raw input `d`.
    pub fn features(&self, d: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(d, false, false)?.0)
    }

    /// `W x_f` without recording a tape.
    pub fn predict(&self, d: &[f64]) -> Result<Vec<f64>> {
        self.classifier.matvec(&self.features(d)?)
    }

    pub fn forward(&self, d: &[f64], record: bool) -> Result<ForwardOutput> {
        let (x_final, stages, trajectory) = self.run(d, true, record)?;
        let logits = self.classifier.matvec(&x_final)?;
        Ok(ForwardOutput {
            logits,
            trajectory,
            tape: ForwardTape {
                stages,
                x_final,
                generation: self.generation,
                param_count: self.param_count(),
            },
        })
    }

    /// Gradients of a scalar loss given `∂loss/∂logits`.
    pub fn backward(&self, tape: &ForwardTape, loss_grad: &[f64]) -> Result<ParamGradients> {
        if tape.generation != self.generation
            || tape.param_count != self.param_count()
            || tape.stages.len() != self.stages.len()
        {
            return Err(Error::TapeMismatch(format!(
                "tape from generation {} does not match model generation {}",
                tape.generation, self.generation
            )));
        }
        check_dim("CqnetModel::backward", self.n_outputs(), loss_grad.len())?;
        let mut grads = ParamGradients {
            stages: vec![Vec::new(); self.stages.len()],
            classifier: DenseMatrix::outer(loss_grad, &tape.x_final),
        };
        let mut x_bar = self.classifier.matvec_t(loss_grad)?;
        for (k, (stage, t)) in self.stages.iter().zip(&tape.stages).enumerate().rev() {
            match (stage, t) {
                (Stage::Cq(l), StageTape::Cq(t)) => {
                    let y_bar = chain_jacobian_transpose(&t.c_sets, &t.c_inputs, &x_bar)?;
                    let g_bar: Vec<f64> = y_bar.iter().map(|v| -l.alpha * v).collect();
                    let (pg, x_term) = cq_term_vjp(&l.op, &l.q_set, &t.x, &t.z, &t.r, &g_bar)?;
                    grads.stages[k] = pg;
                    x_bar = y_bar;
                    axpy(1.0, &x_term, &mut x_bar);
                }
                (Stage::Pool(p), StageTape::Pool) => {
                    x_bar = p.adjoint_apply(&x_bar)?;
                }
                (Stage::Embed(e), StageTape::Embed { x }) => {
                    let mut pg = e.op.param_grad(&x_bar, x)?;
                    pg.iter_mut().for_each(|v| *v *= e.gain);
                    grads.stages[k] = pg;
                    if k > 0 {
                        x_bar = e.op.adjoint_apply(&x_bar)?;
                        x_bar.iter_mut().for_each(|v| *v *= e.gain);
                    }
                }
                _ => return Err(Error::TapeMismatch(format!("stage {k} kind differs from tape"))),
            }
        }
        Ok(grads)
    }
}

/// Closed-form `w²·c_out` certificate for convolutions (after normalizing), power iteration
/// otherwise.
fn certify(op: &mut LinearOperator, seed: u64) -> Result<SpectralCertificate> {
    if let LinearOperator::Conv2d(c) = op {
        let k = normalize_kernels_prop1(c.kernels())?;
        let cert = prop1_bound(k.width(), k.c_out())?;
        c.set_kernels(k)?;
        return Ok(cert);
    }
    power_iteration_bound(op, POWER_ITERATIONS, seed)
}

/// Uniform entries in `[-1, 1]`, rescaled so the spectral estimate of `AᵀA` is 1.
pub fn init_dense<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut m = DenseMatrix::new(rows, cols, data)?;
    let est = power_iteration_bound(&LinearOperator::Dense(m.clone()), POWER_ITERATIONS, 0)?.lambda_bound
        / crate::linops::POWER_SAFETY_FACTOR;
    if est > f64::EPSILON {
        let s = 1.0 / est.sqrt();
        m.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    Ok(m)
}

/// Uniform kernels, immediately block-row normalized.
pub fn init_kernels<R: Rng>(rng: &mut R, c_out: usize, c_in: usize, width: usize) -> Result<KernelTensor> {
    let data = (0..c_out * c_in * width * width)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    normalize_kernels_prop1(&KernelTensor::new(c_out, c_in, width, data)?)
}
