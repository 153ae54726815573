//! Experiment configuration files.
//!
//! One TOML file describes one experiment. Unknown keys are rejected, parse
//! errors carry the line and column from the TOML parser, and validation
//! errors name the offending key and the line it was found on.

use std::path::{Path, PathBuf};

use cqnet::net::SetSpec;
use cqnet::sets::ConstraintSet;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "illustrative-1d")]
    Illustrative1d,
    #[serde(rename = "illustrative-2d")]
    Illustrative2d,
    #[serde(rename = "fashion-reduced")]
    FashionReduced,
    #[serde(rename = "control")]
    Control,
    #[serde(rename = "cq-solve")]
    CqSolve,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Illustrative1d => "illustrative-1d",
            Self::Illustrative2d => "illustrative-2d",
            Self::FashionReduced => "fashion-reduced",
            Self::Control => "control",
            Self::CqSolve => "cq-solve",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Relative paths resolve against the working directory.
    pub output_dir: PathBuf,
    pub data: Option<DataConfig>,
    pub model: Option<ModelConfig>,
    pub training: Option<TrainingConfig>,
    pub environment: Option<EnvironmentConfig>,
    pub controller: Option<ControllerConfig>,
    pub problem: Option<ProblemConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic sample count.
    pub samples: Option<usize>,
    /// Held-out share of a synthetic set.
    pub validation_fraction: Option<f64>,
    /// IDX files; relative paths resolve against the config file's directory.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Standardize pixels with training-set statistics,
    /// `(x − mean) / (std + floor)`.
    pub standardize_floor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    Dense,
    Conv,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub operator: OperatorKind,
    pub layers: usize,
    /// Omitted means the largest certified step `2/λ`.
    pub alpha: Option<f64>,
    /// Rows of each dense `A_k`; defaults to the state dimension.
    pub width: Option<usize>,
    #[serde(default)]
    pub bias_mode: bool,
    #[serde(default = "SetConfig::orthant")]
    pub q: SetConfig,
    #[serde(default)]
    pub c: Vec<SetConfig>,
    pub channels: Option<usize>,
    pub kernel_width: Option<usize>,
    /// 1-based CQ layer indices followed by a 2×2 average pooling.
    #[serde(default)]
    pub pool_after: Vec<usize>,
    /// Classifier entries start uniform in `[-s, s]`.
    #[serde(default = "default_classifier_init")]
    pub classifier_init: f64,
    /// Also train a copy of the model with every `C` removed.
    #[serde(default)]
    pub compare_unconstrained: bool,
}

fn default_classifier_init() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub smoothness_gamma: f64,
    #[serde(default = "unit")]
    pub operator_lr_scale: f64,
    /// Epoch `e` uses `learning_rate / (1 + lr_decay (e − 1))`.
    #[serde(default)]
    pub lr_decay: f64,
    #[serde(default)]
    pub certificate_enforcement: bool,
    /// Stop once held-out accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Random input pairs per epoch for the empirical nonexpansiveness check.
    #[serde(default)]
    pub nonexpansive_pairs: usize,
    /// Samples whose layer-by-layer trajectories are exported; all by default.
    pub trajectory_samples: Option<usize>,
    /// Export full state vectors alongside the per-layer distances.
    #[serde(default = "yes")]
    pub trajectory_states: bool,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// A rectangle of obstacle gridpoints.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallConfig {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub spacing: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRegionConfig {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub targets: [f64; 4],
    #[serde(default)]
    pub walls: Vec<WallConfig>,
    #[serde(default)]
    pub obstacle_points: Vec<[f64; 2]>,
    pub halo_radius: f64,
    pub min_agent_distance: f64,
    pub target_tolerance: f64,
    pub horizon: usize,
    pub start_regions: Vec<StartRegionConfig>,
    pub train_starts: usize,
    #[serde(default)]
    pub heldout_starts: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Rows of `A`.
    pub matrix: Vec<Vec<f64>>,
    pub q: SetConfig,
    #[serde(default = "SetConfig::full_space")]
    pub c: SetConfig,
    pub x0: Vec<f64>,
    /// Omitted means `1/λ`.
    pub alpha: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iters() -> usize {
    10_000
}

fn default_tol() -> f64 {
    1e-12
}

/// A constraint set by kind name and numeric parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetConfig {
    pub kind: String,
    pub normal: Option<Vec<f64>>,
    pub offset: Option<f64>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    pub center: Option<Vec<f64>>,
    pub radius: Option<f64>,
    pub inner: Option<f64>,
    pub outer: Option<f64>,
    pub value: Option<f64>,
    pub inner_factor: Option<f64>,
    pub outer_factor: Option<f64>,
}

impl SetConfig {
    fn bare(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            normal: None,
            offset: None,
            lo: None,
            hi: None,
            center: None,
            radius: None,
            inner: None,
            outer: None,
            value: None,
            inner_factor: None,
            outer_factor: None,
        }
    }

    pub fn orthant() -> Self {
        Self::bare("nonneg-orthant")
    }

    pub fn full_space() -> Self {
        Self::bare("full-space")
    }

    fn given(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        let mut note = |name, present: bool| {
            if present {
                v.push(name);
            }
        };
        note("normal", self.normal.is_some());
        note("offset", self.offset.is_some());
        note("lo", self.lo.is_some());
        note("hi", self.hi.is_some());
        note("center", self.center.is_some());
        note("radius", self.radius.is_some());
        note("inner", self.inner.is_some());
        note("outer", self.outer.is_some());
        note("value", self.value.is_some());
        note("inner_factor", self.inner_factor.is_some());
        note("outer_factor", self.outer_factor.is_some());
        v
    }

    fn only(&self, allowed: &[&str]) -> Result<(), String> {
        match self.given().into_iter().find(|k| !allowed.contains(k)) {
            Some(k) => Err(format!("`{k}` is not a parameter of a {} set", self.kind)),
            None => Ok(()),
        }
    }

    fn need<T: Clone>(&self, name: &str, v: &Option<T>) -> Result<T, String> {
        v.clone().ok_or_else(|| format!("a {} set needs `{name}`", self.kind))
    }

    fn center_or_zero(&self, dim: usize) -> Vec<f64> {
        self.center.clone().unwrap_or_else(|| vec![0.0; dim])
    }

    /// Resolves to a fixed set in `R^dim`.
    pub fn to_set(&self, dim: usize) -> Result<ConstraintSet, String> {
        let set = match self.kind.as_str() {
            "nonneg-orthant" => {
                self.only(&[])?;
                ConstraintSet::NonnegOrthant
            }
            "full-space" => {
                self.only(&[])?;
                ConstraintSet::FullSpace
            }
            "zero-mean" => {
                self.only(&[])?;
                ConstraintSet::ZeroMean
            }
            "fixed-last-entry" => {
                self.only(&["value"])?;
                ConstraintSet::FixedLastEntry(self.need("value", &self.value)?)
            }
            "halfspace" => {
                self.only(&["normal", "offset"])?;
                ConstraintSet::Halfspace {
                    normal: self.need("normal", &self.normal)?,
                    offset: self.need("offset", &self.offset)?,
                }
            }
            "box" => {
                self.only(&["lo", "hi"])?;
                ConstraintSet::Box {
                    lo: self.need("lo", &self.lo)?,
                    hi: self.need("hi", &self.hi)?,
                }
            }
            "ball" => {
                self.only(&["center", "radius"])?;
                ConstraintSet::Ball {
                    center: self.center_or_zero(dim),
                    radius: self.need("radius", &self.radius)?,
                }
            }
            "annulus" => {
                self.only(&["center", "inner", "outer"])?;
                ConstraintSet::Annulus {
                    center: self.center_or_zero(dim),
                    inner: self.need("inner", &self.inner)?,
                    outer: self.need("outer", &self.outer)?,
                }
            }
            "exterior-ball" => {
                self.only(&["center", "radius"])?;
                ConstraintSet::ExteriorBall {
                    center: self.center_or_zero(dim),
                    radius: self.need("radius", &self.radius)?,
                }
            }
            "input-norm-annulus" => {
                return Err("input-norm-annulus is only allowed in model.c".into());
            }
            other => return Err(format!("unknown set kind `{other}`")),
        };
        set.validate().map_err(|e| e.to_string())?;
        if let Some(d) = set.dim() {
            if d != dim {
                return Err(format!("{} set has dimension {d}, expected {dim}", self.kind));
            }
        }
        Ok(set)
    }

    /// Like [`to_set`](Self::to_set) but also accepts per-sample sets.
    pub fn to_spec(&self, dim: usize) -> Result<SetSpec, String> {
        if self.kind == "input-norm-annulus" {
            self.only(&["inner_factor", "outer_factor"])?;
            let spec = SetSpec::InputNormAnnulus {
                inner_factor: self.need("inner_factor", &self.inner_factor)?,
                outer_factor: self.need("outer_factor", &self.outer_factor)?,
            };
            spec.validate().map_err(|e| e.to_string())?;
            return Ok(spec);
        }
        self.to_set(dim).map(SetSpec::Fixed)
    }
}

/// A validation failure tied to a dotted key such as `training.epochs`.
struct Invalid {
    key: String,
    message: String,
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> Invalid {
    Invalid {
        key: key.into(),
        message: message.into(),
    }
}

/// Line (1-based) on which `key` is assigned inside `[section]`, if any.
fn locate(src: &str, key: &str) -> Option<usize> {
    let (section, leaf) = match key.rsplit_once('.') {
        Some((s, l)) => (s, l),
        None => ("", key),
    };
    // Array indices in the key are not tracked; match the table name only.
    let section: String = section.split('[').next().unwrap_or("").into();
    let mut current = String::new();
    let mut section_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section {
                section_line.get_or_insert(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == leaf {
                    return Some(i + 1);
                }
            }
        }
    }
    section_line
}

fn positive(key: &str, v: f64) -> Result<(), Invalid> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive and finite, got {v}")))
    }
}

fn nonnegative(key: &str, v: f64) -> Result<(), Invalid> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be >= 0 and finite, got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<(), Invalid> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(key, format!("must be at least {min}, got {v}")))
    }
}

fn required<'a, T>(key: &str, v: &'a Option<T>, kind: ExperimentKind) -> Result<&'a T, Invalid> {
    v.as_ref()
        .ok_or_else(|| invalid(key, format!("is required for {} experiments", kind.name())))
}

fn unused<T>(key: &str, v: &Option<T>, kind: ExperimentKind) -> Result<(), Invalid> {
    match v {
        Some(_) => Err(invalid(key, format!("is not used by {} experiments", kind.name()))),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&src).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = cfg.data.as_mut() {
            for p in [
                &mut d.train_images,
                &mut d.train_labels,
                &mut d.test_images,
                &mut d.test_labels,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Parses and validates config text. The error message is ready to print.
    pub fn parse(src: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(src).map_err(|e| e.to_string().trim_end().to_string())?;
        cfg.validate().map_err(|e| match locate(src, &e.key) {
            Some(line) => format!("invalid value for `{}` (line {line}): {}", e.key, e.message),
            None => format!("invalid value for `{}`: {}", e.key, e.message),
        })?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), Invalid> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        let kind = self.kind;
        match kind {
            ExperimentKind::Illustrative1d | ExperimentKind::Illustrative2d | ExperimentKind::FashionReduced => {
                unused("environment", &self.environment, kind)?;
                unused("controller", &self.controller, kind)?;
                unused("problem", &self.problem, kind)?;
                let data = required("data", &self.data, kind)?;
                let model = required("model", &self.model, kind)?;
                let training = required("training", &self.training, kind)?;
                self.validate_data(data)?;
                self.validate_model(model)?;
                validate_training(training)?;
                if model.operator == OperatorKind::Conv && training.trajectory_states {
                    return Err(invalid(
                        "training.trajectory_states",
                        "state sizes change across pooling stages; set it to false for conv models",
                    ));
                }
            }
            ExperimentKind::Control => {
                unused("data", &self.data, kind)?;
                unused("model", &self.model, kind)?;
                unused("training", &self.training, kind)?;
                unused("problem", &self.problem, kind)?;
                validate_environment(required("environment", &self.environment, kind)?)?;
                validate_controller(required("controller", &self.controller, kind)?)?;
            }
            ExperimentKind::CqSolve => {
                unused("data", &self.data, kind)?;
                unused("model", &self.model, kind)?;
                unused("training", &self.training, kind)?;
                unused("environment", &self.environment, kind)?;
                unused("controller", &self.controller, kind)?;
                validate_problem(required("problem", &self.problem, kind)?)?;
            }
        }
        Ok(())
    }

    fn validate_data(&self, d: &DataConfig) -> Result<(), Invalid> {
        let kind = self.kind;
        if kind == ExperimentKind::FashionReduced {
            unused("data.samples", &d.samples, kind)?;
            unused("data.validation_fraction", &d.validation_fraction, kind)?;
            for (k, v) in [
                ("data.train_images", &d.train_images),
                ("data.train_labels", &d.train_labels),
                ("data.test_images", &d.test_images),
                ("data.test_labels", &d.test_labels),
            ] {
                required(k, v, kind)?;
            }
            at_least(
                "data.train_per_class",
                *required("data.train_per_class", &d.train_per_class, kind)?,
                1,
            )?;
            at_least(
                "data.test_per_class",
                *required("data.test_per_class", &d.test_per_class, kind)?,
                1,
            )?;
            if let Some(f) = d.standardize_floor {
                positive("data.standardize_floor", f)?;
            }
        } else {
            for (k, v) in [
                ("data.train_images", &d.train_images),
                ("data.train_labels", &d.train_labels),
                ("data.test_images", &d.test_images),
                ("data.test_labels", &d.test_labels),
            ] {
                unused(k, v, kind)?;
            }
            unused("data.train_per_class", &d.train_per_class, kind)?;
            unused("data.test_per_class", &d.test_per_class, kind)?;
            unused("data.standardize_floor", &d.standardize_floor, kind)?;
            at_least("data.samples", *required("data.samples", &d.samples, kind)?, 2)?;
            if let Some(f) = d.validation_fraction {
                if !(f > 0.0 && f < 1.0) {
                    return Err(invalid(
                        "data.validation_fraction",
                        format!("must lie in (0, 1), got {f}"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn validate_model(&self, m: &ModelConfig) -> Result<(), Invalid> {
        let kind = self.kind;
        at_least("model.layers", m.layers, 1)?;
        if let Some(a) = m.alpha {
            positive("model.alpha", a)?;
        }
        positive("model.classifier_init", m.classifier_init)?;
        match m.operator {
            OperatorKind::Dense => {
                if kind == ExperimentKind::FashionReduced {
                    return Err(invalid("model.operator", "fashion-reduced needs conv"));
                }
                unused("model.channels", &m.channels, kind)?;
                unused("model.kernel_width", &m.kernel_width, kind)?;
                if !m.pool_after.is_empty() {
                    return Err(invalid("model.pool_after", "pooling needs a conv model"));
                }
                if let Some(w) = m.width {
                    at_least("model.width", w, 1)?;
                }
            }
            OperatorKind::Conv => {
                if kind != ExperimentKind::FashionReduced {
                    return Err(invalid("model.operator", format!("{} runs dense models", kind.name())));
                }
                unused("model.width", &m.width, kind)?;
                at_least("model.channels", *required("model.channels", &m.channels, kind)?, 1)?;
                let w = *required("model.kernel_width", &m.kernel_width, kind)?;
                if w % 2 == 0 {
                    return Err(invalid("model.kernel_width", format!("must be odd, got {w}")));
                }
                if m.bias_mode {
                    return Err(invalid("model.bias_mode", "not supported for conv models"));
                }
                let mut last = 0;
                for &p in &m.pool_after {
                    if p <= last || p > m.layers {
                        return Err(invalid(
                            "model.pool_after",
                            format!("entries must increase within 1..={}, got {:?}", m.layers, m.pool_after),
                        ));
                    }
                    last = p;
                }
            }
        }
        // Dimensions are checked again once the data shape is known.
        let probe = 3;
        m.q.to_set(m.width.unwrap_or(probe))
            .or_else(|e| {
                if e.contains("dimension") {
                    Ok(ConstraintSet::FullSpace)
                } else {
                    Err(e)
                }
            })
            .map_err(|e| invalid("model.q", e))?;
        for c in &m.c {
            c.to_spec(probe)
                .or_else(|e| {
                    if e.contains("dimension") {
                        Ok(SetSpec::Fixed(ConstraintSet::FullSpace))
                    } else {
                        Err(e)
                    }
                })
                .map_err(|e| invalid("model.c", e))?;
        }
        if m.compare_unconstrained && m.c.is_empty() {
            return Err(invalid(
                "model.compare_unconstrained",
                "needs at least one set in model.c",
            ));
        }
        Ok(())
    }
}

fn validate_training(t: &TrainingConfig) -> Result<(), Invalid> {
    positive("training.learning_rate", t.learning_rate)?;
    at_least("training.epochs", t.epochs, 1)?;
    at_least("training.batch_size", t.batch_size, 1)?;
    nonnegative("training.smoothness_gamma", t.smoothness_gamma)?;
    positive("training.operator_lr_scale", t.operator_lr_scale)?;
    nonnegative("training.lr_decay", t.lr_decay)?;
    if let Some(a) = t.target_accuracy {
        if !(0.0..=1.0).contains(&a) {
            return Err(invalid(
                "training.target_accuracy",
                format!("must lie in [0, 1], got {a}"),
            ));
        }
    }
    Ok(())
}

fn validate_environment(e: &EnvironmentConfig) -> Result<(), Invalid> {
    for (i, v) in e.targets.iter().enumerate() {
        if !v.is_finite() {
            return Err(invalid("environment.targets", format!("entry {i} is not finite")));
        }
    }
    for w in &e.walls {
        positive("environment.walls.spacing", w.spacing)?;
        if !(w.x[0] <= w.x[1] && w.y[0] <= w.y[1]) {
            return Err(invalid("environment.walls", "ranges must be [low, high]"));
        }
    }
    positive("environment.halo_radius", e.halo_radius)?;
    positive("environment.min_agent_distance", e.min_agent_distance)?;
    positive("environment.target_tolerance", e.target_tolerance)?;
    at_least("environment.horizon", e.horizon, 2)?;
    if e.start_regions.is_empty() {
        return Err(invalid("environment.start_regions", "needs at least one region"));
    }
    for r in &e.start_regions {
        if (0..4).any(|i| !(r.lo[i] <= r.hi[i])) {
            return Err(invalid("environment.start_regions", "every lo must be <= hi"));
        }
    }
    at_least("environment.train_starts", e.train_starts, 1)?;
    Ok(())
}

fn validate_controller(c: &ControllerConfig) -> Result<(), Invalid> {
    positive("controller.alpha1", c.alpha1)?;
    positive("controller.alpha2", c.alpha2)?;
    nonnegative("controller.alpha3", c.alpha3)?;
    nonnegative("controller.beta1", c.beta1)?;
    nonnegative("controller.beta2", c.beta2)?;
    positive("controller.learning_rate", c.learning_rate)?;
    at_least("controller.batch_size", c.batch_size, 1)?;
    Ok(())
}

fn validate_problem(p: &ProblemConfig) -> Result<(), Invalid> {
    let rows = p.matrix.len();
    at_least("problem.matrix", rows, 1)?;
    let cols = p.matrix[0].len();
    at_least("problem.matrix", cols, 1)?;
    if p.matrix.iter().any(|r| r.len() != cols) {
        return Err(invalid("problem.matrix", "rows must have equal length"));
    }
    if p.x0.len() != cols {
        return Err(invalid(
            "problem.x0",
            format!("has length {}, matrix has {cols} columns", p.x0.len()),
        ));
    }
    p.q.to_set(rows).map_err(|e| invalid("problem.q", e))?;
    p.c.to_set(cols).map_err(|e| invalid("problem.c", e))?;
    if let Some(a) = p.alpha {
        positive("problem.alpha", a)?;
    }
    nonnegative("problem.tol", p.tol)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
kind = "cq-solve"
output_dir = "out"

[problem]
matrix = [[1.0, 0.0], [0.0, 2.0]]
x0 = [3.0, -1.0]

[problem.q]
kind = "box"
lo = [0.0, 0.0]
hi = [1.0, 1.0]
"#;

    #[test]
    fn minimal_problem_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let p = cfg.problem.unwrap();
        assert_eq!((cfg.seed, p.max_iters, p.tol), (0, 10_000, 1e-12));
        assert_eq!(p.c.kind, "full-space");
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let src = MINIMAL.replace("x0 = [3.0, -1.0]", "x0 = [3.0, -1.0]\nstepsize = 0.1");
        let err = ExperimentConfig::parse(&src).unwrap_err();
        assert!(err.contains("line 8") && err.contains("stepsize"), "{err}");
    }

    #[test]
    fn validation_errors_name_key_and_line() {
        let src = MINIMAL.replace("x0 = [3.0, -1.0]", "x0 = [3.0]");
        let err = ExperimentConfig::parse(&src).unwrap_err();
        assert!(err.contains("problem.x0") && err.contains("line 7"), "{err}");

        let src = MINIMAL.replace("hi = [1.0, 1.0]", "hi = [1.0, 1.0]\nradius = 2.0");
        let err = ExperimentConfig::parse(&src).unwrap_err();
        assert!(err.contains("radius"), "{err}");
    }

    #[test]
    fn sections_must_fit_the_kind() {
        let src = format!("{MINIMAL}\n[controller]\nbeta1 = 0.0\n");
        assert!(ExperimentConfig::parse(&src).is_err());
        let src = MINIMAL.replace("cq-solve", "control");
        let err = ExperimentConfig::parse(&src).unwrap_err();
        assert!(err.contains("problem"), "{err}");
    }

    #[test]
    fn set_kinds_resolve() {
        let mut s = SetConfig::bare("ball");
        s.radius = Some(2.0);
        assert_eq!(
            s.to_set(2).unwrap(),
            ConstraintSet::Ball {
                center: vec![0.0, 0.0],
                radius: 2.0
            }
        );
        s.inner = Some(1.0);
        assert!(s.to_set(2).is_err());
        let mut a = SetConfig::bare("input-norm-annulus");
        a.inner_factor = Some(0.9);
        a.outer_factor = Some(1.1);
        assert!(a.to_spec(3).is_ok());
        assert!(a.to_set(3).is_err());
        assert!(SetConfig::bare("sphere").to_set(3).is_err());
    }
}
