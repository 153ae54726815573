use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cqnet::linops::{CertificateMethod, LinearOperator};
use cqnet::net::checkpoint::load_checkpoint;
use cqnet::net::{CqnetModel, SetSpec, Stage};
use cqnet::verify::{run_all, Level, VerifyOptions};
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::output::OutputDir;
use crate::{experiments, CliError, LevelArg};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub baseline: bool,
}

/// Loads and validates the config, then runs it. Nothing is written before
/// the config has been accepted.
pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<Value, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.output_dir = o.clone();
    }
    if opts.baseline && cfg.kind != crate::config::ExperimentKind::Control {
        return Err(CliError::Config(
            "--baseline only applies to control experiments".into(),
        ));
    }
    let mut out = OutputDir::create(&cfg.output_dir)?;
    let started = std::time::Instant::now();
    let summary = experiments::run(&cfg, &mut out, opts.baseline)?;
    eprintln!(
        "{} finished in {:.1} s; wrote {} files to {}",
        cfg.kind.name(),
        started.elapsed().as_secs_f64(),
        out.written().len(),
        out.root().display()
    );
    Ok(summary)
}

/// Runs every property suite, prints the table and fails when any check does.
pub fn cmd_verify(level: LevelArg, seed: u64, step_scale: Option<f64>) -> Result<(), CliError> {
    let level = match level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let mut opts = VerifyOptions::new(level, seed);
    opts.step_scale_override = step_scale;
    let report = run_all(&opts)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<String> = report
            .failures()
            .map(|c| format!("{}: {}", c.suite, c.property))
            .collect();
        Err(CliError::Verify(names.join("; ")))
    }
}

fn method(m: &CertificateMethod) -> String {
    match m {
        CertificateMethod::ClosedFormProp1 { width, c_out } => format!("closed form {width}²·{c_out}"),
        CertificateMethod::PowerIteration {
            iters,
            estimate,
            safety_factor,
        } => format!("power x{iters}: {estimate:.6e}·{safety_factor}"),
    }
}

fn operator(op: &LinearOperator) -> String {
    match op {
        LinearOperator::Dense(m) => format!("dense {}x{}", m.rows(), m.cols()),
        LinearOperator::Conv2d(c) => {
            let k = c.kernels();
            format!(
                "conv {}x{}x{}x{} on {}x{}",
                k.width(),
                k.width(),
                k.c_in(),
                k.c_out(),
                c.height(),
                c.width()
            )
        }
        LinearOperator::AvgPool2d(p) => format!("avg-pool {}x{}x{}", p.channels(), p.height(), p.width()),
        LinearOperator::BiasAugmented { inner, .. } => format!("{} + bias", operator(inner)),
    }
}

fn set_spec(s: &SetSpec) -> String {
    match s {
        SetSpec::Fixed(c) => c.kind_name().to_string(),
        SetSpec::InputNormAnnulus {
            inner_factor,
            outer_factor,
        } => format!("input-norm-annulus [{inner_factor}, {outer_factor}]"),
    }
}

/// Human-readable architecture and certificate listing.
pub fn describe(model: &CqnetModel) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "input dim {}, feature dim {}, outputs {}, bias mode {}",
        model.input_dim(),
        model.feature_dim(),
        model.n_outputs(),
        if model.bias_mode() { "on" } else { "off" }
    );
    let _ = writeln!(s, "parameters {}", model.param_count());
    let mut all_within = true;
    for (k, stage) in model.stages().iter().enumerate() {
        match stage {
            Stage::Cq(l) => {
                let margin = l.margin();
                all_within &= margin <= 2.0;
                let c: Vec<String> = l.c_sets.iter().map(set_spec).collect();
                let _ = writeln!(
                    s,
                    "{k:>3}  cq     {}  Q {}  C [{}]",
                    operator(&l.op),
                    l.q_set.kind_name(),
                    c.join(", ")
                );
                let _ = writeln!(
                    s,
                    "       alpha {:.6e}  recorded lambda <= {:.6e} ({})  alpha*lambda {:.6}{}",
                    l.alpha,
                    l.certificate.lambda_bound,
                    method(&l.certificate.method),
                    margin,
                    if margin <= 2.0 { "" } else { "  EXCEEDS 2" }
                );
            }
            Stage::Embed(e) => {
                let g2 = e.gain * e.gain * e.certificate.lambda_bound;
                all_within &= g2 <= 1.0 + 1e-12;
                let _ = writeln!(
                    s,
                    "{k:>3}  embed  {}  gain {:.6e}  gain²*lambda {:.6}",
                    operator(&e.op),
                    e.gain,
                    g2
                );
            }
            Stage::Pool(p) => {
                let _ = writeln!(s, "{k:>3}  pool   {}", operator(&LinearOperator::AvgPool2d(*p)));
            }
        }
    }
    let _ = writeln!(
        s,
        "classifier {}x{}",
        model.classifier().rows(),
        model.classifier().cols()
    );
    let _ = writeln!(
        s,
        "every stage within its recorded certificate: {}",
        if all_within { "yes" } else { "no" }
    );
    let _ = writeln!(
        s,
        "certified_nonexpansive: {}",
        if model.certified_nonexpansive() { "yes" } else { "no" }
    );
    s
}

pub fn cmd_inspect(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let model = load_checkpoint(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(format!("checkpoint {}\n{}", path.display(), describe(&model)))
}
