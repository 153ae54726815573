//! Seeded property checks over every module, used by `cqnet verify` and the
//! acceptance tests.
//!
//! Each check runs its cases in parallel with one RNG per case (derived from
//! the seed and the property name), so a report does not depend on the
//! thread count.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cq::{cq_solve, sq_distance, sq_distance_grad, CqOptions, SfpProblem};
use crate::error::Result;
use crate::linalg::{dot, norm, sub, DenseMatrix};
use crate::linops::{
    normalize_kernels_prop1, power_iteration_bound, prop1_bound, AvgPool2d, CertificateMethod, Conv2d, KernelTensor,
    LinearOperator, POWER_ITERATIONS,
};
use crate::net::{init_dense, init_kernels, CqnetModel, EmbedSpec, LayerSpec, SetSpec, Stage};
use crate::sets::ConstraintSet;
use crate::train::{penalized_sample_grad, LossFn, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    fn pick(self, fast: usize, full: usize) -> usize {
        match self {
            Level::Fast => fast,
            Level::Full => full,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub level: Level,
    pub seed: u64,
    /// Test hook: after certification, every CQ stepsize in the
    /// nonexpansiveness suite is reset to `scale / λ`.
    #[doc(hidden)]
    pub step_scale_override: Option<f64>,
}

impl VerifyOptions {
    pub fn new(level: Level, seed: u64) -> Self {
        Self {
            level,
            seed,
            step_scale_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub property: String,
    pub cases: usize,
    /// First counterexample in case order.
    pub failure: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub checks: Vec<CheckOutcome>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// Pass/fail table followed by one counterexample per failing check.
    pub fn render(&self) -> String {
        // Property names hold non-ASCII symbols, so pad by chars.
        let pad = |t: &str, w: usize| format!("{t}{}", " ".repeat(w.saturating_sub(t.chars().count())));
        let width = self
            .checks
            .iter()
            .map(|c| c.property.chars().count())
            .max()
            .unwrap_or(0)
            .max(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {} {:>6}  result", "suite", pad("property", width), "cases");
        for c in &self.checks {
            let verdict = if c.passed() { "pass" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{:<8} {} {:>6}  {verdict}",
                c.suite,
                pad(&c.property, width),
                c.cases
            );
        }
        let failed: Vec<_> = self.failures().collect();
        let _ = writeln!(
            s,
            "{} of {} checks passed",
            self.checks.len() - failed.len(),
            self.checks.len()
        );
        for c in failed {
            let _ = writeln!(
                s,
                "\n[{}] {}:\n  {}",
                c.suite,
                c.property,
                c.failure.as_deref().unwrap_or("")
            );
        }
        s
    }
}

/// Runs every suite.
pub fn run_all(opts: &VerifyOptions) -> Result<Report> {
    let mut checks = sets_suite(opts)?;
    checks.extend(linops_suite(opts)?);
    checks.extend(kernel_bound_suite(opts)?);
    checks.extend(cq_suite(opts)?);
    checks.extend(nonexpansive_suite(opts)?);
    checks.extend(gradient_suite(opts)?);
    Ok(Report { checks })
}

fn case_rng(seed: u64, property: &str, case: usize) -> ChaCha8Rng {
    let tag = crc32fast::hash(property.as_bytes()) as u64;
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 24) ^ case as u64)
}

fn check<F>(suite: &'static str, property: String, cases: usize, seed: u64, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Option<String>> + Sync,
{
    let results: Vec<Result<Option<String>>> = (0..cases)
        .into_par_iter()
        .map(|i| f(&mut case_rng(seed, &property, i)))
        .collect();
    let mut failure = None;
    for (i, r) in results.into_iter().enumerate() {
        if let Some(msg) = r? {
            failure = Some(format!("case {i}: {msg}"));
            break;
        }
    }
    Ok(CheckOutcome {
        suite,
        property,
        cases,
        failure,
    })
}

fn fmt_vec(v: &[f64]) -> String {
    let mut s: Vec<String> = v.iter().take(8).map(|x| format!("{x:.6e}")).collect();
    if v.len() > 8 {
        s.push(format!("… ({} entries)", v.len()));
    }
    format!("[{}]", s.join(", "))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------- sets

type SetGen = fn(&mut ChaCha8Rng) -> ConstraintSet;

const SET_KINDS: [(&str, SetGen); 11] = [
    ("orthant", |_| ConstraintSet::NonnegOrthant),
    ("halfspace", |rng| {
        let n = rng.random_range(1..=8);
        // Direction matters, magnitude only conditions the formula.
        let g = gaussian(rng, n);
        let s = rng.random_range(0.5..2.0) / norm(&g);
        ConstraintSet::Halfspace {
            normal: g.iter().map(|v| v * s).collect(),
            offset: rng.random_range(-2.0..2.0),
        }
    }),
    ("box", |rng| {
        let n = rng.random_range(1..=8);
        let lo = uniform(rng, n, 2.0);
        let hi = lo.iter().map(|l| l + rng.random_range(0.0..2.0)).collect();
        ConstraintSet::Box { lo, hi }
    }),
    ("ball", |rng| {
        let n = rng.random_range(1..=8);
        ConstraintSet::Ball {
            center: uniform(rng, n, 1.0),
            radius: rng.random_range(0.0..2.0),
        }
    }),
    ("annulus σ1=0", |rng| {
        let n = rng.random_range(1..=8);
        ConstraintSet::Annulus {
            center: uniform(rng, n, 1.0),
            inner: 0.0,
            outer: rng.random_range(0.1..2.0),
        }
    }),
    ("annulus σ1>0", |rng| {
        let n = rng.random_range(1..=8);
        let inner = rng.random_range(0.2..1.5);
        ConstraintSet::Annulus {
            center: uniform(rng, n, 1.0),
            inner,
            outer: inner + rng.random_range(0.0..1.0),
        }
    }),
    ("exterior ball", |rng| {
        let n = rng.random_range(1..=8);
        ConstraintSet::ExteriorBall {
            center: uniform(rng, n, 1.0),
            radius: rng.random_range(0.2..2.0),
        }
    }),
    ("zero mean", |_| ConstraintSet::ZeroMean),
    ("fixed last entry", |rng| {
        ConstraintSet::FixedLastEntry(rng.random_range(-2.0..2.0))
    }),
    ("min pair distance", |rng| ConstraintSet::MinPairDistance {
        split: rng.random_range(1..=3),
        min_distance: rng.random_range(0.5..2.0),
    }),
    ("full space", |_| ConstraintSet::FullSpace),
];

fn set_dim(set: &ConstraintSet, rng: &mut ChaCha8Rng) -> usize {
    match set {
        ConstraintSet::MinPairDistance { split, .. } => 2 * split,
        _ => set.dim().unwrap_or_else(|| rng.random_range(1..=8)),
    }
}

fn set_center(set: &ConstraintSet) -> Option<&[f64]> {
    match set {
        ConstraintSet::Ball { center, .. }
        | ConstraintSet::Annulus { center, .. }
        | ConstraintSet::ExteriorBall { center, .. } => Some(center),
        _ => None,
    }
}

fn sample_point(set: &ConstraintSet, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = uniform(rng, n, 3.0);
    if let Some(c) = set_center(set) {
        x.iter_mut().zip(c).for_each(|(v, c)| *v += c);
    }
    x
}

/// Distance from `x` to the nearest point where the projection is not
/// differentiable (infinite for linear projections).
fn kink_margin(set: &ConstraintSet, x: &[f64]) -> f64 {
    let dist = |c: &[f64]| norm(&sub(x, c));
    match set {
        ConstraintSet::NonnegOrthant => x.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min),
        ConstraintSet::Halfspace { normal, offset } => (dot(normal, x) - offset).abs() / norm(normal),
        ConstraintSet::Box { lo, hi } => x
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(v, (l, h))| (v - l).abs().min((v - h).abs()))
            .fold(f64::INFINITY, f64::min),
        ConstraintSet::Ball { center, radius } => (dist(center) - radius).abs(),
        ConstraintSet::Annulus { center, inner, outer } => {
            let r = dist(center);
            (r - inner).abs().min((r - outer).abs()).min(r)
        }
        ConstraintSet::ExteriorBall { center, radius } => {
            let r = dist(center);
            (r - radius).abs().min(r)
        }
        ConstraintSet::MinPairDistance { split, min_distance } => {
            let (a, b) = x.split_at(*split);
            let r = norm(&sub(a, b));
            (r - min_distance).abs().min(r)
        }
        ConstraintSet::ZeroMean | ConstraintSet::FixedLastEntry(_) | ConstraintSet::FullSpace => f64::INFINITY,
    }
}

fn rel_close(a: &[f64], b: &[f64], rel: f64, floor: f64) -> bool {
    norm(&sub(a, b)) <= rel * norm(a).max(norm(b)).max(floor)
}

pub fn sets_suite(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let cases = opts.level.pick(1000, 5000);
    let mut out = Vec::new();
    for (name, gen) in SET_KINDS {
        out.push(check("sets", format!("{name}: idempotent"), cases, opts.seed, |rng| {
            let set = gen(rng);
            let n = set_dim(&set, rng);
            let x = sample_point(&set, n, rng);
            let p = set.project(&x)?;
            let pp = set.project(&p)?;
            Ok((!rel_close(&pp, &p, 1e-12, 1.0)).then(|| {
                format!(
                    "x = {}: P(x) = {}, P(P(x)) = {}",
                    fmt_vec(&x),
                    fmt_vec(&p),
                    fmt_vec(&pp)
                )
            }))
        })?);
        out.push(check("sets", format!("{name}: feasible"), cases, opts.seed, |rng| {
            let set = gen(rng);
            let n = set_dim(&set, rng);
            let x = sample_point(&set, n, rng);
            let p = set.project(&x)?;
            let scale = p.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let exact = match &set {
                ConstraintSet::ZeroMean => (p.iter().sum::<f64>() / n as f64).abs() <= 1e-14 * scale,
                ConstraintSet::FixedLastEntry(v) => p[n - 1] == *v,
                _ => true,
            };
            let res = set.residual(&p)?;
            Ok((!(exact && res <= 1e-12 * norm(&p).max(1.0)))
                .then(|| format!("x = {}: P(x) = {} has residual {res:.3e}", fmt_vec(&x), fmt_vec(&p))))
        })?);
        if gen(&mut ChaCha8Rng::seed_from_u64(0)).is_convex() {
            out.push(check(
                "sets",
                format!("{name}: nonexpansive"),
                cases,
                opts.seed,
                |rng| {
                    let set = gen(rng);
                    let n = set_dim(&set, rng);
                    let x = sample_point(&set, n, rng);
                    let y = if rng.random_bool(0.5) {
                        sample_point(&set, n, rng)
                    } else {
                        x.iter().map(|v| v + rng.random_range(-0.01..0.01)).collect()
                    };
                    let gap = norm(&sub(&set.project(&x)?, &set.project(&y)?));
                    let base = norm(&sub(&x, &y));
                    Ok((gap > base + 1e-12).then(|| {
                        format!(
                            "x = {}, y = {}: ‖Px − Py‖ = {gap:.17e} > ‖x − y‖ = {base:.17e}",
                            fmt_vec(&x),
                            fmt_vec(&y)
                        )
                    }))
                },
            )?);
        }
        out.push(check(
            "sets",
            format!("{name}: Jᵀ matches finite differences"),
            cases,
            opts.seed,
            |rng| {
                let set = gen(rng);
                let n = set_dim(&set, rng);
                let mut x = sample_point(&set, n, rng);
                let mut tries = 0;
                while kink_margin(&set, &x) < 1e-3 {
                    tries += 1;
                    if tries > 100 {
                        return Ok(Some(format!("no differentiable point found for {set:?}")));
                    }
                    x = sample_point(&set, n, rng);
                }
                let v = gaussian(rng, n);
                let jt = set.jacobian_transpose_apply(&x, &v)?;
                let h = 1e-6 * norm(&x).max(1.0);
                let mut fd = vec![0.0; n];
                for i in 0..n {
                    let mut xp = x.clone();
                    xp[i] += h;
                    let mut xm = x.clone();
                    xm[i] -= h;
                    fd[i] = dot(&v, &sub(&set.project(&xp)?, &set.project(&xm)?)) / (2.0 * h);
                }
                // ‖v‖ sets the scale: where the projection is locally constant
                // both sides are ~0 and only rounding noise is left.
                Ok((!rel_close(&jt, &fd, 1e-6, 1e-3 * norm(&v))).then(|| {
                    format!(
                        "x = {}, v = {}: Jᵀv = {}, finite differences {}",
                        fmt_vec(&x),
                        fmt_vec(&v),
                        fmt_vec(&jt),
                        fmt_vec(&fd)
                    )
                }))
            },
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- linops

type OpGen = fn(&mut ChaCha8Rng) -> Result<LinearOperator>;

fn random_conv(rng: &mut ChaCha8Rng) -> Result<LinearOperator> {
    let (c_out, c_in) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let w = [1, 3, 5][rng.random_range(0..3)];
    let k = KernelTensor::new(c_out, c_in, w, gaussian(rng, c_out * c_in * w * w))?;
    Ok(LinearOperator::Conv2d(Conv2d::new(
        k,
        rng.random_range(1..=8),
        rng.random_range(1..=8),
    )?))
}

fn random_dense(rng: &mut ChaCha8Rng) -> Result<LinearOperator> {
    let (m, n) = (rng.random_range(1..=10), rng.random_range(1..=10));
    Ok(LinearOperator::Dense(DenseMatrix::new(m, n, gaussian(rng, m * n))?))
}

const OP_KINDS: [(&str, OpGen); 5] = [
    ("dense", random_dense),
    ("conv", random_conv),
    ("pool", |rng| {
        let (h, w) = (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4));
        Ok(LinearOperator::AvgPool2d(AvgPool2d::new(
            rng.random_range(1..=3),
            h,
            w,
        )?))
    }),
    ("bias-augmented dense", |rng| {
        let inner = random_dense(rng)?;
        let bias = gaussian(rng, inner.out_dim());
        LinearOperator::bias_augmented(inner, bias)
    }),
    ("bias-augmented conv", |rng| {
        let inner = random_conv(rng)?;
        let bias = gaussian(rng, inner.out_dim());
        LinearOperator::bias_augmented(inner, bias)
    }),
];

pub fn linops_suite(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let cases = opts.level.pick(200, 1000);
    let mut out = Vec::new();
    for (name, gen) in OP_KINDS {
        out.push(check(
            "linops",
            format!("{name}: ⟨Ax, y⟩ = ⟨x, Aᵀy⟩"),
            cases,
            opts.seed,
            |rng| {
                let op = gen(rng)?;
                let x = gaussian(rng, op.in_dim());
                let y = gaussian(rng, op.out_dim());
                let ax = op.apply(&x)?;
                let aty = op.adjoint_apply(&y)?;
                let (l, r) = (dot(&ax, &y), dot(&x, &aty));
                let tol = 1e-12 * (norm(&ax) * norm(&y)).max(norm(&x) * norm(&aty)).max(1.0);
                Ok(((l - r).abs() > tol).then(|| format!("{}: {l:.17e} vs {r:.17e}", op.kind_name())))
            },
        )?);
        if name == "pool" {
            continue;
        }
        // A(θ)x is linear in θ, so ⟨∂⟨u, A(θ)x⟩/∂θ, δ⟩ = ⟨u, A(δ)x⟩ exactly.
        out.push(check(
            "linops",
            format!("{name}: parameter gradient"),
            cases,
            opts.seed,
            |rng| {
                let mut op = gen(rng)?;
                let x = gaussian(rng, op.in_dim());
                let u = gaussian(rng, op.out_dim());
                let g = op.param_grad(&u, &x)?;
                let delta = gaussian(rng, op.param_count());
                op.set_params(&delta)?;
                let (l, r) = (dot(&g, &delta), dot(&u, &op.apply(&x)?));
                let tol = 1e-12 * (norm(&g) * norm(&delta)).max(1.0);
                Ok(((l - r).abs() > tol).then(|| format!("{l:.17e} vs {r:.17e}")))
            },
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- kernel bound

pub fn kernel_bound_suite(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let cases = opts.level.pick(100, 300);
    let mut out = vec![check(
        "linops",
        "normalized kernels: power estimate ≤ w²·c_out".into(),
        cases,
        opts.seed,
        |rng| {
            let w = if rng.random_bool(0.5) { 3 } else { 5 };
            let (c_out, c_in) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let raw = KernelTensor::new(c_out, c_in, w, gaussian(rng, c_out * c_in * w * w))?;
            let k = normalize_kernels_prop1(&raw)?;
            let op = LinearOperator::Conv2d(Conv2d::new(k, rng.random_range(4..=16), rng.random_range(4..=16))?);
            let cert = power_iteration_bound(&op, POWER_ITERATIONS, rng.random())?;
            let CertificateMethod::PowerIteration { estimate, .. } = cert.method else {
                unreachable!("power_iteration_bound reports its estimate");
            };
            let bound = (w * w * c_out) as f64;
            Ok((estimate > bound * (1.0 + 1e-12))
                .then(|| format!("w = {w}, c_out = {c_out}, c_in = {c_in}: estimate {estimate:.17e} > {bound}")))
        },
    )?];
    out.push(check(
        "linops",
        "certified stepsize for 3×3, 36 channels is 2/324".into(),
        1,
        opts.seed,
        |_| {
            let cert = prop1_bound(3, 36)?;
            Ok((cert.lambda_bound != 324.0 || cert.max_stable_step() != 2.0 / 324.0)
                .then(|| format!("λ = {}, step = {}", cert.lambda_bound, cert.max_stable_step())))
        },
    )?);
    Ok(out)
}

// ---------------------------------------------------------------- CQ

/// A box or ball containing `p` with some slack.
fn set_around(rng: &mut ChaCha8Rng, p: &[f64]) -> ConstraintSet {
    if rng.random_bool(0.5) {
        let lo = p.iter().map(|v| v - rng.random_range(0.05..0.5)).collect();
        let hi = p.iter().map(|v| v + rng.random_range(0.05..0.5)).collect();
        ConstraintSet::Box { lo, hi }
    } else {
        let radius = rng.random_range(0.1..1.0);
        let off = gaussian(rng, p.len());
        let s = 0.5 * radius / norm(&off).max(1e-300);
        let center = p.iter().zip(&off).map(|(pi, o)| pi + s * o).collect();
        ConstraintSet::Ball { center, radius }
    }
}

pub fn cq_suite(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let cases = opts.level.pick(50, 200);
    let planted = check(
        "cq",
        "planted SFP: d² < 1e-6 in 10000 steps, monotone trace".into(),
        cases,
        opts.seed,
        |rng| {
            let (n, m) = (rng.random_range(1..=10), rng.random_range(1..=10));
            let a = LinearOperator::Dense(DenseMatrix::new(m, n, uniform(rng, m * n, 1.0))?);
            let x_star = uniform(rng, n, 2.0);
            let c = set_around(rng, &x_star);
            let q = set_around(rng, &a.apply(&x_star)?);
            let problem = SfpProblem::new(a.clone(), q, c)?;
            let cert = power_iteration_bound(&a, POWER_ITERATIONS, rng.random())?;
            let x0 = uniform(rng, n, 5.0);
            let run = cq_solve(&problem, &x0, &CqOptions::certified(&cert))?;
            if run.final_residual >= 1e-6 {
                return Ok(Some(format!(
                    "n = {n}, m = {m}: d² = {:.3e} after {} steps",
                    run.final_residual, run.iterations_run
                )));
            }
            for (k, w) in run.distances.windows(2).enumerate() {
                if w[1] > w[0] + 1e-12 {
                    return Ok(Some(format!(
                        "d² rose from {:.17e} to {:.17e} at step {}",
                        w[0],
                        w[1],
                        k + 1
                    )));
                }
            }
            Ok(None)
        },
    )?;
    let grad = check(
        "cq",
        "∇d² matches finite differences".into(),
        opts.level.pick(200, 1000),
        opts.seed,
        |rng| {
            let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let a = LinearOperator::Dense(DenseMatrix::new(m, n, uniform(rng, m * n, 1.0))?);
            let q = ConstraintSet::Ball {
                center: uniform(rng, m, 1.0),
                radius: rng.random_range(0.1..0.5),
            };
            let y = uniform(rng, n, 3.0);
            let g = sq_distance_grad(&a, &q, &y)?;
            let h = 1e-6 * norm(&y).max(1.0);
            let mut fd = vec![0.0; n];
            for j in 0..n {
                let mut yp = y.clone();
                yp[j] += h;
                let mut ym = y.clone();
                ym[j] -= h;
                fd[j] = (sq_distance(&a, &q, &yp)? - sq_distance(&a, &q, &ym)?) / (2.0 * h);
            }
            Ok((!rel_close(&g, &fd, 1e-6, 1e-2))
                .then(|| format!("y = {}: {} vs {}", fmt_vec(&y), fmt_vec(&g), fmt_vec(&fd))))
        },
    )?;
    Ok(vec![planted, grad])
}

// ---------------------------------------------------------------- nonexpansiveness

fn random_q(rng: &mut ChaCha8Rng, m: usize) -> ConstraintSet {
    match rng.random_range(0..4) {
        0 => ConstraintSet::NonnegOrthant,
        1 => {
            let lo = uniform(rng, m, 0.5).iter().map(|v| v - 0.5).collect();
            let hi = uniform(rng, m, 0.5).iter().map(|v| v + 0.5).collect();
            ConstraintSet::Box { lo, hi }
        }
        2 => ConstraintSet::Ball {
            center: uniform(rng, m, 0.5),
            radius: rng.random_range(0.0..1.0),
        },
        _ => ConstraintSet::Halfspace {
            normal: gaussian(rng, m),
            offset: rng.random_range(-0.5..0.5),
        },
    }
}

fn random_c(rng: &mut ChaCha8Rng, n: usize) -> Vec<SetSpec> {
    let annulus = |rng: &mut ChaCha8Rng| {
        SetSpec::Fixed(ConstraintSet::Annulus {
            center: vec![0.0; n],
            inner: 0.0,
            outer: rng.random_range(0.5..3.0),
        })
    };
    match rng.random_range(0..4) {
        0 => vec![],
        1 => vec![SetSpec::Fixed(ConstraintSet::ZeroMean)],
        2 => vec![annulus(rng)],
        _ => vec![SetSpec::Fixed(ConstraintSet::ZeroMean), annulus(rng)],
    }
}

/// A random model for the nonexpansiveness check: `depth` CQ layers, dense
/// or convolutional (the latter optionally with an embedding stage and a
/// pooling stage), all stepsizes at or below the certified maximum.
fn certified_random_model(rng: &mut ChaCha8Rng, depth: usize, conv: bool) -> Result<CqnetModel> {
    let alpha = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            1e6
        } else {
            rng.random_range(0.01..0.5)
        }
    };
    let mut stages = Vec::new();
    let features = if conv {
        let c = rng.random_range(2..=3);
        let (mut h, mut w) = (2 * rng.random_range(2..=4), 2 * rng.random_range(2..=4));
        if rng.random_bool(0.5) {
            stages.push(Stage::Embed(EmbedSpec::conv(init_kernels(rng, c, 1, 3)?, h, w)?));
        }
        let pool_after = (depth >= 2 && rng.random_bool(0.5)).then_some(depth / 2);
        for k in 0..depth {
            if pool_after == Some(k) {
                stages.push(Stage::Pool(AvgPool2d::new(c, h, w)?));
                h /= 2;
                w /= 2;
            }
            let op = LinearOperator::Conv2d(Conv2d::new(init_kernels(rng, c, c, 3)?, h, w)?);
            let m = op.out_dim();
            let layer = LayerSpec::new(op, alpha(rng), random_c(rng, c * h * w), random_q(rng, m))?;
            stages.push(Stage::Cq(layer));
        }
        c * h * w
    } else {
        let n = rng.random_range(2..=8);
        for _ in 0..depth {
            let m = rng.random_range(1..=10);
            let op = LinearOperator::Dense(init_dense(rng, m, n)?);
            stages.push(Stage::Cq(LayerSpec::new(
                op,
                alpha(rng),
                random_c(rng, n),
                random_q(rng, m),
            )?));
        }
        n
    };
    let mut model = CqnetModel::new(stages, DenseMatrix::zeros(1, features), false)?;
    model.enforce_certificate()?;
    Ok(model)
}

fn override_steps(model: &mut CqnetModel, scale: f64) {
    for stage in model.stages_mut() {
        if let Stage::Cq(l) = stage {
            l.alpha = scale / l.certificate.lambda_bound;
        }
    }
}

/// First pair (if any) with `‖x_f(d1) − x_f(d2)‖ > ‖d1 − d2‖ (1 + 1e-9)`.
fn find_expanding_pair(model: &CqnetModel, pairs: usize, rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let n = model.input_dim();
    for p in 0..pairs {
        let d1 = uniform(rng, n, 1.0);
        let d2 = if p % 2 == 0 {
            uniform(rng, n, 1.0)
        } else {
            d1.iter().map(|v| v + rng.random_range(-0.01..0.01)).collect()
        };
        let gap = norm(&sub(&model.features(&d1)?, &model.features(&d2)?));
        let base = norm(&sub(&d1, &d2));
        if gap > base * (1.0 + 1e-9) {
            return Ok(Some(format!(
                "pair {p}: d1 = {}, d2 = {}, ‖x_f(d1) − x_f(d2)‖ = {gap:.17e} > ‖d1 − d2‖ = {base:.17e}",
                fmt_vec(&d1),
                fmt_vec(&d2)
            )));
        }
    }
    Ok(None)
}

pub fn nonexpansive_suite(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let models = opts.level.pick(20, 40);
    let pairs = opts.level.pick(1000, 5000);
    let scale = opts.step_scale_override;
    let certified = check(
        "net",
        "certified models are nonexpansive (depth 1–20, dense and conv)".into(),
        models,
        opts.seed,
        |rng| {
            let depth = rng.random_range(1..=20);
            let conv = rng.random_bool(0.5);
            let mut model = certified_random_model(rng, depth, conv)?;
            if let Some(s) = scale {
                override_steps(&mut model, s);
            }
            let found = find_expanding_pair(&model, pairs, rng)?;
            let kind = if conv { "conv" } else { "dense" };
            Ok(found.map(|msg| format!("{kind} model, depth {depth}: {msg}")))
        },
    )?;
    // The check above must be able to fail: one layer at α = 4/λ expands.
    let power = check(
        "net",
        "α = 4/λ model is caught expanding".into(),
        1,
        opts.seed,
        |rng| {
            let n = 4;
            let op = LinearOperator::Dense(init_dense(rng, 6, n)?);
            let layer = LayerSpec::new(op, 1.0, vec![], ConstraintSet::NonnegOrthant)?;
            let mut model = CqnetModel::new(vec![Stage::Cq(layer)], DenseMatrix::zeros(1, n), false)?;
            model.enforce_certificate()?;
            override_steps(&mut model, 4.0);
            let found = find_expanding_pair(&model, pairs, rng)?;
            Ok(found.is_none().then(|| format!("no expanding pair among {pairs}")))
        },
    )?;
    Ok(vec![certified, power])
}

// ---------------------------------------------------------------- gradients

fn flat_objective(model: &CqnetModel, params: &[f64], d: &[f64], target: &Target, gamma: f64) -> Result<f64> {
    let mut m = model.clone();
    m.set_params(params)?;
    Ok(penalized_sample_grad(&m, LossFn::SoftmaxCrossEntropy, d, target, gamma)?.0)
}

/// Per-parameter comparison of the backward pass with central differences of
/// loss + smoothness penalty.
fn gradient_mismatch(model: &CqnetModel, d: &[f64], target: &Target, gamma: f64) -> Result<Option<String>> {
    let (_, grads) = penalized_sample_grad(model, LossFn::SoftmaxCrossEntropy, d, target, gamma)?;
    let g = grads.flat();
    let p = model.params();
    for j in 0..p.len() {
        let h = 1e-6 * (1.0 + p[j].abs());
        let mut pp = p.clone();
        pp[j] += h;
        let mut pm = p.clone();
        pm[j] -= h;
        let fd =
            (flat_objective(model, &pp, d, target, gamma)? - flat_objective(model, &pm, d, target, gamma)?) / (2.0 * h);
        let rel = (fd - g[j]).abs() / g[j].abs().max(fd.abs()).max(1e-4);
        if rel >= 1e-5 {
            return Ok(Some(format!(
                "parameter {j}: backward {:.12e}, finite differences {fd:.12e}",
                g[j]
            )));
        }
    }
    Ok(None)
}

fn gradient_dense_model(rng: &mut ChaCha8Rng) -> Result<CqnetModel> {
    let n = 4;
    let cs = [
        vec![],
        vec![SetSpec::Fixed(ConstraintSet::ZeroMean)],
        vec![SetSpec::InputNormAnnulus {
            inner_factor: 0.9,
            outer_factor: 1.1,
        }],
    ];
    let mut stages = Vec::new();
    for c in cs {
        let m = 5;
        let op = LinearOperator::Dense(init_dense(rng, m, n)?);
        let q = random_q(rng, m);
        stages.push(Stage::Cq(LayerSpec::new(op, rng.random_range(0.1..0.6), c, q)?));
    }
    CqnetModel::new(stages, DenseMatrix::new(3, n, uniform(rng, 3 * n, 1.0))?, false)
}

fn gradient_conv_model(rng: &mut ChaCha8Rng) -> Result<CqnetModel> {
    let (c, h, w) = (2, 4, 4);
    let mut stages = vec![Stage::Embed(EmbedSpec::conv(init_kernels(rng, c, 1, 3)?, h, w)?)];
    for _ in 0..2 {
        let op = LinearOperator::Conv2d(Conv2d::new(init_kernels(rng, c, c, 3)?, h, w)?);
        let q = random_q(rng, op.out_dim());
        stages.push(Stage::Cq(LayerSpec::new(
            op,
            rng.random_range(0.05..0.3),
            random_c(rng, c * h * w),
            q,
        )?));
    }
    stages.push(Stage::Pool(AvgPool2d::new(c, h, w)?));
    CqnetModel::new(
        stages,
        DenseMatrix::new(3, c * h * w / 4, uniform(rng, 3 * c * h * w / 4, 1.0))?,
        false,
    )
}

type ModelBuilder = fn(&mut ChaCha8Rng) -> Result<CqnetModel>;

pub fn gradient_suite(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let cases = opts.level.pick(4, 20);
    let builders: [(&str, ModelBuilder); 2] = [
        ("3-layer dense", gradient_dense_model),
        ("2-layer conv", gradient_conv_model),
    ];
    builders
        .into_iter()
        .map(|(name, build)| {
            check(
                "train",
                format!("{name}: ∇(loss + penalty) matches finite differences"),
                cases,
                opts.seed,
                |rng| {
                    let model = build(rng)?;
                    let d = uniform(rng, model.input_dim(), 1.0);
                    let target = Target::Class(rng.random_range(0..3));
                    gradient_mismatch(&model, &d, &target, 0.3)
                },
            )
        })
        .collect()
}
