//! The CQ algorithm: projected gradient descent on `d²(x) = ½‖(Id − P_Q)Ax‖²`
//! restricted to `C`.

use std::io::Write;

use crate::error::{check_dim, Error, Result};
use crate::export;
use crate::linalg::{axpy, dot, sub};
use crate::linops::{LinearOperator, SpectralCertificate};
use crate::sets::ConstraintSet;

/// One summand `α_i B_iᵀ(Id − P_{Q_i})B_i x` of a multi-set step. `op = None`
/// means `B_i` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SfpTerm {
    pub weight: f64,
    pub op: Option<LinearOperator>,
    pub set: ConstraintSet,
}

impl SfpTerm {
    fn as_ref(&self) -> TermRef<'_> {
        TermRef {
            weight: self.weight,
            op: self.op.as_ref(),
            set: &self.set,
        }
    }
}

#[derive(Clone, Copy)]
struct TermRef<'a> {
    weight: f64,
    op: Option<&'a LinearOperator>,
    set: &'a ConstraintSet,
}

impl TermRef<'_> {
    fn in_dim(&self, fallback: usize) -> usize {
        self.op.map_or(fallback, LinearOperator::in_dim)
    }

    /// `(Id − P)(B x)` and `Bᵀ` of it.
    fn residual_and_grad(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let bx = match self.op {
            Some(op) => op.apply(x)?,
            None => x.to_vec(),
        };
        let r = sub(&bx, &self.set.project(&bx)?);
        let g = match self.op {
            Some(op) => op.adjoint_apply(&r)?,
            None => r.clone(),
        };
        Ok((r, g))
    }
}

/// Split-feasibility problem: find `x ∈ C` with `A x ∈ Q`, optionally with
/// further sets `B_i x ∈ Q_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SfpProblem {
    pub op: LinearOperator,
    pub q: ConstraintSet,
    pub c: ConstraintSet,
    pub extra_terms: Vec<SfpTerm>,
}

impl SfpProblem {
    pub fn new(op: LinearOperator, q: ConstraintSet, c: ConstraintSet) -> Result<Self> {
        let p = Self {
            op,
            q,
            c,
            extra_terms: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_term(mut self, term: SfpTerm) -> Result<Self> {
        self.extra_terms.push(term);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.op.in_dim();
        if let Some(d) = self.q.dim() {
            check_dim("SfpProblem Q", self.op.out_dim(), d)?;
        }
        if let Some(d) = self.c.dim() {
            check_dim("SfpProblem C", n, d)?;
        }
        self.q.validate()?;
        self.c.validate()?;
        for t in &self.extra_terms {
            if !(t.weight > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "term weight must be positive, got {}",
                    t.weight
                )));
            }
            if let Some(op) = &t.op {
                check_dim("SfpProblem term", n, op.in_dim())?;
            }
            t.set.validate()?;
        }
        Ok(())
    }

    fn terms(&self, alpha: f64) -> Vec<TermRef<'_>> {
        let mut terms = vec![TermRef {
            weight: alpha,
            op: Some(&self.op),
            set: &self.q,
        }];
        terms.extend(self.extra_terms.iter().map(SfpTerm::as_ref));
        terms
    }
}

/// `½‖P_Q(A y) − A y‖²`.
pub fn sq_distance(op: &LinearOperator, q: &ConstraintSet, y: &[f64]) -> Result<f64> {
    let ay = op.apply(y)?;
    let r = sub(&ay, &q.project(&ay)?);
    Ok(0.5 * dot(&r, &r))
}

/// `Aᵀ(Id − P_Q)(A y)`.
pub fn sq_distance_grad(op: &LinearOperator, q: &ConstraintSet, y: &[f64]) -> Result<Vec<f64>> {
    let ay = op.apply(y)?;
    let r = sub(&ay, &q.project(&ay)?);
    op.adjoint_apply(&r)
}

fn multistep(x: &[f64], terms: &[TermRef<'_>], c: &ConstraintSet) -> Result<Vec<f64>> {
    let mut step = vec![0.0; x.len()];
    for t in terms {
        check_dim("cq_multistep", x.len(), t.in_dim(x.len()))?;
        let (_, g) = t.residual_and_grad(x)?;
        axpy(t.weight, &g, &mut step);
    }
    c.project(&sub(x, &step))
}

/// One composite step `P_C(x − Σ α_i B_iᵀ(Id − P_{Q_i})B_i x)`.
pub fn cq_multistep(x: &[f64], terms: &[SfpTerm], c: &ConstraintSet) -> Result<Vec<f64>> {
    let refs: Vec<_> = terms.iter().map(SfpTerm::as_ref).collect();
    multistep(x, &refs, c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqOptions {
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub keep_iterates: bool,
}

impl CqOptions {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            max_iters: 10_000,
            tol: 1e-12,
            keep_iterates: false,
        }
    }

    /// Uses the midpoint stepsize `1/λ`.
    pub fn certified(cert: &SpectralCertificate) -> Self {
        Self::new(cert.default_step())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqRunReport {
    /// `x_0, x_1, …` when requested.
    pub iterates: Option<Vec<Vec<f64>>>,
    /// Objective at every visited iterate, starting with `x_0`.
    pub distances: Vec<f64>,
    pub feasibility_c: Vec<f64>,
    pub feasibility_q: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub final_residual: f64,
    pub solution: Vec<f64>,
}

impl CqRunReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = (0..self.distances.len()).map(|k| {
            vec![
                k.to_string(),
                export::float(self.distances[k]),
                export::float(self.feasibility_c[k]),
                export::float(self.feasibility_q[k]),
            ]
        });
        export::write_rows(out, &["iter", "sq_distance", "feasibility_C", "feasibility_Q"], rows)
    }
}

/// Objective of the multi-set problem, scaled so that one CQ step is a
/// gradient step of length `alpha` on it: `d²(x) + Σ (α_i/α)·½‖(Id − P_{Q_i})B_i x‖²`.
fn objective(p: &SfpProblem, alpha: f64, x: &[f64]) -> Result<f64> {
    let mut f = sq_distance(&p.op, &p.q, x)?;
    for t in &p.extra_terms {
        let (r, _) = t.as_ref().residual_and_grad(x)?;
        f += t.weight / alpha * 0.5 * dot(&r, &r);
    }
    Ok(f)
}

/// Runs `x_{k+1} = P_C(x_k − α Aᵀ(Id − P_Q)A x_k)` until `d²(x_k) ≤ tol` or
/// `max_iters` steps. The starting point is projected onto `C` first so every
/// recorded iterate lies in `C`.
pub fn cq_solve(p: &SfpProblem, x0: &[f64], opts: &CqOptions) -> Result<CqRunReport> {
    check_dim("cq_solve", p.op.in_dim(), x0.len())?;
    if !(opts.alpha > 0.0) || !opts.alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "stepsize must be positive, got {}",
            opts.alpha
        )));
    }
    let terms = p.terms(opts.alpha);
    let mut x = p.c.project(x0)?;
    let mut report = CqRunReport {
        iterates: opts.keep_iterates.then(Vec::new),
        distances: Vec::new(),
        feasibility_c: Vec::new(),
        feasibility_q: Vec::new(),
        iterations_run: 0,
        converged: false,
        final_residual: f64::NAN,
        solution: Vec::new(),
    };
    loop {
        let d = objective(p, opts.alpha, &x)?;
        report.distances.push(d);
        report.feasibility_c.push(p.c.distance(&x)?);
        report.feasibility_q.push(p.q.distance(&p.op.apply(&x)?)?);
        if let Some(it) = report.iterates.as_mut() {
            it.push(x.clone());
        }
        if d <= opts.tol {
            report.converged = true;
        }
        if report.converged || report.iterations_run == opts.max_iters {
            report.final_residual = d;
            break;
        }
        x = multistep(&x, &terms, &p.c)?;
        report.iterations_run += 1;
    }
    report.solution = x;
    Ok(report)
}
