//! Two agents moving in the plane under CQ dynamics.
//!
//! The state `x = (x_a, x_b) ∈ R⁴` stacks both agent positions. One step is
//!
//! ```text
//! x⁺ = P_C( x − α1 (x − P_{Q1} x)
//!            − α2 Σ_agents Σ_points (p − P_{Q2,i} p)
//!            + α3 A_tᵀ (Id − P_{Q3}) A_t x )
//! ```
//!
//! with `Q1` the ε-ball around the stacked target, `Q2,i` the exterior of the
//! unit halo around obstacle point `i` (applied to each agent in the plane),
//! `Q3` the nonnegative orthant and `C` the set of states whose agents are at
//! least `δ` apart. The learned term enters with a plus sign. Every state of
//! every rollout is in `C` by construction.
//!
//! Controllers are trained by reverse mode through the whole rollout on
//! `β1 Σ_t ‖x_{t+1} − x_t‖ + β2 ‖x_T − x_target‖²`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cq::SfpTerm;
use crate::error::{check_dim, Error, Result};
use crate::export;
use crate::linalg::{axpy, distance, norm, sub, DenseMatrix};
use crate::linops::LinearOperator;
use crate::net::{cq_term_vjp, init_dense};
use crate::sets::ConstraintSet;

pub const STATE_DIM: usize = 4;
pub const LEARNED_ROWS: usize = 6;

/// Axis-aligned box of joint starting states in R⁴.
#[derive(Debug, Clone, PartialEq)]
pub struct StartRegion {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    /// `(x_a, x_b)` targets, stacked.
    pub targets: [f64; 4],
    pub obstacle_points: Vec<[f64; 2]>,
    pub halo_radius: f64,
    pub min_agent_distance: f64,
    pub target_tolerance: f64,
    pub start_regions: Vec<StartRegion>,
    pub horizon: usize,
}

impl Environment {
    /// Two walls of gridpoints with a gap around `y = 0`. Agent a starts top
    /// left and must reach `(10, 2)`; agent b starts bottom left and must
    /// reach `(10, −2)`.
    ///
    /// The scene sits right of the origin on purpose. The learned term
    /// `α3 A_tᵀ min(A_t x, 0)` always has a nonnegative inner product with
    /// `x`, so it can only push away from the origin; with the walls centred
    /// on the origin it can never help the agents forward.
    pub fn corridor() -> Self {
        let mut obstacle_points = Vec::new();
        for i in 0..5 {
            let x = 4.0 + 0.5 * i as f64;
            for j in 0..10 {
                let y = 1.5 + 0.5 * j as f64;
                obstacle_points.push([x, y]);
                obstacle_points.push([x, -y]);
            }
        }
        Self {
            targets: [10.0, 2.0, 10.0, -2.0],
            obstacle_points,
            halo_radius: 1.0,
            min_agent_distance: 2.0,
            target_tolerance: 0.1,
            start_regions: vec![StartRegion {
                lo: [-2.0, 2.0, -2.0, -4.0],
                hi: [0.0, 4.0, 0.0, -2.0],
            }],
            horizon: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.halo_radius > 0.0) {
            return bad(format!("halo radius must be positive, got {}", self.halo_radius));
        }
        if !(self.min_agent_distance > 0.0) {
            return bad(format!(
                "agent distance must be positive, got {}",
                self.min_agent_distance
            ));
        }
        if !(self.target_tolerance >= 0.0) {
            return bad(format!("target tolerance must be >= 0, got {}", self.target_tolerance));
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        for r in &self.start_regions {
            if r.lo.iter().zip(&r.hi).any(|(l, h)| !(l <= h)) {
                return bad("start region needs lo <= hi".into());
            }
        }
        Ok(())
    }

    fn q1(&self) -> ConstraintSet {
        ConstraintSet::Ball {
            center: self.targets.to_vec(),
            radius: self.target_tolerance,
        }
    }

    fn c(&self) -> ConstraintSet {
        ConstraintSet::MinPairDistance {
            split: 2,
            min_distance: self.min_agent_distance,
        }
    }

    fn halo(&self, p: &[f64; 2]) -> ConstraintSet {
        ConstraintSet::ExteriorBall {
            center: p.to_vec(),
            radius: self.halo_radius,
        }
    }

    pub fn target_distance(&self, x: &[f64]) -> f64 {
        distance(x, &self.targets)
    }

    /// Smallest distance from either agent to any obstacle point.
    pub fn min_obstacle_distance(&self, x: &[f64]) -> f64 {
        self.obstacle_points
            .iter()
            .flat_map(|p| [distance(&x[..2], p), distance(&x[2..], p)])
            .fold(f64::INFINITY, f64::min)
    }

    /// Uniform draws from the start regions (cycled), rejecting infeasible pairs.
    pub fn sample_starts(&self, n: usize, seed: u64) -> Result<Vec<[f64; 4]>> {
        if self.start_regions.is_empty() {
            return Err(Error::InvalidParameter("no start regions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * (n + 1) {
                return Err(Error::InvalidParameter("start regions admit no feasible pair".into()));
            }
            let r = &self.start_regions[out.len() % self.start_regions.len()];
            let s: [f64; 4] = std::array::from_fn(|i| {
                if r.lo[i] == r.hi[i] {
                    r.lo[i]
                } else {
                    rng.random_range(r.lo[i]..r.hi[i])
                }
            });
            if distance(&s[..2], &s[2..]) >= self.min_agent_distance {
                out.push(s);
            }
        }
        Ok(out)
    }

    /// The fixed terms of one step as generic multi-set CQ terms: target
    /// attraction in R⁴, then one halo term per agent and obstacle point with
    /// a selection operator picking out that agent.
    pub fn fixed_terms(&self, alpha1: f64, alpha2: f64) -> Vec<SfpTerm> {
        let mut terms = vec![SfpTerm {
            weight: alpha1,
            op: None,
            set: self.q1(),
        }];
        for agent in 0..2 {
            let mut sel = DenseMatrix::zeros(2, STATE_DIM);
            sel.set(0, 2 * agent, 1.0);
            sel.set(1, 2 * agent + 1, 1.0);
            for p in &self.obstacle_points {
                terms.push(SfpTerm {
                    weight: alpha2,
                    op: Some(LinearOperator::Dense(sel.clone())),
                    set: self.halo(p),
                });
            }
        }
        terms
    }

    pub fn constraint_set(&self) -> ConstraintSet {
        self.c()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    /// `A_t` for `t = 1..T−1`, each `6 × 4`.
    pub a: Vec<DenseMatrix>,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Controller {
    /// Default weights and stepsizes with random `A_t` whose spectral
    /// estimate is about 1.
    pub fn new_random(horizon: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (1..horizon)
            .map(|_| init_dense(&mut rng, LEARNED_ROWS, STATE_DIM))
            .collect::<Result<_>>()?;
        Ok(Self {
            a,
            beta1: 0.15,
            beta2: 1.0,
            alpha1: 0.1,
            alpha2: 0.5,
            alpha3: 0.05,
        })
    }

    /// The CQ-only baseline: no learned term and no path-length weight.
    pub fn baseline(horizon: usize) -> Self {
        Self {
            a: vec![DenseMatrix::zeros(LEARNED_ROWS, STATE_DIM); horizon.saturating_sub(1)],
            beta1: 0.0,
            beta2: 1.0,
            alpha1: 0.1,
            alpha2: 0.5,
            alpha3: 0.0,
        }
    }

    pub fn validate(&self, env: &Environment) -> Result<()> {
        check_dim("Controller steps", env.horizon - 1, self.a.len())?;
        for a in &self.a {
            check_dim("Controller A_t rows", LEARNED_ROWS, a.rows())?;
            check_dim("Controller A_t cols", STATE_DIM, a.cols())?;
        }
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha3 >= 0.0 && self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return Err(Error::InvalidParameter("alpha3, beta1, beta2 must be >= 0".into()));
        }
        Ok(())
    }
}

struct StepTape {
    x: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
}

/// Adds `weight·(p − P(p))` for every halo containing agent `agent`.
fn add_obstacle_terms(env: &Environment, x: &[f64], agent: usize, weight: f64, acc: &mut [f64]) -> Result<()> {
    let p = &x[2 * agent..2 * agent + 2];
    for o in &env.obstacle_points {
        // Outside the halo the residual is exactly zero; skipping keeps the
        // accumulated sum bitwise identical.
        if distance(p, o) >= env.halo_radius {
            continue;
        }
        let proj = env.halo(o).project(p)?;
        acc[2 * agent] += weight * (p[0] - proj[0]);
        acc[2 * agent + 1] += weight * (p[1] - proj[1]);
    }
    Ok(())
}

fn step_forward(env: &Environment, ctrl: &Controller, t: usize, x: &[f64]) -> Result<(Vec<f64>, StepTape)> {
    check_dim("dynamics_step", STATE_DIM, x.len())?;
    if t < 1 || t >= env.horizon {
        return Err(Error::InvalidParameter(format!(
            "timestep {t} outside 1..{}",
            env.horizon
        )));
    }
    let a = &ctrl.a[t - 1];
    let mut step = vec![0.0; STATE_DIM];
    let r1 = sub(x, &env.q1().project(x)?);
    axpy(ctrl.alpha1, &r1, &mut step);
    for agent in 0..2 {
        add_obstacle_terms(env, x, agent, ctrl.alpha2, &mut step)?;
    }
    let mut u = sub(x, &step);
    let z = a.matvec(x)?;
    let r: Vec<f64> = z.iter().map(|v| v.min(0.0)).collect();
    if ctrl.alpha3 != 0.0 {
        axpy(ctrl.alpha3, &a.matvec_t(&r)?, &mut u);
    }
    let next = env.c().project(&u)?;
    Ok((next, StepTape { x: x.to_vec(), z, r, u }))
}

/// One step of the dynamics at timestep `t ∈ 1..T`.
pub fn dynamics_step(env: &Environment, ctrl: &Controller, t: usize, x: &[f64]) -> Result<Vec<f64>> {
    Ok(step_forward(env, ctrl, t, x)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    /// `x_1 … x_T`.
    pub states: Vec<[f64; 4]>,
    /// `‖x_{t+1} − x_t‖` for each step.
    pub running_costs: Vec<f64>,
    /// `‖x_a − x_b‖ ≥ δ − 1e-10` for each state.
    pub feasible: Vec<bool>,
    pub terminal_distance: f64,
    pub objective: f64,
}

impl ControlTrajectory {
    pub fn total_running_cost(&self) -> f64 {
        self.running_costs.iter().sum()
    }

    pub fn reached_target(&self, env: &Environment) -> bool {
        self.terminal_distance <= env.target_tolerance
    }

    pub fn csv_rows(&self, env: &Environment, start: usize) -> Vec<Vec<String>> {
        self.states
            .iter()
            .enumerate()
            .map(|(t, x)| {
                vec![
                    start.to_string(),
                    (t + 1).to_string(),
                    export::float(x[0]),
                    export::float(x[1]),
                    export::float(x[2]),
                    export::float(x[3]),
                    export::float(distance(&x[..2], &x[2..])),
                    export::float(env.target_distance(x)),
                    export::float(env.min_obstacle_distance(x)),
                ]
            })
            .collect()
    }

    pub const HEADER: [&'static str; 9] = [
        "start",
        "t",
        "x_a1",
        "x_a2",
        "x_b1",
        "x_b2",
        "dist_agents",
        "dist_target",
        "min_dist_obstacle",
    ];

    pub fn write_csv<W: Write>(&self, env: &Environment, out: W) -> Result<()> {
        export::write_rows(out, &Self::HEADER, self.csv_rows(env, 0))
    }
}

fn to_array(v: &[f64]) -> [f64; 4] {
    [v[0], v[1], v[2], v[3]]
}

fn run(env: &Environment, ctrl: &Controller, start: &[f64; 4]) -> Result<(ControlTrajectory, Vec<StepTape>)> {
    env.validate()?;
    ctrl.validate(env)?;
    let gap = distance(&start[..2], &start[2..]);
    if gap < env.min_agent_distance {
        return Err(Error::InfeasibleStart(format!(
            "agents are {gap} apart, need at least {}",
            env.min_agent_distance
        )));
    }
    let mut x = start.to_vec();
    let mut states = vec![*start];
    let mut tapes = Vec::with_capacity(env.horizon - 1);
    let mut running_costs = Vec::with_capacity(env.horizon - 1);
    for t in 1..env.horizon {
        let (next, tape) = step_forward(env, ctrl, t, &x)?;
        running_costs.push(distance(&next, &x));
        tapes.push(tape);
        states.push(to_array(&next));
        x = next;
    }
    let feasible = states
        .iter()
        .map(|s| distance(&s[..2], &s[2..]) >= env.min_agent_distance - 1e-10)
        .collect();
    let terminal_distance = env.target_distance(&x);
    let objective = ctrl.beta1 * running_costs.iter().sum::<f64>() + ctrl.beta2 * terminal_distance * terminal_distance;
    Ok((
        ControlTrajectory {
            states,
            running_costs,
            feasible,
            terminal_distance,
            objective,
        },
        tapes,
    ))
}

/// Simulates `T − 1` steps from `start`.
pub fn rollout(env: &Environment, ctrl: &Controller, start: &[f64; 4]) -> Result<ControlTrajectory> {
    Ok(run(env, ctrl, start)?.0)
}

/// Objective of one rollout and its gradient with respect to every `A_t`.
pub fn objective_and_grad(
    env: &Environment,
    ctrl: &Controller,
    start: &[f64; 4],
) -> Result<(ControlTrajectory, Vec<DenseMatrix>)> {
    let (traj, tapes) = run(env, ctrl, start)?;
    let mut grads = vec![DenseMatrix::zeros(LEARNED_ROWS, STATE_DIM); tapes.len()];
    let states = &traj.states;
    let last = states.len() - 1;
    // ∂/∂x_T of β2‖x_T − target‖².
    let mut x_bar: Vec<f64> = states[last]
        .iter()
        .zip(&env.targets)
        .map(|(x, t)| 2.0 * ctrl.beta2 * (x - t))
        .collect();
    let c = env.c();
    let q1 = env.q1();
    let q3 = ConstraintSet::NonnegOrthant;
    for k in (0..tapes.len()).rev() {
        // x_{k+1} = step(x_k); running cost ‖x_{k+1} − x_k‖.
        let d = sub(&states[k + 1], &states[k]);
        let dn = norm(&d);
        if dn > 0.0 && ctrl.beta1 != 0.0 {
            axpy(ctrl.beta1 / dn, &d, &mut x_bar);
        }
        let tape = &tapes[k];
        let u_bar = c.jacobian_transpose_apply(&tape.u, &x_bar)?;
        // u = x − α1 (x − P_Q1 x) − α2 Σ (p − P p) + α3 Aᵀ r.
        let mut next_bar = u_bar.clone();
        let j1 = q1.jacobian_transpose_apply(&tape.x, &u_bar)?;
        for i in 0..STATE_DIM {
            next_bar[i] -= ctrl.alpha1 * (u_bar[i] - j1[i]);
        }
        for agent in 0..2 {
            let p = &tape.x[2 * agent..2 * agent + 2];
            let v = &u_bar[2 * agent..2 * agent + 2];
            for o in &env.obstacle_points {
                if distance(p, o) >= env.halo_radius {
                    continue;
                }
                let jo = env.halo(o).jacobian_transpose_apply(p, v)?;
                next_bar[2 * agent] -= ctrl.alpha2 * (v[0] - jo[0]);
                next_bar[2 * agent + 1] -= ctrl.alpha2 * (v[1] - jo[1]);
            }
        }
        if ctrl.alpha3 != 0.0 {
            let g_bar: Vec<f64> = u_bar.iter().map(|v| ctrl.alpha3 * v).collect();
            let op = LinearOperator::Dense(ctrl.a[k].clone());
            let (pg, x_term) = cq_term_vjp(&op, &q3, &tape.x, &tape.z, &tape.r, &g_bar)?;
            grads[k].data_mut().copy_from_slice(&pg);
            axpy(1.0, &x_term, &mut next_bar);
        }
        if dn > 0.0 && ctrl.beta1 != 0.0 {
            axpy(-ctrl.beta1 / dn, &d, &mut next_bar);
        }
        x_bar = next_bar;
    }
    Ok((traj, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Starts per update; rollouts within a batch run concurrently.
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle of the starts.
    pub seed: u64,
}

impl Default for ControlTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 300,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl ControlTrainConfig {
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
        Ok(())
    }
}

/// Summary of the controller over all starts after `epoch` epochs (epoch 0
/// is the untrained controller).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlEpoch {
    pub epoch: usize,
    pub mean_objective: f64,
    pub max_target_distance: f64,
    pub reached: usize,
}

fn rollout_all(env: &Environment, ctrl: &Controller, starts: &[[f64; 4]]) -> Result<Vec<ControlTrajectory>> {
    starts.par_iter().map(|s| rollout(env, ctrl, s)).collect()
}

fn summarize(epoch: usize, env: &Environment, trajs: &[ControlTrajectory]) -> ControlEpoch {
    ControlEpoch {
        epoch,
        mean_objective: trajs.iter().map(|t| t.objective).sum::<f64>() / trajs.len() as f64,
        max_target_distance: trajs.iter().map(|t| t.terminal_distance).fold(0.0, f64::max),
        reached: trajs.iter().filter(|t| t.reached_target(env)).count(),
    }
}

/// Minibatch SGD on the objective over `starts`, shuffled every epoch.
/// Rollouts within a batch run in parallel and their gradients are summed in
/// batch order, so results do not depend on the thread count.
pub fn train_controller(
    env: &Environment,
    ctrl: &mut Controller,
    starts: &[[f64; 4]],
    config: &ControlTrainConfig,
    mut observe: impl FnMut(&ControlEpoch),
) -> Result<Vec<ControlEpoch>> {
    if starts.is_empty() {
        return Err(Error::InvalidParameter("no training starts".into()));
    }
    config.validate()?;
    env.validate()?;
    ctrl.validate(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..starts.len()).collect();
    let first = summarize(0, env, &rollout_all(env, ctrl, starts)?);
    observe(&first);
    let mut log = vec![first];
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let grads: Vec<Vec<DenseMatrix>> = batch
                .par_iter()
                .map(|&i| objective_and_grad(env, ctrl, &starts[i]).map(|p| p.1))
                .collect::<Result<_>>()?;
            let scale = config.learning_rate / batch.len() as f64;
            for g in &grads {
                if g.iter().any(|m| !crate::linalg::all_finite(m.data())) {
                    return Err(Error::NonFiniteGradient("controller".into()));
                }
            }
            for g in &grads {
                for (a, ga) in ctrl.a.iter_mut().zip(g) {
                    axpy(-scale, ga.data(), a.data_mut());
                }
            }
        }
        let rec = summarize(epoch, env, &rollout_all(env, ctrl, starts)?);
        observe(&rec);
        log.push(rec);
    }
    Ok(log)
}
