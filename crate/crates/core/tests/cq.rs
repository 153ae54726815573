use cqnet::cq::{cq_multistep, cq_solve, sq_distance, sq_distance_grad, CqOptions, SfpProblem, SfpTerm};
use cqnet::linalg::{sub, DenseMatrix};
use cqnet::linops::{power_iteration_bound, LinearOperator};
use cqnet::sets::ConstraintSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

/// A set of random kind (box or ball) that contains `p` with some slack.
fn set_around(rng: &mut ChaCha8Rng, p: &[f64]) -> ConstraintSet {
    if rng.random_bool(0.5) {
        let lo = p.iter().map(|v| v - rng.random_range(0.05..0.5)).collect();
        let hi = p.iter().map(|v| v + rng.random_range(0.05..0.5)).collect();
        ConstraintSet::boxed(lo, hi).unwrap()
    } else {
        let r = rng.random_range(0.1..1.0);
        let off = random_vec(rng, p.len(), 1.0);
        let n = off.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = p.iter().zip(&off).map(|(pi, o)| pi + 0.5 * r * o / n).collect();
        ConstraintSet::ball(c, r).unwrap()
    }
}

#[test]
fn planted_instances_converge_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for inst in 0..50 {
        let n = rng.random_range(1..=10);
        let m = rng.random_range(1..=10);
        let a = LinearOperator::Dense(DenseMatrix::new(m, n, random_vec(&mut rng, m * n, 1.0)).unwrap());
        let planted = random_vec(&mut rng, n, 2.0);
        let c = set_around(&mut rng, &planted);
        let q = set_around(&mut rng, &a.apply(&planted).unwrap());
        let p = SfpProblem::new(a.clone(), q.clone(), c.clone()).unwrap();
        let cert = power_iteration_bound(&a, 50, inst).unwrap();
        let x0 = random_vec(&mut rng, n, 5.0);
        let r = cq_solve(&p, &x0, &CqOptions::certified(&cert)).unwrap();
        assert!(r.final_residual < 1e-6, "instance {inst}: d² = {}", r.final_residual);
        for w in r.distances.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "instance {inst}: {} -> {}", w[0], w[1]);
        }
        assert!(r.feasibility_c.iter().all(|&f| f <= 1e-10));
        if r.converged {
            let ax = a.apply(&r.solution).unwrap();
            assert!(q.distance(&ax).unwrap() <= (2.0 * 1e-12f64).sqrt() + 1e-15);
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let (m, n) = (rng.random_range(1..6), rng.random_range(1..6));
        let a = LinearOperator::Dense(DenseMatrix::new(m, n, random_vec(&mut rng, m * n, 1.0)).unwrap());
        let q = ConstraintSet::ball(random_vec(&mut rng, m, 1.0), rng.random_range(0.1..0.5)).unwrap();
        let y = random_vec(&mut rng, n, 3.0);
        let g = sq_distance_grad(&a, &q, &y).unwrap();
        for j in 0..n {
            let h = 1e-6 * (1.0 + y[j].abs());
            let mut yp = y.clone();
            yp[j] += h;
            let mut ym = y.clone();
            ym[j] -= h;
            let fd = (sq_distance(&a, &q, &yp).unwrap() - sq_distance(&a, &q, &ym).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1e-2), "{fd} vs {}", g[j]);
        }
    }
}

#[test]
fn multistep_leaves_feasible_point_alone() {
    let x = vec![0.2, 0.1];
    let terms = vec![
        SfpTerm {
            weight: 0.3,
            op: None,
            set: ConstraintSet::ball(vec![0.0, 0.0], 1.0).unwrap(),
        },
        SfpTerm {
            weight: 0.7,
            op: None,
            set: ConstraintSet::ball(vec![0.5, 0.0], 1.0).unwrap(),
        },
    ];
    assert_eq!(cq_multistep(&x, &terms, &ConstraintSet::NonnegOrthant).unwrap(), x);
}

#[test]
fn two_ball_multistep_matches_hand_composition() {
    let b1 = ConstraintSet::ball(vec![3.0, 0.0], 1.0).unwrap();
    let b2 = ConstraintSet::ball(vec![0.0, -2.0], 0.5).unwrap();
    let c = ConstraintSet::boxed(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
    let x = vec![0.4, 0.9];
    let r1 = sub(&x, &b1.project(&x).unwrap());
    let r2 = sub(&x, &b2.project(&x).unwrap());
    let moved: Vec<f64> = (0..2).map(|i| x[i] - 0.25 * r1[i] - 0.5 * r2[i]).collect();
    let expected = c.project(&moved).unwrap();
    let terms = vec![
        SfpTerm {
            weight: 0.25,
            op: None,
            set: b1,
        },
        SfpTerm {
            weight: 0.5,
            op: None,
            set: b2,
        },
    ];
    let got = cq_multistep(&x, &terms, &c).unwrap();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-15);
    }
}
