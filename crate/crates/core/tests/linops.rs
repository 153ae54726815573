use cqnet::linalg::{dot, DenseMatrix};
use cqnet::linops::{
    normalize_kernels_prop1, power_iteration_bound, prop1_bound, AvgPool2d, CertificateMethod, Conv2d, KernelTensor,
    LinearOperator,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_kernels(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, w: usize) -> KernelTensor {
    KernelTensor::new(c_out, c_in, w, random_vec(rng, c_out * c_in * w * w)).unwrap()
}

/// Builds the convolution matrix entry by entry from the defining sum.
fn toeplitz(conv: &Conv2d) -> DenseMatrix {
    let k = conv.kernels();
    let (h, w, kw) = (conv.height(), conv.width(), k.width());
    let p = (kw / 2) as isize;
    let mut m = DenseMatrix::zeros(conv.out_dim(), conv.in_dim());
    for o in 0..k.c_out() {
        for y in 0..h {
            for x in 0..w {
                let row = (o * h + y) * w + x;
                for i in 0..k.c_in() {
                    for a in 0..kw {
                        for b in 0..kw {
                            let sy = y as isize + a as isize - p;
                            let sx = x as isize + b as isize - p;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let col = (i * h + sy as usize) * w + sx as usize;
                            m.set(row, col, m.get(row, col) + k.get(o, i, a, b));
                        }
                    }
                }
            }
        }
    }
    m
}

fn to_nalgebra(op: &LinearOperator) -> DMatrix<f64> {
    let n = op.in_dim();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(op.apply(&e).unwrap());
    }
    DMatrix::from_fn(op.out_dim(), n, |r, c| cols[c][r])
}

fn top_eigenvalue_of_gram(op: &LinearOperator) -> f64 {
    let a = to_nalgebra(op);
    let gram = a.transpose() * &a;
    gram.symmetric_eigenvalues().iter().cloned().fold(f64::MIN, f64::max)
}

fn operators(rng: &mut ChaCha8Rng) -> Vec<LinearOperator> {
    let dense = DenseMatrix::new(4, 6, random_vec(rng, 24)).unwrap();
    let conv = Conv2d::new(random_kernels(rng, 3, 2, 3), 5, 6).unwrap();
    let conv5 = Conv2d::new(random_kernels(rng, 2, 2, 5), 3, 4).unwrap();
    let pool = AvgPool2d::new(2, 5, 7).unwrap();
    let bias = random_vec(rng, 4);
    vec![
        LinearOperator::Dense(dense.clone()),
        LinearOperator::Conv2d(conv.clone()),
        LinearOperator::Conv2d(conv5),
        LinearOperator::AvgPool2d(pool),
        LinearOperator::bias_augmented(LinearOperator::Dense(dense), bias).unwrap(),
        LinearOperator::bias_augmented(LinearOperator::Conv2d(conv), random_vec(rng, 3 * 5 * 6)).unwrap(),
    ]
}

#[test]
fn adjoint_identity_every_kind() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for op in operators(&mut rng) {
        for _ in 0..100 {
            let x = random_vec(&mut rng, op.in_dim());
            let u = random_vec(&mut rng, op.out_dim());
            let lhs = dot(&op.apply(&x).unwrap(), &u);
            let rhs = dot(&x, &op.adjoint_apply(&u).unwrap());
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            assert!((lhs - rhs).abs() / scale < 1e-10, "{}: {lhs} vs {rhs}", op.kind_name());
        }
    }
}

#[test]
fn conv_matches_dense_toeplitz() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(c_out, c_in, w, h, wd) in &[(1, 1, 3, 8, 8), (3, 2, 3, 5, 7), (2, 3, 5, 6, 4), (2, 1, 7, 3, 3)] {
        let conv = Conv2d::new(random_kernels(&mut rng, c_out, c_in, w), h, wd).unwrap();
        let m = toeplitz(&conv);
        for _ in 0..5 {
            let x = random_vec(&mut rng, conv.in_dim());
            let fast = conv.apply(&x).unwrap();
            let slow = m.matvec(&x).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
            let u = random_vec(&mut rng, conv.out_dim());
            let fast = conv.adjoint_apply(&u).unwrap();
            let slow = m.matvec_t(&u).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn param_grad_matches_finite_differences() {
    // ⟨u, A_θ x⟩ is linear in θ, so central differences are exact up to rounding.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for op in operators(&mut rng) {
        let x = random_vec(&mut rng, op.in_dim());
        let u = random_vec(&mut rng, op.out_dim());
        let g = op.param_grad(&u, &x).unwrap();
        assert_eq!(g.len(), op.param_count());
        let base = op.params();
        for j in 0..base.len() {
            let mut probe = op.clone();
            let mut p = base.clone();
            p[j] += 1e-6;
            probe.set_params(&p).unwrap();
            let plus = dot(&u, &probe.apply(&x).unwrap());
            p[j] -= 2e-6;
            probe.set_params(&p).unwrap();
            let minus = dot(&u, &probe.apply(&x).unwrap());
            let fd = (plus - minus) / 2e-6;
            assert!(
                (fd - g[j]).abs() <= 1e-6 * (1.0 + g[j].abs()),
                "{} param {j}",
                op.kind_name()
            );
        }
    }
}

#[test]
fn power_iteration_matches_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..20 {
        let op = LinearOperator::Dense(DenseMatrix::new(5, 5, random_vec(&mut rng, 25)).unwrap());
        let exact = top_eigenvalue_of_gram(&op);
        // A random 5×5 can have a small spectral gap, so allow plenty of iterations.
        let cert = power_iteration_bound(&op, 2000, seed).unwrap();
        let CertificateMethod::PowerIteration { estimate, .. } = cert.method else {
            panic!("wrong method")
        };
        assert!(
            (estimate - exact).abs() <= 1e-6 * exact.max(1.0),
            "{estimate} vs {exact}"
        );
        assert!(cert.lambda_bound >= exact);
    }
}

#[test]
fn normalization_gives_unit_block_rows_and_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let k = random_kernels(&mut rng, 2, 2, 3);
        let once = normalize_kernels_prop1(&k).unwrap();
        for o in 0..2 {
            let n: f64 = once.block_row(o).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let twice = normalize_kernels_prop1(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn prop1_bound_dominates_exact_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let k = normalize_kernels_prop1(&random_kernels(&mut rng, 4, 3, 3)).unwrap();
        let op = LinearOperator::Conv2d(Conv2d::new(k, 6, 5).unwrap());
        let exact = top_eigenvalue_of_gram(&op);
        assert!(exact <= prop1_bound(3, 4).unwrap().lambda_bound);
    }
}

#[test]
fn prop1_bound_is_monotone() {
    for w in [1, 3, 5, 7] {
        for c in 1..10 {
            let b = prop1_bound(w, c).unwrap().lambda_bound;
            assert_eq!(b, (w * w * c) as f64);
            assert!(prop1_bound(w, c + 1).unwrap().lambda_bound > b);
            assert!(prop1_bound(w + 2, c).unwrap().lambda_bound > b);
        }
    }
}
