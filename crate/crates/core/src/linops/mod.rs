//! Linear operators with adjoints, parameter gradients and spectral-norm
//! certificates.
//!
//! A certificate is an upper bound `λ ≥ ρ(AᵀA)`. Any stepsize `α ≤ 2/λ` then
//! makes the gradient step `x ↦ x − α Aᵀ(Id − P_Q)A x` nonexpansive. Two routes
//! produce certificates:
//!
//! * [`prop1_bound`]: for a convolution whose kernels were normalized by
//!   [`normalize_kernels_prop1`] (each block-row of kernels has unit Euclidean
//!   length), every row of the Toeplitz-block matrix has unit squared sum and
//!   every column at most `w² c_out` nonzeros, so `ρ(AᵀA) ≤ w² c_out`. With zero
//!   padding the border columns have fewer nonzeros, which only lowers the count.
//! * [`power_iteration_bound`]: a seeded power iteration on `AᵀA`, inflated by a
//!   safety factor since the iteration approaches the top eigenvalue from below.

mod conv;
mod pool;

pub use conv::{Conv2d, KernelTensor};
pub use pool::AvgPool2d;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm, DenseMatrix};

/// Default number of power iterations used for certificates.
pub const POWER_ITERATIONS: usize = 50;
/// Inflation applied to the power-iteration estimate.
pub const POWER_SAFETY_FACTOR: f64 = 1.01;

#[derive(Debug, Clone, PartialEq)]
pub enum LinearOperator {
    Dense(DenseMatrix),
    Conv2d(Conv2d),
    AvgPool2d(AvgPool2d),
    /// `[A b]` acting on `(x, t)`: `A x + t b`. With `t = 1` this is `A x + b`.
    BiasAugmented {
        inner: Box<LinearOperator>,
        bias: Vec<f64>,
    },
}

impl LinearOperator {
    pub fn bias_augmented(inner: LinearOperator, bias: Vec<f64>) -> Result<Self> {
        check_dim("LinearOperator::bias_augmented", inner.out_dim(), bias.len())?;
        Ok(Self::BiasAugmented {
            inner: Box::new(inner),
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Self::Dense(m) => m.cols(),
            Self::Conv2d(c) => c.in_dim(),
            Self::AvgPool2d(p) => p.in_dim(),
            Self::BiasAugmented { inner, .. } => inner.in_dim() + 1,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Dense(m) => m.rows(),
            Self::Conv2d(c) => c.out_dim(),
            Self::AvgPool2d(p) => p.out_dim(),
            Self::BiasAugmented { inner, .. } => inner.out_dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Dense(_) => "dense",
            Self::Conv2d(_) => "conv2d",
            Self::AvgPool2d(_) => "avg-pool2d",
            Self::BiasAugmented { .. } => "bias-augmented",
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("LinearOperator::apply", self.in_dim(), x.len())?;
        match self {
            Self::Dense(m) => m.matvec(x),
            Self::Conv2d(c) => c.apply(x),
            Self::AvgPool2d(p) => p.apply(x),
            Self::BiasAugmented { inner, bias } => {
                let (body, t) = x.split_at(x.len() - 1);
                let mut out = inner.apply(body)?;
                for (o, b) in out.iter_mut().zip(bias) {
                    *o += t[0] * b;
                }
                Ok(out)
            }
        }
    }

    pub fn adjoint_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim("LinearOperator::adjoint_apply", self.out_dim(), u.len())?;
        match self {
            Self::Dense(m) => m.matvec_t(u),
            Self::Conv2d(c) => c.adjoint_apply(u),
            Self::AvgPool2d(p) => p.adjoint_apply(u),
            Self::BiasAugmented { inner, bias } => {
                let mut out = inner.adjoint_apply(u)?;
                out.push(dot(bias, u));
                Ok(out)
            }
        }
    }

    /// Number of trainable coefficients.
    pub fn param_count(&self) -> usize {
        match self {
            Self::Dense(m) => m.data().len(),
            Self::Conv2d(c) => c.kernels().data().len(),
            Self::AvgPool2d(_) => 0,
            Self::BiasAugmented { inner, bias } => inner.param_count() + bias.len(),
        }
    }

    /// Trainable coefficients, flattened (inner operator first, then bias).
    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Dense(m) => m.data().to_vec(),
            Self::Conv2d(c) => c.kernels().data().to_vec(),
            Self::AvgPool2d(_) => Vec::new(),
            Self::BiasAugmented { inner, bias } => {
                let mut p = inner.params();
                p.extend_from_slice(bias);
                p
            }
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("LinearOperator::set_params", self.param_count(), params.len())?;
        match self {
            Self::Dense(m) => m.data_mut().copy_from_slice(params),
            Self::Conv2d(c) => c.kernels_mut().data_mut().copy_from_slice(params),
            Self::AvgPool2d(_) => {}
            Self::BiasAugmented { inner, bias } => {
                let (head, tail) = params.split_at(inner.param_count());
                inner.set_params(head)?;
                bias.copy_from_slice(tail);
            }
        }
        Ok(())
    }

    /// Visits every trainable coefficient in [`params`](Self::params) order.
    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        match self {
            Self::Dense(m) => m.data_mut().iter_mut().for_each(f),
            Self::Conv2d(c) => c.kernels_mut().data_mut().iter_mut().for_each(f),
            Self::AvgPool2d(_) => {}
            Self::BiasAugmented { inner, bias } => {
                inner.for_each_param_mut(f);
                bias.iter_mut().for_each(f);
            }
        }
    }

    /// Gradient of the bilinear form `⟨u, A x⟩` with respect to the parameters.
    pub fn param_grad(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_dim("LinearOperator::param_grad", self.out_dim(), u.len())?;
        check_dim("LinearOperator::param_grad", self.in_dim(), x.len())?;
        match self {
            Self::Dense(_) => Ok(DenseMatrix::outer(u, x).data().to_vec()),
            Self::Conv2d(c) => c.kernel_grad(u, x),
            Self::AvgPool2d(_) => Ok(Vec::new()),
            Self::BiasAugmented { inner, .. } => {
                let (body, t) = x.split_at(x.len() - 1);
                let mut g = inner.param_grad(u, body)?;
                g.extend(u.iter().map(|ui| ui * t[0]));
                Ok(g)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CertificateMethod {
    ClosedFormProp1 {
        width: usize,
        c_out: usize,
    },
    PowerIteration {
        iters: usize,
        estimate: f64,
        safety_factor: f64,
    },
}

/// Certified upper bound on `ρ(AᵀA)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCertificate {
    pub lambda_bound: f64,
    pub method: CertificateMethod,
}

impl SpectralCertificate {
    /// Largest stepsize keeping a CQ layer nonexpansive.
    pub fn max_stable_step(&self) -> f64 {
        2.0 / self.lambda_bound
    }

    /// Default stepsize: the midpoint `1/λ` of the open interval `(0, 2/λ)`.
    pub fn default_step(&self) -> f64 {
        1.0 / self.lambda_bound
    }
}

/// Closed-form bound `w² c_out` for block-row normalized kernels.
pub fn prop1_bound(width: usize, c_out: usize) -> Result<SpectralCertificate> {
    if width.is_multiple_of(2) || c_out == 0 {
        return Err(Error::InvalidParameter(format!(
            "prop1 bound needs odd width and c_out >= 1, got w={width}, c_out={c_out}"
        )));
    }
    Ok(SpectralCertificate {
        lambda_bound: (width * width * c_out) as f64,
        method: CertificateMethod::ClosedFormProp1 { width, c_out },
    })
}

/// Divides every kernel by the Euclidean norm of its block-row (all kernels
/// producing the same output channel). Rows already of unit norm to within
/// `1e-12` are left untouched, so the operation is exactly idempotent.
pub fn normalize_kernels_prop1(kernels: &KernelTensor) -> Result<KernelTensor> {
    let mut out = kernels.clone();
    let row_len = kernels.c_in() * kernels.width() * kernels.width();
    for (o, row) in out.data_mut().chunks_mut(row_len).enumerate() {
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::ZeroBlockRow { row: o });
        }
        if (n - 1.0).abs() <= 1e-12 {
            continue;
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Seeded power iteration on `AᵀA`.
///
/// The returned estimate is the Rayleigh quotient `‖A v‖²` of the final unit
/// iterate, which never exceeds `ρ(AᵀA)`; the certificate multiplies it by
/// [`POWER_SAFETY_FACTOR`]. A zero operator yields a machine-epsilon bound.
pub fn power_iteration_bound(op: &LinearOperator, iters: usize, seed: u64) -> Result<SpectralCertificate> {
    if iters == 0 {
        return Err(Error::InvalidParameter("power iteration needs iters >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..op.in_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut estimate = 0.0;
    let n0 = norm(&v);
    if n0 > 0.0 {
        v.iter_mut().for_each(|x| *x /= n0);
        for _ in 0..iters {
            let w = op.adjoint_apply(&op.apply(&v)?)?;
            let n = norm(&w);
            if n == 0.0 || !n.is_finite() {
                break;
            }
            v = w.into_iter().map(|x| x / n).collect();
        }
        let av = op.apply(&v)?;
        estimate = dot(&av, &av);
    }
    Ok(SpectralCertificate {
        lambda_bound: (estimate * POWER_SAFETY_FACTOR).max(f64::EPSILON),
        method: CertificateMethod::PowerIteration {
            iters,
            estimate,
            safety_factor: POWER_SAFETY_FACTOR,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_examples() {
        let a = LinearOperator::Dense(DenseMatrix::from_rows(&[vec![2.0]]).unwrap());
        assert_eq!(a.apply(&[1.0]).unwrap(), vec![2.0]);

        let inner = LinearOperator::Dense(DenseMatrix::from_rows(&[vec![1.0]]).unwrap());
        let aug = LinearOperator::bias_augmented(inner, vec![3.0]).unwrap();
        assert_eq!(aug.apply(&[2.0, 1.0]).unwrap(), vec![5.0]);
        assert_eq!(aug.adjoint_apply(&[2.0]).unwrap(), vec![2.0, 6.0]);
    }

    #[test]
    fn adjoint_of_dense_is_transpose() {
        let a = LinearOperator::Dense(DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        assert_eq!(a.adjoint_apply(&[1.0, 0.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn power_iteration_examples() {
        let diag = LinearOperator::Dense(DenseMatrix::diag(&[1.0, 2.0]));
        let cert = power_iteration_bound(&diag, 100, 3).unwrap();
        let CertificateMethod::PowerIteration { estimate, .. } = cert.method else {
            panic!("wrong method");
        };
        assert!((estimate - 4.0).abs() < 1e-6);
        assert!((cert.lambda_bound - 4.04).abs() < 1e-5);

        let two = LinearOperator::Dense(DenseMatrix::from_rows(&[vec![2.0]]).unwrap());
        let cert = power_iteration_bound(&two, 1, 0).unwrap();
        let CertificateMethod::PowerIteration { estimate, .. } = cert.method else {
            panic!("wrong method");
        };
        assert!((estimate - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_operator_gets_epsilon_floor() {
        let zero = LinearOperator::Dense(DenseMatrix::zeros(3, 2));
        let cert = power_iteration_bound(&zero, 10, 1).unwrap();
        assert_eq!(cert.lambda_bound, f64::EPSILON);
        assert!(power_iteration_bound(&zero, 0, 1).is_err());
    }

    #[test]
    fn prop1_examples() {
        assert_eq!(prop1_bound(3, 1).unwrap().lambda_bound, 9.0);
        let c = prop1_bound(3, 36).unwrap();
        assert_eq!(c.lambda_bound, 324.0);
        assert_eq!(c.max_stable_step(), 2.0 / 324.0);
        assert!(prop1_bound(4, 1).is_err());
        assert!(prop1_bound(3, 0).is_err());
    }

    #[test]
    fn normalization_of_all_ones_kernel() {
        let k = KernelTensor::new(1, 1, 3, vec![1.0; 9]).unwrap();
        let n = normalize_kernels_prop1(&k).unwrap();
        assert!(n.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_block_row_is_an_error() {
        let mut data = vec![1.0; 2 * 9];
        data[9..].iter_mut().for_each(|v| *v = 0.0);
        let k = KernelTensor::new(2, 1, 3, data).unwrap();
        assert!(matches!(
            normalize_kernels_prop1(&k),
            Err(Error::ZeroBlockRow { row: 1 })
        ));
    }
}
