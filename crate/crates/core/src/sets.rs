//! Closed-form Euclidean projections onto the constraint sets used by the CQ
//! iteration and by CQnet layers.
//!
//! Every set pairs its projection with the transpose action of the projection's
//! Jacobian, which is what reverse-mode differentiation needs. Projections are
//! not differentiable everywhere; the conventions are:
//!
//! * On the boundary of a box-type set (nonnegative orthant, box, halfspace) the
//!   constraint is treated as active, so the derivative of `max(x, 0)` at zero
//!   is zero.
//! * For the radial sets (ball, annulus, exterior ball, pair distance) the
//!   Jacobian on the boundary is that of the radial scaling formula, i.e. the
//!   active branch is linearized as if it stayed active.
//! * At the center of an annulus or exterior ball the projection is not unique.
//!   It returns `c + r e₁` and its Jacobian there is zero.

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm};

/// A closed set with an exact Euclidean projection.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    /// `{x : x ≥ 0}`; its projection is the ReLU.
    NonnegOrthant,
    /// `{x : ⟨normal, x⟩ ≤ offset}`.
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
    },
    /// `{x : lo ≤ x ≤ hi}` elementwise.
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// `{x : ‖x − center‖ ≤ radius}`.
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    /// `{x : inner ≤ ‖x − center‖ ≤ outer}`. Convex only when `inner == 0`.
    Annulus {
        center: Vec<f64>,
        inner: f64,
        outer: f64,
    },
    /// `{x : ‖x − center‖ ≥ radius}`. Never convex.
    ExteriorBall {
        center: Vec<f64>,
        radius: f64,
    },
    /// `{x : Σ xᵢ = 0}`.
    ZeroMean,
    /// `{x : x_last = value}`.
    FixedLastEntry(f64),
    /// Split `x = (x_a, x_b)` at `split`; `{x : ‖x_a − x_b‖ ≥ min_distance}`.
    MinPairDistance {
        split: usize,
        min_distance: f64,
    },
    FullSpace,
}

impl ConstraintSet {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let set = Self::Ball { center, radius };
        set.validate()?;
        Ok(set)
    }

    pub fn annulus(center: Vec<f64>, inner: f64, outer: f64) -> Result<Self> {
        let set = Self::Annulus { center, inner, outer };
        set.validate()?;
        Ok(set)
    }

    pub fn exterior_ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let set = Self::ExteriorBall { center, radius };
        set.validate()?;
        Ok(set)
    }

    pub fn halfspace(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let set = Self::Halfspace { normal, offset };
        set.validate()?;
        Ok(set)
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let set = Self::Box { lo, hi };
        set.validate()?;
        Ok(set)
    }

    pub fn min_pair_distance(split: usize, min_distance: f64) -> Result<Self> {
        let set = Self::MinPairDistance { split, min_distance };
        set.validate()?;
        Ok(set)
    }

    /// Checks the parameter invariants of the set.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        match self {
            Self::Halfspace { normal, offset } => {
                if !offset.is_finite() || norm(normal) == 0.0 || !norm(normal).is_finite() {
                    return bad("halfspace needs a finite nonzero normal and finite offset");
                }
            }
            Self::Box { lo, hi } => {
                if lo.len() != hi.len() {
                    return bad("box bounds have different lengths");
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return bad("box requires lo <= hi elementwise");
                }
            }
            Self::Ball { radius, .. } | Self::ExteriorBall { radius, .. } => {
                if !(*radius >= 0.0) || !radius.is_finite() {
                    return bad("radius must be finite and nonnegative");
                }
                if matches!(self, Self::ExteriorBall { .. }) && *radius == 0.0 {
                    return bad("exterior ball radius must be positive");
                }
            }
            Self::Annulus { inner, outer, .. } => {
                if !(*inner >= 0.0) || !(inner <= outer) || !outer.is_finite() {
                    return bad("annulus requires 0 <= inner <= outer < inf");
                }
            }
            Self::FixedLastEntry(v) => {
                if !v.is_finite() {
                    return bad("fixed entry must be finite");
                }
            }
            Self::MinPairDistance { split, min_distance } => {
                if *split == 0 || !(*min_distance > 0.0) || !min_distance.is_finite() {
                    return bad("pair distance needs split >= 1 and a positive distance");
                }
            }
            Self::NonnegOrthant | Self::ZeroMean | Self::FullSpace => {}
        }
        Ok(())
    }

    pub fn is_convex(&self) -> bool {
        match self {
            Self::Annulus { inner, .. } => *inner == 0.0,
            Self::ExteriorBall { .. } | Self::MinPairDistance { .. } => false,
            _ => true,
        }
    }

    /// The dimension the set is defined in, if it fixes one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::Halfspace { normal, .. } => Some(normal.len()),
            Self::Box { lo, .. } => Some(lo.len()),
            Self::Ball { center, .. } | Self::Annulus { center, .. } | Self::ExteriorBall { center, .. } => {
                Some(center.len())
            }
            Self::MinPairDistance { split, .. } => Some(2 * split),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::NonnegOrthant => "nonneg-orthant",
            Self::Halfspace { .. } => "halfspace",
            Self::Box { .. } => "box",
            Self::Ball { .. } => "ball",
            Self::Annulus { .. } => "annulus",
            Self::ExteriorBall { .. } => "exterior-ball",
            Self::ZeroMean => "zero-mean",
            Self::FixedLastEntry(_) => "fixed-last-entry",
            Self::MinPairDistance { .. } => "min-pair-distance",
            Self::FullSpace => "full-space",
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if let Some(d) = self.dim() {
            check_dim("ConstraintSet", d, x.len())?;
        }
        if matches!(self, Self::ZeroMean | Self::FixedLastEntry(_)) && x.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "ConstraintSet",
                expected: 1,
                found: 0,
            });
        }
        Ok(())
    }

    /// Euclidean projection of `x` onto the set.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(match self {
            Self::NonnegOrthant => x.iter().map(|v| v.max(0.0)).collect(),
            Self::Halfspace { normal, offset } => {
                let excess = dot(normal, x) - offset;
                if excess <= 0.0 {
                    x.to_vec()
                } else {
                    let t = excess / dot(normal, normal);
                    x.iter().zip(normal).map(|(xi, ai)| xi - t * ai).collect()
                }
            }
            Self::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| v.clamp(*l, *h))
                .collect(),
            Self::Ball { center, radius } => {
                let rho = dist(x, center);
                if rho <= *radius {
                    x.to_vec()
                } else {
                    radial_point(x, center, rho, *radius)
                }
            }
            Self::Annulus { center, inner, outer } => {
                let rho = dist(x, center);
                if rho < *inner {
                    radial_point(x, center, rho, *inner)
                } else if rho > *outer {
                    radial_point(x, center, rho, *outer)
                } else {
                    x.to_vec()
                }
            }
            Self::ExteriorBall { center, radius } => {
                let rho = dist(x, center);
                if rho < *radius {
                    radial_point(x, center, rho, *radius)
                } else {
                    x.to_vec()
                }
            }
            Self::ZeroMean => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                x.iter().map(|v| v - mean).collect()
            }
            Self::FixedLastEntry(value) => {
                let mut out = x.to_vec();
                *out.last_mut().expect("checked non-empty") = *value;
                out
            }
            Self::MinPairDistance { split, min_distance } => {
                let (xa, xb) = x.split_at(*split);
                let gap = dist(xa, xb);
                if gap >= *min_distance {
                    x.to_vec()
                } else {
                    let dir = pair_direction(xa, xb, gap);
                    let half = 0.5 * min_distance;
                    let mut out = Vec::with_capacity(x.len());
                    out.extend(xa.iter().zip(xb).zip(&dir).map(|((a, b), u)| 0.5 * (a + b) + half * u));
                    out.extend(xa.iter().zip(xb).zip(&dir).map(|((a, b), u)| 0.5 * (a + b) - half * u));
                    out
                }
            }
            Self::FullSpace => x.to_vec(),
        })
    }

    /// `Jᵀ v` where `J` is the (almost-everywhere) Jacobian of [`project`](Self::project) at `x`.
    pub fn jacobian_transpose_apply(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        check_dim("ConstraintSet::jacobian_transpose_apply", x.len(), v.len())?;
        Ok(match self {
            Self::NonnegOrthant => x
                .iter()
                .zip(v)
                .map(|(xi, vi)| if *xi > 0.0 { *vi } else { 0.0 })
                .collect(),
            Self::Halfspace { normal, offset } => {
                if dot(normal, x) - offset < 0.0 {
                    v.to_vec()
                } else {
                    let t = dot(normal, v) / dot(normal, normal);
                    v.iter().zip(normal).map(|(vi, ai)| vi - t * ai).collect()
                }
            }
            Self::Box { lo, hi } => x
                .iter()
                .zip(v)
                .zip(lo.iter().zip(hi))
                .map(|((xi, vi), (l, h))| if l < xi && xi < h { *vi } else { 0.0 })
                .collect(),
            Self::Ball { center, radius } => {
                let rho = dist(x, center);
                if rho < *radius {
                    v.to_vec()
                } else {
                    radial_jt(x, center, rho, *radius, v)
                }
            }
            Self::Annulus { center, inner, outer } => {
                let rho = dist(x, center);
                if *inner > 0.0 && rho <= *inner {
                    radial_jt(x, center, rho, *inner, v)
                } else if rho >= *outer {
                    radial_jt(x, center, rho, *outer, v)
                } else {
                    v.to_vec()
                }
            }
            Self::ExteriorBall { center, radius } => {
                let rho = dist(x, center);
                if rho <= *radius {
                    radial_jt(x, center, rho, *radius, v)
                } else {
                    v.to_vec()
                }
            }
            Self::ZeroMean => {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|vi| vi - mean).collect()
            }
            Self::FixedLastEntry(_) => {
                let mut out = v.to_vec();
                *out.last_mut().expect("checked non-empty") = 0.0;
                out
            }
            Self::MinPairDistance { split, min_distance } => {
                let (xa, xb) = x.split_at(*split);
                let gap = dist(xa, xb);
                if gap > *min_distance {
                    v.to_vec()
                } else {
                    let (va, vb) = v.split_at(*split);
                    let sum_bar: Vec<f64> = va.iter().zip(vb).map(|(a, b)| 0.5 * (a + b)).collect();
                    let diff_bar = if gap == 0.0 {
                        vec![0.0; *split]
                    } else {
                        let u: Vec<f64> = xa.iter().zip(xb).map(|(a, b)| (a - b) / gap).collect();
                        let w: Vec<f64> = va.iter().zip(vb).map(|(a, b)| a - b).collect();
                        let uw = dot(&u, &w);
                        let s = 0.5 * min_distance / gap;
                        w.iter().zip(&u).map(|(wi, ui)| s * (wi - ui * uw)).collect()
                    };
                    let mut out = Vec::with_capacity(x.len());
                    out.extend(sum_bar.iter().zip(&diff_bar).map(|(s, d)| s + d));
                    out.extend(sum_bar.iter().zip(&diff_bar).map(|(s, d)| s - d));
                    out
                }
            }
            Self::FullSpace => v.to_vec(),
        })
    }

    /// `‖x − P(x)‖₂`.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        let p = self.project(x)?;
        Ok(dist(x, &p))
    }

    /// Violation of the set's defining inequality at `x` (zero when feasible).
    ///
    /// Unlike [`distance`](Self::distance) this does not go through the
    /// projection, so it can be used to check projections.
    pub fn residual(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(match self {
            Self::NonnegOrthant => x.iter().fold(0.0_f64, |m, v| m.max(-v)),
            Self::Halfspace { normal, offset } => ((dot(normal, x) - offset) / norm(normal)).max(0.0),
            Self::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .fold(0.0_f64, |m, (v, (l, h))| m.max(l - v).max(v - h)),
            Self::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
            Self::Annulus { center, inner, outer } => {
                let rho = dist(x, center);
                (inner - rho).max(rho - outer).max(0.0)
            }
            Self::ExteriorBall { center, radius } => (radius - dist(x, center)).max(0.0),
            Self::ZeroMean => (x.iter().sum::<f64>() / x.len() as f64).abs(),
            Self::FixedLastEntry(value) => (x[x.len() - 1] - value).abs(),
            Self::MinPairDistance { split, min_distance } => {
                let (xa, xb) = x.split_at(*split);
                (min_distance - dist(xa, xb)).max(0.0)
            }
            Self::FullSpace => 0.0,
        })
    }
}

/// Applies a sequence of projections in order, returning the output and the
/// input seen by each projection (needed to replay Jacobians).
pub fn project_chain(sets: &[ConstraintSet], x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut inputs = Vec::with_capacity(sets.len());
    let mut cur = x.to_vec();
    for set in sets {
        let next = set.project(&cur)?;
        inputs.push(std::mem::replace(&mut cur, next));
    }
    Ok((cur, inputs))
}

/// Transpose-Jacobian of a projection chain, given the inputs recorded by [`project_chain`].
pub fn chain_jacobian_transpose(sets: &[ConstraintSet], inputs: &[Vec<f64>], v: &[f64]) -> Result<Vec<f64>> {
    let mut g = v.to_vec();
    for (set, x) in sets.iter().zip(inputs).rev() {
        g = set.jacobian_transpose_apply(x, &g)?;
    }
    Ok(g)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    crate::linalg::distance(a, b)
}

/// `c + r (x − c)/ρ`, or `c + r e₁` when `x == c`.
fn radial_point(x: &[f64], c: &[f64], rho: f64, r: f64) -> Vec<f64> {
    if rho == 0.0 {
        let mut out = c.to_vec();
        if let Some(first) = out.first_mut() {
            *first += r;
        }
        return out;
    }
    let s = r / rho;
    x.iter().zip(c).map(|(xi, ci)| ci + s * (xi - ci)).collect()
}

/// `(r/ρ)(I − uuᵀ) v` with `u = (x − c)/ρ`; zero at the center.
fn radial_jt(x: &[f64], c: &[f64], rho: f64, r: f64, v: &[f64]) -> Vec<f64> {
    if rho == 0.0 || r == 0.0 {
        return vec![0.0; v.len()];
    }
    let u: Vec<f64> = x.iter().zip(c).map(|(xi, ci)| (xi - ci) / rho).collect();
    let uv = dot(&u, v);
    let s = r / rho;
    v.iter().zip(&u).map(|(vi, ui)| s * (vi - ui * uv)).collect()
}

fn pair_direction(xa: &[f64], xb: &[f64], gap: f64) -> Vec<f64> {
    if gap == 0.0 {
        let mut e = vec![0.0; xa.len()];
        e[0] = 1.0;
        e
    } else {
        xa.iter().zip(xb).map(|(a, b)| (a - b) / gap).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Central finite-difference Jacobian-transpose product.
    fn fd_jt(set: &ConstraintSet, x: &[f64], v: &[f64]) -> Vec<f64> {
        let h = 1e-6 * (1.0 + norm(x));
        (0..x.len())
            .map(|j| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[j] += h;
                xm[j] -= h;
                let pp = set.project(&xp).unwrap();
                let pm = set.project(&xm).unwrap();
                pp.iter()
                    .zip(&pm)
                    .zip(v)
                    .map(|((a, b), vi)| (a - b) / (2.0 * h) * vi)
                    .sum()
            })
            .collect()
    }

    #[test]
    fn projection_examples() {
        let p = ConstraintSet::NonnegOrthant.project(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 3.0]);

        let ball = ConstraintSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert!(close(&ball.project(&[3.0, 4.0]).unwrap(), &[0.6, 0.8], 1e-15));

        let ann = ConstraintSet::annulus(vec![0.0, 0.0], 1.0, 2.0).unwrap();
        assert_eq!(ann.project(&[0.5, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(ann.project(&[4.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(ann.project(&[1.5, 0.0]).unwrap(), vec![1.5, 0.0]);

        assert_eq!(
            ConstraintSet::ZeroMean.project(&[1.0, 2.0, 3.0]).unwrap(),
            vec![-1.0, 0.0, 1.0]
        );
        assert_eq!(
            ConstraintSet::FixedLastEntry(1.0).project(&[0.5, 7.0, 3.0]).unwrap(),
            vec![0.5, 7.0, 1.0]
        );

        let pair = ConstraintSet::min_pair_distance(2, 2.0).unwrap();
        assert_eq!(pair.project(&[0.0, 0.0, 1.0, 0.0]).unwrap(), vec![-0.5, 0.0, 1.5, 0.0]);

        let ext = ConstraintSet::exterior_ball(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(ext.project(&[0.5, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(ext.project(&[2.0, 0.0]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn centers_use_first_basis_vector() {
        let ann = ConstraintSet::annulus(vec![1.0, 1.0], 0.5, 2.0).unwrap();
        assert_eq!(ann.project(&[1.0, 1.0]).unwrap(), vec![1.5, 1.0]);
        let ext = ConstraintSet::exterior_ball(vec![0.0, 0.0, 0.0], 2.0).unwrap();
        assert_eq!(ext.project(&[0.0; 3]).unwrap(), vec![2.0, 0.0, 0.0]);
        let pair = ConstraintSet::min_pair_distance(2, 2.0).unwrap();
        assert_eq!(pair.project(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![2.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn jacobian_examples() {
        let jt = ConstraintSet::NonnegOrthant
            .jacobian_transpose_apply(&[1.0, -2.0, 0.0], &[5.0, 5.0, 5.0])
            .unwrap();
        assert_eq!(jt, vec![5.0, 0.0, 0.0]);

        let jt = ConstraintSet::ZeroMean
            .jacobian_transpose_apply(&[9.0, -1.0, 4.0], &[1.0, 2.0, 3.0])
            .unwrap();
        assert_eq!(jt, vec![-1.0, 0.0, 1.0]);

        let ball = ConstraintSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        let jt = ball.jacobian_transpose_apply(&[0.3, -0.2], &[1.0, 2.0]).unwrap();
        assert_eq!(jt, vec![1.0, 2.0]);

        let x = [2.0, 0.0];
        let v = [1.0, 1.0];
        let jt = ball.jacobian_transpose_apply(&x, &v).unwrap();
        let fd = fd_jt(&ball, &x, &v);
        let err = norm(&crate::linalg::sub(&jt, &fd)) / norm(&fd);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn distance_examples() {
        assert_eq!(ConstraintSet::NonnegOrthant.distance(&[1.0, -2.0, 3.0]).unwrap(), 2.0);
        let ball = ConstraintSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert!((ball.distance(&[3.0, 4.0]).unwrap() - 4.0).abs() < 1e-15);
        let p = ball.project(&[3.0, 4.0]).unwrap();
        assert!(ball.distance(&p).unwrap() < 1e-12);
    }

    #[test]
    fn convexity_classification() {
        let convex = [
            ConstraintSet::NonnegOrthant,
            ConstraintSet::halfspace(vec![1.0], 0.0).unwrap(),
            ConstraintSet::boxed(vec![0.0], vec![1.0]).unwrap(),
            ConstraintSet::ball(vec![0.0], 1.0).unwrap(),
            ConstraintSet::annulus(vec![0.0], 0.0, 1.0).unwrap(),
            ConstraintSet::ZeroMean,
            ConstraintSet::FixedLastEntry(1.0),
            ConstraintSet::FullSpace,
        ];
        assert!(convex.iter().all(ConstraintSet::is_convex));
        let nonconvex = [
            ConstraintSet::annulus(vec![0.0], 0.5, 1.0).unwrap(),
            ConstraintSet::exterior_ball(vec![0.0], 1.0).unwrap(),
            ConstraintSet::min_pair_distance(1, 1.0).unwrap(),
        ];
        assert!(nonconvex.iter().all(|s| !s.is_convex()));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ConstraintSet::boxed(vec![1.0], vec![0.0]).is_err());
        assert!(ConstraintSet::annulus(vec![0.0], 2.0, 1.0).is_err());
        assert!(ConstraintSet::ball(vec![0.0], -1.0).is_err());
        assert!(ConstraintSet::exterior_ball(vec![0.0], 0.0).is_err());
        assert!(ConstraintSet::halfspace(vec![0.0, 0.0], 1.0).is_err());
        assert!(ConstraintSet::min_pair_distance(2, 0.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let ball = ConstraintSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert!(matches!(
            ball.project(&[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                found: 3,
                ..
            })
        ));
        assert!(ConstraintSet::ZeroMean.project(&[]).is_err());
        let pair = ConstraintSet::min_pair_distance(2, 1.0).unwrap();
        assert!(pair.project(&[0.0; 3]).is_err());
        assert!(ConstraintSet::NonnegOrthant
            .jacobian_transpose_apply(&[1.0], &[1.0, 2.0])
            .is_err());
    }

    #[test]
    fn chain_replays_in_reverse() {
        let sets = [ConstraintSet::ZeroMean, ConstraintSet::NonnegOrthant];
        let (out, inputs) = project_chain(&sets, &[1.0, 2.0, 6.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 3.0]);
        let g = chain_jacobian_transpose(&sets, &inputs, &[1.0, 1.0, 1.0]).unwrap();
        // ReLU keeps only the last entry, then the mean is removed.
        assert!(close(&g, &[-1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0], 1e-15));
    }
}
