//! Radial kernels `K_h(u) = h^{-w} k(|u| / h)` over residual segments.
//!
//! Profiles are unnormalized: `k(0)` is the textbook value and no
//! multivariate normalizing constant is applied. Every weight computed
//! downstream is invariant to a positive rescaling of the kernel, so the
//! estimator works with the profile value `k(|u| / h)` directly and only
//! [`KernelSpec::eval`] applies the `h^{-w}` factor.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Truncation radius of the Gaussian profile.
pub const GAUSSIAN_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// `k(t) = 3/4 (1 - t^2)` on `|t| <= 1`.
    #[default]
    Epanechnikov,
    /// `k(t) = exp(-t^2 / 2)` on `|t| <= 3`.
    Gaussian,
    /// `k(t) = 1/2` on `|t| <= 1`.
    Boxcar,
}

impl KernelFamily {
    /// Profile value at a nonnegative scaled distance.
    pub fn profile(self, t: f64) -> f64 {
        let t = t.abs();
        match self {
            KernelFamily::Epanechnikov => {
                if t <= 1.0 {
                    0.75 * (1.0 - t * t)
                } else {
                    0.0
                }
            }
            KernelFamily::Gaussian => {
                if t <= GAUSSIAN_RADIUS {
                    (-0.5 * t * t).exp()
                } else {
                    0.0
                }
            }
            KernelFamily::Boxcar => {
                if t <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }

    /// Radius beyond which the profile vanishes.
    pub fn support_radius(self) -> f64 {
        match self {
            KernelFamily::Gaussian => GAUSSIAN_RADIUS,
            KernelFamily::Epanechnikov | KernelFamily::Boxcar => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Boxcar => "boxcar",
        }
    }
}

/// A kernel family together with its bandwidth `h > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(invalid(
                "bandwidth",
                format!("must be finite and positive, got {bandwidth}"),
            ));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn with_bandwidth(self, bandwidth: f64) -> Result<Self> {
        Self::new(self.family, bandwidth)
    }

    /// Scaled kernel `K_h(u)` for a vector of the configured length `dim`.
    pub fn eval(&self, u: &[f64], dim: usize) -> Result<f64> {
        if u.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: u.len(),
            });
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let profile = self.family.profile(norm / self.bandwidth);
        if profile == 0.0 {
            return Ok(0.0);
        }
        Ok(profile * self.bandwidth.powi(-(dim as i32)))
    }

    /// Profile weight `k(distance / h)` without the `h^{-w}` factor.
    #[inline]
    pub fn weight_at_distance(&self, distance: f64) -> f64 {
        self.family.profile(distance / self.bandwidth)
    }

    /// Profile weight for a squared distance; avoids the square root outside
    /// the support.
    #[inline]
    pub fn weight_at_sq_distance(&self, sq_distance: f64) -> f64 {
        let radius = self.family.support_radius() * self.bandwidth;
        if sq_distance > radius * radius {
            return 0.0;
        }
        self.weight_at_distance(sq_distance.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn epa(h: f64) -> KernelSpec {
        KernelSpec::new(KernelFamily::Epanechnikov, h).unwrap()
    }

    #[test]
    fn epanechnikov_at_origin() {
        assert_eq!(epa(1.0).eval(&[0.0, 0.0, 0.0], 3).unwrap(), 0.75);
    }

    #[test]
    fn zero_outside_support() {
        // |u| = 1.5
        assert_eq!(epa(1.0).eval(&[0.9, 1.2], 2).unwrap(), 0.0);
        let g = KernelSpec::new(KernelFamily::Gaussian, 1.0).unwrap();
        assert_eq!(g.eval(&[3.01], 1).unwrap(), 0.0);
        assert!(g.eval(&[2.99], 1).unwrap() > 0.0);
    }

    #[test]
    fn scaled_epanechnikov_hand_value() {
        let v = epa(2.0).eval(&[1.0], 1).unwrap();
        assert!((v - 0.28125).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_names_lengths() {
        let err = epa(1.0).eval(&[0.0, 1.0], 3).unwrap_err();
        assert_eq!(
            err,
            Error::DimensionMismatch {
                expected: 3,
                actual: 2
            }
        );
        assert!(err.to_string().contains("expected length 3, got 2"));
    }

    #[test]
    fn rejects_bad_bandwidth() {
        assert!(KernelSpec::new(KernelFamily::Boxcar, 0.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Boxcar, -1.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Boxcar, f64::NAN).is_err());
    }

    fn family() -> impl Strategy<Value = KernelFamily> {
        prop_oneof![
            Just(KernelFamily::Epanechnikov),
            Just(KernelFamily::Gaussian),
            Just(KernelFamily::Boxcar)
        ]
    }

    proptest! {
        #[test]
        fn nonnegative_and_radial(
            fam in family(),
            h in 0.05f64..5.0,
            u in prop::collection::vec(-3.0f64..3.0, 1..6),
        ) {
            let k = KernelSpec::new(fam, h).unwrap();
            let w = u.len();
            let v = k.eval(&u, w).unwrap();
            prop_assert!(v >= 0.0);
            let neg: Vec<f64> = u.iter().map(|x| -x).collect();
            prop_assert_eq!(v, k.eval(&neg, w).unwrap());
            // same norm, all mass on the first coordinate
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut rotated = vec![0.0; w];
            rotated[0] = norm;
            let r = k.eval(&rotated, w).unwrap();
            prop_assert!((v - r).abs() <= 1e-12 * v.max(1e-300));
        }

        #[test]
        fn bandwidth_scaling_identity(
            fam in family(),
            h in 0.1f64..4.0,
            u in prop::collection::vec(-2.0f64..2.0, 1..5),
        ) {
            let w = u.len();
            let scaled = KernelSpec::new(fam, h).unwrap().eval(&u, w).unwrap();
            let unit: Vec<f64> = u.iter().map(|x| x / h).collect();
            let base = KernelSpec::new(fam, 1.0).unwrap().eval(&unit, w).unwrap();
            let expect = h.powi(-(w as i32)) * base;
            prop_assert!((scaled - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
        }
    }
}
