//! Seeded synthetic series.
//!
//! * `hetero-mixture`: AR(1) mean with GARCH(1,1) volatility plus a small
//!   Gaussian nuisance, prone to large volatility bursts.
//!   `Y_t = 0.8 Y_{t-1} + sigma_t e_t + xi_t`,
//!   `sigma_t^2 = 0.1 + 0.3 Y_{t-1}^2 + 0.6 sigma_{t-1}^2`,
//!   `e_t ~ N(0, 1)`, `xi_t ~ N(0, 0.1^2)`, from `Y_0 = 0`, `sigma_0^2 = 0.1`.
//! * `nonstationary-seasonal`: 12-period seasonal amplitude driven by a
//!   100-lag linear index, plus AR(1) noise `e_t = 0.6 e_{t-1} + xi_t`:
//!   `Y_t = log(t') sin(2 pi t' / 12) (|b'X_t| + |b'X_t|^2 + |b'X_t|^3)^{1/4} + e_t`
//!   with `t' = t mod 12` (`t' = 0` read as 12) and `X_t = (Y_{t-1}, ..., Y_{t-100})`.
//! * `ar1`: `Y_t = phi Y_{t-1} + sigma z_t`.
//!
//! Every generator discards `burn_in` leading samples.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{stream, Stream};

pub const SEASONAL_LAGS: usize = 100;
pub const SEASONAL_PERIOD: usize = 12;
pub const DEFAULT_BURN_IN: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum GeneratorKind {
    HeteroMixture,
    NonstationarySeasonal,
    Ar1 { phi: f64, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    pub length: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

/// A generated path plus any coefficients drawn for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSeries {
    pub values: Vec<f64>,
    /// Index coefficients of the seasonal model; empty otherwise.
    pub coefficients: Vec<f64>,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(invalid("length", "must be positive"));
        }
        if let GeneratorKind::Ar1 { phi, sigma } = self.kind {
            if !phi.is_finite() || !(sigma >= 0.0) {
                return Err(invalid("sigma", "ar1 needs finite phi and sigma >= 0"));
            }
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<GeneratedSeries> {
        self.validate()?;
        Ok(match self.kind {
            GeneratorKind::HeteroMixture => GeneratedSeries {
                values: generate_hetero(self.length, self.burn_in, seed),
                coefficients: Vec::new(),
            },
            GeneratorKind::NonstationarySeasonal => generate_seasonal(self.length, self.burn_in, seed),
            GeneratorKind::Ar1 { phi, sigma } => GeneratedSeries {
                values: generate_ar1(phi, sigma, self.length, self.burn_in, seed),
                coefficients: Vec::new(),
            },
        })
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One step of the heteroskedastic recursion; returns `(Y_t, sigma_t^2)`.
pub fn hetero_step(y_prev: f64, var_prev: f64, eps: f64, xi: f64) -> (f64, f64) {
    let var = 0.1 + 0.3 * y_prev * y_prev + 0.6 * var_prev;
    (0.8 * y_prev + var.sqrt() * eps + xi, var)
}

/// Runs the heteroskedastic recursion for `steps` steps from `(y0, var0)`
/// with caller-supplied `(e_t, xi_t)` draws. Returns `(Y_1.., sigma_1^2..)`.
pub fn simulate_hetero(
    steps: usize,
    y0: f64,
    var0: f64,
    mut noise: impl FnMut() -> (f64, f64),
) -> (Vec<f64>, Vec<f64>) {
    let mut ys = Vec::with_capacity(steps);
    let mut vars = Vec::with_capacity(steps);
    let (mut y, mut var) = (y0, var0);
    for _ in 0..steps {
        let (e, xi) = noise();
        (y, var) = hetero_step(y, var, e, xi);
        ys.push(y);
        vars.push(var);
    }
    (ys, vars)
}

pub fn generate_hetero(length: usize, burn_in: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Noise);
    let (ys, _) = simulate_hetero(length + burn_in, 0.0, 0.1, || {
        let e = normal(&mut rng);
        let xi = 0.1 * normal(&mut rng);
        (e, xi)
    });
    ys[burn_in..].to_vec()
}

/// Seasonal phase `t mod 12`, with 0 mapped to 12.
pub fn seasonal_phase(t: usize) -> f64 {
    match t % SEASONAL_PERIOD {
        0 => SEASONAL_PERIOD as f64,
        r => r as f64,
    }
}

/// Deterministic seasonal signal for time `t` and index value `b'X_t`.
pub fn seasonal_signal(t: usize, index: f64) -> f64 {
    let phase = seasonal_phase(t);
    let a = index.abs();
    phase.ln()
        * (2.0 * std::f64::consts::PI * phase / SEASONAL_PERIOD as f64).sin()
        * (a + a * a + a * a * a).powf(0.25)
}

/// Runs the seasonal recursion with caller-supplied coefficients and
/// innovations `xi_t`. Time starts at `t = 1`; lags before the start are 0.
pub fn simulate_seasonal(steps: usize, coefficients: &[f64], mut innovation: impl FnMut() -> f64) -> Vec<f64> {
    let lags = coefficients.len();
    let mut ys: Vec<f64> = Vec::with_capacity(steps);
    let mut noise = 0.0;
    for t in 1..=steps {
        let k = ys.len();
        // b'X_t with X_t = (Y_{t-1}, ..., Y_{t-lags})
        let index: f64 = coefficients
            .iter()
            .zip(ys[k.saturating_sub(lags)..].iter().rev())
            .map(|(b, y)| b * y)
            .sum();
        noise = 0.6 * noise + innovation();
        ys.push(seasonal_signal(t, index) + noise);
    }
    ys
}

pub fn generate_seasonal(length: usize, burn_in: usize, seed: u64) -> GeneratedSeries {
    let mut coef_rng = stream(seed, Stream::Coefficients);
    let scale = 1.0 / (SEASONAL_LAGS as f64).sqrt();
    let coefficients: Vec<f64> = (0..SEASONAL_LAGS).map(|_| scale * normal(&mut coef_rng)).collect();
    let mut rng = stream(seed, Stream::Noise);
    let ys = simulate_seasonal(length + burn_in, &coefficients, || normal(&mut rng));
    GeneratedSeries {
        values: ys[burn_in..].to_vec(),
        coefficients,
    }
}

pub fn simulate_ar1(steps: usize, phi: f64, y0: f64, mut innovation: impl FnMut() -> f64) -> Vec<f64> {
    let mut y = y0;
    (0..steps)
        .map(|_| {
            y = phi * y + innovation();
            y
        })
        .collect()
}

pub fn generate_ar1(phi: f64, sigma: f64, length: usize, burn_in: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Noise);
    let ys = simulate_ar1(length + burn_in, phi, 0.0, || sigma * normal(&mut rng));
    ys[burn_in..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hetero_noiseless_from_zero_stays_zero() {
        let (ys, _) = simulate_hetero(50, 0.0, 0.1, || (0.0, 0.0));
        assert!(ys.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn hetero_noiseless_decay() {
        let (ys, _) = simulate_hetero(3, 1.0, 0.1, || (0.0, 0.0));
        assert!((ys[2] - 0.512).abs() < 1e-15);
    }

    #[test]
    fn hetero_variance_fixed_point() {
        let (_, vars) = simulate_hetero(200, 0.0, 0.1, || (0.0, 0.0));
        assert!((vars[199] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn hetero_variance_floor() {
        let (_, vars) = simulate_hetero(5000, 0.0, 0.1, {
            let mut rng = stream(3, Stream::Noise);
            move || (normal(&mut rng), 0.1 * normal(&mut rng))
        });
        assert!(vars.iter().all(|&v| v >= 0.1));
    }

    #[test]
    fn seasonal_zero_signal_and_noise() {
        let ys = simulate_seasonal(300, &[0.0; SEASONAL_LAGS], || 0.0);
        assert!(ys.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn seasonal_phase_one_kills_signal() {
        assert_eq!(seasonal_signal(1, 5.0), 0.0);
        assert_eq!(seasonal_signal(13, -2.0), 0.0);
        assert_eq!(seasonal_phase(24), 12.0);
        assert!(seasonal_signal(24, 3.0).abs() < 1e-12);
        assert!(seasonal_signal(3, 1.0) > 0.0);
    }

    #[test]
    fn seasonal_noise_lag_one_autocorrelation() {
        let mut rng = stream(42, Stream::Noise);
        let ys = simulate_seasonal(100_000, &[0.0; SEASONAL_LAGS], || normal(&mut rng));
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
        let cov: f64 = ys.windows(2).map(|p| (p[0] - mean) * (p[1] - mean)).sum();
        assert!((cov / var - 0.6).abs() < 0.05, "rho = {}", cov / var);
    }

    #[test]
    fn ar1_white_noise_mean() {
        let ys = generate_ar1(0.0, 2.0, 10_000, 0, 9);
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        assert!(mean.abs() < 5.0 * 2.0 / (ys.len() as f64).sqrt());
    }

    #[test]
    fn ar1_deterministic_paths() {
        let ys = simulate_ar1(2, 0.9, 1.0, || 0.0);
        assert!((ys[1] - 0.81).abs() < 1e-15);
        let ys = generate_ar1(0.5, 0.0, 10, 0, 1);
        assert!(ys.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn seeds_reproduce_series() {
        let spec = GeneratorSpec {
            kind: GeneratorKind::NonstationarySeasonal,
            length: 400,
            burn_in: DEFAULT_BURN_IN,
        };
        let a = spec.generate(5).unwrap();
        assert_eq!(a, spec.generate(5).unwrap());
        assert_ne!(a.values, spec.generate(6).unwrap().values);
        assert_eq!(a.values.len(), 400);
        assert_eq!(a.coefficients.len(), SEASONAL_LAGS);
        assert!(a.values.iter().all(|v| v.is_finite()));
        let h = GeneratorSpec {
            kind: GeneratorKind::HeteroMixture,
            length: 2000,
            burn_in: DEFAULT_BURN_IN,
        };
        assert_eq!(h.generate(1).unwrap(), h.generate(1).unwrap());
    }
}
