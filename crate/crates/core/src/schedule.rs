//! Noise schedules and the one-step clean-latent estimate.
//!
//! Latents are `(h·w) × c` matrices (one row per spatial position). Masks
//! handed to denoisers are `(h·w) × 1` with 1 = masked.

use serde::{Deserialize, Serialize};

use crate::error::{AsukaError, Result};
use crate::nn::Mat;

/// Offset of the cosine ᾱ schedule.
pub const COSINE_S: f64 = 0.008;
/// Coefficients below this make the estimate numerically meaningless.
pub const MIN_A: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Diffusion,
    RectifiedFlow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub family: Family,
    pub steps: usize,
}

impl NoiseSchedule {
    pub fn diffusion(steps: usize) -> Self {
        Self { family: Family::Diffusion, steps }
    }

    pub fn rectified_flow(steps: usize) -> Self {
        Self { family: Family::RectifiedFlow, steps }
    }

    fn cosine_f(&self, t: f64) -> f64 {
        let x = (t / self.steps as f64 + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    }

    /// `ᾱ_t` for the diffusion family (`a²`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        self.cosine_f(t as f64) / self.cosine_f(0.0)
    }

    /// `(a(t), b(t))` with `z_t = a·z0 + b·eps`.
    pub fn ab_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        if t >= self.steps {
            return Err(AsukaError::arg(format!("timestep {t} outside [0, {})", self.steps)));
        }
        Ok(match self.family {
            Family::Diffusion => {
                let ab = self.alpha_bar(t);
                (ab.sqrt(), (1.0 - ab).sqrt())
            }
            Family::RectifiedFlow => {
                let b = t as f64 / self.steps as f64;
                (1.0 - b, b)
            }
        })
    }

    /// Timestep range used for large-step latent augmentation: `[T/2, T)`.
    pub fn augment_range(&self) -> (usize, usize) {
        (self.steps / 2, self.steps)
    }

    /// Forward process `z_t = a·z0 + b·eps`.
    pub fn noise(&self, z0: &Mat, eps: &Mat, t: usize) -> Result<Mat> {
        if z0.shape() != eps.shape() {
            return Err(AsukaError::shape(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
        }
        let (a, b) = self.ab_coeffs(t)?;
        Ok(z0.zip_map(eps, |z, e| a * z + b * e))
    }

    /// Regression target for a denoiser trained under this schedule.
    pub fn target(&self, z0: &Mat, eps: &Mat) -> Mat {
        match self.prediction_target() {
            PredictionTarget::Eps => eps.clone(),
            PredictionTarget::Velocity => eps.zip_map(z0, |e, z| e - z),
        }
    }

    pub fn prediction_target(&self) -> PredictionTarget {
        match self.family {
            Family::Diffusion => PredictionTarget::Eps,
            Family::RectifiedFlow => PredictionTarget::Velocity,
        }
    }
}

/// A noised latent together with its clean source and noise.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub z0: Mat,
    pub z_t: Mat,
    pub t: usize,
    pub eps: Mat,
}

impl LatentState {
    pub fn new(schedule: &NoiseSchedule, z0: Mat, eps: Mat, t: usize) -> Result<Self> {
        let z_t = schedule.noise(&z0, &eps, t)?;
        Ok(Self { z0, z_t, t, eps })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    Eps,
    /// `v = eps − z0` (rectified flow).
    Velocity,
}

/// A conditional denoiser over `(z_t; z_cond; mask)` at timestep `t`.
pub trait Denoiser: Sync {
    fn prediction_target(&self) -> PredictionTarget;
    fn predict(&self, z_t: &Mat, z_cond: &Mat, mask: &Mat, t: usize) -> Result<Mat>;
}

/// Converts a denoiser output to an eps prediction.
pub fn to_eps(schedule: &NoiseSchedule, target: PredictionTarget, z_t: &Mat, out: &Mat, t: usize) -> Result<Mat> {
    Ok(match target {
        PredictionTarget::Eps => out.clone(),
        PredictionTarget::Velocity => {
            // z_t = a(eps − v) + b·eps = eps − a·v when a + b = 1
            let (a, _) = schedule.ab_coeffs(t)?;
            z_t.zip_map(out, |z, v| z + a * v)
        }
    })
}

/// `ẑ0 = (z_t − b·epŝ)/a` with the denoiser conditioned on the clean latent
/// and an all-zero mask.
pub fn one_step_estimate(z_t: &Mat, t: usize, denoiser: &dyn Denoiser, z0_cond: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    let (a, b) = schedule.ab_coeffs(t)?;
    if a < MIN_A {
        return Err(AsukaError::SingularCoefficient { t, a });
    }
    if z_t.shape() != z0_cond.shape() {
        return Err(AsukaError::shape(format!("z_t {:?} vs z0_cond {:?}", z_t.shape(), z0_cond.shape())));
    }
    let mask = Mat::zeros(z_t.rows, 1);
    let out = denoiser.predict(z_t, z0_cond, &mask, t)?;
    if out.shape() != z_t.shape() {
        return Err(AsukaError::shape(format!("denoiser returned {:?} for {:?}", out.shape(), z_t.shape())));
    }
    let eps = to_eps(schedule, denoiser.prediction_target(), z_t, &out, t)?;
    Ok(z_t.zip_map(&eps, |z, e| (z - b * e) / a))
}

/// Denoiser that knows the truth: treats `z_cond` as the clean latent and
/// returns the exact noise (or velocity) that produced `z_t`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub schedule: NoiseSchedule,
}

impl Denoiser for OracleDenoiser {
    fn prediction_target(&self) -> PredictionTarget {
        self.schedule.prediction_target()
    }

    fn predict(&self, z_t: &Mat, z_cond: &Mat, _mask: &Mat, t: usize) -> Result<Mat> {
        let (a, b) = self.schedule.ab_coeffs(t)?;
        if b == 0.0 {
            return Ok(Mat::zeros(z_t.rows, z_t.cols));
        }
        let eps = z_t.zip_map(z_cond, |z, z0| (z - a * z0) / b);
        Ok(self.schedule.target(z_cond, &eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn identities_hold_at_every_step() {
        for steps in [1000, 37] {
            let d = NoiseSchedule::diffusion(steps);
            let f = NoiseSchedule::rectified_flow(steps);
            let mut prev = (f64::INFINITY, f64::INFINITY);
            for t in 0..steps {
                let (a, b) = d.ab_coeffs(t).unwrap();
                assert!((a * a + b * b - 1.0).abs() <= 1e-9);
                let (af, bf) = f.ab_coeffs(t).unwrap();
                assert!((af + bf - 1.0).abs() <= 1e-9);
                assert!(a <= prev.0 && af <= prev.1);
                prev = (a, af);
            }
            assert_eq!(d.ab_coeffs(0).unwrap(), (1.0, 0.0));
            assert_eq!(f.ab_coeffs(0).unwrap(), (1.0, 0.0));
            assert!(d.ab_coeffs(steps).is_err());
        }
        assert_eq!(NoiseSchedule::rectified_flow(1000).ab_coeffs(250).unwrap(), (0.75, 0.25));
    }

    #[test]
    fn t_zero_returns_z_t() {
        struct Junk;
        impl Denoiser for Junk {
            fn prediction_target(&self) -> PredictionTarget {
                PredictionTarget::Eps
            }
            fn predict(&self, z_t: &Mat, _: &Mat, _: &Mat, _: usize) -> Result<Mat> {
                Ok(Mat::full(z_t.rows, z_t.cols, 123.0))
            }
        }
        let mut rng = seeded(1);
        let z = Mat::randn(64, 4, 1.0, &mut rng);
        let cond = Mat::randn(64, 4, 1.0, &mut rng);
        for s in [NoiseSchedule::diffusion(1000), NoiseSchedule::rectified_flow(1000)] {
            assert_eq!(one_step_estimate(&z, 0, &Junk, &cond, &s).unwrap(), z);
        }
    }

    #[test]
    fn singular_coefficient_is_reported() {
        let s = NoiseSchedule::rectified_flow(10);
        // a(9) = 0.1 is fine; a schedule with huge T still keeps a ≥ 1/T
        let z = Mat::zeros(4, 4);
        let oracle = OracleDenoiser { schedule: s };
        assert!(one_step_estimate(&z, 9, &oracle, &z, &s).is_ok());
        let big = NoiseSchedule::rectified_flow(10_000_000);
        let oracle = OracleDenoiser { schedule: big };
        assert!(matches!(
            one_step_estimate(&z, 9_999_999, &oracle, &z, &big),
            Err(AsukaError::SingularCoefficient { .. })
        ));
    }

    #[test]
    fn oracle_recovers_z0() {
        let mut rng = seeded(5);
        for s in [NoiseSchedule::diffusion(1000), NoiseSchedule::rectified_flow(1000)] {
            let oracle = OracleDenoiser { schedule: s };
            let (lo, hi) = s.augment_range();
            for _ in 0..100 {
                let z0 = Mat::randn(64, 4, 1.0, &mut rng);
                let eps = Mat::randn(64, 4, 1.0, &mut rng);
                let t = rng.random_range(lo..hi);
                let st = LatentState::new(&s, z0, eps, t).unwrap();
                let est = one_step_estimate(&st.z_t, t, &oracle, &st.z0, &s).unwrap();
                assert!(est.max_abs_diff(&st.z0) < 1e-6);
            }
        }
    }

    #[test]
    fn velocity_maps_to_eps() {
        let s = NoiseSchedule::rectified_flow(1000);
        let mut rng = seeded(2);
        let z0 = Mat::randn(8, 3, 1.0, &mut rng);
        let eps = Mat::randn(8, 3, 1.0, &mut rng);
        let z_t = s.noise(&z0, &eps, 700).unwrap();
        let v = s.target(&z0, &eps);
        let back = to_eps(&s, PredictionTarget::Velocity, &z_t, &v, 700).unwrap();
        assert!(back.max_abs_diff(&eps) < 1e-12);
    }

    proptest! {
        #[test]
        fn forward_inverse_consistency(seed in 0u64..10_000, t in 0usize..1000, rf in any::<bool>()) {
            let s = if rf { NoiseSchedule::rectified_flow(1000) } else { NoiseSchedule::diffusion(1000) };
            let mut rng = seeded(seed);
            let z0 = Mat::randn(16, 4, 1.0, &mut rng);
            let eps = Mat::randn(16, 4, 1.0, &mut rng);
            let z_t = s.noise(&z0, &eps, t).unwrap();
            let est = one_step_estimate(&z_t, t, &OracleDenoiser { schedule: s }, &z0, &s).unwrap();
            prop_assert!(est.max_abs_diff(&z0) < 1e-6);
        }
    }
}
