use ndarray::{Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::DiffusionError;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Variance schedule `β_1..β_T` with cumulative `ᾱ_t = Π_{s≤t} (1 − β_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

/// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidRange("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

pub fn gaussian_like<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// `√ᾱ · z_0 + √(1 − ᾱ) · ε`.
pub fn apply_noise(z0: &Array3<f64>, alpha_bar: f64, eps: &Array3<f64>) -> Array3<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Zip::from(z0).and(eps).map_collect(|&z, &e| a * z + b * e)
}

/// Draws `ε ~ N(0, I)` from a stream seeded with `seed` and returns
/// `(z_t, ε)`.
pub fn forward_noise(
    z0: &Array3<f64>,
    t: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<(Array3<f64>, Array3<f64>), DiffusionError> {
    sched.check_step(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = gaussian_like(&mut rng, z0.dim());
    Ok((apply_noise(z0, sched.alpha_bar(t), &eps), eps))
}

/// `x̂_0 = (z_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(z_t: &Array3<f64>, eps_hat: &Array3<f64>, alpha_bar: f64) -> Array3<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Zip::from(z_t).and(eps_hat).map_collect(|&z, &e| (z - b * e) / a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_schedules() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        let one = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar(1), 0.5);
    }

    #[test]
    fn default_schedule_is_monotone() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 100);
        // running-product oracle
        let mut prod = 1.0;
        for t in 1..=100 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 99.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(t) - prod).abs() < 1e-14);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert!(s.alpha_bar(100) < s.alpha_bar(1));
    }

    #[test]
    fn invalid_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn noise_endpoints() {
        let z0 = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y * 3 + x) as f64 * 0.1 - 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = gaussian_like(&mut rng, z0.dim());
        let s = DiffusionSchedule::default();
        assert_eq!(apply_noise(&z0, s.alpha_bar(0), &eps), z0);
        assert_eq!(apply_noise(&z0, 0.0, &eps), eps);
    }

    #[test]
    fn forward_noise_checks_step_and_is_seeded() {
        let s = DiffusionSchedule::default();
        let z0 = Array3::zeros((4, 2, 2));
        assert!(matches!(forward_noise(&z0, 0, &s, 1), Err(DiffusionError::StepOutOfRange { .. })));
        assert!(matches!(forward_noise(&z0, 101, &s, 1), Err(DiffusionError::StepOutOfRange { .. })));
        assert_eq!(forward_noise(&z0, 50, &s, 7).unwrap(), forward_noise(&z0, 50, &s, 7).unwrap());
    }

    #[test]
    fn x0_inverts_forward_noise() {
        let s = DiffusionSchedule::default();
        let z0 = Array3::from_shape_fn((4, 4, 4), |(c, y, x)| ((c * 16 + y * 4 + x) as f64).sin());
        for t in 1..=s.steps() {
            let (zt, eps) = forward_noise(&z0, t, &s, t as u64).unwrap();
            let x0 = predict_x0(&zt, &eps, s.alpha_bar(t));
            let err = (&x0 - &z0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-6, "t={t} err={err}");
        }
    }
}
