use ndarray::{Array2, Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gaussian_like, pack_input, predict_x0, ConditionPack, DiffusionError, DiffusionSchedule, NoisePredictor};

/// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
pub fn posterior_variance(sched: &DiffusionSchedule, t: usize) -> f64 {
    sched.beta(t) * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t))
}

/// DDPM ancestral sampling from `z_T ~ N(0, I)` down to `ẑ_0`.
pub fn sample(
    predictor: &dyn NoisePredictor,
    cond: &ConditionPack,
    scene_tokens: &Array2<f64>,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Array3<f64>, DiffusionError> {
    sample_with_trace(predictor, cond, scene_tokens, sched, seed, |_, _, _| {})
}

/// [`sample`], calling `on_step(t, z_t, x̂_0)` before each reverse step.
pub fn sample_with_trace<F>(
    predictor: &dyn NoisePredictor,
    cond: &ConditionPack,
    scene_tokens: &Array2<f64>,
    sched: &DiffusionSchedule,
    seed: u64,
    mut on_step: F,
) -> Result<Array3<f64>, DiffusionError>
where
    F: FnMut(usize, &Array3<f64>, &Array3<f64>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = cond.latent_shape();
    let mut z = gaussian_like(&mut rng, shape);
    for t in (1..=sched.steps()).rev() {
        let input = pack_input(&z, cond)?;
        let eps_hat = predictor.predict_noise(&input, t, scene_tokens)?;
        if eps_hat.dim() != shape {
            return Err(DiffusionError::ShapeMismatch(format!(
                "predictor returned {:?}, expected {shape:?}",
                eps_hat.dim()
            )));
        }
        let (ab, ab_prev, beta) = (sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.beta(t));
        let x0 = predict_x0(&z, &eps_hat, ab);
        on_step(t, &z, &x0);
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_zt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mut next = Zip::from(&x0).and(&z).map_collect(|&a, &b| c_x0 * a + c_zt * b);
        if t > 1 {
            let sigma = posterior_variance(sched, t).sqrt();
            let noise = gaussian_like(&mut rng, shape);
            next.zip_mut_with(&noise, |v, n| *v += sigma * n);
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(DiffusionError::NonFiniteState { t });
        }
        z = next;
    }
    Ok(z)
}
