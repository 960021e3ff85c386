use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{apply_noise, gaussian_like, pack_input, ConditionPack, DiffusionError, DiffusionSchedule};
use crate::nn::{
    attention_backward, attention_forward, gaussian_matrix, parameter_struct, row_sum, sinusoidal_table,
    AttentionCache, Parameters,
};

/// Anything that predicts `ε̂` from a packed input, a step and scene tokens.
pub trait NoisePredictor: Sync {
    fn predict_noise(
        &self,
        input: &Array3<f64>,
        t: usize,
        scene_tokens: &Array2<f64>,
    ) -> Result<Array3<f64>, DiffusionError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub patch: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub image_channels: usize,
    pub depth_channels: usize,
    /// Rows of the timestep table are `0..=steps`.
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            d_model: 32,
            d_hidden: 64,
            image_channels: 3,
            depth_channels: 1,
            steps: super::DEFAULT_STEPS,
        }
    }
}

impl DenoiserConfig {
    pub fn latent_channels(&self) -> usize {
        self.image_channels + self.depth_channels
    }

    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels() + 2
    }

    fn patch_area(&self) -> usize {
        self.patch * self.patch
    }
}

parameter_struct! {
    /// Weights of the toy denoiser, in checkpoint order.
    pub struct DenoiserParams {
        pub patch_w: Array2<f64>,
        pub patch_b: Array1<f64>,
        pub attn_q: Array2<f64>,
        pub attn_k: Array2<f64>,
        pub attn_v: Array2<f64>,
        pub attn_o: Array2<f64>,
        pub mlp_w1: Array2<f64>,
        pub mlp_b1: Array1<f64>,
        pub mlp_w2: Array2<f64>,
        pub mlp_b2: Array1<f64>,
        pub unpatch_w: Array2<f64>,
        pub unpatch_b: Array1<f64>,
        /// Maps the timestep embedding to a per-channel gain on `z_t`.
        pub skip_w: Array2<f64>,
    }
}

impl DenoiserParams {
    pub fn init(config: &DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let in_dim = config.in_channels() * config.patch_area();
        let out_dim = config.latent_channels() * config.patch_area();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            patch_w: gaussian_matrix(&mut rng, in_dim, d, inv(in_dim)),
            patch_b: Array1::zeros(d),
            attn_q: gaussian_matrix(&mut rng, d, d, inv(d)),
            attn_k: gaussian_matrix(&mut rng, d, d, inv(d)),
            attn_v: gaussian_matrix(&mut rng, d, d, inv(d)),
            attn_o: gaussian_matrix(&mut rng, d, d, inv(d)),
            mlp_w1: gaussian_matrix(&mut rng, d, config.d_hidden, inv(d)),
            mlp_b1: Array1::zeros(config.d_hidden),
            mlp_w2: gaussian_matrix(&mut rng, config.d_hidden, d, inv(config.d_hidden)),
            mlp_b2: Array1::zeros(d),
            unpatch_w: gaussian_matrix(&mut rng, d, out_dim, 0.1 * inv(d)),
            unpatch_b: Array1::zeros(out_dim),
            skip_w: Array2::zeros((d, config.latent_channels())),
        }
    }
}

/// Patch transformer standing in for the denoising U-Net:
/// patchify → linear embed + timestep embedding → cross-attention onto the
/// scene tokens (residual) → two-layer tanh MLP (residual) → linear
/// unpatchify to the latent channels, plus a time-gated skip
/// `(τ_t W_skip)_c · z_t[c]` per latent channel.
///
/// The skip exists because the best guess of `ε` from `z_t` alone is a
/// `t`-dependent multiple of `z_t`, a product the additive timestep
/// embedding cannot express through one tanh layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    pub params: DenoiserParams,
    time_table: Array2<f64>,
}

/// Activations saved by [`ToyDenoiser::forward`].
#[derive(Clone, Debug)]
pub struct DenoiserCache {
    patches: Array2<f64>,
    embed: Array2<f64>,
    scene: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attention: AttentionCache,
    context: Array2<f64>,
    h1: Array2<f64>,
    hidden: Array2<f64>,
    h2: Array2<f64>,
    height: usize,
    width: usize,
    z_t: Array3<f64>,
    time_row: Array1<f64>,
}

/// `(tokens, c·p²)` with token `py·(w/p) + px` and column `c·p² + dy·p + dx`.
pub fn patchify(x: &Array3<f64>, p: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (gh, gw) = (h / p, w / p);
    Array2::from_shape_fn((gh * gw, c * p * p), |(n, col)| {
        let (py, px) = (n / gw, n % gw);
        let (ch, r) = (col / (p * p), col % (p * p));
        x[[ch, py * p + r / p, px * p + r % p]]
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(y: &Array2<f64>, channels: usize, height: usize, width: usize, p: usize) -> Array3<f64> {
    let gw = width / p;
    Array3::from_shape_fn((channels, height, width), |(c, yy, xx)| {
        let n = (yy / p) * gw + xx / p;
        y[[n, c * p * p + (yy % p) * p + xx % p]]
    })
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        Self::with_params(config, DenoiserParams::init(&config, seed))
    }

    pub fn with_params(config: DenoiserConfig, params: DenoiserParams) -> Self {
        Self {
            config,
            params,
            time_table: sinusoidal_table(config.steps + 1, config.d_model),
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn check_input(&self, input: &Array3<f64>, t: usize, scene: &Array2<f64>) -> Result<(), DiffusionError> {
        let cfg = &self.config;
        let (c, h, w) = input.dim();
        if c != cfg.in_channels() || h % cfg.patch != 0 || w % cfg.patch != 0 || h == 0 || w == 0 {
            return Err(DiffusionError::ShapeMismatch(format!(
                "denoiser input is {c}x{h}x{w}; expected {} channels and sides divisible by {}",
                cfg.in_channels(),
                cfg.patch
            )));
        }
        if scene.ncols() != cfg.d_model || scene.nrows() == 0 {
            return Err(DiffusionError::ShapeMismatch(format!(
                "scene tokens are {:?}, expected (n>=1, {})",
                scene.dim(),
                cfg.d_model
            )));
        }
        if t > cfg.steps {
            return Err(DiffusionError::StepOutOfRange { t, steps: cfg.steps });
        }
        Ok(())
    }

    pub fn forward(
        &self,
        input: &Array3<f64>,
        t: usize,
        scene: &Array2<f64>,
    ) -> Result<(Array3<f64>, DenoiserCache), DiffusionError> {
        self.check_input(input, t, scene)?;
        let p = &self.params;
        let (_, height, width) = input.dim();
        let patches = patchify(input, self.config.patch);
        let embed = patches.dot(&p.patch_w) + &p.patch_b + &self.time_table.row(t);
        let q = embed.dot(&p.attn_q);
        let k = scene.dot(&p.attn_k);
        let v = scene.dot(&p.attn_v);
        let (context, attention) = attention_forward(&q, &k, &v);
        let h1 = &embed + &context.dot(&p.attn_o);
        let hidden = (h1.dot(&p.mlp_w1) + &p.mlp_b1).mapv(f64::tanh);
        let h2 = &h1 + &(hidden.dot(&p.mlp_w2) + &p.mlp_b2);
        let y = h2.dot(&p.unpatch_w) + &p.unpatch_b;
        let mut out = unpatchify(&y, self.config.latent_channels(), height, width, self.config.patch);
        let z_t = input.slice(s![0..self.config.latent_channels(), .., ..]).to_owned();
        let time_row = self.time_table.row(t).to_owned();
        let gain = time_row.dot(&p.skip_w);
        for (c, g) in gain.iter().enumerate() {
            out.index_axis_mut(Axis(0), c).scaled_add(*g, &z_t.index_axis(Axis(0), c));
        }
        let cache = DenoiserCache {
            patches,
            embed,
            scene: scene.clone(),
            q,
            k,
            v,
            attention,
            context,
            h1,
            hidden,
            h2,
            height,
            width,
            z_t,
            time_row,
        };
        Ok((out, cache))
    }

    /// Parameter gradients and the gradient on the scene tokens for an
    /// upstream gradient `d_out` shaped like the output.
    pub fn backward(&self, cache: &DenoiserCache, d_out: &Array3<f64>) -> (DenoiserParams, Array2<f64>) {
        debug_assert_eq!(d_out.dim().1, cache.height);
        debug_assert_eq!(d_out.dim().2, cache.width);
        let p = &self.params;
        let dy = patchify(d_out, self.config.patch);

        let d_unpatch_w = cache.h2.t().dot(&dy);
        let d_unpatch_b = row_sum(&dy);
        let dh2 = dy.dot(&p.unpatch_w.t());

        let d_mlp_b2 = row_sum(&dh2);
        let d_mlp_w2 = cache.hidden.t().dot(&dh2);
        let d_hidden = dh2.dot(&p.mlp_w2.t());
        let dz1 = &d_hidden * &cache.hidden.mapv(|g| 1.0 - g * g);
        let d_mlp_w1 = cache.h1.t().dot(&dz1);
        let d_mlp_b1 = row_sum(&dz1);
        let dh1 = &dh2 + &dz1.dot(&p.mlp_w1.t());

        let d_attn_o = cache.context.t().dot(&dh1);
        let d_context = dh1.dot(&p.attn_o.t());
        let (dq, dk, dv) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.attention, &d_context);
        let d_attn_q = cache.embed.t().dot(&dq);
        let d_attn_k = cache.scene.t().dot(&dk);
        let d_attn_v = cache.scene.t().dot(&dv);
        let d_scene = dk.dot(&p.attn_k.t()) + dv.dot(&p.attn_v.t());
        let d_embed = &dh1 + &dq.dot(&p.attn_q.t());

        let d_gain = Array1::from_shape_fn(self.config.latent_channels(), |c| {
            (&d_out.index_axis(Axis(0), c) * &cache.z_t.index_axis(Axis(0), c)).sum()
        });
        let d_skip_w = Array2::from_shape_fn(p.skip_w.dim(), |(i, c)| cache.time_row[i] * d_gain[c]);

        let grads = DenoiserParams {
            patch_w: cache.patches.t().dot(&d_embed),
            patch_b: row_sum(&d_embed),
            attn_q: d_attn_q,
            attn_k: d_attn_k,
            attn_v: d_attn_v,
            attn_o: d_attn_o,
            mlp_w1: d_mlp_w1,
            mlp_b1: d_mlp_b1,
            mlp_w2: d_mlp_w2,
            mlp_b2: d_mlp_b2,
            unpatch_w: d_unpatch_w,
            unpatch_b: d_unpatch_b,
            skip_w: d_skip_w,
        };
        (grads, d_scene)
    }

    /// Mean squared noise-prediction error over `batch` and its gradients.
    /// `t` and `ε` are drawn per item from a stream seeded with `seed`.
    pub fn loss_and_grads(
        &self,
        batch: &[DenoiseItem],
        sched: &DiffusionSchedule,
        seed: u64,
    ) -> Result<LossAndGrads, DiffusionError> {
        let samples = draw_noised_batch(batch, sched, seed)?;
        let numel: usize = samples.iter().map(|s| s.eps.len()).sum();
        let norm = 1.0 / numel as f64;
        let per_item: Vec<Result<(f64, DenoiserParams, Array2<f64>), DiffusionError>> = samples
            .par_iter()
            .zip(batch.par_iter())
            .map(|(s, item)| {
                let (eps_hat, cache) = self.forward(&s.input, s.t, &item.scene_tokens)?;
                let diff = &eps_hat - &s.eps;
                let sq = diff.iter().map(|d| d * d).sum::<f64>();
                let d_out = diff * (2.0 * norm);
                let (g, d_scene) = self.backward(&cache, &d_out);
                Ok((sq, g, d_scene))
            })
            .collect();
        let mut loss = 0.0;
        let mut grads = self.params.zeros_like();
        let mut d_scene = Vec::with_capacity(batch.len());
        for r in per_item {
            let (sq, g, ds) = r?;
            loss += sq;
            grads.add_scaled(1.0, &g);
            d_scene.push(ds);
        }
        Ok(LossAndGrads {
            loss: loss * norm,
            grads,
            d_scene,
        })
    }
}

impl NoisePredictor for ToyDenoiser {
    fn predict_noise(
        &self,
        input: &Array3<f64>,
        t: usize,
        scene_tokens: &Array2<f64>,
    ) -> Result<Array3<f64>, DiffusionError> {
        self.forward(input, t, scene_tokens).map(|(out, _)| out)
    }
}

/// One training item: clean latent, its conditioning and scene tokens.
#[derive(Clone, Debug)]
pub struct DenoiseItem {
    pub z0: Array3<f64>,
    pub cond: ConditionPack,
    pub scene_tokens: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: DenoiserParams,
    /// Gradient on each item's scene tokens, in batch order.
    pub d_scene: Vec<Array2<f64>>,
}

/// A noised, packed training input together with the noise that made it.
#[derive(Clone, Debug)]
pub struct NoisedSample {
    pub t: usize,
    pub input: Array3<f64>,
    pub eps: Array3<f64>,
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` for every item, in order.
pub fn draw_noised_batch(
    batch: &[DenoiseItem],
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Vec<NoisedSample>, DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch
        .iter()
        .map(|item| {
            let t = rng.random_range(1..=sched.steps());
            let eps = gaussian_like(&mut rng, item.z0.dim());
            let z_t = apply_noise(&item.z0, sched.alpha_bar(t), &eps);
            Ok(NoisedSample {
                t,
                input: pack_input(&z_t, &item.cond)?,
                eps,
            })
        })
        .collect()
}

/// `mean ‖ε − ε̂‖²` over every element of the batch, with `ε̂` supplied by
/// `predict(item, sample)`.
pub fn diffusion_loss<F>(
    batch: &[DenoiseItem],
    sched: &DiffusionSchedule,
    seed: u64,
    mut predict: F,
) -> Result<f64, DiffusionError>
where
    F: FnMut(&DenoiseItem, &NoisedSample) -> Result<Array3<f64>, DiffusionError>,
{
    let samples = draw_noised_batch(batch, sched, seed)?;
    let mut sum = 0.0;
    let mut numel = 0usize;
    for (item, s) in batch.iter().zip(&samples) {
        let eps_hat = predict(item, s)?;
        if eps_hat.dim() != s.eps.dim() {
            return Err(DiffusionError::ShapeMismatch(format!(
                "prediction {:?} vs noise {:?}",
                eps_hat.dim(),
                s.eps.dim()
            )));
        }
        sum += (&s.eps - &eps_hat).iter().map(|d| d * d).sum::<f64>();
        numel += s.eps.len();
    }
    Ok(sum / numel as f64)
}
