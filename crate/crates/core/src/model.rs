//! The trainable completion model: toy denoiser plus scene embedder, trained
//! jointly by plain gradient descent, and its checkpoint format.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian `u32`, all values little-endian `f64`.
//!
//! ```text
//! magic        b"SCMP"
//! version      1
//! config       patch, d_model, d_hidden, image_channels, depth_channels,
//!              steps, scene_tokens
//! count        number of tensors
//! per tensor   name_len, name (UTF-8), ndim, dims[ndim], data[prod(dims)]
//! ```
//!
//! Tensors appear in parameter order, denoiser first (`denoiser.<field>`)
//! then embedder (`embedder.<field>`).

use std::io::{Read, Write};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_rgbd, normalize_depth, LatentCodec};
use crate::diffusion::{
    ConditionPack, DenoiseItem, DenoiserConfig, DenoiserParams, DiffusionError, DiffusionSchedule, ToyDenoiser,
};
use crate::embedder::{EmbedError, FeatureExtractor, PatchGridExtractor, ReferenceFeatures, SceneEmbedding};
use crate::geom::RgbImage;
use crate::nn::Parameters;
use crate::synth::{generate_scene, make_training_pairs, orbit_cameras, TrainingPair, DEFAULT_STRIDES};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCMP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("checkpoint I/O failed: {0}")]
    Io(String),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Io(_) => "IO_FAILURE",
            CheckpointError::BadMagic => "BAD_MAGIC",
            CheckpointError::VersionUnsupported(_) => "VERSION_UNSUPPORTED",
            CheckpointError::Malformed(_) => "MALFORMED_CHECKPOINT",
        }
    }
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e.to_string())
    }
}

/// A clean RGBD latent, the conditioning derived from a partial view of it,
/// and the features of the reference view.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub z0: Array3<f64>,
    pub cond: ConditionPack,
    pub reference: ReferenceFeatures,
}

impl TrainingExample {
    /// Target latent from the exact frame, conditioning from the splatted
    /// partial view, each depth normalized by its own percentiles.
    pub fn from_pair(model: &CompletionModel, codec: &dyn LatentCodec, pair: &TrainingPair) -> Result<Self, crate::Error> {
        let target = encode_rgbd(codec, &pair.target.rgb, &normalize_depth(&pair.target.depth)?)?;
        let z0 = ndarray::concatenate(ndarray::Axis(0), &[target.image.view(), target.depth.view()])
            .expect("latents share spatial shape");
        let partial_depth = normalize_depth(&pair.condition.depth)?;
        Ok(Self {
            z0,
            cond: ConditionPack::from_partial(codec, &pair.condition, &partial_depth)?,
            reference: model.reference_features(&pair.source_rgb)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CompletionModel {
    pub denoiser: ToyDenoiser,
    pub embedder: SceneEmbedding,
    extractor: PatchGridExtractor,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub loss: f64,
    pub denoiser: DenoiserParams,
    pub embedder: SceneEmbedding,
}

impl CompletionModel {
    pub fn new(config: DenoiserConfig, scene_tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let denoiser = ToyDenoiser::new(config, rng.random());
        let embedder = SceneEmbedding::new(scene_tokens, config.d_model, rng.random());
        Self::from_parts(denoiser, embedder)
    }

    pub fn from_parts(denoiser: ToyDenoiser, embedder: SceneEmbedding) -> Self {
        let extractor = PatchGridExtractor::new(denoiser.config().d_model);
        Self {
            denoiser,
            embedder,
            extractor,
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.denoiser.config()
    }

    pub fn extractor(&self) -> &PatchGridExtractor {
        &self.extractor
    }

    pub fn reference_features(&self, image: &RgbImage) -> Result<ReferenceFeatures, EmbedError> {
        self.extractor.extract(image)
    }

    pub fn scene_tokens(&self, reference: &ReferenceFeatures) -> Result<Array2<f64>, EmbedError> {
        self.embedder.forward(reference).map(|(out, _)| out)
    }

    /// Joint loss and gradients; the scene tokens are produced by the
    /// embedder so its parameters receive gradient through the denoiser.
    pub fn loss_and_grads(
        &self,
        batch: &[TrainingExample],
        sched: &DiffusionSchedule,
        seed: u64,
    ) -> Result<ModelGrads, DiffusionError> {
        let mut caches = Vec::with_capacity(batch.len());
        let mut items = Vec::with_capacity(batch.len());
        for ex in batch {
            let (tokens, cache) = self.embedder.forward(&ex.reference)?;
            caches.push(cache);
            items.push(DenoiseItem {
                z0: ex.z0.clone(),
                cond: ex.cond.clone(),
                scene_tokens: tokens,
            });
        }
        let lg = self.denoiser.loss_and_grads(&items, sched, seed)?;
        let mut emb_grads = self.embedder.zeros_like();
        for (cache, d_scene) in caches.iter().zip(&lg.d_scene) {
            emb_grads.add_scaled(1.0, &self.embedder.backward(cache, d_scene));
        }
        Ok(ModelGrads {
            loss: lg.loss,
            denoiser: lg.grads,
            embedder: emb_grads,
        })
    }

    /// Loss over the whole dataset with fixed noise draws from `seed`.
    pub fn dataset_loss(
        &self,
        dataset: &[TrainingExample],
        sched: &DiffusionSchedule,
        seed: u64,
    ) -> Result<f64, DiffusionError> {
        self.loss_and_grads(dataset, sched, seed).map(|g| g.loss)
    }

    pub fn num_params(&self) -> usize {
        self.denoiser.params.num_params() + self.embedder.num_params()
    }

    pub fn all_finite(&self) -> bool {
        self.denoiser.params.all_finite() && self.embedder.all_finite()
    }

    fn descend(&mut self, grads: &ModelGrads, lr: f64) {
        self.denoiser.params.add_scaled(-lr, &grads.denoiser);
        self.embedder.add_scaled(-lr, &grads.embedder);
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let cfg = self.config();
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = [
            CHECKPOINT_VERSION,
            cfg.patch as u32,
            cfg.d_model as u32,
            cfg.d_hidden as u32,
            cfg.image_channels as u32,
            cfg.depth_channels as u32,
            cfg.steps as u32,
            self.embedder.n_tokens() as u32,
        ];
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        let den = self.denoiser.params.tensors();
        let emb = self.embedder.tensors();
        w.write_all(&((den.len() + emb.len()) as u32).to_le_bytes())?;
        let named = den
            .into_iter()
            .map(|t| ("denoiser", t))
            .chain(emb.into_iter().map(|t| ("embedder", t)));
        for (prefix, t) in named {
            let name = format!("{prefix}.{}", t.name);
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for d in &t.shape {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionUnsupported(version));
        }
        let mut h = [0usize; 7];
        for v in &mut h {
            *v = read_u32(&mut r)? as usize;
        }
        let config = DenoiserConfig {
            patch: h[0],
            d_model: h[1],
            d_hidden: h[2],
            image_channels: h[3],
            depth_channels: h[4],
            steps: h[5],
        };
        if config.patch == 0 || config.d_model == 0 || h[6] == 0 || config.steps == 0 {
            return Err(CheckpointError::Malformed("zero-sized configuration".into()));
        }
        // Build a zero model of the declared shape and fill it tensor by tensor.
        let mut den = DenoiserParams::init(&config, 0).zeros_like();
        let mut emb = SceneEmbedding::new(h[6], config.d_model, 0).zeros_like();
        let count = read_u32(&mut r)? as usize;
        let expected: Vec<(String, Vec<usize>)> = den
            .tensors()
            .iter()
            .map(|t| (format!("denoiser.{}", t.name), t.shape.clone()))
            .chain(emb.tensors().iter().map(|t| (format!("embedder.{}", t.name), t.shape.clone())))
            .collect();
        if count != expected.len() {
            return Err(CheckpointError::Malformed(format!(
                "expected {} tensors, found {count}",
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let len = read_u32(&mut r)? as usize;
            if len > 256 {
                return Err(CheckpointError::Malformed("tensor name too long".into()));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let got = String::from_utf8(buf).map_err(|_| CheckpointError::Malformed("tensor name not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim.min(8) {
                dims.push(read_u32(&mut r)? as usize);
            }
            if &got != name || &dims != shape {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {got} {dims:?} where {name} {shape:?} was expected"
                )));
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            values.push(data);
        }
        let (den_vals, emb_vals) = values.split_at(den.tensors().len());
        for (t, v) in den.tensors_mut().into_iter().zip(den_vals) {
            t.data.copy_from_slice(v);
        }
        for (t, v) in emb.tensors_mut().into_iter().zip(emb_vals) {
            t.data.copy_from_slice(v);
        }
        Ok(Self::from_parts(ToyDenoiser::with_params(config, den), emb))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Recipe for the synthetic training set: an orbit through one generated
/// room, cut into condition/target pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetConfig {
    pub scene_seed: u64,
    pub pair_seed: u64,
    pub cameras: usize,
    pub radius: f64,
    pub phase: f64,
    pub step: f64,
    pub resolution: usize,
    pub pairs: usize,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            scene_seed: 1,
            pair_seed: 3,
            cameras: 16,
            radius: 2.0,
            phase: 0.0,
            step: 0.12,
            resolution: 16,
            pairs: 64,
        }
    }
}

/// First `config.pairs` shuffled pairs of the orbit, encoded for `model`.
pub fn toy_dataset(
    model: &CompletionModel,
    codec: &dyn LatentCodec,
    config: &ToyDatasetConfig,
) -> Result<Vec<TrainingExample>, crate::Error> {
    let scene = generate_scene(config.scene_seed);
    let res = config.resolution;
    let cams = orbit_cameras(&scene, config.cameras, config.radius, config.phase, config.step, res, res)?;
    let pairs = make_training_pairs(&scene, &cams, &DEFAULT_STRIDES, config.pair_seed, res, res)?;
    pairs
        .iter()
        .take(config.pairs)
        .map(|p| TrainingExample::from_pair(model, codec, p))
        .collect()
}

/// [`CompletionModel::dataset_loss`] averaged over the noise draws of `seeds`.
pub fn mean_dataset_loss(
    model: &CompletionModel,
    dataset: &[TrainingExample],
    sched: &DiffusionSchedule,
    seeds: std::ops::Range<u64>,
) -> Result<f64, DiffusionError> {
    let n = seeds.end.saturating_sub(seeds.start).max(1) as f64;
    let mut total = 0.0;
    for s in seeds {
        total += model.dataset_loss(dataset, sched, s)?;
    }
    Ok(total / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.2,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mini-batch loss before each update.
    pub loss_curve: Vec<f64>,
}

/// Plain gradient descent with a fixed learning rate. Mini-batches walk a
/// seeded permutation of the dataset, reshuffled every epoch.
pub fn train(
    mut model: CompletionModel,
    dataset: &[TrainingExample],
    sched: &DiffusionSchedule,
    config: &TrainConfig,
) -> Result<(CompletionModel, TrainReport), DiffusionError> {
    if dataset.is_empty() || config.batch_size == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut report = TrainReport::default();
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        while batch.len() < config.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let grads = model.loss_and_grads(&batch, sched, rng.random())?;
        if !grads.loss.is_finite() {
            return Err(DiffusionError::DivergenceDetected { step });
        }
        report.loss_curve.push(grads.loss);
        model.descend(&grads, config.learning_rate);
        if !model.all_finite() {
            return Err(DiffusionError::DivergenceDetected { step });
        }
    }
    log::debug!(
        "trained {} steps, last loss {:?}",
        config.steps,
        report.loss_curve.last()
    );
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{gaussian_like, make_schedule};
    use ndarray::Array2 as A2;

    fn tiny_dataset(model: &CompletionModel, n: usize) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        (0..n)
            .map(|i| {
                let img = RgbImage::filled(8, 8, [0.1 * i as f64, 0.5, 0.2]);
                TrainingExample {
                    z0: gaussian_like(&mut rng, (4, 8, 8)) * 0.5 + 0.25,
                    cond: ConditionPack {
                        image: gaussian_like(&mut rng, (3, 8, 8)),
                        depth: gaussian_like(&mut rng, (1, 8, 8)),
                        image_mask: A2::from_elem((8, 8), 1.0),
                        depth_mask: A2::from_elem((8, 8), 0.5),
                    },
                    reference: model.reference_features(&img).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let model = CompletionModel::new(DenoiserConfig { d_model: 8, d_hidden: 6, steps: 5, ..Default::default() }, 3, 4);
        let mut bytes = Vec::new();
        model.write_checkpoint(&mut bytes).unwrap();
        let back = CompletionModel::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.denoiser, model.denoiser);
        assert_eq!(back.embedder, model.embedder);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(again, bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(CompletionModel::read_checkpoint(bad.as_slice()).unwrap_err(), CheckpointError::BadMagic);
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert_eq!(
            CompletionModel::read_checkpoint(v2.as_slice()).unwrap_err(),
            CheckpointError::VersionUnsupported(2)
        );
        assert!(matches!(
            CompletionModel::read_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Io(_))
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let model = CompletionModel::new(DenoiserConfig { d_model: 8, d_hidden: 6, steps: 10, ..Default::default() }, 2, 1);
        let data = tiny_dataset(&model, 3);
        let sched = make_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            learning_rate: 0.0,
            batch_size: 2,
            seed: 3,
        };
        let (trained, report) = train(model.clone(), &data, &sched, &cfg).unwrap();
        assert_eq!(trained.denoiser, model.denoiser);
        assert_eq!(trained.embedder, model.embedder);
        assert_eq!(report.loss_curve.len(), 5);
    }

    #[test]
    fn training_is_deterministic_and_overfits_one_example() {
        let model = CompletionModel::new(DenoiserConfig::default(), 2, 5);
        let data = tiny_dataset(&model, 1);
        let sched = DiffusionSchedule::default();
        let cfg = TrainConfig {
            steps: 500,
            batch_size: 1,
            seed: 9,
            ..Default::default()
        };
        // average several noise draws so a single unlucky t does not decide
        let eval = |m: &CompletionModel| (0..16).map(|s| m.dataset_loss(&data, &sched, 1234 + s).unwrap()).sum::<f64>() / 16.0;
        let before = eval(&model);
        let (a, ra) = train(model.clone(), &data, &sched, &cfg).unwrap();
        let (_, rb) = train(model, &data, &sched, &cfg).unwrap();
        assert_eq!(ra.loss_curve, rb.loss_curve);
        let after = eval(&a);
        assert!(after < 0.5 * before, "before {before} after {after}");
    }

    #[test]
    fn divergence_is_detected() {
        let model = CompletionModel::new(DenoiserConfig { d_model: 8, d_hidden: 6, steps: 10, ..Default::default() }, 2, 1);
        let data = tiny_dataset(&model, 2);
        let sched = make_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            learning_rate: 1e6,
            batch_size: 2,
            seed: 3,
        };
        assert!(matches!(
            train(model, &data, &sched, &cfg),
            Err(DiffusionError::DivergenceDetected { .. })
        ));
    }
}
