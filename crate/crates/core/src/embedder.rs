//! Learnable scene tokens that cross-attend over reference-view features.
//!
//! `f_scene = softmax(Q Kᵀ / √d) V` with `Q = f_emb W_q`, `K = f_ref W_k`,
//! `V = f_ref W_v`. A single head is used.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::RgbImage;
use crate::nn::{attention_backward, attention_forward, gaussian_matrix, parameter_struct, AttentionCache};

pub const DEFAULT_SCENE_TOKENS: usize = 4;
pub const PATCH_GRID: usize = 8;
/// Raw per-patch feature: mean R, G, B and the patch centre (u, v).
pub const RAW_FEATURES: usize = 5;

const EXTRACTOR_SEED: u64 = 0x5ce7_e0b5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("{width}x{height} image is not divisible into a {grid}x{grid} patch grid")]
    ShapeIndivisible { width: usize, height: usize, grid: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
}

impl EmbedError {
    pub fn code(&self) -> &'static str {
        match self {
            EmbedError::ShapeIndivisible { .. } => "SHAPE_INDIVISIBLE",
            EmbedError::DimMismatch { .. } => "DIM_MISMATCH",
        }
    }
}

/// Token features of a reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFeatures {
    /// `(n_ref, d_model)`
    pub tokens: Array2<f64>,
    pub provenance: String,
}

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn d_model(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Result<ReferenceFeatures, EmbedError>;
}

/// Per-patch `(mean R, mean G, mean B, u_center, v_center)` on a
/// `grid x grid` partition, patch centres normalized to `[0, 1]`.
pub fn patch_statistics(image: &RgbImage, grid: usize) -> Result<Array2<f64>, EmbedError> {
    let (w, h) = (image.width, image.height);
    if grid == 0 || w % grid != 0 || h % grid != 0 || w == 0 || h == 0 {
        return Err(EmbedError::ShapeIndivisible { width: w, height: h, grid });
    }
    let (pw, ph) = (w / grid, h / grid);
    let inv = 1.0 / (pw * ph) as f64;
    let mut out = Array2::zeros((grid * grid, RAW_FEATURES));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            let mut acc = [0.0; 3];
            for y in gy * ph..(gy + 1) * ph {
                for x in gx * pw..(gx + 1) * pw {
                    let p = image.pixels[y * w + x];
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            for c in 0..3 {
                out[[row, c]] = acc[c] * inv;
            }
            out[[row, 3]] = (gx as f64 + 0.5) / grid as f64;
            out[[row, 4]] = (gy as f64 + 0.5) / grid as f64;
        }
    }
    Ok(out)
}

/// Default extractor: 8x8 patch statistics through a fixed random linear
/// projection to `d_model`.
#[derive(Clone, Debug)]
pub struct PatchGridExtractor {
    grid: usize,
    projection: Array2<f64>,
}

impl PatchGridExtractor {
    pub fn new(d_model: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        Self {
            grid: PATCH_GRID,
            projection: gaussian_matrix(&mut rng, RAW_FEATURES, d_model, 1.0),
        }
    }

    pub fn raw_features(&self, image: &RgbImage) -> Result<Array2<f64>, EmbedError> {
        patch_statistics(image, self.grid)
    }
}

impl FeatureExtractor for PatchGridExtractor {
    fn id(&self) -> &str {
        "patch-grid-8"
    }

    fn d_model(&self) -> usize {
        self.projection.ncols()
    }

    fn extract(&self, image: &RgbImage) -> Result<ReferenceFeatures, EmbedError> {
        let raw = self.raw_features(image)?;
        Ok(ReferenceFeatures {
            tokens: raw.dot(&self.projection),
            provenance: self.id().to_string(),
        })
    }
}

parameter_struct! {
    /// Scene tokens `f_emb` and their attention projections.
    pub struct SceneEmbedding {
        pub tokens: Array2<f64>,
        pub w_q: Array2<f64>,
        pub w_k: Array2<f64>,
        pub w_v: Array2<f64>,
    }
}

/// Forward state kept for [`SceneEmbedding::backward`].
#[derive(Clone, Debug)]
pub struct EmbedCache {
    reference: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attention: AttentionCache,
}

impl SceneEmbedding {
    pub fn new(n_tokens: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_model as f64).sqrt();
        Self {
            tokens: gaussian_matrix(&mut rng, n_tokens, d_model, 1.0),
            w_q: gaussian_matrix(&mut rng, d_model, d_model, std),
            w_k: gaussian_matrix(&mut rng, d_model, d_model, std),
            w_v: gaussian_matrix(&mut rng, d_model, d_model, std),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn forward(&self, reference: &ReferenceFeatures) -> Result<(Array2<f64>, EmbedCache), EmbedError> {
        let d = self.d_model();
        if reference.tokens.ncols() != d {
            return Err(EmbedError::DimMismatch {
                expected: d,
                actual: reference.tokens.ncols(),
            });
        }
        let q = self.tokens.dot(&self.w_q);
        let k = reference.tokens.dot(&self.w_k);
        let v = reference.tokens.dot(&self.w_v);
        let (out, attention) = attention_forward(&q, &k, &v);
        Ok((
            out,
            EmbedCache {
                reference: reference.tokens.clone(),
                q,
                k,
                v,
                attention,
            },
        ))
    }

    /// Parameter gradients for upstream gradient `d_out` on `f_scene`.
    pub fn backward(&self, cache: &EmbedCache, d_out: &Array2<f64>) -> SceneEmbedding {
        let (d_q, d_k, d_v) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.attention, d_out);
        SceneEmbedding {
            tokens: d_q.dot(&self.w_q.t()),
            w_q: self.tokens.t().dot(&d_q),
            w_k: cache.reference.t().dot(&d_k),
            w_v: cache.reference.t().dot(&d_v),
        }
    }
}

/// Global scene context `f_scene` for a reference view.
pub fn cross_attend(emb: &SceneEmbedding, reference: &ReferenceFeatures) -> Result<Array2<f64>, EmbedError> {
    emb.forward(reference).map(|(out, _)| out)
}
