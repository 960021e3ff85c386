//! Percentile-anchored depth normalization and the latent codec contract.
//!
//! Depth is mapped affinely so that its 2nd percentile lands on -1 and its
//! 98th percentile on +1. Values outside the band keep going past ±1; the
//! map is not clamped. Latent tensors are `(channels, height, width)`.

use ndarray::{Array2, Array3, Axis};
use thiserror::Error;

use crate::geom::{DepthMap, RgbImage};

pub const LOW_PERCENTILE: f64 = 0.02;
pub const HIGH_PERCENTILE: f64 = 0.98;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("need at least 2 valid samples, got {0}")]
    TooFewSamples(usize),
    #[error("percentile spread {spread:e} is below {eps:e} (d2={d2}, d98={d98})")]
    DegenerateRange { d2: f64, d98: f64, spread: f64, eps: f64 },
    #[error("codec expected {expected}, got {actual}")]
    CodecShapeMismatch { expected: String, actual: String },
    #[error("{width}x{height} mask is not divisible by factor {factor}")]
    IndivisibleShape { width: usize, height: usize, factor: usize },
}

impl CodecError {
    pub fn code(&self) -> &'static str {
        match self {
            CodecError::TooFewSamples(_) => "TOO_FEW_SAMPLES",
            CodecError::DegenerateRange { .. } => "DEGENERATE_RANGE",
            CodecError::CodecShapeMismatch { .. } => "CODEC_SHAPE_MISMATCH",
            CodecError::IndivisibleShape { .. } => "INDIVISIBLE_SHAPE",
        }
    }
}

/// Linear-interpolation quantile of the values where `valid` is set.
pub fn percentile(values: &[f64], valid: &[bool], q: f64) -> Result<f64, CodecError> {
    let mut sorted: Vec<f64> = values
        .iter()
        .zip(valid)
        .filter_map(|(&v, &ok)| ok.then_some(v))
        .collect();
    if sorted.len() < 2 {
        return Err(CodecError::TooFewSamples(sorted.len()));
    }
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

/// Quantile of an ascending, non-empty slice at rank `q * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Depth after percentile normalization, with the anchors needed to undo it.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedDepth {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub d2: f64,
    pub d98: f64,
}

impl NormalizedDepth {
    /// Maps a metric depth through this normalization's anchors.
    pub fn forward(&self, d: f64) -> f64 {
        ((d - self.d2) / (self.d98 - self.d2) - 0.5) * 2.0
    }

    pub fn inverse(&self, n: f64) -> f64 {
        (n / 2.0 + 0.5) * (self.d98 - self.d2) + self.d2
    }
}

pub fn range_epsilon(d2: f64, d98: f64) -> f64 {
    1e-9 * d2.abs().max(d98.abs()).max(1.0)
}

/// `d_n = ((d - d2) / (d98 - d2) - 0.5) * 2` on valid pixels; invalid
/// pixels hold 0.
pub fn normalize_depth(dm: &DepthMap) -> Result<NormalizedDepth, CodecError> {
    let d2 = percentile(&dm.z, &dm.valid, LOW_PERCENTILE)?;
    let d98 = percentile(&dm.z, &dm.valid, HIGH_PERCENTILE)?;
    let spread = d98 - d2;
    let eps = range_epsilon(d2, d98);
    if !(spread > eps) {
        return Err(CodecError::DegenerateRange { d2, d98, spread, eps });
    }
    let mut nd = NormalizedDepth {
        width: dm.width,
        height: dm.height,
        values: vec![0.0; dm.z.len()],
        valid: dm.valid.clone(),
        d2,
        d98,
    };
    for i in 0..dm.z.len() {
        if dm.valid[i] {
            nd.values[i] = nd.forward(dm.z[i]);
        }
    }
    Ok(nd)
}

/// Exact inverse of [`normalize_depth`]. Pixels whose restored depth is not
/// positive are marked invalid so the result is a well-formed depth map.
pub fn denormalize_depth(nd: &NormalizedDepth) -> DepthMap {
    let mut dm = DepthMap::empty(nd.width, nd.height);
    for i in 0..nd.values.len() {
        if nd.valid[i] {
            let d = nd.inverse(nd.values[i]);
            if d > 0.0 && d.is_finite() {
                dm.z[i] = d;
                dm.valid[i] = true;
            }
        }
    }
    dm
}

/// `(3, h, w)` tensor of an RGB image.
pub fn image_to_tensor(img: &RgbImage) -> Array3<f64> {
    Array3::from_shape_fn((3, img.height, img.width), |(c, y, x)| img.pixels[y * img.width + x][c])
}

pub fn tensor_to_image(t: &Array3<f64>) -> RgbImage {
    let (_, h, w) = t.dim();
    let pixels = (0..h * w)
        .map(|i| [t[[0, i / w, i % w]], t[[1, i / w, i % w]], t[[2, i / w, i % w]]])
        .collect();
    RgbImage {
        width: w,
        height: h,
        pixels,
    }
}

/// `(1, h, w)` tensor of normalized depth, zero where invalid.
pub fn depth_to_tensor(nd: &NormalizedDepth) -> Array3<f64> {
    Array3::from_shape_fn((1, nd.height, nd.width), |(_, y, x)| {
        let i = y * nd.width + x;
        if nd.valid[i] {
            nd.values[i]
        } else {
            0.0
        }
    })
}

/// Encoder/decoder pair standing in for a frozen image autoencoder. Image
/// and depth go through the same weights.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;
    /// Spatial downsample factor between pixels and latents.
    fn factor(&self) -> usize;
    fn image_channels(&self) -> usize;
    fn depth_channels(&self) -> usize;
    /// Maximum absolute error of `decode(encode(x))` on inputs the codec
    /// can represent.
    fn tolerance(&self) -> f64;

    fn encode_image(&self, image: &Array3<f64>) -> Result<Array3<f64>, CodecError>;
    fn decode_image(&self, latent: &Array3<f64>) -> Result<Array3<f64>, CodecError>;
    fn encode_depth(&self, depth: &Array3<f64>) -> Result<Array3<f64>, CodecError>;
    fn decode_depth(&self, latent: &Array3<f64>) -> Result<Array3<f64>, CodecError>;

    fn latent_channels(&self) -> usize {
        self.image_channels() + self.depth_channels()
    }
}

fn expect_channels(t: &Array3<f64>, c: usize, factor: usize) -> Result<(), CodecError> {
    let (tc, h, w) = t.dim();
    if tc != c || h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
        return Err(CodecError::CodecShapeMismatch {
            expected: format!("{c} channels, sides divisible by {factor}"),
            actual: format!("{tc}x{h}x{w}"),
        });
    }
    Ok(())
}

/// Full-resolution pass-through: 3 image channels, 1 depth channel.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn name(&self) -> &str {
        "identity"
    }
    fn factor(&self) -> usize {
        1
    }
    fn image_channels(&self) -> usize {
        3
    }
    fn depth_channels(&self) -> usize {
        1
    }
    fn tolerance(&self) -> f64 {
        0.0
    }
    fn encode_image(&self, image: &Array3<f64>) -> Result<Array3<f64>, CodecError> {
        expect_channels(image, 3, 1)?;
        Ok(image.clone())
    }
    fn decode_image(&self, latent: &Array3<f64>) -> Result<Array3<f64>, CodecError> {
        expect_channels(latent, 3, 1)?;
        Ok(latent.clone())
    }
    fn encode_depth(&self, depth: &Array3<f64>) -> Result<Array3<f64>, CodecError> {
        expect_channels(depth, 1, 1)?;
        Ok(depth.clone())
    }
    fn decode_depth(&self, latent: &Array3<f64>) -> Result<Array3<f64>, CodecError> {
        expect_channels(latent, 1, 1)?;
        Ok(latent.clone())
    }
}

/// Reference lossy codec: `f x f` area mean down, nearest-neighbour up.
///
/// Depth is replicated to three channels before the shared encoder (the
/// usual adapter for three-channel autoencoders) and the replicas are
/// averaged back into a single latent channel.
#[derive(Clone, Copy, Debug)]
pub struct AreaCodec {
    pub factor: usize,
}

impl AreaCodec {
    fn down(&self, t: &Array3<f64>) -> Array3<f64> {
        let f = self.factor;
        let (c, h, w) = t.dim();
        let inv = 1.0 / (f * f) as f64;
        Array3::from_shape_fn((c, h / f, w / f), |(ch, y, x)| {
            let mut acc = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    acc += t[[ch, y * f + dy, x * f + dx]];
                }
            }
            acc * inv
        })
    }

    fn up(&self, t: &Array3<f64>) -> Array3<f64> {
        let f = self.factor;
        let (c, h, w) = t.dim();
        Array3::from_shape_fn((c, h * f, w * f), |(ch, y, x)| t[[ch, y / f, x / f]])
    }
}

impl LatentCodec for AreaCodec {
    fn name(&self) -> &str {
        "area"
    }
    fn factor(&self) -> usize {
        self.factor
    }
    fn image_channels(&self) -> usize {
        3
    }
    fn depth_channels(&self) -> usize {
        1
    }
    fn tolerance(&self) -> f64 {
        // exact only on inputs constant within each f x f block
        0.0
    }
    fn encode_image(&self, image: &Array3<f64>) -> Result<Array3<f64>, CodecError> {
        expect_channels(image, 3, self.factor)?;
        Ok(self.down(image))
    }
    fn decode_image(&self, latent: &Array3<f64>) -> Result<Array3<f64>, CodecError> {
        expect_channels(latent, 3, 1)?;
        Ok(self.up(latent))
    }
    fn encode_depth(&self, depth: &Array3<f64>) -> Result<Array3<f64>, CodecError> {
        expect_channels(depth, 1, self.factor)?;
        let replicated = ndarray::concatenate(Axis(0), &[depth.view(), depth.view(), depth.view()])
            .expect("same shape");
        let z = self.down(&replicated);
        Ok(z.mean_axis(Axis(0)).expect("3 channels").insert_axis(Axis(0)))
    }
    fn decode_depth(&self, latent: &Array3<f64>) -> Result<Array3<f64>, CodecError> {
        expect_channels(latent, 1, 1)?;
        Ok(self.up(latent))
    }
}

/// Image and depth latents for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdLatent {
    pub image: Array3<f64>,
    pub depth: Array3<f64>,
}

/// Encodes an image and its already-normalized depth.
pub fn encode_rgbd(codec: &dyn LatentCodec, image: &RgbImage, depth: &NormalizedDepth) -> Result<RgbdLatent, CodecError> {
    if image.width != depth.width || image.height != depth.height {
        return Err(CodecError::CodecShapeMismatch {
            expected: format!("{}x{}", image.width, image.height),
            actual: format!("{}x{}", depth.width, depth.height),
        });
    }
    Ok(RgbdLatent {
        image: codec.encode_image(&image_to_tensor(image))?,
        depth: codec.encode_depth(&depth_to_tensor(depth))?,
    })
}

pub fn decode_rgbd(codec: &dyn LatentCodec, latent: &RgbdLatent) -> Result<(Array3<f64>, Array3<f64>), CodecError> {
    Ok((codec.decode_image(&latent.image)?, codec.decode_depth(&latent.depth)?))
}

/// `f x f` area average of a boolean mask; the result stays soft.
pub fn interpolate_mask(mask: &[bool], width: usize, height: usize, factor: usize) -> Result<Array2<f64>, CodecError> {
    if factor == 0 || width % factor != 0 || height % factor != 0 || mask.len() != width * height {
        return Err(CodecError::IndivisibleShape { width, height, factor });
    }
    let inv = 1.0 / (factor * factor) as f64;
    Ok(Array2::from_shape_fn((height / factor, width / factor), |(y, x)| {
        let mut count = 0usize;
        for dy in 0..factor {
            for dx in 0..factor {
                count += mask[(y * factor + dy) * width + x * factor + dx] as usize;
            }
        }
        count as f64 * inv
    }))
}
