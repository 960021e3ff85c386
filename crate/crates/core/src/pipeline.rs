//! Iterative scene completion: render the current cloud into a new camera,
//! fill the holes, register the fill onto the existing geometry and append
//! the newly generated points.

use nalgebra::Vector3;
use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{fit_scale_offset, AffineFit, AlignError, FitDirection};
use crate::codec::{decode_rgbd, normalize_depth, CodecError, LatentCodec, NormalizedDepth, RgbdLatent};
use crate::diffusion::{sample, ConditionPack, DiffusionError, DiffusionSchedule};
use crate::embedder::EmbedError;
use crate::geom::{render_partial_view, Camera, DepthMap, GeomError, PartialView, RgbImage, RgbdFrame, Z_MIN};
use crate::model::CompletionModel;
use crate::synth::{render_exact, SynthError, SyntheticScene};

/// Fewest co-valid clue pixels a scale/offset fit may use.
pub const MIN_FIT_OVERLAP: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("only {found} clue pixels overlap the fill, need {required}")]
    InsufficientOverlap { found: usize, required: usize },
    #[error("fill is {actual:?}, expected {expected:?}")]
    FillShape { expected: (usize, usize), actual: (usize, usize) },
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<PipelineError>,
    },
}

impl From<EmbedError> for PipelineError {
    fn from(e: EmbedError) -> Self {
        PipelineError::Diffusion(DiffusionError::Embed(e))
    }
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Geom(e) => e.code(),
            PipelineError::Codec(e) => e.code(),
            PipelineError::Align(e) => e.code(),
            PipelineError::Diffusion(e) => e.code(),
            PipelineError::Synth(e) => e.code(),
            PipelineError::InsufficientOverlap { .. } => "INSUFFICIENT_OVERLAP",
            PipelineError::FillShape { .. } => "FILL_SHAPE_MISMATCH",
            PipelineError::AtIteration { source, .. } => source.code(),
        }
    }
}

/// Accumulated coloured points. `source_iter[i]` is the completion
/// iteration that added point `i` (0 for the initial cloud).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub source_iter: Vec<u32>,
}

impl SceneCloud {
    pub fn from_points(points: Vec<Vector3<f64>>, colors: Vec<[f64; 3]>, tag: u32) -> Self {
        assert_eq!(points.len(), colors.len(), "one colour per point");
        let source_iter = vec![tag; points.len()];
        Self {
            points,
            colors,
            source_iter,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn append(&mut self, other: SceneCloud) {
        self.points.extend(other.points);
        self.colors.extend(other.colors);
        self.source_iter.extend(other.source_iter);
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
            && self.colors.iter().all(|c| c.iter().all(|v| (0.0..=1.0).contains(v)))
    }
}

/// Where the missing content of a partial view comes from.
#[derive(Clone, Copy)]
pub enum FillBackend<'a> {
    /// Exact render of a synthetic scene, handed over in its own
    /// percentile-normalized depth frame like any generative model would.
    Oracle(&'a SyntheticScene),
    Diffusion(DiffusionFill<'a>),
    /// Returns the partial view unchanged.
    Passthrough,
}

#[derive(Clone, Copy)]
pub struct DiffusionFill<'a> {
    pub model: &'a CompletionModel,
    pub schedule: &'a DiffusionSchedule,
    /// Reference view whose features condition the scene tokens.
    pub reference: &'a RgbImage,
    /// Base sampler seed; iteration `k` samples with `seed + k`.
    pub seed: u64,
}

/// Full-resolution fill with depth in normalized units.
struct Fill {
    rgb: RgbImage,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub width: usize,
    pub height: usize,
    pub direction: FitDirection,
    pub min_overlap: usize,
}

impl StepConfig {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            direction: FitDirection::PredictedToClue,
            min_overlap: MIN_FIT_OVERLAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub scene: SceneCloud,
    /// Completed view: aligned metric depth and colour.
    pub frame: RgbdFrame,
    pub partial: PartialView,
    pub fit: AffineFit,
    pub points_added: usize,
}

/// One line of the per-iteration log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub points_added: usize,
    pub scale: f64,
    pub offset: f64,
    pub residual_rms: f64,
}

fn fill(
    backend: &FillBackend,
    partial: &PartialView,
    normalized: &NormalizedDepth,
    cam: &Camera,
    codec: &dyn LatentCodec,
    iteration: u32,
) -> Result<Fill, PipelineError> {
    let (w, h) = (partial.rgb.width, partial.rgb.height);
    match backend {
        FillBackend::Passthrough => Ok(Fill {
            rgb: partial.rgb.clone(),
            depth: normalized.values.clone(),
            valid: partial.depth.valid.clone(),
        }),
        FillBackend::Oracle(scene) => {
            // a perfect inpainter: observed pixels kept, the rest exact
            let mut exact = render_exact(scene, cam, w, h)?;
            for i in 0..w * h {
                if partial.depth.valid[i] {
                    exact.depth.z[i] = partial.depth.z[i];
                    exact.depth.valid[i] = true;
                    exact.rgb.pixels[i] = partial.rgb.pixels[i];
                }
            }
            let own = normalize_depth(&exact.depth)?;
            Ok(Fill {
                rgb: exact.rgb,
                depth: own.values,
                valid: own.valid,
            })
        }
        FillBackend::Diffusion(d) => {
            let cond = ConditionPack::from_partial(codec, partial, normalized)?;
            let reference = d.model.reference_features(d.reference)?;
            let tokens = d.model.scene_tokens(&reference)?;
            let z0 = sample(&d.model.denoiser, &cond, &tokens, d.schedule, d.seed.wrapping_add(iteration as u64))?;
            let ic = codec.image_channels();
            let latent = RgbdLatent {
                image: z0.slice(ndarray::s![0..ic, .., ..]).to_owned(),
                depth: z0.slice(ndarray::s![ic.., .., ..]).to_owned(),
            };
            let (img, depth): (Array3<f64>, Array3<f64>) = decode_rgbd(codec, &latent)?;
            if img.dim().1 != h || img.dim().2 != w {
                return Err(PipelineError::FillShape {
                    expected: (w, h),
                    actual: (img.dim().2, img.dim().1),
                });
            }
            let mut rgb = RgbImage::filled(w, h, [0.0; 3]);
            let mut values = vec![0.0; w * h];
            for i in 0..w * h {
                let (y, x) = (i / w, i % w);
                if partial.rgb_valid[i] {
                    rgb.pixels[i] = partial.rgb.pixels[i];
                } else {
                    rgb.pixels[i] = [0, 1, 2].map(|c| img[[c, y, x]].clamp(0.0, 1.0));
                }
                // clue pixels win over the generated values
                values[i] = if partial.depth.valid[i] { normalized.values[i] } else { depth[[0, y, x]] };
            }
            Ok(Fill {
                rgb,
                depth: values,
                valid: vec![true; w * h],
            })
        }
    }
}

/// Renders `scene` at `cam`, fills the gaps with `backend`, aligns the
/// filled depth to the clues and appends the points outside the clue mask,
/// tagged with `iteration`. Existing points are never touched.
pub fn complete_step(
    scene: &SceneCloud,
    cam: &Camera,
    backend: &FillBackend,
    codec: &dyn LatentCodec,
    config: &StepConfig,
    iteration: u32,
) -> Result<StepOutput, PipelineError> {
    let (w, h) = (config.width, config.height);
    let partial = render_partial_view(scene, cam, w, h)?;
    let normalized = normalize_depth(&partial.depth)?;
    let filled = fill(backend, &partial, &normalized, cam, codec, iteration)?;
    if filled.depth.len() != w * h || filled.rgb.pixels.len() != w * h {
        return Err(PipelineError::FillShape {
            expected: (w, h),
            actual: (filled.rgb.width, filled.rgb.height),
        });
    }

    // back to metric units using the clue anchors; sign is not checked yet
    // because the affine fit may still move values across zero
    let d_hat: Vec<f64> = filled.depth.iter().map(|&n| normalized.inverse(n)).collect();
    let overlap: Vec<bool> = partial.depth.valid.iter().zip(&filled.valid).map(|(a, b)| *a && *b).collect();
    let found = overlap.iter().filter(|&&v| v).count();
    if found < config.min_overlap {
        return Err(PipelineError::InsufficientOverlap {
            found,
            required: config.min_overlap,
        });
    }
    let fit = fit_scale_offset(&partial.depth.z, &d_hat, &overlap, config.direction)?;
    let aligned: Vec<Option<f64>> = (0..w * h)
        .map(|i| {
            let d = fit.apply(d_hat[i]);
            (filled.valid[i] && d > Z_MIN && d.is_finite()).then_some(d)
        })
        .collect();

    let fresh: Vec<(Vector3<f64>, [f64; 3])> = (0..w * h)
        .into_par_iter()
        .filter_map(|i| {
            if partial.depth.valid[i] {
                return None;
            }
            aligned[i].map(|z| (cam.unproject_pixel((i % w) as f64, (i / w) as f64, z), filled.rgb.pixels[i]))
        })
        .collect();
    let points_added = fresh.len();
    let mut out = scene.clone();
    let (points, colors): (Vec<_>, Vec<_>) = fresh.into_iter().unzip();
    out.append(SceneCloud::from_points(points, colors, iteration));

    let mut depth = DepthMap::empty(w, h);
    for (i, d) in aligned.iter().enumerate() {
        if let Some(d) = d {
            depth.z[i] = *d;
            depth.valid[i] = true;
        }
    }
    Ok(StepOutput {
        scene: out,
        frame: RgbdFrame { rgb: filled.rgb, depth },
        partial,
        fit,
        points_added,
    })
}

/// Folds [`complete_step`] over `cams`; iteration numbers start at 1.
pub fn complete_trajectory(
    scene: &SceneCloud,
    cams: &[Camera],
    backend: &FillBackend,
    codec: &dyn LatentCodec,
    config: &StepConfig,
) -> Result<(SceneCloud, Vec<IterationStats>), PipelineError> {
    complete_trajectory_with(scene, cams, backend, codec, config, |_, _| {})
}

/// [`complete_trajectory`], handing every step's output to `on_step`.
pub fn complete_trajectory_with<F>(
    scene: &SceneCloud,
    cams: &[Camera],
    backend: &FillBackend,
    codec: &dyn LatentCodec,
    config: &StepConfig,
    mut on_step: F,
) -> Result<(SceneCloud, Vec<IterationStats>), PipelineError>
where
    F: FnMut(usize, &StepOutput),
{
    let mut current = scene.clone();
    let mut stats = Vec::with_capacity(cams.len());
    for (k, cam) in cams.iter().enumerate() {
        let iteration = k + 1;
        let step = complete_step(&current, cam, backend, codec, config, iteration as u32).map_err(|e| {
            PipelineError::AtIteration {
                iteration,
                source: Box::new(e),
            }
        })?;
        log::info!(
            "iteration {iteration}: +{} points, scale {:.6} offset {:.6}",
            step.points_added,
            step.fit.scale,
            step.fit.offset
        );
        stats.push(IterationStats {
            iteration,
            points_added: step.points_added,
            scale: step.fit.scale,
            offset: step.fit.offset,
            residual_rms: step.fit.residual_rms,
        });
        on_step(iteration, &step);
        current = step.scene;
    }
    Ok((current, stats))
}

fn nearest_distance(p: &Vector3<f64>, cloud: &[Vector3<f64>]) -> f64 {
    cloud.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
}

/// Per-point nearest-neighbour distances from `a` into `b`, brute force.
pub fn nearest_distances(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Vec<f64> {
    a.par_iter().map(|p| nearest_distance(p, b)).collect()
}

/// Symmetric Chamfer distance: the average of the two directed mean
/// nearest-neighbour distances.
pub fn chamfer_distance(a: &SceneCloud, b: &SceneCloud) -> Result<f64, PipelineError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeomError::EmptyCloud.into());
    }
    let ab: f64 = nearest_distances(&a.points, &b.points).iter().sum::<f64>() / a.len() as f64;
    let ba: f64 = nearest_distances(&b.points, &a.points).iter().sum::<f64>() / b.len() as f64;
    Ok(0.5 * (ab + ba))
}

/// Fraction of `reference` points with a point of `cloud` within `tau`.
pub fn coverage(reference: &[Vector3<f64>], cloud: &[Vector3<f64>], tau: f64) -> f64 {
    if reference.is_empty() {
        return 1.0;
    }
    let tau2 = tau * tau;
    let hits = reference
        .par_iter()
        .filter(|p| cloud.iter().any(|q| (*p - q).norm_squared() <= tau2))
        .count();
    hits as f64 / reference.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::IdentityCodec;
    use crate::synth::{frame_cloud, generate_scene, orbit_cameras};

    fn start(seed: u64, w: usize) -> (SyntheticScene, Vec<Camera>, SceneCloud) {
        let scene = generate_scene(seed);
        let cams = orbit_cameras(&scene, 3, 2.0, 0.0, 0.5, w, w).unwrap();
        let f = render_exact(&scene, &cams[0], w, w).unwrap();
        let cloud = frame_cloud(&f, &cams[0], 0);
        (scene, cams, cloud)
    }

    #[test]
    fn chamfer_small_cases() {
        let a = SceneCloud::from_points(vec![Vector3::zeros()], vec![[0.0; 3]], 0);
        let b = SceneCloud::from_points(vec![Vector3::new(1.0, 0.0, 0.0)], vec![[0.0; 3]], 0);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(
            chamfer_distance(&a, &SceneCloud::default()),
            Err(PipelineError::Geom(GeomError::EmptyCloud))
        );
    }

    #[test]
    fn passthrough_on_covered_view_adds_nothing() {
        let (scene, cams, cloud) = start(3, 24);
        let _ = scene;
        let out = complete_step(&cloud, &cams[0], &FillBackend::Passthrough, &IdentityCodec, &StepConfig::new(24, 24), 1).unwrap();
        assert_eq!(out.points_added, 0);
        assert_eq!(out.scene, cloud);
        assert!((out.fit.scale - 1.0).abs() < 1e-9 && out.fit.offset.abs() < 1e-9);
    }

    #[test]
    fn oracle_step_is_idempotent_and_preserves_clues() {
        let (scene, cams, cloud) = start(5, 24);
        let cfg = StepConfig::new(24, 24);
        let backend = FillBackend::Oracle(&scene);
        let first = complete_step(&cloud, &cams[1], &backend, &IdentityCodec, &cfg, 1).unwrap();
        assert!(first.points_added > 0);
        assert_eq!(&first.scene.points[..cloud.len()], &cloud.points[..]);
        assert_eq!(&first.scene.colors[..cloud.len()], &cloud.colors[..]);
        assert!((first.fit.scale - 1.0).abs() > 1e-3, "oracle fill should need a real fit");
        let second = complete_step(&first.scene, &cams[1], &backend, &IdentityCodec, &cfg, 2).unwrap();
        assert_eq!(second.points_added, 0);
    }

    #[test]
    fn oracle_fill_realigns_to_ground_truth() {
        let (scene, cams, cloud) = start(8, 24);
        let out = complete_step(&cloud, &cams[2], &FillBackend::Oracle(&scene), &IdentityCodec, &StepConfig::new(24, 24), 1).unwrap();
        let truth = render_exact(&scene, &cams[2], 24, 24).unwrap();
        let generated: Vec<bool> = out.partial.depth.valid.iter().map(|v| !v).collect();
        assert!(generated.iter().filter(|&&g| g).count() >= 16);
        let refit = fit_scale_offset(&truth.depth.z, &out.frame.depth.z, &generated, FitDirection::PredictedToClue).unwrap();
        assert!((refit.scale - 1.0).abs() < 1e-6 && refit.offset.abs() < 1e-6, "{refit:?}");
        for i in (0..24 * 24).filter(|&i| generated[i]) {
            assert!((out.frame.depth.z[i] - truth.depth.z[i]).abs() < 1e-9 * truth.depth.z[i]);
        }
    }

    #[test]
    fn tiny_overlap_is_rejected() {
        let (scene, cams, _) = start(2, 24);
        let f = render_exact(&scene, &cams[0], 24, 24).unwrap();
        let full = frame_cloud(&f, &cams[0], 0);
        let keep: Vec<usize> = (0..full.len()).step_by(full.len() / 5).take(5).collect();
        let cloud = SceneCloud::from_points(
            keep.iter().map(|&i| full.points[i]).collect(),
            keep.iter().map(|&i| full.colors[i]).collect(),
            0,
        );
        let err = complete_step(&cloud, &cams[0], &FillBackend::Oracle(&scene), &IdentityCodec, &StepConfig::new(24, 24), 1).unwrap_err();
        assert!(matches!(err, PipelineError::InsufficientOverlap { required: 16, .. }), "{err:?}");
    }

    #[test]
    fn empty_trajectory_returns_input() {
        let (scene, _, cloud) = start(1, 16);
        let (out, stats) = complete_trajectory(&cloud, &[], &FillBackend::Oracle(&scene), &IdentityCodec, &StepConfig::new(16, 16)).unwrap();
        assert_eq!(out, cloud);
        assert!(stats.is_empty());
    }

    #[test]
    fn errors_carry_the_iteration() {
        let (_, cams, _) = start(1, 16);
        let lonely = SceneCloud::from_points(vec![Vector3::new(0.0, 1.0, 0.0)], vec![[0.5; 3]], 0);
        let err = complete_trajectory(&lonely, &cams, &FillBackend::Passthrough, &IdentityCodec, &StepConfig::new(16, 16)).unwrap_err();
        assert!(matches!(err, PipelineError::AtIteration { iteration: 1, .. }));
    }
}
