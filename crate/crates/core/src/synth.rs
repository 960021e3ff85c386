//! Procedural ground-truth rooms built from axis-aligned textured quads,
//! an exact ray-cast renderer, and training-pair construction.
//!
//! World frame: `y` points up, the floor is `y = 0`.

use nalgebra::Vector3;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{render_partial_view, unproject_depth, Camera, DepthMap, GeomError, PartialView, RgbImage, RgbdFrame};
use crate::pipeline::SceneCloud;

pub const DEFAULT_STRIDES: [usize; 5] = [0, 1, 2, 4, 8];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("camera centre {center:?} lies outside the scene bounds")]
    CameraOutsideBounds { center: [f64; 3] },
    #[error("trajectory of {len} cameras is too short for stride {stride}")]
    TrajectoryTooShort { len: usize, stride: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

impl SynthError {
    pub fn code(&self) -> &'static str {
        match self {
            SynthError::CameraOutsideBounds { .. } => "CAMERA_OUTSIDE_BOUNDS",
            SynthError::TrajectoryTooShort { .. } => "TRAJECTORY_TOO_SHORT",
            SynthError::Geom(e) => e.code(),
        }
    }
}

/// Rectangle on the plane `x[axis] = coord`, spanning `lo..hi` along the
/// two remaining axes taken in cyclic order (`axis+1`, `axis+2`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub axis: usize,
    pub coord: f64,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub base_color: [f64; 3],
    pub texture_seed: u64,
}

impl Quad {
    fn in_plane_axes(&self) -> (usize, usize) {
        ((self.axis + 1) % 3, (self.axis + 2) % 3)
    }

    /// Ray parameter of the hit, if any. Edges count as inside.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let a = self.axis;
        if dir[a] == 0.0 {
            return None;
        }
        let t = (self.coord - origin[a]) / dir[a];
        if !(t > 0.0) {
            return None;
        }
        let (b, c) = self.in_plane_axes();
        let pb = origin[b] + t * dir[b];
        let pc = origin[c] + t * dir[c];
        (pb >= self.lo[0] && pb <= self.hi[0] && pc >= self.lo[1] && pc <= self.hi[1]).then_some(t)
    }

    /// Texture colour; depends only on the in-plane position.
    pub fn color_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        let (b, c) = self.in_plane_axes();
        let n = value_noise(self.texture_seed, p[b], p[c]);
        let shade = 0.55 + 0.45 * n;
        self.base_color.map(|ch| (ch * shade).clamp(0.0, 1.0))
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    /// Distance from `p` to the quad's supporting plane.
    pub fn plane_distance(&self, p: &Vector3<f64>) -> f64 {
        (p[self.axis] - self.coord).abs()
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        let (b, c) = self.in_plane_axes();
        self.plane_distance(p) <= tol
            && p[b] >= self.lo[0] - tol
            && p[b] <= self.hi[0] + tol
            && p[c] >= self.lo[1] - tol
            && p[c] <= self.hi[1] + tol
    }
}

fn hash2(seed: u64, x: i64, y: i64) -> f64 {
    // splitmix64 finalizer over the lattice coordinates
    let mut z = seed ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn lattice_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = hash2(seed, ix, iy);
    let b = hash2(seed, ix + 1, iy);
    let c = hash2(seed, ix, iy + 1);
    let d = hash2(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// Three octaves of value noise, normalized to `[0, 1]`.
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let mut sum = 0.0;
    let mut amp = 1.0;
    let mut freq = 2.0;
    let mut norm = 0.0;
    for octave in 0..3u64 {
        sum += amp * lattice_noise(seed.wrapping_add(octave), x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn contains_strictly(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] > self.min[i] && p[i] < self.max[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub quads: Vec<Quad>,
    pub bounds: Aabb,
    /// Interior boxes as `(min, max)` corners.
    pub boxes: Vec<Aabb>,
}

/// Radius inside which interior boxes are placed; cameras orbit outside it.
pub const BOX_REGION: f64 = 1.0;

/// Deterministic room: 4 walls, floor, ceiling and 1–3 boxes resting on
/// the floor near the centre.
pub fn generate_scene(seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hx = rng.random_range(3.0..4.0);
    let hz = rng.random_range(3.0..4.0);
    let height = rng.random_range(2.4..3.0);
    let mut quads = Vec::new();
    let color = |rng: &mut ChaCha8Rng| [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)];
    let push = |quads: &mut Vec<Quad>, rng: &mut ChaCha8Rng, axis, coord, lo, hi| {
        let base_color = color(rng);
        quads.push(Quad {
            axis,
            coord,
            lo,
            hi,
            base_color,
            texture_seed: rng.random(),
        })
    };
    // walls: x = ±hx spans (y, z); z = ±hz spans (x, y)
    push(&mut quads, &mut rng, 0, -hx, [0.0, -hz], [height, hz]);
    push(&mut quads, &mut rng, 0, hx, [0.0, -hz], [height, hz]);
    push(&mut quads, &mut rng, 2, -hz, [-hx, 0.0], [hx, height]);
    push(&mut quads, &mut rng, 2, hz, [-hx, 0.0], [hx, height]);
    // floor and ceiling: y = const spans (z, x)
    push(&mut quads, &mut rng, 1, 0.0, [-hz, -hx], [hz, hx]);
    push(&mut quads, &mut rng, 1, height, [-hz, -hx], [hz, hx]);

    let n_boxes = rng.random_range(1..=3);
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let sx = rng.random_range(0.15..0.35);
        let sz = rng.random_range(0.15..0.35);
        let sy = rng.random_range(0.3..1.0);
        let lim = BOX_REGION / std::f64::consts::SQRT_2;
        let cx = rng.random_range(-lim + sx..lim - sx);
        let cz = rng.random_range(-lim + sz..lim - sz);
        let b = Aabb {
            min: [cx - sx, 0.0, cz - sz],
            max: [cx + sx, sy, cz + sz],
        };
        let (x0, x1, y1, z0, z1) = (b.min[0], b.max[0], b.max[1], b.min[2], b.max[2]);
        push(&mut quads, &mut rng, 0, x0, [0.0, z0], [y1, z1]);
        push(&mut quads, &mut rng, 0, x1, [0.0, z0], [y1, z1]);
        push(&mut quads, &mut rng, 2, z0, [x0, 0.0], [x1, y1]);
        push(&mut quads, &mut rng, 2, z1, [x0, 0.0], [x1, y1]);
        push(&mut quads, &mut rng, 1, y1, [z0, x0], [z1, x1]);
        boxes.push(b);
    }
    SyntheticScene {
        seed,
        quads,
        bounds: Aabb {
            min: [-hx, 0.0, -hz],
            max: [hx, height, hz],
        },
        boxes,
    }
}

/// Nearest quad hit along a ray; ties keep the lowest quad index.
pub fn cast_ray(scene: &SyntheticScene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, q) in scene.quads.iter().enumerate() {
        if let Some(t) = q.intersect(origin, dir) {
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
    }
    best
}

/// Exact RGBD render. The world ray through pixel `(u, v)` is scaled so its
/// camera-space `z` is 1, making the hit parameter the depth itself.
pub fn render_exact(scene: &SyntheticScene, cam: &Camera, width: usize, height: usize) -> Result<RgbdFrame, SynthError> {
    let origin = cam.center();
    if !scene.bounds.contains_strictly(&origin) || scene.boxes.iter().any(|b| b.contains(&origin, 0.0)) {
        return Err(SynthError::CameraOutsideBounds {
            center: [origin.x, origin.y, origin.z],
        });
    }
    let rt = cam.rotation().transpose();
    let rows: Vec<Vec<Option<(f64, [f64; 3])>>> = (0..height)
        .into_par_iter()
        .map(|v| {
            (0..width)
                .map(|u| {
                    let dir = rt * cam.pixel_ray(u as f64, v as f64);
                    cast_ray(scene, &origin, &dir).map(|(qi, t)| {
                        let p = origin + dir * t;
                        (t, scene.quads[qi].color_at(&p))
                    })
                })
                .collect()
        })
        .collect();
    let mut depth = DepthMap::empty(width, height);
    let mut rgb = RgbImage::filled(width, height, [0.0; 3]);
    for (i, hit) in rows.into_iter().flatten().enumerate() {
        if let Some((z, c)) = hit {
            depth.z[i] = z;
            depth.valid[i] = true;
            rgb.pixels[i] = c;
        }
    }
    Ok(RgbdFrame { rgb, depth })
}

/// Coloured world points of every valid pixel of a frame.
pub fn frame_cloud(frame: &RgbdFrame, cam: &Camera, tag: u32) -> SceneCloud {
    let pm = unproject_depth(&frame.depth, cam);
    let mut points = Vec::with_capacity(frame.depth.valid_count());
    let mut colors = Vec::with_capacity(points.capacity());
    for i in 0..pm.points.len() {
        if pm.valid[i] {
            points.push(pm.points[i]);
            colors.push(frame.rgb.pixels[i]);
        }
    }
    SceneCloud::from_points(points, colors, tag)
}

/// Intrinsics shared by generated cameras: 60° horizontal field of view,
/// principal point at the image centre.
pub fn default_intrinsics(width: usize, height: usize) -> (f64, f64, f64, f64) {
    let f = 0.5 * width as f64 / (std::f64::consts::PI / 6.0).tan();
    (f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// `n` cameras on a horizontal circle around the room centre, each looking
/// at the centre of the box region, starting at angle `phase` and advancing
/// by `step` radians.
pub fn orbit_cameras(
    scene: &SyntheticScene,
    n: usize,
    radius: f64,
    phase: f64,
    step: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>, GeomError> {
    let (fx, fy, cx, cy) = default_intrinsics(width, height);
    let eye_y = 0.5 * scene.bounds.max[1];
    let target = Vector3::new(0.0, 0.35 * scene.bounds.max[1], 0.0);
    (0..n)
        .map(|i| {
            let a = phase + step * i as f64;
            let eye = Vector3::new(radius * a.cos(), eye_y, radius * a.sin());
            Camera::look_at(fx, fy, cx, cy, eye, target, Vector3::new(0.0, 1.0, 0.0))
        })
        .collect()
}

/// A condition/target pair: `condition` is the source frame's geometry
/// splatted into the target camera.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub target_index: usize,
    pub source_index: usize,
    pub stride: usize,
    pub condition: PartialView,
    pub target: RgbdFrame,
    pub source_rgb: RgbImage,
}

/// Builds one pair per (target frame, stride), with the source taken
/// `stride` frames before or after the target (seeded choice when both
/// exist, skipped when neither does). Stride 0 is the self-projection, whose condition is the target
/// frame itself. The output order is a seeded shuffle.
pub fn make_training_pairs(
    scene: &SyntheticScene,
    cams: &[Camera],
    strides: &[usize],
    seed: u64,
    width: usize,
    height: usize,
) -> Result<Vec<TrainingPair>, SynthError> {
    let max_stride = strides.iter().copied().max().unwrap_or(0);
    if cams.len() < max_stride + 1 || cams.is_empty() {
        return Err(SynthError::TrajectoryTooShort {
            len: cams.len(),
            stride: max_stride,
        });
    }
    let frames = cams
        .iter()
        .map(|c| render_exact(scene, c, width, height))
        .collect::<Result<Vec<_>, _>>()?;
    let clouds: Vec<SceneCloud> = frames.iter().zip(cams).map(|(f, c)| frame_cloud(f, c, 0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(cams.len() * strides.len());
    for target in 0..cams.len() {
        for &stride in strides {
            let mut options = Vec::with_capacity(2);
            if target >= stride {
                options.push(target - stride);
            }
            if target + stride < cams.len() && stride > 0 {
                options.push(target + stride);
            }
            // targets near both ends may have no partner at this stride
            let Some(&source) = options.choose(&mut rng) else {
                continue;
            };
            pairs.push(pair_from_frames(&frames, &clouds, cams, target, source, width, height)?);
            pairs.last_mut().expect("just pushed").stride = stride;
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

fn pair_from_frames(
    frames: &[RgbdFrame],
    clouds: &[SceneCloud],
    cams: &[Camera],
    target: usize,
    source: usize,
    width: usize,
    height: usize,
) -> Result<TrainingPair, SynthError> {
    let condition = if source == target {
        let f = &frames[target];
        PartialView {
            rgb: f.rgb.clone(),
            depth: f.depth.clone(),
            rgb_valid: f.depth.valid.clone(),
        }
    } else {
        render_partial_view(&clouds[source], &cams[target], width, height)?
    };
    Ok(TrainingPair {
        target_index: target,
        source_index: source,
        stride: target.abs_diff(source),
        condition,
        target: frames[target].clone(),
        source_rgb: frames[source].rgb.clone(),
    })
}

/// Pair for an explicit source/target choice.
pub fn pair_with_stride(
    scene: &SyntheticScene,
    cams: &[Camera],
    target: usize,
    source: usize,
    width: usize,
    height: usize,
) -> Result<TrainingPair, SynthError> {
    if target >= cams.len() || source >= cams.len() {
        return Err(SynthError::TrajectoryTooShort {
            len: cams.len(),
            stride: target.abs_diff(source),
        });
    }
    let frames = [
        render_exact(scene, &cams[target], width, height)?,
        render_exact(scene, &cams[source], width, height)?,
    ];
    let src_cloud = frame_cloud(&frames[1], &cams[source], 0);
    let condition = if source == target {
        PartialView {
            rgb: frames[0].rgb.clone(),
            depth: frames[0].depth.clone(),
            rgb_valid: frames[0].depth.valid.clone(),
        }
    } else {
        render_partial_view(&src_cloud, &cams[target], width, height)?
    };
    let [target_frame, source_frame] = frames;
    Ok(TrainingPair {
        target_index: target,
        source_index: source,
        stride: target.abs_diff(source),
        condition,
        target: target_frame,
        source_rgb: source_frame.rgb,
    })
}
