//! Pinhole camera, pointmap/depth projection and z-buffer splatting.
//!
//! Pixel `(u, v)` lives at flat index `v * width + u`. Cameras follow the
//! usual computer-vision frame: `x` right, `y` down, `z` forward, with a
//! world-to-camera pose `x_c = R * X + T`. Depth is metric camera-space `z`
//! everywhere; [`to_inverse_depth`] and [`from_inverse_depth`] convert to
//! and from disparity for callers that want it.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::SceneCloud;

/// Points with camera-space depth at or below this value are culled.
pub const Z_MIN: f64 = 1e-6;

/// Tolerance on `RᵀR = I` and `det(R) = 1` when building a camera.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("pointmap has no valid points")]
    EmptyPointmap,
    #[error("valid point {index} is not finite")]
    NonFiniteInput { index: usize },
    #[error("scene cloud is empty")]
    EmptyCloud,
    #[error("rotation is not orthonormal with det +1 (deviation {deviation:.3e})")]
    NonRotation { deviation: f64 },
    #[error("intrinsics must have positive finite focal lengths (fx={fx}, fy={fy})")]
    BadIntrinsics { fx: f64, fy: f64 },
    #[error("buffer of length {actual} does not match {width}x{height}")]
    ShapeMismatch {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("depth at pixel {index} is {value}, expected finite and > 0")]
    InvalidDepth { index: usize, value: f64 },
}

impl GeomError {
    pub fn code(&self) -> &'static str {
        match self {
            GeomError::EmptyPointmap => "EMPTY_POINTMAP",
            GeomError::NonFiniteInput { .. } => "NON_FINITE_INPUT",
            GeomError::EmptyCloud => "EMPTY_CLOUD",
            GeomError::NonRotation { .. } => "NON_ROTATION",
            GeomError::BadIntrinsics { .. } => "BAD_INTRINSICS",
            GeomError::ShapeMismatch { .. } => "SHAPE_MISMATCH",
            GeomError::InvalidDepth { .. } => "INVALID_DEPTH",
        }
    }
}

/// Largest deviation of `r` from a proper rotation, measured as
/// `max(max|RᵀR - I|, |det R - 1|)`.
pub fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    if ortho.is_nan() || det.is_nan() {
        return f64::INFINITY;
    }
    ortho.max(det)
}

/// Flat, serializable camera description: intrinsics, row-major `R` and `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub r: [f64; 9],
    pub t: [f64; 3],
}

/// Pinhole camera with a world-to-camera pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraParams", into = "CameraParams")]
pub struct Camera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite())
            || !cx.is_finite()
            || !cy.is_finite()
        {
            return Err(GeomError::BadIntrinsics { fx, fy });
        }
        let deviation = rotation_deviation(&rotation);
        if deviation > ROTATION_TOL || !translation.iter().all(|t| t.is_finite()) {
            return Err(GeomError::NonRotation { deviation });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeomError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(fx, fy, cx, cy, rotation, translation)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera centre in world coordinates, `-Rᵀ T`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `K⁻¹ (u, v, 1)`: camera-frame ray whose `z` component is 1.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// World point seen at pixel `(u, v)` with camera depth `z`:
    /// `R⁻¹ K⁻¹ p̃ z − R⁻¹ T`, using `R⁻¹ = Rᵀ`.
    pub fn unproject_pixel(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        self.rotation.transpose() * (self.pixel_ray(u, v) * z - self.translation)
    }

    /// Projects a world point to a pixel of a `width x height` grid.
    /// Returns the flat pixel index and camera depth, or `None` when the
    /// point is culled or falls outside the grid.
    pub fn project_to_pixel(&self, p: &Vector3<f64>, width: usize, height: usize) -> Option<(usize, f64)> {
        let pc = self.world_to_camera(p);
        let z = pc.z;
        if !(z > Z_MIN) {
            return None;
        }
        let u = round_half_up(self.fx * pc.x / z + self.cx);
        let v = round_half_up(self.fy * pc.y / z + self.cy);
        if u < 0.0 || v < 0.0 || u >= width as f64 || v >= height as f64 {
            return None;
        }
        Some((v as usize * width + u as usize, z))
    }

    pub fn to_params(&self) -> CameraParams {
        let r = &self.rotation;
        CameraParams {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            r: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
    }
}

impl TryFrom<CameraParams> for Camera {
    type Error = GeomError;

    fn try_from(p: CameraParams) -> Result<Self, Self::Error> {
        Camera::new(
            p.fx,
            p.fy,
            p.cx,
            p.cy,
            Matrix3::from_row_slice(&p.r),
            Vector3::from(p.t),
        )
    }
}

impl From<Camera> for CameraParams {
    fn from(c: Camera) -> Self {
        c.to_params()
    }
}

/// `floor(x + 0.5)`: nearest integer with halves rounded up.
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

fn check_len(width: usize, height: usize, actual: usize) -> Result<(), GeomError> {
    if width * height != actual {
        return Err(GeomError::ShapeMismatch {
            width,
            height,
            actual,
        });
    }
    Ok(())
}

/// Per-pixel world coordinates with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl Pointmap {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self, GeomError> {
        check_len(width, height, points.len())?;
        check_len(width, height, valid.len())?;
        Ok(Self {
            width,
            height,
            points,
            valid,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Metric camera-space depth with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub z: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, z: Vec<f64>, valid: Vec<bool>) -> Result<Self, GeomError> {
        check_len(width, height, z.len())?;
        check_len(width, height, valid.len())?;
        for (index, (&value, &ok)) in z.iter().zip(&valid).enumerate() {
            if ok && !(value > 0.0 && value.is_finite()) {
                return Err(GeomError::InvalidDepth { index, value });
            }
        }
        Ok(Self {
            width,
            height,
            z,
            valid,
        })
    }

    /// All-invalid map of the given size.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            z: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Depth values at valid pixels, in pixel order.
    pub fn valid_values(&self) -> Vec<f64> {
        self.z
            .iter()
            .zip(&self.valid)
            .filter_map(|(&z, &v)| v.then_some(z))
            .collect()
    }
}

/// Converts metric depth to inverse depth `1 / z` on valid pixels.
pub fn to_inverse_depth(dm: &DepthMap) -> Vec<f64> {
    dm.z
        .iter()
        .zip(&dm.valid)
        .map(|(&z, &v)| if v { 1.0 / z } else { 0.0 })
        .collect()
}

/// Rebuilds a metric depth map from inverse depth; non-positive or
/// non-finite disparities become invalid.
pub fn from_inverse_depth(width: usize, height: usize, inv: &[f64]) -> Result<DepthMap, GeomError> {
    check_len(width, height, inv.len())?;
    let mut dm = DepthMap::empty(width, height);
    for (i, &d) in inv.iter().enumerate() {
        let z = 1.0 / d;
        if d > 0.0 && z.is_finite() && z > 0.0 {
            dm.z[i] = z;
            dm.valid[i] = true;
        }
    }
    Ok(dm)
}

/// Linear RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self, GeomError> {
        check_len(width, height, pixels.len())?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }
}

/// Dense colour plus depth for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub rgb: RgbImage,
    pub depth: DepthMap,
}

impl RgbdFrame {
    pub fn width(&self) -> usize {
        self.depth.width
    }
    pub fn height(&self) -> usize {
        self.depth.height
    }
}

/// Incomplete appearance and geometry seen from a novel camera.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialView {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub rgb_valid: Vec<bool>,
}

impl PartialView {
    pub fn depth_valid(&self) -> &[bool] {
        &self.depth.valid
    }

    pub fn coverage(&self) -> f64 {
        self.depth.valid_count() as f64 / self.depth.valid.len().max(1) as f64
    }
}

/// Projects a pointmap into `cam`, keeping the nearest point per pixel.
/// Equal depths resolve to the lowest point index.
pub fn project_pointmap(pm: &Pointmap, cam: &Camera, out_w: usize, out_h: usize) -> Result<DepthMap, GeomError> {
    let mut any = false;
    for (index, (p, &v)) in pm.points.iter().zip(&pm.valid).enumerate() {
        if v {
            any = true;
            if !p.iter().all(|c| c.is_finite()) {
                return Err(GeomError::NonFiniteInput { index });
            }
        }
    }
    if !any {
        return Err(GeomError::EmptyPointmap);
    }
    let mut out = DepthMap::empty(out_w, out_h);
    for (p, _) in pm.points.iter().zip(&pm.valid).filter(|(_, &v)| v) {
        if let Some((idx, z)) = cam.project_to_pixel(p, out_w, out_h) {
            if !out.valid[idx] || z < out.z[idx] {
                out.z[idx] = z;
                out.valid[idx] = true;
            }
        }
    }
    Ok(out)
}

/// Lifts every valid depth pixel back to world coordinates.
pub fn unproject_depth(dm: &DepthMap, cam: &Camera) -> Pointmap {
    let w = dm.width;
    let points = (0..dm.z.len())
        .map(|i| {
            if dm.valid[i] {
                cam.unproject_pixel((i % w) as f64, (i / w) as f64, dm.z[i])
            } else {
                Vector3::zeros()
            }
        })
        .collect();
    Pointmap {
        width: dm.width,
        height: dm.height,
        points,
        valid: dm.valid.clone(),
    }
}

/// Splats a coloured cloud into `cam` with nearest-wins visibility;
/// ties on depth keep the lowest point index.
pub fn render_partial_view(cloud: &SceneCloud, cam: &Camera, out_w: usize, out_h: usize) -> Result<PartialView, GeomError> {
    if cloud.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let n = out_w * out_h;
    let mut depth = DepthMap::empty(out_w, out_h);
    let mut rgb = RgbImage::filled(out_w, out_h, [0.0; 3]);
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        if let Some((idx, z)) = cam.project_to_pixel(p, out_w, out_h) {
            if !depth.valid[idx] || z < depth.z[idx] {
                depth.z[idx] = z;
                depth.valid[idx] = true;
                rgb.pixels[idx] = *c;
            }
        }
    }
    debug_assert_eq!(depth.valid.len(), n);
    let rgb_valid = depth.valid.clone();
    Ok(PartialView {
        rgb,
        depth,
        rgb_valid,
    })
}
