//! Image quality (PSNR, SSIM) and camera pose distances.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geom::{rotation_deviation, RgbImage};

/// Orthonormality/determinant tolerance for pose-set rotations.
pub const POSE_ROTATION_TOL: f64 = 1e-6;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("pose sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("pose set is empty")]
    Empty,
    #[error("rotation {index} is not a rotation (deviation {deviation:.3e})")]
    NonRotation { index: usize, deviation: f64 },
    #[error("images differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("metric {0:?} is not supported")]
    Unsupported(String),
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            MetricsError::LengthMismatch(..) => "LENGTH_MISMATCH",
            MetricsError::Empty => "EMPTY_POSE_SET",
            MetricsError::NonRotation { .. } => "NON_ROTATION",
            MetricsError::ShapeMismatch(..) => "SHAPE_MISMATCH",
            MetricsError::TooSmall { .. } => "TOO_SMALL",
            MetricsError::Unsupported(_) => "UNSUPPORTED_METRIC",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseRole {
    Generated,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSet {
    rotations: Vec<Matrix3<f64>>,
    translations: Vec<Vector3<f64>>,
    pub role: PoseRole,
}

impl PoseSet {
    pub fn new(rotations: Vec<Matrix3<f64>>, translations: Vec<Vector3<f64>>, role: PoseRole) -> Result<Self, MetricsError> {
        if rotations.len() != translations.len() {
            return Err(MetricsError::LengthMismatch(rotations.len(), translations.len()));
        }
        for (index, r) in rotations.iter().enumerate() {
            let deviation = rotation_deviation(r);
            if !(deviation <= POSE_ROTATION_TOL) {
                return Err(MetricsError::NonRotation { index, deviation });
            }
        }
        Ok(Self {
            rotations,
            translations,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn rotations(&self) -> &[Matrix3<f64>] {
        &self.rotations
    }

    pub fn translations(&self) -> &[Vector3<f64>] {
        &self.translations
    }
}

fn check_pair(a: &PoseSet, b: &PoseSet) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Geodesic angle between two rotations: `arccos((tr(A Bᵀ) − 1) / 2)`,
/// evaluated as `atan2(sin, cos)` with the sine read off the skew part of
/// `A Bᵀ`. Near zero arccos loses half the digits (a trace of `3 − 1e-16`
/// gives 1.5e-8); the cosine is still clamped to `[−1, 1]`.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a * b.transpose();
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    (axis.norm() / 2.0).atan2(c)
}

/// `Σ_i arccos((tr(R_gen R_gtᵀ) − 1) / 2)`, in radians.
pub fn rotation_distance(gen: &PoseSet, gt: &PoseSet) -> Result<f64, MetricsError> {
    check_pair(gen, gt)?;
    Ok(gen.rotations.iter().zip(&gt.rotations).map(|(a, b)| rotation_angle(a, b)).sum())
}

/// `Σ_i ‖T_gt − T_gen‖₂`.
pub fn translation_distance(gen: &PoseSet, gt: &PoseSet) -> Result<f64, MetricsError> {
    check_pair(gen, gt)?;
    Ok(gen.translations.iter().zip(&gt.translations).map(|(a, b)| (b - a).norm()).sum())
}

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<(), MetricsError> {
    if (a.width, a.height) != (b.width, b.height) || a.pixels.len() != b.pixels.len() {
        return Err(MetricsError::ShapeMismatch((a.width, a.height), (b.width, b.height)));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over all channels; identical images give `+∞`.
pub fn psnr(a: &RgbImage, b: &RgbImage, peak: f64) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let n = (a.pixels.len() * 3) as f64;
    let sse: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]) * (p[c] - q[c])))
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / (sse / n)).log10())
}

pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            w[y * SSIM_WINDOW + x] = g[y] * g[x] / (total * total);
        }
    }
    w
}

/// Mean SSIM of the luma channels over every full 11x11 window position.
pub fn ssim(a: &RgbImage, b: &RgbImage, peak: f64) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let (la, lb) = (luma(a), luma(b));
    let win = gaussian_window();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (nx, ny) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..ny {
        for ox in 0..nx {
            let (mut mx, mut my) = (0.0, 0.0);
            for k in 0..SSIM_WINDOW * SSIM_WINDOW {
                let i = (oy + k / SSIM_WINDOW) * w + ox + k % SSIM_WINDOW;
                mx += win[k] * la[i];
                my += win[k] * lb[i];
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for k in 0..SSIM_WINDOW * SSIM_WINDOW {
                let i = (oy + k / SSIM_WINDOW) * w + ox + k % SSIM_WINDOW;
                let (dx, dy) = (la[i] - mx, lb[i] - my);
                vx += win[k] * dx * dx;
                vy += win[k] * dy * dy;
                cxy += win[k] * dx * dy;
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (nx * ny) as f64)
}

/// Metric names the CLI accepts; anything else is rejected explicitly.
pub fn check_metric_name(name: &str) -> Result<(), MetricsError> {
    match name {
        "psnr" | "ssim" | "r_dist" | "t_dist" => Ok(()),
        other => Err(MetricsError::Unsupported(other.to_string())),
    }
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
    }
}

/// JSON report; an infinite PSNR is written as the string `"inf"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub r_dist_rad: f64,
    pub t_dist: f64,
}
