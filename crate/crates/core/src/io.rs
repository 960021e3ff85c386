//! On-disk formats: PFM depth, PNG colour and mask, binary PLY clouds and
//! the JSON scene container that ties frames together.
//!
//! A container directory holds `manifest.json` plus one
//! `<name>.png`, `<name>.pfm` and `<name>_mask.png` per frame, and
//! optionally `scene.json` with the generator description.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{rotation_deviation, Camera, CameraParams, DepthMap, GeomError, RgbImage, ROTATION_TOL};
use crate::pipeline::SceneCloud;
use crate::synth::SyntheticScene;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("manifest version {0} is not supported")]
    VersionUnsupported(u32),
    #[error("missing blob {0}")]
    MissingBlob(String),
    #[error("{path}: expected {expected}, found {actual}")]
    ShapeMismatch { path: String, expected: String, actual: String },
    #[error("frame {frame}: rotation is not orthonormal with det +1 (deviation {deviation:.3e})")]
    NonRotationOnLoad { frame: String, deviation: f64 },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("refusing to export an empty cloud")]
    EmptyCloud,
}

impl IoError {
    pub fn code(&self) -> &'static str {
        match self {
            IoError::Io { .. } => "IO_FAILURE",
            IoError::VersionUnsupported(_) => "VERSION_UNSUPPORTED",
            IoError::MissingBlob(_) => "MISSING_BLOB",
            IoError::ShapeMismatch { .. } => "SHAPE_MISMATCH",
            IoError::NonRotationOnLoad { .. } => "NON_ROTATION_ON_LOAD",
            IoError::Format { .. } => "FORMAT_ERROR",
            IoError::EmptyCloud => "EMPTY_CLOUD",
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<fs::File, IoError> {
    fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IoError::MissingBlob(path.display().to_string())
        } else {
            io_err(path, e)
        }
    })
}

/// Greyscale PFM: `Pf`, dimensions, scale `-1.0` (little-endian), rows
/// stored bottom to top.
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<(), IoError> {
    assert_eq!(values.len(), width * height);
    let mut buf = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    buf.reserve(values.len() * 4);
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>), IoError> {
    let mut r = BufReader::new(open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<fs::File>| -> Result<String, IoError> {
        line.clear();
        r.read_line(&mut line).map_err(|e| io_err(path, e))?;
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "Pf" {
        return Err(format_err(path, "not a greyscale PFM"));
    }
    let dims = next_line(&mut r)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (width, height) = match (it.next(), it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) => (w, h),
        _ => return Err(format_err(path, format!("bad PFM dimensions {dims:?}"))),
    };
    let scale: f64 = next_line(&mut r)?
        .parse()
        .map_err(|_| format_err(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * 4];
    r.read_exact(&mut raw).map_err(|e| io_err(path, e))?;
    let mut values = vec![0f32; width * height];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (height - 1 - k / width, k % width);
        values[row * width + col] = v;
    }
    Ok((width, height, values))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<(), IoError> {
    let buf: Vec<u8> = img.pixels.iter().flat_map(|p| p.map(to_u8)).collect();
    image::save_buffer(path, &buf, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| io_err(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage, IoError> {
    open(path)?;
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    RgbImage::new(w as usize, h as usize, pixels).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<(), IoError> {
    let buf: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, width as u32, height as u32, image::ExtendedColorType::L8).map_err(|e| io_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>), IoError> {
    open(path)?;
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.pixels().map(|p| p.0[0] >= 128).collect()))
}

/// Binary little-endian PLY with `float x, y, z` and `uchar red, green,
/// blue` per vertex.
pub fn export_ply(cloud: &SceneCloud, path: &Path) -> Result<(), IoError> {
    if cloud.is_empty() {
        return Err(IoError::EmptyCloud);
    }
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_ply(cloud, &mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_ply<W: Write>(cloud: &SceneCloud, w: &mut W) -> std::io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        for v in p.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.write_all(&c.map(to_u8))?;
    }
    Ok(())
}

/// Parsed vertex data of a PLY written by [`write_ply`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlyVertices {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

pub fn read_ply(bytes: &[u8]) -> Result<PlyVertices, String> {
    const EXPECTED: [&str; 8] = [
        "format binary_little_endian 1.0",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ];
    let mut pos = 0;
    let mut lines = Vec::new();
    while lines.last().map(String::as_str) != Some("end_header") {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or("unterminated header")?;
        lines.push(String::from_utf8_lossy(&bytes[pos..pos + end]).trim().to_string());
        pos += end + 1;
    }
    if lines.first().map(String::as_str) != Some("ply") || lines.len() != 10 {
        return Err(format!("unexpected header {lines:?}"));
    }
    let count: usize = lines[2]
        .strip_prefix("element vertex ")
        .and_then(|n| n.parse().ok())
        .ok_or("missing vertex count")?;
    let rest: Vec<&str> = std::iter::once(lines[1].as_str()).chain(lines[3..].iter().map(String::as_str)).collect();
    if rest != EXPECTED {
        return Err(format!("unexpected header {lines:?}"));
    }
    let body = &bytes[pos..];
    if body.len() != count * 15 {
        return Err(format!("body holds {} bytes, header promises {count} vertices", body.len()));
    }
    let mut out = PlyVertices {
        points: Vec::with_capacity(count),
        colors: Vec::with_capacity(count),
    };
    for v in body.chunks_exact(15) {
        let f = |k: usize| f32::from_le_bytes([v[k], v[k + 1], v[k + 2], v[k + 3]]);
        out.points.push([f(0), f(4), f(8)]);
        out.colors.push([v[12], v[13], v[14]]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub camera: CameraParams,
    pub image: String,
    pub depth: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub frames: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}

/// One view stored in a container; the mask is the depth validity.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainerFrame {
    pub name: String,
    pub camera: Camera,
    pub rgb: RgbImage,
    pub depth: DepthMap,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneContainer {
    pub frames: Vec<ContainerFrame>,
    pub scene: Option<SyntheticScene>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn save_scene(container: &SceneContainer, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut frames = Vec::with_capacity(container.frames.len());
    for f in &container.frames {
        let (w, h) = (f.depth.width, f.depth.height);
        let rec = FrameRecord {
            name: f.name.clone(),
            width: w,
            height: h,
            camera: f.camera.to_params(),
            image: format!("{}.png", f.name),
            depth: format!("{}.pfm", f.name),
            mask: format!("{}_mask.png", f.name),
        };
        write_rgb_png(&dir.join(&rec.image), &f.rgb)?;
        let z: Vec<f32> = f.depth.z.iter().zip(&f.depth.valid).map(|(z, v)| if *v { *z as f32 } else { 0.0 }).collect();
        write_pfm(&dir.join(&rec.depth), w, h, &z)?;
        write_mask_png(&dir.join(&rec.mask), w, h, &f.depth.valid)?;
        frames.push(rec);
    }
    let scene = match &container.scene {
        Some(s) => {
            write_json(&dir.join(SCENE_FILE), s)?;
            Some(SCENE_FILE.to_string())
        }
        None => None,
    };
    write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            version: MANIFEST_VERSION,
            frames,
            scene,
        },
    )
}

fn blob_path(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

fn check_shape(path: &Path, expected: (usize, usize), actual: (usize, usize)) -> Result<(), IoError> {
    if expected != actual {
        return Err(IoError::ShapeMismatch {
            path: path.display().to_string(),
            expected: format!("{}x{}", expected.0, expected.1),
            actual: format!("{}x{}", actual.0, actual.1),
        });
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<SceneContainer, IoError> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(IoError::VersionUnsupported(manifest.version));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for rec in &manifest.frames {
        let p = &rec.camera;
        let rot = Matrix3::from_row_slice(&p.r);
        let deviation = rotation_deviation(&rot);
        if !(deviation <= ROTATION_TOL) {
            return Err(IoError::NonRotationOnLoad {
                frame: rec.name.clone(),
                deviation,
            });
        }
        let camera = Camera::new(p.fx, p.fy, p.cx, p.cy, rot, Vector3::from(p.t)).map_err(|e| match e {
            GeomError::NonRotation { deviation } => IoError::NonRotationOnLoad {
                frame: rec.name.clone(),
                deviation,
            },
            other => format_err(&dir.join(MANIFEST_FILE), other.to_string()),
        })?;
        let shape = (rec.width, rec.height);
        let img_path = blob_path(dir, &rec.image);
        let depth_path = blob_path(dir, &rec.depth);
        let mask_path = blob_path(dir, &rec.mask);
        let rgb = read_rgb_png(&img_path)?;
        check_shape(&img_path, shape, (rgb.width, rgb.height))?;
        let (dw, dh, z) = read_pfm(&depth_path)?;
        check_shape(&depth_path, shape, (dw, dh))?;
        let (mw, mh, valid) = read_mask_png(&mask_path)?;
        check_shape(&mask_path, shape, (mw, mh))?;
        let mut depth = DepthMap::empty(dw, dh);
        for i in 0..z.len() {
            if valid[i] {
                depth.z[i] = z[i] as f64;
                depth.valid[i] = true;
            }
        }
        let depth = DepthMap::new(dw, dh, depth.z, depth.valid).map_err(|e| format_err(&depth_path, e.to_string()))?;
        frames.push(ContainerFrame {
            name: rec.name.clone(),
            camera,
            rgb,
            depth,
        });
    }
    let scene = match &manifest.scene {
        Some(rel) => Some(read_json(&blob_path(dir, rel))?),
        None => None,
    };
    Ok(SceneContainer { frames, scene })
}

/// Ordered cameras for a completion run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<CameraParams>,
}

impl Trajectory {
    pub fn from_cameras(width: usize, height: usize, cams: &[Camera]) -> Self {
        Self {
            width,
            height,
            cameras: cams.iter().map(Camera::to_params).collect(),
        }
    }

    pub fn cameras(&self) -> Result<Vec<Camera>, GeomError> {
        self.cameras.iter().cloned().map(Camera::try_from).collect()
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_json(path, value)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    read_json(path)
}
