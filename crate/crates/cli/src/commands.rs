use std::fs;
use std::path::{Path, PathBuf};

use scomp_core::codec::{normalize_depth, AreaCodec, IdentityCodec, LatentCodec};
use scomp_core::diffusion::{sample as run_sampler, ConditionPack, DenoiserConfig, DiffusionSchedule};
use scomp_core::geom::{project_pointmap, unproject_depth, Camera, DepthMap, PartialView, RgbImage, RgbdFrame, Z_MIN};
use scomp_core::io::{
    export_ply as write_ply_file, load_json, load_scene, read_mask_png, read_pfm, save_json, save_scene, write_mask_png,
    write_pfm, ContainerFrame, SceneContainer, Trajectory,
};
use scomp_core::metrics::{check_metric_name, psnr, rotation_distance, ssim, translation_distance, MetricsReport, PoseRole, PoseSet};
use scomp_core::model::{mean_dataset_loss, toy_dataset, train as run_training, TrainingExample};
use scomp_core::pipeline::{complete_trajectory_with, DiffusionFill, FillBackend, SceneCloud, StepConfig};
use scomp_core::synth::{frame_cloud, generate_scene, make_training_pairs, orbit_cameras, render_exact, DEFAULT_STRIDES};
use scomp_core::{fit_scale_offset, CompletionModel, FitDirection, ToyDatasetConfig, TrainConfig};

use crate::error::CliError;
use crate::report::Report;
use crate::settings::Settings;
use crate::{AlignArgs, CompleteArgs, ExportPlyArgs, MetricsArgs, NormalizeArgs, ProjectArgs, SampleArgs, SynthArgs, TrainArgs};

/// Noise draws used to measure the dataset loss before and after training.
const EVAL_SEEDS: std::ops::Range<u64> = 1000..1008;

pub struct Context {
    pub settings: Settings,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Context {
    fn out_dir(&self) -> Result<&Path, CliError> {
        let dir = self
            .out
            .as_deref()
            .ok_or_else(|| CliError::usage("MISSING_ARGUMENT", "--out is required"))?;
        fs::create_dir_all(dir).map_err(|e| runtime("IO_FAILURE", format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn runtime(code: &'static str, message: impl Into<String>) -> CliError {
    CliError::Runtime {
        code,
        message: message.into(),
    }
}

fn load_depth(path: &Path, mask: Option<&Path>) -> Result<DepthMap, CliError> {
    let (w, h, raw) = read_pfm(path)?;
    let z: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    let mut valid: Vec<bool> = z.iter().map(|v| v.is_finite() && *v > 0.0).collect();
    if let Some(m) = mask {
        let (mw, mh, bits) = read_mask_png(m)?;
        if (mw, mh) != (w, h) {
            return Err(CliError::usage("SHAPE_MISMATCH", format!("mask is {mw}x{mh}, depth is {w}x{h}")));
        }
        valid.iter_mut().zip(bits).for_each(|(v, b)| *v &= b);
    }
    Ok(DepthMap::new(w, h, z, valid)?)
}

fn save_depth(dir: &Path, stem: &str, values: &[f64], valid: &[bool], w: usize, h: usize) -> Result<(), CliError> {
    let z: Vec<f32> = values.iter().zip(valid).map(|(v, ok)| if *ok { *v as f32 } else { 0.0 }).collect();
    write_pfm(&dir.join(format!("{stem}.pfm")), w, h, &z)?;
    write_mask_png(&dir.join(format!("{stem}_mask.png")), w, h, valid)?;
    Ok(())
}

fn codec_named(name: &str) -> Result<Box<dyn LatentCodec>, CliError> {
    match name {
        "identity" => Ok(Box::new(IdentityCodec)),
        "area" => Ok(Box::new(AreaCodec { factor: 2 })),
        other => Err(CliError::usage("BAD_ARGUMENT", format!("unknown codec {other:?}"))),
    }
}

fn frame_at(container: &SceneContainer, index: usize) -> Result<&ContainerFrame, CliError> {
    container
        .frames
        .get(index)
        .ok_or_else(|| CliError::usage("BAD_ARGUMENT", format!("frame {index} not in container of {}", container.frames.len())))
}

fn load_model(path: &Path) -> Result<CompletionModel, CliError> {
    let file = fs::File::open(path).map_err(|e| runtime("IO_FAILURE", format!("{}: {e}", path.display())))?;
    Ok(CompletionModel::read_checkpoint(std::io::BufReader::new(file))?)
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<Report, CliError> {
    let s = &ctx.settings;
    let frames = s.or(a.frames, "frames", 8)?;
    let width = s.or(a.width, "width", 32)?;
    let height = s.or(a.height, "height", 32)?;
    let radius = s.or(a.radius, "radius", 2.0)?;
    let phase = s.or(a.phase, "phase", 0.0)?;
    let step = s.or(a.step, "step", 0.5)?;
    if frames == 0 || width == 0 || height == 0 {
        return Err(CliError::usage("BAD_ARGUMENT", "frames, width and height must be positive"));
    }
    let dir = ctx.out_dir()?;
    let scene = generate_scene(ctx.seed);
    let cams = orbit_cameras(&scene, frames, radius, phase, step, width, height)?;
    let mut container = SceneContainer::default();
    for (i, cam) in cams.iter().enumerate() {
        let f = render_exact(&scene, cam, width, height)?;
        container.frames.push(ContainerFrame {
            name: format!("frame_{i:03}"),
            camera: cam.clone(),
            rgb: f.rgb,
            depth: f.depth,
        });
    }
    let quads = scene.quads.len();
    container.scene = Some(scene);
    save_scene(&container, dir)?;
    Ok(Report::new()
        .add("frames", frames)
        .add("width", width)
        .add("height", height)
        .add("quads", quads)
        .add("out", dir.display().to_string()))
}

pub fn project(ctx: &Context, a: ProjectArgs) -> Result<Report, CliError> {
    let s = &ctx.settings;
    let container = load_scene(&s.required(a.input, "input")?)?;
    let src = frame_at(&container, s.or(a.source, "source", 0)?)?;
    let dst = frame_at(&container, s.required(a.target, "target")?)?;
    let (w, h) = (dst.depth.width, dst.depth.height);
    let projected = project_pointmap(&unproject_depth(&src.depth, &src.camera), &dst.camera, w, h)?;
    let both: Vec<usize> = (0..w * h).filter(|&i| projected.valid[i] && dst.depth.valid[i]).collect();
    let mut rel: Vec<f64> = both.iter().map(|&i| (projected.z[i] - dst.depth.z[i]).abs() / dst.depth.z[i]).collect();
    rel.sort_by(f64::total_cmp);
    let median = rel.get(rel.len() / 2).copied().unwrap_or(0.0);
    if ctx.out.is_some() {
        let dir = ctx.out_dir()?;
        save_depth(dir, "projected", &projected.z, &projected.valid, w, h)?;
    }
    Ok(Report::new()
        .add("source", src.name.as_str())
        .add("target", dst.name.as_str())
        .add("covered", projected.valid_count())
        .add("coverage", projected.valid_count() as f64 / (w * h) as f64)
        .add("median_rel_error", median))
}

pub fn normalize(ctx: &Context, a: NormalizeArgs) -> Result<Report, CliError> {
    let s = &ctx.settings;
    let mask = s.merge(a.mask, "mask")?;
    let dm = load_depth(&s.required(a.depth, "depth")?, mask.as_deref())?;
    let nd = normalize_depth(&dm)?;
    let valid: Vec<f64> = nd.values.iter().zip(&nd.valid).filter(|(_, v)| **v).map(|(x, _)| *x).collect();
    if ctx.out.is_some() {
        save_depth(ctx.out_dir()?, "normalized", &nd.values, &nd.valid, nd.width, nd.height)?;
    }
    Ok(Report::new()
        .add("d2", nd.d2)
        .add("d98", nd.d98)
        .add("valid", valid.len())
        .add("min", valid.iter().copied().fold(f64::INFINITY, f64::min))
        .add("max", valid.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
}

pub fn align(ctx: &Context, a: AlignArgs) -> Result<Report, CliError> {
    let s = &ctx.settings;
    let mask = s.merge(a.mask, "mask")?;
    let clue = load_depth(&s.required(a.clue, "clue")?, mask.as_deref())?;
    let pred = load_depth(&s.required(a.pred, "pred")?, mask.as_deref())?;
    if (clue.width, clue.height) != (pred.width, pred.height) {
        return Err(CliError::usage(
            "SHAPE_MISMATCH",
            format!("clue is {}x{}, prediction is {}x{}", clue.width, clue.height, pred.width, pred.height),
        ));
    }
    let direction = match s.or(a.direction, "direction", "predicted-to-clue".to_string())?.as_str() {
        "predicted-to-clue" | "predicted_to_clue" => FitDirection::PredictedToClue,
        "clue-to-predicted" | "clue_to_predicted" => FitDirection::ClueToPredicted,
        other => return Err(CliError::usage("BAD_ARGUMENT", format!("unknown direction {other:?}"))),
    };
    let both: Vec<bool> = clue.valid.iter().zip(&pred.valid).map(|(x, y)| *x && *y).collect();
    let fit = fit_scale_offset(&clue.z, &pred.z, &both, direction)?;
    if ctx.out.is_some() {
        let aligned: Vec<f64> = pred.z.iter().map(|d| fit.apply(*d)).collect();
        save_depth(ctx.out_dir()?, "aligned", &aligned, &pred.valid, pred.width, pred.height)?;
    }
    Ok(Report::new()
        .add("scale", fit.scale)
        .add("offset", fit.offset)
        .add("n_samples", fit.n_samples)
        .add("residual_rms", fit.residual_rms))
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<Report, CliError> {
    let s = &ctx.settings;
    let base = DenoiserConfig::default();
    let config = DenoiserConfig {
        d_model: s.or(a.d_model, "d_model", base.d_model)?,
        d_hidden: s.or(a.d_hidden, "d_hidden", base.d_hidden)?,
        ..base
    };
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        steps: s.or(a.steps, "steps", defaults.steps)?,
        learning_rate: s.or(a.learning_rate, "learning_rate", defaults.learning_rate)?,
        batch_size: s.or(a.batch_size, "batch_size", defaults.batch_size)?,
        seed: ctx.seed,
    };
    let model = CompletionModel::new(config, s.or(a.scene_tokens, "scene_tokens", 4)?, ctx.seed);
    let pairs = s.or(a.pairs, "pairs", ToyDatasetConfig::default().pairs)?;
    let dataset: Vec<TrainingExample> = match s.merge(a.input, "input")? {
        Some(path) => {
            let container = load_scene(&path)?;
            let scene = container
                .scene
                .as_ref()
                .ok_or_else(|| runtime("NO_SCENE", format!("{} has no scene description", path.display())))?;
            let f0 = frame_at(&container, 0)?;
            let (w, h) = (f0.depth.width, f0.depth.height);
            let cams: Vec<Camera> = container.frames.iter().map(|f| f.camera.clone()).collect();
            make_training_pairs(scene, &cams, &DEFAULT_STRIDES, ctx.seed, w, h)?
                .iter()
                .take(pairs)
                .map(|p| TrainingExample::from_pair(&model, &IdentityCodec, p))
                .collect::<Result<_, _>>()?
        }
        None => {
            let d = ToyDatasetConfig::default();
            let cfg = ToyDatasetConfig {
                scene_seed: s.or(a.scene_seed, "scene_seed", d.scene_seed)?,
                pair_seed: ctx.seed,
                resolution: s.or(a.resolution, "resolution", d.resolution)?,
                pairs,
                ..d
            };
            toy_dataset(&model, &IdentityCodec, &cfg)?
        }
    };
    let dir = ctx.out_dir()?;
    let sched = DiffusionSchedule::default();
    let initial = mean_dataset_loss(&model, &dataset, &sched, EVAL_SEEDS)?;
    let (trained, report) = run_training(model, &dataset, &sched, &train_cfg)?;
    let fin = mean_dataset_loss(&trained, &dataset, &sched, EVAL_SEEDS)?;
    let path = dir.join("model.ckpt");
    let file = fs::File::create(&path).map_err(|e| runtime("IO_FAILURE", format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    trained.write_checkpoint(&mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| runtime("IO_FAILURE", format!("{}: {e}", path.display())))?;
    let out = Report::new()
        .add("pairs", dataset.len())
        .add("steps", train_cfg.steps)
        .add("parameters", trained.num_params())
        .add("initial_loss", initial)
        .add("final_loss", fin)
        .add("ratio", fin / initial)
        .add("loss_curve", &report.loss_curve);
    save_json(&dir.join("train.json"), &out)?;
    Ok(out)
}

pub fn sample(ctx: &Context, a: SampleArgs) -> Result<Report, CliError> {
    let s = &ctx.settings;
    let model = load_model(&s.required(a.checkpoint, "checkpoint")?)?;
    let container = load_scene(&s.required(a.input, "input")?)?;
    let index = s.or(a.frame, "frame", 0)?;
    let frame = frame_at(&container, index)?;
    let reference = frame_at(&container, s.or(a.reference, "reference", index)?)?;
    let codec = codec_named(&s.or(None, "codec", "identity".to_string())?)?;
    let (w, h) = (frame.depth.width, frame.depth.height);
    let partial = PartialView {
        rgb: frame.rgb.clone(),
        depth: frame.depth.clone(),
        rgb_valid: frame.depth.valid.clone(),
    };
    let nd = normalize_depth(&partial.depth)?;
    let cond = ConditionPack::from_partial(codec.as_ref(), &partial, &nd)?;
    let tokens = model.scene_tokens(&model.reference_features(&reference.rgb)?)?;
    let z0 = run_sampler(&model.denoiser, &cond, &tokens, &DiffusionSchedule::default(), ctx.seed)?;
    let ic = codec.image_channels();
    let latent = scomp_core::codec::RgbdLatent {
        image: z0.slice(ndarray::s![0..ic, .., ..]).to_owned(),
        depth: z0.slice(ndarray::s![ic.., .., ..]).to_owned(),
    };
    let (img, depth) = scomp_core::codec::decode_rgbd(codec.as_ref(), &latent)?;
    let mut rgb = RgbImage::filled(w, h, [0.0; 3]);
    let mut out_depth = DepthMap::empty(w, h);
    let mut generated = 0;
    for i in 0..w * h {
        let (y, x) = (i / w, i % w);
        if partial.depth.valid[i] {
            rgb.pixels[i] = partial.rgb.pixels[i];
            out_depth.z[i] = partial.depth.z[i];
            out_depth.valid[i] = true;
            continue;
        }
        rgb.pixels[i] = [0, 1, 2].map(|c| img[[c, y, x]].clamp(0.0, 1.0));
        let d = nd.inverse(depth[[0, y, x]]);
        if d > Z_MIN && d.is_finite() {
            out_depth.z[i] = d;
            out_depth.valid[i] = true;
            generated += 1;
        }
    }
    let dir = ctx.out_dir()?;
    let out = SceneContainer {
        frames: vec![ContainerFrame {
            name: frame.name.clone(),
            camera: frame.camera.clone(),
            rgb,
            depth: out_depth,
        }],
        scene: None,
    };
    save_scene(&out, dir)?;
    Ok(Report::new()
        .add("frame", frame.name.as_str())
        .add("observed", partial.depth.valid_count())
        .add("generated", generated))
}

pub fn complete(ctx: &Context, a: CompleteArgs) -> Result<Report, CliError> {
    let s = &ctx.settings;
    let container = load_scene(&s.required(a.input, "input")?)?;
    let first = frame_at(&container, 0)?;
    let (mut w, mut h) = (first.depth.width, first.depth.height);
    let (cams, names): (Vec<Camera>, Vec<String>) = match s.merge(a.trajectory, "trajectory")? {
        Some(path) => {
            let traj: Trajectory = load_json(&path)?;
            (w, h) = (traj.width, traj.height);
            let cams = traj.cameras()?;
            let names = (1..=cams.len()).map(|k| format!("view_{k:03}")).collect();
            (cams, names)
        }
        None => container.frames[1..].iter().map(|f| (f.camera.clone(), f.name.clone())).unzip(),
    };
    let codec = codec_named(&s.or(a.codec, "codec", "identity".to_string())?)?;
    let backend_name = s.or(a.backend, "backend", "oracle".to_string())?;
    let sched = DiffusionSchedule::default();
    let model = match backend_name.as_str() {
        "diffusion" => Some(load_model(&s.required(a.checkpoint, "checkpoint")?)?),
        "oracle" | "passthrough" => None,
        other => return Err(CliError::usage("BAD_ARGUMENT", format!("unknown backend {other:?}"))),
    };
    let backend = match (backend_name.as_str(), &model) {
        ("oracle", _) => FillBackend::Oracle(
            container
                .scene
                .as_ref()
                .ok_or_else(|| runtime("NO_SCENE", "the oracle backend needs a container with a scene description"))?,
        ),
        ("diffusion", Some(m)) => FillBackend::Diffusion(DiffusionFill {
            model: m,
            schedule: &sched,
            reference: &first.rgb,
            seed: ctx.seed,
        }),
        _ => FillBackend::Passthrough,
    };
    let start = frame_cloud(
        &RgbdFrame {
            rgb: first.rgb.clone(),
            depth: first.depth.clone(),
        },
        &first.camera,
        0,
    );
    let dir = ctx.out_dir()?;
    let mut views = SceneContainer::default();
    let (cloud, stats) = complete_trajectory_with(&start, &cams, &backend, codec.as_ref(), &StepConfig::new(w, h), |k, step| {
        views.frames.push(ContainerFrame {
            name: names[k - 1].clone(),
            camera: cams[k - 1].clone(),
            rgb: step.frame.rgb.clone(),
            depth: step.frame.depth.clone(),
        });
    })?;
    write_ply_file(&cloud, &dir.join("cloud.ply"))?;
    save_scene(&views, &dir.join("views"))?;
    let out = Report::new()
        .add("backend", backend_name.as_str())
        .add("codec", codec.name())
        .add("seed", ctx.seed)
        .add("width", w)
        .add("height", h)
        .add("initial_points", start.len())
        .add("final_points", cloud.len())
        .add("iterations", &stats);
    save_json(&dir.join("stats.json"), &out)?;
    Ok(out)
}

pub fn metrics(ctx: &Context, a: MetricsArgs) -> Result<Report, CliError> {
    let s = &ctx.settings;
    let requested: Vec<String> = s
        .or(a.metrics, "metrics", "psnr,ssim,r_dist,t_dist".to_string())?
        .split(',')
        .map(|m| m.trim().to_ascii_lowercase())
        .collect();
    for m in &requested {
        check_metric_name(m)?;
    }
    let generated = load_scene(&s.required(a.generated, "generated")?)?;
    let truth = load_scene(&s.required(a.truth, "truth")?)?;
    if generated.frames.is_empty() {
        return Err(runtime("EMPTY_CONTAINER", "no generated frames"));
    }
    let mut pairs = Vec::with_capacity(generated.frames.len());
    for g in &generated.frames {
        let t = truth
            .frames
            .iter()
            .find(|t| t.name == g.name)
            .ok_or_else(|| runtime("UNMATCHED_FRAME", format!("no ground-truth frame named {:?}", g.name)))?;
        pairs.push((g, t));
    }
    let n = pairs.len() as f64;
    let wants = |m: &str| requested.iter().any(|r| r == m);
    let mut report = MetricsReport {
        psnr_db: 0.0,
        ssim: 0.0,
        r_dist_rad: 0.0,
        t_dist: 0.0,
    };
    for (g, t) in &pairs {
        if wants("psnr") {
            report.psnr_db += psnr(&g.rgb, &t.rgb, 1.0)? / n;
        }
        if wants("ssim") {
            report.ssim += ssim(&g.rgb, &t.rgb, 1.0)? / n;
        }
    }
    let gen_poses = PoseSet::new(
        pairs.iter().map(|(g, _)| *g.camera.rotation()).collect(),
        pairs.iter().map(|(g, _)| *g.camera.translation()).collect(),
        PoseRole::Generated,
    )?;
    let gt_poses = PoseSet::new(
        pairs.iter().map(|(_, t)| *t.camera.rotation()).collect(),
        pairs.iter().map(|(_, t)| *t.camera.translation()).collect(),
        PoseRole::GroundTruth,
    )?;
    report.r_dist_rad = rotation_distance(&gen_poses, &gt_poses)?;
    report.t_dist = translation_distance(&gen_poses, &gt_poses)?;

    let full = serde_json::to_value(&report).map_err(|e| runtime("FORMAT_ERROR", e.to_string()))?;
    let mut out = Report::new().add("frames", pairs.len());
    for (key, metric) in [("psnr_db", "psnr"), ("ssim", "ssim"), ("r_dist_rad", "r_dist"), ("t_dist", "t_dist")] {
        if wants(metric) {
            out = out.add(key, &full[key]);
        }
    }
    if ctx.out.is_some() {
        save_json(&ctx.out_dir()?.join("metrics.json"), &out)?;
    }
    Ok(out)
}

pub fn export_ply(ctx: &Context, a: ExportPlyArgs) -> Result<Report, CliError> {
    let container = load_scene(&ctx.settings.required(a.input, "input")?)?;
    let mut cloud = SceneCloud::default();
    for (i, f) in container.frames.iter().enumerate() {
        let frame = RgbdFrame {
            rgb: f.rgb.clone(),
            depth: f.depth.clone(),
        };
        cloud.append(frame_cloud(&frame, &f.camera, i as u32));
    }
    let path = ctx.out_dir()?.join("cloud.ply");
    write_ply_file(&cloud, &path)?;
    Ok(Report::new().add("frames", container.frames.len()).add("points", cloud.len()))
}
