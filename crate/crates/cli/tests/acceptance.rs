//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p scomp-cli --test acceptance`.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use scomp_core::align::{fit_scale_offset, AlignError, FitDirection};
use scomp_core::codec::{denormalize_depth, normalize_depth, quantile_sorted, CodecError};
use scomp_core::diffusion::{apply_noise, forward_noise, gaussian_like, predict_x0, DenoiserConfig, DiffusionSchedule};
use scomp_core::geom::{project_pointmap, round_half_up, unproject_depth, Camera, DepthMap, RgbImage, Z_MIN};
use scomp_core::metrics::{psnr, rotation_distance, ssim, translation_distance, PoseRole, PoseSet};
use scomp_core::model::{mean_dataset_loss, toy_dataset, train, CompletionModel, ToyDatasetConfig, TrainConfig};
use scomp_core::nn::{attention_forward, Parameters};
use scomp_core::pipeline::{chamfer_distance, complete_trajectory, coverage, FillBackend, SceneCloud, StepConfig};
use scomp_core::synth::{frame_cloud, generate_scene, orbit_cameras, render_exact, SyntheticScene};
use scomp_core::IdentityCodec;

const SUITE_LIMIT: Duration = Duration::from_secs(300);

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn random_camera(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Camera {
    loop {
        let eye: Vector3<f64> = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let target: Vector3<f64> = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let dir = target - eye;
        if dir.norm() < 0.5 || (dir.y / dir.norm()).abs() > 0.9 {
            continue;
        }
        let f = rng.random_range(8.0..40.0);
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        if let Ok(c) = Camera::look_at(f, f * rng.random_range(0.9..1.1), cx, cy, eye, target, Vector3::y()) {
            return c;
        }
    }
}

fn random_depth(rng: &mut ChaCha8Rng, w: usize, h: usize, keep: f64) -> DepthMap {
    let z = (0..w * h).map(|_| rng.random_range(0.3..30.0)).collect();
    let valid = (0..w * h).map(|_| rng.random_bool(keep)).collect();
    DepthMap::new(w, h, z, valid).unwrap()
}

fn geometry_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut covered) = (0.0f64, 0usize);
    for case in 0..100 {
        let (w, h) = (rng.random_range(8..40), rng.random_range(6..30));
        let cam = random_camera(&mut rng, w, h);
        let depth = random_depth(&mut rng, w, h, 0.7);
        let pm = unproject_depth(&depth, &cam);
        let projected = project_pointmap(&pm, &cam, w, h).map_err(|e| e.to_string())?;
        ensure(projected.valid == depth.valid, || format!("case {case}: coverage changed"))?;
        let back = unproject_depth(&projected, &cam);
        for i in (0..w * h).filter(|&i| projected.valid[i]) {
            let err = (back.points[i] - pm.points[i]).norm() / pm.points[i].norm();
            worst = worst.max(err);
            covered += 1;
        }
    }
    ensure(worst <= 1e-6, || format!("worst relative error {worst:e}"))?;
    Ok(format!("{covered} covered points, worst rel {worst:.1e}"))
}

fn normalization_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dm = random_depth(&mut rng, 16, 12, 0.8);
        let nd = normalize_depth(&dm).map_err(|e| e.to_string())?;
        let mut sorted = dm.valid_values();
        sorted.sort_by(f64::total_cmp);
        let (d2, d98) = (quantile_sorted(&sorted, 0.02), quantile_sorted(&sorted, 0.98));
        worst = worst.max((nd.forward(d2) + 1.0).abs()).max((nd.forward(d98) - 1.0).abs());

        let (a, b) = (rng.random_range(0.01..100.0), rng.random_range(0.0..10.0));
        let moved = DepthMap::new(16, 12, dm.z.iter().map(|z| a * z + b).collect(), dm.valid.clone()).unwrap();
        let nm = normalize_depth(&moved).map_err(|e| e.to_string())?;
        let back = denormalize_depth(&nd);
        for i in (0..dm.z.len()).filter(|&i| dm.valid[i]) {
            worst = worst.max((nd.values[i] - nm.values[i]).abs());
            worst = worst.max(rel(back.z[i], dm.z[i]));
        }
    }
    ensure(worst <= 1e-9, || format!("worst error {worst:e}"))?;
    let flat = DepthMap::new(4, 4, vec![2.5; 16], vec![true; 16]).unwrap();
    ensure(matches!(normalize_depth(&flat), Err(CodecError::DegenerateRange { .. })), || {
        "constant depth did not raise DegenerateRange".into()
    })?;
    Ok(format!("anchors, invariance and roundtrip within {worst:.1e}; constant rejected"))
}

/// Normal equations `[Σx² Σx; Σx n][s; o] = [Σxy; Σy]` by Cramer's rule.
fn normal_equations(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        sxy += a * b;
    }
    let det = sxx * n - sx * sx;
    ((sxy * n - sx * sy) / det, (sxx * sy - sx * sxy) / det)
}

fn alignment_suite() -> Outcome {
    let pred: Vec<f64> = (0..50).map(|i| 1.0 + 0.1 * i as f64).collect();
    let clue: Vec<f64> = pred.iter().map(|d| 2.0 * d + 1.0).collect();
    let all = vec![true; pred.len()];
    let exact = fit_scale_offset(&clue, &pred, &all, FitDirection::PredictedToClue).map_err(|e| e.to_string())?;
    ensure((exact.scale - 2.0).abs() <= 1e-9 && (exact.offset - 1.0).abs() <= 1e-9, || format!("exact fit {exact:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(16..400);
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..20.0)).collect();
        let (s, o) = (rng.random_range(0.2..5.0), rng.random_range(-2.0..2.0));
        let clue: Vec<f64> = pred.iter().map(|p| s * p + o + noise.sample(&mut rng)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 7 != 3).collect();
        let fit = fit_scale_offset(&clue, &pred, &mask, FitDirection::PredictedToClue).map_err(|e| e.to_string())?;
        let (x, y): (Vec<f64>, Vec<f64>) = (0..n).filter(|&i| mask[i]).map(|i| (pred[i], clue[i])).unzip();
        let (os, oo) = normal_equations(&x, &y);
        worst = worst.max(rel(fit.scale, os)).max((fit.offset - oo).abs() / oo.abs().max(1.0));

        let aligned: Vec<f64> = pred.iter().map(|p| fit.apply(*p)).collect();
        let again = fit_scale_offset(&clue, &aligned, &mask, FitDirection::PredictedToClue).map_err(|e| e.to_string())?;
        worst = worst.max((again.scale - 1.0).abs()).max(again.offset.abs() / 20.0);
    }
    ensure(worst <= 1e-9, || format!("worst deviation {worst:e}"))?;
    let flat = vec![4.0; 50];
    for dir in [FitDirection::PredictedToClue, FitDirection::ClueToPredicted] {
        ensure(matches!(fit_scale_offset(&flat, &pred, &all, dir), Err(AlignError::SingularFit { .. })), || {
            format!("constant clues not singular for {dir:?}")
        })?;
    }
    Ok(format!("exact (2, 1); oracle and idempotence within {worst:.1e}; constant clues singular"))
}

fn diffusion_suite() -> Outcome {
    let s = DiffusionSchedule::default();
    ensure((1..=s.steps()).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)), || "alpha_bar not decreasing".into())?;
    let draws = 100_000;
    let z0v = 0.7;
    let z0 = Array3::from_elem((1, 1, draws), z0v);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_se = 0.0f64;
    for t in [1, 10, 25, 50, 75, 100] {
        let eps = gaussian_like(&mut rng, z0.dim());
        let z = apply_noise(&z0, s.alpha_bar(t), &eps);
        let n = draws as f64;
        let mean = z.sum() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let (want_mean, want_var) = (s.alpha_bar(t).sqrt() * z0v, 1.0 - s.alpha_bar(t));
        worst_se = worst_se
            .max((mean - want_mean).abs() / (want_var / n).sqrt())
            .max((var - want_var).abs() / (want_var * (2.0 / (n - 1.0)).sqrt()));
    }
    ensure(worst_se < 3.0, || format!("moment off by {worst_se:.2} standard errors"))?;
    let z0 = gaussian_like(&mut rng, (4, 8, 8));
    let mut worst = 0.0f64;
    for t in 1..=s.steps() {
        let (zt, eps) = forward_noise(&z0, t, &s, t as u64).map_err(|e| e.to_string())?;
        let x0 = predict_x0(&zt, &eps, s.alpha_bar(t));
        worst = worst.max(x0.iter().zip(z0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(worst <= 1e-6, || format!("x0 recovery error {worst:e}"))?;
    Ok(format!("moments within {worst_se:.2} SE over 1e5 draws; x0 recovery {worst:.1e}"))
}

/// Absolute error floor for central differences at h = 1e-5.
const FD_FLOOR: f64 = 1e-5;

fn gradient_checks() -> Outcome {
    let mut model = CompletionModel::new(DenoiserConfig::default(), 4, 21);
    let mut data = toy_dataset(&model, &IdentityCodec, &ToyDatasetConfig { pairs: 2, ..Default::default() }).map_err(|e| e.to_string())?;
    data.truncate(2);
    model.denoiser.params.skip_w.fill(0.05);
    let sched = DiffusionSchedule::default();
    let grads = model.loss_and_grads(&data, &sched, 5).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |an: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(FD_FLOOR));
    };
    for i in 0..model.denoiser.params.num_params() {
        let v = model.denoiser.params.get_flat(i);
        let mut m = model.clone();
        m.denoiser.params.set_flat(i, v + h);
        let plus = m.dataset_loss(&data, &sched, 5).unwrap();
        m.denoiser.params.set_flat(i, v - h);
        let minus = m.dataset_loss(&data, &sched, 5).unwrap();
        check(grads.denoiser.get_flat(i), plus, minus);
    }
    for i in 0..model.embedder.num_params() {
        let v = model.embedder.get_flat(i);
        let mut m = model.clone();
        m.embedder.set_flat(i, v + h);
        let plus = m.dataset_loss(&data, &sched, 5).unwrap();
        m.embedder.set_flat(i, v - h);
        let minus = m.dataset_loss(&data, &sched, 5).unwrap();
        check(grads.embedder.get_flat(i), plus, minus);
    }
    ensure(worst <= 1e-4, || format!("worst relative gradient error {worst:e}"))?;
    Ok(format!("{} parameters, worst rel {worst:.1e}", model.num_params()))
}

fn attention_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0));
    let mut worst = 0.0f64;
    let max_diff = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for _ in 0..50 {
        let (q, k, v) = (m(4, 6), m(5, 6), m(5, 3));
        let (out, cache) = attention_forward(&q, &k, &v);

        let (one_k, one_v) = (k.select(Axis(0), &[2]), v.select(Axis(0), &[2]));
        let (single, _) = attention_forward(&q, &one_k, &one_v);
        worst = worst.max(max_diff(&single, &one_v.broadcast((4, 3)).unwrap().to_owned()));

        let same = Array2::from_shape_fn((5, 3), |(_, c)| v[[0, c]]);
        let (collapsed, _) = attention_forward(&q, &k, &same);
        worst = worst.max(max_diff(&collapsed, &same.select(Axis(0), &[0; 4])));

        let order = [3, 0, 4, 1, 2];
        let (perm, _) = attention_forward(&q, &k.select(Axis(0), &order), &v.select(Axis(0), &order));
        worst = worst.max(max_diff(&perm, &out));

        for c in 0..3 {
            let col = v.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..4 {
                worst = worst.max(lo - out[[r, c]]).max(out[[r, c]] - hi);
            }
        }
        for row in cache.probs.rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("worst violation {worst:e}"))?;
    Ok(format!("collapse, permutation and hull within {:.1e}", worst.max(0.0)))
}

fn toy_training() -> Outcome {
    let model = CompletionModel::new(DenoiserConfig::default(), 4, 0);
    let data = toy_dataset(&model, &IdentityCodec, &ToyDatasetConfig::default()).map_err(|e| e.to_string())?;
    ensure(data.len() == 64, || format!("{} pairs", data.len()))?;
    let sched = DiffusionSchedule::default();
    let cfg = TrainConfig::default();
    let before = mean_dataset_loss(&model, &data, &sched, 1000..1008).map_err(|e| e.to_string())?;
    let (a, report) = train(model.clone(), &data, &sched, &cfg).map_err(|e| e.to_string())?;
    let after = mean_dataset_loss(&a, &data, &sched, 1000..1008).map_err(|e| e.to_string())?;
    ensure(report.loss_curve.len() == cfg.steps, || "wrong number of steps".into())?;
    ensure(after < 0.5 * before, || format!("loss {before:.4} -> {after:.4}"))?;
    let (b, _) = train(model, &data, &sched, &cfg).map_err(|e| e.to_string())?;
    ensure(a.denoiser.params == b.denoiser.params && a.embedder == b.embedder, || "training not deterministic".into())?;
    Ok(format!("{} steps: loss {before:.4} -> {after:.4} (x{:.3}), rerun identical", cfg.steps, after / before))
}

const RES: usize = 32;

/// The cloud an exact fill must build: at each camera, the true surface
/// point behind every pixel that no existing point projects to.
fn expected_cloud(scene: &SyntheticScene, cams: &[Camera]) -> SceneCloud {
    let mut cloud = frame_cloud(&render_exact(scene, &cams[0], RES, RES).unwrap(), &cams[0], 0);
    for cam in &cams[1..] {
        let truth = render_exact(scene, cam, RES, RES).unwrap();
        let mut hit = vec![false; RES * RES];
        for p in &cloud.points {
            let c = cam.world_to_camera(p);
            if c.z <= Z_MIN {
                continue;
            }
            let u = round_half_up(cam.fx() * c.x / c.z + cam.cx());
            let v = round_half_up(cam.fy() * c.y / c.z + cam.cy());
            if u >= 0.0 && v >= 0.0 && (u as usize) < RES && (v as usize) < RES {
                hit[v as usize * RES + u as usize] = true;
            }
        }
        for i in (0..RES * RES).filter(|&i| !hit[i] && truth.depth.valid[i]) {
            cloud.points.push(cam.unproject_pixel((i % RES) as f64, (i / RES) as f64, truth.depth.z[i]));
            cloud.colors.push(truth.rgb.pixels[i]);
            cloud.source_iter.push(1);
        }
    }
    cloud
}

fn oracle_completion() -> Outcome {
    let scene = generate_scene(8);
    let cams = orbit_cameras(&scene, 4, 2.0, 0.3, 0.6, RES, RES).map_err(|e| e.to_string())?;
    let start = frame_cloud(&render_exact(&scene, &cams[0], RES, RES).map_err(|e| e.to_string())?, &cams[0], 0);
    let (done, _) = complete_trajectory(&start, &cams[1..], &FillBackend::Oracle(&scene), &IdentityCodec, &StepConfig::new(RES, RES))
        .map_err(|e| e.to_string())?;
    let cd = chamfer_distance(&done, &expected_cloud(&scene, &cams)).map_err(|e| e.to_string())?;
    ensure(cd <= 1e-5, || format!("chamfer {cd:e}"))?;

    let reference: Vec<Vector3<f64>> = cams
        .iter()
        .flat_map(|c| frame_cloud(&render_exact(&scene, c, RES, RES).unwrap(), c, 0).points)
        .collect();
    let curve: Vec<f64> = (0..=3u32)
        .map(|k| {
            let sub: Vec<Vector3<f64>> = done.points.iter().zip(&done.source_iter).filter(|(_, &it)| it <= k).map(|(p, _)| *p).collect();
            coverage(&reference, &sub, 1e-3)
        })
        .collect();
    ensure(curve.windows(2).all(|w| w[1] >= w[0]), || format!("coverage dropped: {curve:?}"))?;

    let same_bits = start.points.iter().zip(&done.points).all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(same_bits && done.colors[..start.len()] == start.colors[..], || "clue points changed".into())?;
    Ok(format!(
        "{} points, chamfer {cd:.1e}, coverage {}",
        done.len(),
        curve.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>().join(" -> ")
    ))
}

fn rz(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn metrics_suite() -> Outcome {
    let a = RgbImage::filled(16, 16, [0.3, 0.5, 0.7]);
    let b = RgbImage::filled(16, 16, [0.4, 0.6, 0.8]);
    let p = psnr(&a, &b, 1.0).map_err(|e| e.to_string())?;
    ensure((p - 20.0).abs() <= 1e-9, || format!("psnr {p}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy = RgbImage::new(24, 20, (0..480).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
    let s = ssim(&noisy, &noisy, 1.0).map_err(|e| e.to_string())?;
    ensure((s - 1.0).abs() <= 1e-9, || format!("ssim {s}"))?;

    let pose = |r: Matrix3<f64>, t: Vector3<f64>, role| PoseSet::new(vec![r], vec![t], role).unwrap();
    let r = rotation_distance(
        &pose(rz(FRAC_PI_2), Vector3::zeros(), PoseRole::Generated),
        &pose(Matrix3::identity(), Vector3::zeros(), PoseRole::GroundTruth),
    )
    .map_err(|e| e.to_string())?;
    ensure((r - FRAC_PI_2).abs() <= 1e-9, || format!("r_dist {r}"))?;
    let t = translation_distance(
        &pose(Matrix3::identity(), Vector3::zeros(), PoseRole::Generated),
        &pose(Matrix3::identity(), Vector3::new(3.0, 4.0, 0.0), PoseRole::GroundTruth),
    )
    .map_err(|e| e.to_string())?;
    ensure(t == 5.0, || format!("t_dist {t}"))?;

    // a long trace of nearly identical rotations with round-off noise
    let gen: Vec<Matrix3<f64>> = (0..200).map(|i| rz(i as f64 * 0.031) * rz(-(i as f64) * 0.031)).collect();
    let set = PoseSet::new(gen, vec![Vector3::zeros(); 200], PoseRole::Generated).map_err(|e| e.to_string())?;
    let gt = PoseSet::new(vec![Matrix3::identity(); 200], vec![Vector3::zeros(); 200], PoseRole::GroundTruth).unwrap();
    let d = rotation_distance(&set, &gt).map_err(|e| e.to_string())?;
    ensure(d.is_finite() && d < 1e-9, || format!("noisy trace gave {d}"))?;
    Ok(format!("psnr {p:.9}, ssim {s:.12}, r_dist {r:.12}, t_dist {t}, noisy trace {d:.1e}"))
}

fn scomp(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_scomp")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("scomp {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli_workflow(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |s: &str| root.join(s).display().to_string();
    scomp(&["synth", "--seed", "5", "--frames", "5", "--out", &p("scene")])?;
    scomp(&["train", "--seed", "5", "--out", &p("model")])?;
    scomp(&["complete", "--seed", "5", "--input", &p("scene"), "--backend", "diffusion", "--checkpoint", &p("model/model.ckpt"), "--out", &p("completion")])?;
    scomp(&["metrics", "--generated", &p("completion/views"), "--truth", &p("scene"), "--out", &p("metrics")])?;
    Ok(tree_bytes(root))
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = cli_workflow(&tmp.path().join("a"))?;
    let second = cli_workflow(&tmp.path().join("b"))?;
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    for needed in ["scene/manifest.json", "model/model.ckpt", "completion/cloud.ply", "completion/stats.json", "metrics/metrics.json"] {
        ensure(names.contains(&needed), || format!("{needed} not written"))?;
    }
    ensure(first.len() == second.len(), || "different file sets".into())?;
    for ((n, a), (_, b)) in first.iter().zip(&second) {
        ensure(a == b, || format!("{n} differs between runs"))?;
    }
    let bytes: usize = first.iter().map(|(_, b)| b.len()).sum();
    Ok(format!("synth -> train -> complete -> metrics: {} files, {bytes} bytes identical", first.len()))
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "geometry roundtrip", limit: Some(Duration::from_secs(5)), run: geometry_roundtrip },
        Criterion { name: "depth normalization", limit: None, run: normalization_suite },
        Criterion { name: "scale/offset alignment", limit: None, run: alignment_suite },
        Criterion { name: "forward noising", limit: None, run: diffusion_suite },
        Criterion { name: "gradient checks", limit: Some(Duration::from_secs(60)), run: gradient_checks },
        Criterion { name: "attention properties", limit: None, run: attention_suite },
        Criterion { name: "toy training", limit: Some(Duration::from_secs(180)), run: toy_training },
        Criterion { name: "oracle completion", limit: None, run: oracle_completion },
        Criterion { name: "metrics", limit: None, run: metrics_suite },
        Criterion { name: "CLI reproducibility", limit: None, run: reproducibility },
    ];
    let suite = Instant::now();
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let mut outcome = (c.run)();
        let took = t0.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, c.limit) {
            if took > limit {
                outcome = Err(format!("took {took:.1?}, limit {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS {:>2} {}: {detail} [{took:.2?}]", i + 1, c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {}: {why} [{took:.2?}]", i + 1, c.name);
            }
        }
    }
    let total = suite.elapsed();
    if total > SUITE_LIMIT {
        failed += 1;
        println!("FAIL suite time {total:.1?} exceeds {SUITE_LIMIT:?}");
    } else {
        println!("suite time {total:.1?} (limit {SUITE_LIMIT:?})");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
