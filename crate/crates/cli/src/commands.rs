//! One function per subcommand. Each returns a JSON report and a status;
//! the dispatcher in `lib.rs` handles output files and the manifest.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dforge_core::diffusion::{
    ddim_timesteps, make_schedule, q_sample, refine_appearance, sample, sample_trace,
    sample_with_reference, switch_once_schedule, ConditionPack, Denoiser, Director,
    DirectorSchedule, DirectorSensitive, GaussianDenoiser, LatentVideo, NoiseSchedule,
    OracleDenoiser,
};
use dforge_core::flow::{
    flow_stats, is_temporal_variant, read_flo, read_mask_png, read_raw_flow,
    select_reference_frame, FlowField,
};
use dforge_core::fusion::{
    extract_mesh, load_depth_frame, read_occupancy, sidecar_path, write_occupancy, write_ply,
    write_volume, TsdfVolume,
};
use dforge_core::geometry::{
    classify_distribution, compute_principal_frame, filter_scenes, SceneBundle,
};
use dforge_core::loss::{
    confidence_weighted_loss, dynamic_scene_loss, ConfidenceMap, ConstantPerceptual, ImageBuffer,
};
use dforge_core::manifest::{read_colmap_dir, read_jsonl, write_jsonl};
use dforge_core::pose::{look_at, CameraPose};
use dforge_core::trajectory::{
    check_feasible, director_scores, orbit_start_pose, read_trajectory, resample_trajectory,
    select_director, synthesize_orbit, synthesize_trajectory, write_trajectory, MotionKind,
    PrimitiveList, Trajectory, TrajectorySpec,
};
use nalgebra::Vector3;
use serde_json::{json, Value};

use crate::args::{DirectorArgs, LossArgs, LossMode, MockKind, PlanArgs, SimulateArgs};
use crate::run::{RunContext, Status};

pub struct Outcome {
    pub report: Value,
    pub status: Status,
}

impl Outcome {
    fn ok(report: Value) -> Self {
        Self {
            report,
            status: Status::Success,
        }
    }
}

fn v3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Sorted files in `dir` whose extension is one of `exts`.
fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_scenes(ctx: &mut RunContext, path: &Path) -> Result<(Vec<SceneBundle>, Vec<String>)> {
    if path.is_dir() {
        ctx.note_input(&path.join("cameras.txt"))?;
        ctx.note_input(&path.join("images.txt"))?;
        return Ok((vec![read_colmap_dir(path)?], Vec::new()));
    }
    let bytes = ctx.read(path)?;
    let read = read_jsonl(Cursor::new(bytes))?;
    Ok((
        read.scenes,
        read.failures.iter().map(ToString::to_string).collect(),
    ))
}

fn partial_if(problems: &[String], what: &str) -> Status {
    for p in problems {
        eprintln!("skipped: {p}");
    }
    if problems.is_empty() {
        Status::Success
    } else {
        Status::Partial(format!("{} {what} failed", problems.len()))
    }
}

pub fn analyze(ctx: &mut RunContext, manifest: &Path) -> Result<Outcome> {
    let (scenes, mut problems) = load_scenes(ctx, manifest)?;
    let policy = ctx.config.filter.clone();
    let rows: Vec<Value> = {
        use rayon::prelude::*;
        scenes
            .par_iter()
            .map(|b| {
                let frame = match compute_principal_frame(&b.poses) {
                    Ok(f) => f,
                    Err(e) => return json!({ "scene_id": b.scene_id, "error": e.to_string() }),
                };
                let axes: Vec<[f64; 3]> = (0..3).map(|k| v3(&frame.axis(k))).collect();
                let class = classify_distribution(b, &frame, &policy);
                json!({
                    "scene_id": b.scene_id,
                    "n_cameras": b.poses.len(),
                    "center": v3(&frame.center),
                    "axes": axes,
                    "extents": v3(&frame.extents),
                    "distribution_class": class.as_ref().ok().map(ToString::to_string),
                    "error": class.err().map(|e| e.to_string()),
                })
            })
            .collect()
    };
    for r in &rows {
        if let Some(e) = r["error"].as_str() {
            problems.push(format!("{}: {e}", r["scene_id"].as_str().unwrap_or("?")));
        }
    }
    let status = partial_if(&problems, "scenes");
    Ok(Outcome {
        report: json!({ "scenes": rows, "failures": problems }),
        status,
    })
}

pub fn filter(ctx: &mut RunContext, manifest: &Path) -> Result<Outcome> {
    let (scenes, mut problems) = load_scenes(ctx, manifest)?;
    let reports = filter_scenes(&scenes, &ctx.config.filter);
    problems.extend(
        reports
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.scene_id))),
    );
    let accepted: Vec<SceneBundle> = reports
        .iter()
        .filter(|r| r.accepted)
        .filter_map(|r| scenes.iter().find(|s| s.scene_id == r.scene_id).cloned())
        .collect();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &accepted)?;
    ctx.write("accepted.jsonl", &buf)?;
    let status = partial_if(&problems, "scenes");
    Ok(Outcome {
        report: json!({ "ranking": reports, "accepted": accepted.len(), "failures": problems }),
        status,
    })
}

fn read_traj_file(ctx: &mut RunContext, path: &Path) -> Result<Trajectory> {
    let bytes = ctx.read(path)?;
    read_trajectory(Cursor::new(bytes))
        .with_context(|| format!("reading trajectory {}", path.display()))
}

fn start_pose(position: Vector3<f64>, target: &Vector3<f64>) -> Result<CameraPose> {
    let mut pose = CameraPose::at(position);
    pose.rotation = look_at(&position, target, &Vector3::z())
        .with_context(|| "start camera cannot look at its target (coincident points)")?;
    Ok(pose)
}

fn build_trajectory(args: &PlanArgs, spec: &str) -> Result<Trajectory> {
    let list: PrimitiveList = spec.parse()?;
    let n_frames = list
        .frames
        .or(args.frames)
        .unwrap_or(dforge_core::constants::BASE_VIDEO_FRAMES);
    let center = args.center.unwrap_or_else(Vector3::zeros);
    let radius = list.radius.or(args.radius);
    let has_orbit = list.primitives.iter().any(|p| p.kind == MotionKind::Orbit);
    if let [only] = list.primitives.as_slice() {
        if only.kind == MotionKind::Orbit {
            let (radius, azimuth) = match args.start {
                Some(s) => {
                    let d = s - center;
                    (radius.unwrap_or(d.xy().norm()), d.y.atan2(d.x))
                }
                None => (radius.unwrap_or(2.0), 0.0),
            };
            return Ok(synthesize_orbit(
                &center,
                radius,
                only.magnitude,
                azimuth,
                n_frames,
            )?);
        }
    }
    let start = match args.start {
        Some(p) => start_pose(p, &args.look_at.unwrap_or(center))?,
        None if has_orbit => orbit_start_pose(&center, radius.unwrap_or(2.0), 0.0)?,
        None => start_pose(
            Vector3::new(0.0, -2.0, 0.0),
            &args.look_at.unwrap_or(center),
        )?,
    };
    let spec = TrajectorySpec {
        orbit_center: has_orbit.then_some(center),
        orbit_radius: has_orbit.then(|| (start.position - center).xy().norm()),
        primitives: list.primitives,
        n_frames,
        start,
    };
    Ok(synthesize_trajectory(&spec)?)
}

pub fn plan(ctx: &mut RunContext, args: &PlanArgs) -> Result<Outcome> {
    let mut traj = match (&args.from, &args.spec) {
        (Some(path), _) => {
            let stored = read_traj_file(ctx, path)?;
            let rebuilt = stored.recipe.build()?;
            if rebuilt.spec_hash != stored.spec_hash {
                bail!(
                    "{}: stored spec hash does not match its recipe",
                    path.display()
                );
            }
            rebuilt
        }
        (None, Some(spec)) => build_trajectory(args, spec)?,
        (None, None) => bail!("give a primitive spec or --from"),
    };
    if let Some(n) = args.resample {
        traj = resample_trajectory(&traj, n)?;
    }
    let mut buf = Vec::new();
    write_trajectory(&mut buf, &traj)?;
    ctx.write("trajectory.jsonl", &buf)?;

    let first = &traj.poses[0];
    let last = &traj.poses[traj.len() - 1];
    let mut report = json!({
        "trajectory": "trajectory.jsonl",
        "n_frames": traj.len(),
        "spec_hash": traj.spec_hash,
        "start": v3(&first.position),
        "end": v3(&last.position),
        "closure_gap": (last.position - first.position).norm(),
    });
    let mut status = Status::Success;
    if let Some(occ_path) = &args.occupancy {
        let grid = read_occupancy(Cursor::new(ctx.read(occ_path)?))?;
        let margin = args.margin.unwrap_or(ctx.config.fusion.clearance_margin);
        let feas = check_feasible(&traj, &grid, margin);
        if let Some(frame) = feas.first_violation_frame {
            eprintln!("infeasible: first violation at frame {frame}");
            status = Status::Infeasible(format!("path collides at frame {frame}"));
        }
        report["feasibility"] = json!({
            "feasible": feas.feasible,
            "first_violation_frame": feas.first_violation_frame,
            "min_clearance": (feas.min_clearance < f64::MAX).then_some(feas.min_clearance),
            "margin": margin,
        });
    }
    Ok(Outcome { report, status })
}

pub fn director(ctx: &mut RunContext, args: &DirectorArgs) -> Result<Outcome> {
    let traj = read_traj_file(ctx, &args.trajectory)?;
    let to = args.to_frame.unwrap_or(traj.len() - 1);
    let (a, b) = match (traj.poses.get(args.from_frame), traj.poses.get(to)) {
        (Some(a), Some(b)) => (a, b),
        _ => bail!(
            "frame index out of range (trajectory has {} frames)",
            traj.len()
        ),
    };
    let policy = ctx.config.director;
    let scores = director_scores(a, b, &policy)?;
    let choice = select_director(a, b, &policy)?;
    let scores: serde_json::Map<String, Value> = scores
        .iter()
        .map(|(k, s)| (k.to_string(), json!(s)))
        .collect();
    Ok(Outcome::ok(json!({
        "from_frame": args.from_frame,
        "to_frame": to,
        "primitive": choice.kind,
        "magnitude": choice.magnitude,
        "scores": scores,
    })))
}

pub fn fuse(ctx: &mut RunContext, dir: &Path) -> Result<Outcome> {
    let files = list_files(dir, &["png", "f32", "raw"])?;
    let mut frames = Vec::new();
    let mut problems = Vec::new();
    for f in &files {
        ctx.note_input(f)?;
        let side = sidecar_path(f);
        if side.exists() {
            ctx.note_input(&side)?;
        }
        match load_depth_frame(f) {
            Ok(frame) => frames.push(frame),
            Err(e) => problems.push(format!("{}: {e}", f.display())),
        }
    }
    let params = ctx.config.fusion.volume_params();
    let mut volume = TsdfVolume::new(&params)?;
    for frame in &frames {
        volume.integrate(frame)?;
    }
    if volume.observed_count() == 0 {
        for p in &problems {
            eprintln!("skipped: {p}");
        }
        bail!(
            "EmptyVolume: no valid depth sample reached the volume ({} frames read)",
            frames.len()
        );
    }
    let mesh = extract_mesh(&volume)?;
    let grid = volume.to_occupancy(ctx.config.fusion.occupancy_band);

    let mut buf = Vec::new();
    write_volume(&mut buf, &volume)?;
    ctx.write("volume.tsdf", &buf)?;
    buf.clear();
    write_ply(&mut buf, &mesh)?;
    ctx.write("mesh.ply", &buf)?;
    buf.clear();
    write_occupancy(&mut buf, &grid)?;
    ctx.write("occupancy.occg", &buf)?;

    let n = mesh.vertices.len() as f64;
    let centroid = mesh.vertices.iter().sum::<Vector3<f64>>() / n;
    let mean_dist = mesh
        .vertices
        .iter()
        .map(|v| (v - centroid).norm())
        .sum::<f64>()
        / n;
    let boundary = mesh.boundary_edge_count();
    let status = partial_if(&problems, "depth frames");
    Ok(Outcome {
        report: json!({
            "frames_fused": frames.len(),
            "observed_voxels": volume.observed_count(),
            "vertices": mesh.vertices.len(),
            "triangles": mesh.triangles.len(),
            "boundary_edges": boundary,
            "watertight": boundary == 0,
            "vertex_centroid": v3(&centroid),
            "mean_distance_to_centroid": mean_dist,
            "occupied_voxels": grid.occupied_count(),
            "failures": problems,
        }),
        status,
    })
}

fn expand_flow_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_files(p, &["flo", "f32", "raw"])?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_flow(ctx: &mut RunContext, path: &Path, index: u32) -> Result<FlowField> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext == "flo" {
        return Ok(read_flo(Cursor::new(ctx.read(path)?), index)?);
    }
    ctx.note_input(path)?;
    ctx.note_input(&path.with_extension("json"))?;
    Ok(read_raw_flow(path)?)
}

pub fn flowstats(ctx: &mut RunContext, inputs: &[PathBuf]) -> Result<Outcome> {
    let files = expand_flow_inputs(inputs)?;
    let policy = ctx.config.flow;
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    let mut problems = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let result = load_flow(ctx, f, i as u32)
            .and_then(|flow| Ok(flow_stats(&flow, policy.eps_static, policy.eps_dyn)?));
        match result {
            Ok(s) => {
                rows.push(json!({ "file": f.display().to_string(), "stats": s }));
                stats.push(s);
            }
            Err(e) => problems.push(format!("{}: {e:#}", f.display())),
        }
    }
    if stats.is_empty() {
        for p in &problems {
            eprintln!("skipped: {p}");
        }
        bail!("no readable flow fields");
    }
    let verdict = is_temporal_variant(&stats, &policy)?;
    let status = partial_if(&problems, "flow files");
    Ok(Outcome {
        report: json!({ "frames": rows, "verdict": verdict, "failures": problems }),
        status,
    })
}

fn mask_path_for(flow: &Path) -> PathBuf {
    let stem = flow
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    flow.with_file_name(format!("{stem}.mask.png"))
}

pub fn pickref(ctx: &mut RunContext, dir: &Path) -> Result<Outcome> {
    let files = list_files(dir, &["flo", "f32", "raw"])?;
    if files.is_empty() {
        bail!("no flow files in {}", dir.display());
    }
    let mut flows = Vec::with_capacity(files.len());
    let mut masks = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        flows.push(load_flow(ctx, f, i as u32)?);
        let m = mask_path_for(f);
        ctx.note_input(&m)?;
        masks.push(read_mask_png(&m, i as u32)?);
    }
    let choice = select_reference_frame(&masks, &flows, &ctx.config.reference)?;
    Ok(Outcome::ok(json!({
        "reference_frame": choice.index,
        "file": files[choice.index].display().to_string(),
        "scores": choice.scores,
        "all_zero": choice.all_zero,
    })))
}

fn latent_file(ctx: &mut RunContext, name: &str, z: &LatentVideo) -> Result<String> {
    let bytes = z.to_bytes();
    ctx.write(name, &bytes)?;
    Ok(crate::run::sha256_hex(&bytes))
}

fn schedule_tokens(d: &DirectorSchedule) -> String {
    d.assignments
        .iter()
        .map(|a| match a {
            Director::SDirector => 'S',
            Director::TDirector => 'T',
            Director::Base => 'B',
        })
        .collect()
}

pub fn simulate(ctx: &mut RunContext, args: &SimulateArgs) -> Result<Outcome> {
    let cfg = ctx.config.sampler;
    let seed = ctx.config.rng_seed;
    let n = args.steps.unwrap_or(cfg.inference_steps);
    let k = args.switch.unwrap_or(cfg.switch_step.min(n));
    let schedule = make_schedule(
        cfg.train_steps,
        cfg.beta_start,
        cfg.beta_end,
        cfg.beta_spacing,
    )?;
    let timesteps = ddim_timesteps(cfg.train_steps, n)?;
    let directors = switch_once_schedule(n, k)?;
    let cond = ConditionPack::text("", cfg.guidance_scale);
    let t_max = timesteps[0];

    let z0 = match &args.z0 {
        Some(path) => LatentVideo::from_bytes(&ctx.read(path)?)?,
        // Rounded to f32 so the fixture is exactly what the file stores.
        None => LatentVideo::randn(args.shape, seed, 0).to_f32_precision(),
    };
    let shape = z0.shape();
    let eps = LatentVideo::randn(shape, seed, 1);
    let mut report = json!({
        "denoiser": format!("{:?}", args.denoiser).to_lowercase(),
        "shape": shape,
        "steps": n,
        "switch_step": k,
        "directors": schedule_tokens(&directors),
        "guidance_scale": cfg.guidance_scale,
    });

    let gaussian;
    let oracle;
    let sensitive;
    let init;
    let denoiser: &dyn Denoiser = match args.denoiser {
        MockKind::Gaussian | MockKind::Sensitive => {
            gaussian = GaussianDenoiser {
                mean: z0.frame(0).to_vec(),
                sigma: 0.5,
                schedule: schedule.clone(),
            };
            let d = &gaussian;
            init = LatentVideo::new(
                shape,
                eps.data()
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let (m, s) = d.marginal(i % d.mean.len(), t_max);
                        m + s * e
                    })
                    .collect(),
            )?;
            if args.denoiser == MockKind::Sensitive {
                // The Gaussian model keeps every step's offset in the output;
                // an oracle inner model would only keep the last one.
                sensitive = DirectorSensitive::new(gaussian.clone(), cfg.director_strength);
                &sensitive
            } else {
                d
            }
        }
        MockKind::Oracle => {
            oracle = OracleDenoiser {
                z0: z0.clone(),
                schedule: schedule.clone(),
            };
            init = q_sample(&z0, t_max, &eps, &schedule)?;
            &oracle
        }
    };
    report["z0_digest"] = json!(latent_file(ctx, "z0.latv", &z0)?);
    report["init_digest"] = json!(latent_file(ctx, "init.latv", &init)?);
    let out = sample(denoiser, &schedule, &directors, &cond, &init, &timesteps)?;
    let stored = out.to_f32_precision();
    report["sample_digest"] = json!(latent_file(ctx, "sample.latv", &stored)?);
    report["max_abs_error_vs_z0"] = json!(out.max_abs_diff(&z0));
    report["recovered_z0_exactly"] = json!(stored == z0);
    if args.denoiser != MockKind::Oracle {
        report["data_mean_abs_error"] = json!(frame_mean_error(&out, z0.frame(0)));
    }

    if args.blend {
        report["blend"] = blend_views(ctx, &schedule, &cond, &init, &timesteps, &z0)?;
    }
    if args.refine {
        let refined =
            refine_appearance(&out, denoiser, &schedule, &ctx.config.refine, &cond, seed)?;
        report["refined_digest"] = json!(latent_file(
            ctx,
            "refined.latv",
            &refined.to_f32_precision()
        )?);
        report["refine_change"] = json!(refined.max_abs_diff(&out));
    }
    Ok(Outcome::ok(report))
}

/// Mean over frame elements of |sample mean across frames - data mean|.
fn frame_mean_error(z: &LatentVideo, mean: &[f64]) -> f64 {
    let f = z.frames() as f64;
    let mut acc = vec![0.0; mean.len()];
    for i in 0..z.frames() {
        for (a, x) in acc.iter_mut().zip(z.frame(i)) {
            *a += x / f;
        }
    }
    acc.iter()
        .zip(mean)
        .map(|(a, m)| (a - m).abs())
        .sum::<f64>()
        / mean.len() as f64
}

/// A second view with its own clean latent, sampled once on its own and once
/// sharing the first view's trajectory.
fn blend_views(
    ctx: &mut RunContext,
    schedule: &NoiseSchedule,
    cond: &ConditionPack,
    init: &LatentVideo,
    timesteps: &[usize],
    z0: &LatentVideo,
) -> Result<Value> {
    let cfg = ctx.config.sampler;
    let n = timesteps.len();
    let s_only = DirectorSchedule::uniform(Director::SDirector, n);
    // Both views use the Gaussian mock: an oracle ignores z_t, so it would
    // erase any blending. The second view's data mean is shifted.
    let reference = GaussianDenoiser {
        mean: z0.frame(0).to_vec(),
        sigma: 1.0,
        schedule: schedule.clone(),
    };
    let ref_trace = sample_trace(&reference, schedule, &s_only, cond, init, timesteps)?;
    let shift = LatentVideo::randn(z0.shape(), ctx.config.rng_seed, 3);
    let other = GaussianDenoiser {
        mean: z0.lincomb(1.0, &shift, 0.25)?.frame(0).to_vec(),
        ..reference.clone()
    };
    let alone = sample(&other, schedule, &s_only, cond, init, timesteps)?;
    let shared = sample_with_reference(
        &other,
        schedule,
        cond,
        &ref_trace,
        cfg.blend_lambda,
        cfg.blend_window,
        timesteps,
    )?;
    let reference_out = &ref_trace[n];
    Ok(json!({
        "lambda": cfg.blend_lambda,
        "window": cfg.blend_window,
        "distance_to_reference_alone": alone.max_abs_diff(reference_out),
        "distance_to_reference_shared": shared.max_abs_diff(reference_out),
        "shared_digest": latent_file(ctx, "blended.latv", &shared.to_f32_precision())?,
    }))
}

pub fn loss(ctx: &mut RunContext, args: &LossArgs) -> Result<Outcome> {
    ctx.note_input(&args.pred)?;
    ctx.note_input(&args.gt)?;
    let pred = ImageBuffer::from_png(&args.pred)?;
    let gt = ImageBuffer::from_png(&args.gt)?;
    let weights = ctx.config.loss;
    let breakdown = match args.mode {
        LossMode::Confidence => {
            let conf = match &args.conf {
                Some(p) => {
                    ctx.note_input(p)?;
                    ConfidenceMap::load(p, pred.width(), pred.height())?
                }
                None => ConfidenceMap::uniform(pred.width(), pred.height(), 1.0),
            };
            let provider = args.perceptual.map(ConstantPerceptual);
            confidence_weighted_loss(
                &pred,
                &gt,
                &conf,
                &weights,
                provider
                    .as_ref()
                    .map(|p| p as &dyn dforge_core::loss::PerceptualProvider),
            )?
        }
        LossMode::Dynamic => {
            if args.conf.is_some() {
                bail!("the dynamic-scene loss takes no confidence map");
            }
            dynamic_scene_loss(&pred, &gt, &ctx.config.dynamic_loss)?
        }
    };
    Ok(Outcome::ok(serde_json::to_value(breakdown)?))
}
