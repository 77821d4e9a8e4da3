//! Browser bindings for three small pieces of `dforge-core`.
//!
//! Each operation has a plain Rust form returning a JSON string, which the
//! native tests exercise, and a thin `wasm_bindgen` export used by
//! `www/index.html`.

use dforge_core::diffusion::{
    ddim_timesteps, make_schedule, sample, switch_once_schedule, BetaSpacing, ConditionPack,
    Director, DirectorSchedule, DirectorSensitive, GaussianDenoiser, LatentVideo,
};
use dforge_core::loss::{
    confidence_weighted_loss, ConfidenceMap, ConstantPerceptual, ImageBuffer, LossWeights,
};
use dforge_core::pose::{look_at, CameraPose};
use dforge_core::trajectory::{
    orbit_start_pose, select_director, synthesize_trajectory, DirectorPolicy, MotionKind,
    PrimitiveList, TrajectorySpec,
};
use nalgebra::Vector3;
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_STEPS: usize = 200;
const LATENT_SHAPE: [usize; 4] = [4, 2, 4, 4];
const IMAGE_SIZE: usize = 32;

/// Plans a trajectory from a primitive list such as
/// `trans_x_pos:0.5,rot_yaw_pos:0.6,frames=25`. Orbits circle the origin at
/// `radius`; other paths start at `(0, -2, 0)` looking at the origin.
pub fn plan_path(spec: &str, radius: f64) -> Result<String, String> {
    let list: PrimitiveList = spec.parse().map_err(|e| format!("{e}"))?;
    let radius = list.radius.unwrap_or(radius);
    let center = Vector3::zeros();
    let has_orbit = list.primitives.iter().any(|p| p.kind == MotionKind::Orbit);
    let start = if has_orbit {
        orbit_start_pose(&center, radius, 0.0).map_err(|e| e.to_string())?
    } else {
        let eye = Vector3::new(0.0, -2.0, 0.0);
        let mut pose = CameraPose::at(eye);
        pose.rotation = look_at(&eye, &center, &Vector3::z())
            .ok_or("start camera cannot look at the origin")?;
        pose
    };
    let spec = TrajectorySpec {
        n_frames: list.frames.unwrap_or(25),
        orbit_center: has_orbit.then_some(center),
        orbit_radius: has_orbit.then_some(radius),
        primitives: list.primitives,
        start,
    };
    let traj = synthesize_trajectory(&spec).map_err(|e| e.to_string())?;
    let (first, last) = (&traj.poses[0], &traj.poses[traj.len() - 1]);
    // A closed loop has no net motion, so there is no director to report.
    let director = select_director(first, last, &DirectorPolicy::default())
        .ok()
        .map(|d| json!({ "primitive": d.kind.token(), "magnitude": d.magnitude }));
    let positions: Vec<[f64; 3]> = traj.poses.iter().map(|p| p.position.into()).collect();
    let forward: Vec<[f64; 3]> = traj.poses.iter().map(|p| p.forward().into()).collect();
    Ok(json!({
        "n_frames": traj.len(),
        "positions": positions,
        "forward": forward,
        "closure_gap": (last.position - first.position).norm(),
        "director": director,
        "spec_hash": traj.spec_hash,
    })
    .to_string())
}

/// Runs the sampler with a director-sensitive Gaussian mock for every
/// switch step `0..=steps` and reports how far each result lands from the
/// pure S-Director and pure T-Director runs.
pub fn switch_once(steps: usize, switch_step: usize, strength: f64) -> Result<String, String> {
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(format!("steps must be in 1..={MAX_STEPS}"));
    }
    if !(strength.is_finite() && strength >= 0.0) {
        return Err("strength must be a non-negative number".into());
    }
    let schedule =
        make_schedule(1000, 1e-4, 0.02, BetaSpacing::Linear).map_err(|e| e.to_string())?;
    let mock = DirectorSensitive::new(
        GaussianDenoiser {
            mean: LatentVideo::randn(LATENT_SHAPE, 0, 0).frame(0).to_vec(),
            sigma: 1.0,
            schedule: schedule.clone(),
        },
        strength,
    );
    let init = LatentVideo::randn(LATENT_SHAPE, 0, 1);
    let ts = ddim_timesteps(1000, steps).map_err(|e| e.to_string())?;
    let cond = ConditionPack::text("demo", 6.0);
    let run = |d: &DirectorSchedule| {
        sample(&mock, &schedule, d, &cond, &init, &ts).map_err(|e| e.to_string())
    };

    let pure_s = run(&DirectorSchedule::uniform(Director::SDirector, ts.len()))?;
    let pure_t = run(&DirectorSchedule::uniform(Director::TDirector, ts.len()))?;
    let table = switch_once_schedule(ts.len(), switch_step).map_err(|e| e.to_string())?;
    let tokens: String = table
        .assignments
        .iter()
        .map(|d| if *d == Director::SDirector { 'S' } else { 'T' })
        .collect();
    let mut sweep = Vec::with_capacity(ts.len() + 1);
    for k in 0..=ts.len() {
        let z = run(&switch_once_schedule(ts.len(), k).map_err(|e| e.to_string())?)?;
        sweep.push(json!({ "k": k, "to_pure_s": z.max_abs_diff(&pure_s), "to_pure_t": z.max_abs_diff(&pure_t) }));
    }
    Ok(json!({
        "steps": ts.len(),
        "switch_step": switch_step,
        "tokens": tokens,
        "timesteps": ts,
        "selected": sweep[switch_step],
        "sweep": sweep,
    })
    .to_string())
}

/// Confidence-weighted reconstruction loss between a smooth synthetic
/// ground truth and a copy disturbed by a checkerboard of amplitude `noise`.
pub fn reconstruction_loss(noise: f64, confidence: f64, perceptual: f64) -> Result<String, String> {
    if !(0.0..=1.0).contains(&noise) || !(0.0..=1.0).contains(&confidence) {
        return Err("noise and confidence must lie in [0, 1]".into());
    }
    if !(perceptual.is_finite() && perceptual >= 0.0) {
        return Err("perceptual score must be a non-negative number".into());
    }
    let n = IMAGE_SIZE;
    let mut gt = Vec::with_capacity(n * n * 3);
    let mut pred = Vec::with_capacity(n * n * 3);
    for r in 0..n {
        for c in 0..n {
            let sign = if (r / 4 + c / 4) % 2 == 0 { 1.0 } else { -1.0 };
            for v in [c as f64 / (n - 1) as f64, r as f64 / (n - 1) as f64, 0.5] {
                let v = 0.1 + 0.8 * v;
                gt.push(v);
                pred.push((v + sign * noise).clamp(0.0, 1.0));
            }
        }
    }
    let gt = ImageBuffer::new(n, n, gt).map_err(|e| e.to_string())?;
    let pred = ImageBuffer::new(n, n, pred).map_err(|e| e.to_string())?;
    let conf = ConfidenceMap::uniform(n, n, confidence);
    let weights = LossWeights::default();
    let out = confidence_weighted_loss(
        &pred,
        &gt,
        &conf,
        &weights,
        Some(&ConstantPerceptual(perceptual)),
    )
    .map_err(|e| e.to_string())?;
    Ok(json!({
        "total": out.total,
        "terms": out.per_term,
        "weights": { "l1": weights.l1, "ssim": weights.ssim, "lpips": weights.lpips },
    })
    .to_string())
}

#[wasm_bindgen(js_name = planPath)]
pub fn plan_path_js(spec: &str, radius: f64) -> Result<String, JsError> {
    plan_path(spec, radius).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = switchOnce)]
pub fn switch_once_js(steps: usize, switch_step: usize, strength: f64) -> Result<String, JsError> {
    switch_once(steps, switch_step, strength).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = reconstructionLoss)]
pub fn reconstruction_loss_js(
    noise: f64,
    confidence: f64,
    perceptual: f64,
) -> Result<String, JsError> {
    reconstruction_loss(noise, confidence, perceptual).map_err(|e| JsError::new(&e))
}
