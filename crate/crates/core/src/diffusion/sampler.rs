//! Sampling loops: plain guided DDIM under a director schedule, shared
//! reference latents with blending, and SDEdit-style appearance refinement.

use serde::{Deserialize, Serialize};

use super::{
    cfg_combine, ddim_step, ddim_timesteps, q_sample, ConditionPack, Denoiser, DiffusionError,
    Director, DirectorSchedule, LatentVideo, NoiseSchedule,
};

/// Random stream offset for refinement noise, keeping it apart from any
/// init noise drawn from the same seed.
pub const REFINE_STREAM_BASE: u64 = 1 << 32;

/// Guided noise prediction. Scale 1 needs only the conditional query and
/// scale 0 only the unconditional one.
pub fn guided_noise(
    denoiser: &dyn Denoiser,
    z: &LatentVideo,
    t: usize,
    cond: &ConditionPack,
    director: Director,
) -> Result<LatentVideo, DiffusionError> {
    let scale = cond.guidance_scale;
    let check = |eps: LatentVideo| {
        z.check_same_shape(&eps, "denoiser output")?;
        Ok::<_, DiffusionError>(eps)
    };
    if scale == 1.0 {
        return check(denoiser.predict_noise(z, t, Some(cond), director)?);
    }
    let eps_u = check(denoiser.predict_noise(z, t, None, director)?)?;
    if scale == 0.0 {
        return Ok(eps_u);
    }
    let eps_c = check(denoiser.predict_noise(z, t, Some(cond), director)?)?;
    cfg_combine(&eps_u, &eps_c, scale)
}

fn validate_timesteps(timesteps: &[usize], schedule: &NoiseSchedule) -> Result<(), DiffusionError> {
    if let Some(&first) = timesteps.first() {
        if first > schedule.steps() {
            return Err(DiffusionError::InvalidTimestep(format!(
                "first timestep {first} exceeds T = {}",
                schedule.steps()
            )));
        }
    }
    if timesteps.contains(&0) {
        return Err(DiffusionError::InvalidTimestep(
            "timesteps list step start times and must be positive; the final step lands on 0"
                .into(),
        ));
    }
    if !timesteps.windows(2).all(|w| w[1] < w[0]) {
        return Err(DiffusionError::InvalidTimestep(
            "timesteps must be strictly decreasing".into(),
        ));
    }
    Ok(())
}

struct Blend<'a> {
    refs: &'a [LatentVideo],
    lambda: f64,
    window: usize,
}

#[allow(clippy::too_many_arguments)]
fn run(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    directors: &DirectorSchedule,
    cond: &ConditionPack,
    init: &LatentVideo,
    timesteps: &[usize],
    blend: Option<Blend<'_>>,
    mut trace: Option<&mut Vec<LatentVideo>>,
) -> Result<LatentVideo, DiffusionError> {
    validate_timesteps(timesteps, schedule)?;
    if directors.len() != timesteps.len() {
        return Err(DiffusionError::LengthMismatch(format!(
            "{} director assignments for {} steps",
            directors.len(),
            timesteps.len()
        )));
    }
    cond.validate(init)?;
    let mut z = init.clone();
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(z.clone());
    }
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let eps = guided_noise(denoiser, &z, t, cond, directors.assignments[i])?;
        z = ddim_step(&z, &eps, t, t_prev, schedule)?;
        if let Some(b) = &blend {
            if i < b.window {
                z = blend_reference(&z, &b.refs[i + 1], b.lambda)?;
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(z.clone());
        }
    }
    Ok(z)
}

/// Runs `timesteps.len()` guided DDIM steps from `init`. `timesteps` holds
/// each step's start time; step `i` goes to `timesteps[i + 1]`, the last to 0.
pub fn sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    directors: &DirectorSchedule,
    cond: &ConditionPack,
    init: &LatentVideo,
    timesteps: &[usize],
) -> Result<LatentVideo, DiffusionError> {
    run(
        denoiser, schedule, directors, cond, init, timesteps, None, None,
    )
}

/// Like [`sample`] but also returns the latent before the first step and
/// after every step (`timesteps.len() + 1` entries, the last being the output).
pub fn sample_trace(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    directors: &DirectorSchedule,
    cond: &ConditionPack,
    init: &LatentVideo,
    timesteps: &[usize],
) -> Result<Vec<LatentVideo>, DiffusionError> {
    let mut tr = Vec::with_capacity(timesteps.len() + 1);
    run(
        denoiser,
        schedule,
        directors,
        cond,
        init,
        timesteps,
        None,
        Some(&mut tr),
    )?;
    Ok(tr)
}

/// `lambda * z_t + (1 - lambda) * z_ref_t`.
pub fn blend_reference(
    z_t: &LatentVideo,
    z_ref_t: &LatentVideo,
    lambda: f64,
) -> Result<LatentVideo, DiffusionError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DiffusionError::InvalidRange(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    z_t.lincomb(lambda, z_ref_t, 1.0 - lambda)
}

/// Samples from the shared initialization `ref_latents[0]` under the
/// S-Director and pulls the latent towards the reference trajectory after
/// each of the first `blend_window` steps. `ref_latents[i]` is the reference
/// latent at the start of step `i`; index `timesteps.len()` is its final
/// output, which is what [`sample_trace`] produces for the reference video.
pub fn sample_with_reference(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &ConditionPack,
    ref_latents: &[LatentVideo],
    lambda: f64,
    blend_window: usize,
    timesteps: &[usize],
) -> Result<LatentVideo, DiffusionError> {
    sample_with_reference_impl(
        denoiser,
        schedule,
        cond,
        ref_latents,
        lambda,
        blend_window,
        timesteps,
        None,
    )
}

/// [`sample_with_reference`] returning every intermediate latent as well.
pub fn sample_with_reference_trace(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &ConditionPack,
    ref_latents: &[LatentVideo],
    lambda: f64,
    blend_window: usize,
    timesteps: &[usize],
) -> Result<Vec<LatentVideo>, DiffusionError> {
    let mut tr = Vec::with_capacity(timesteps.len() + 1);
    sample_with_reference_impl(
        denoiser,
        schedule,
        cond,
        ref_latents,
        lambda,
        blend_window,
        timesteps,
        Some(&mut tr),
    )?;
    Ok(tr)
}

#[allow(clippy::too_many_arguments)]
fn sample_with_reference_impl(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &ConditionPack,
    ref_latents: &[LatentVideo],
    lambda: f64,
    blend_window: usize,
    timesteps: &[usize],
    trace: Option<&mut Vec<LatentVideo>>,
) -> Result<LatentVideo, DiffusionError> {
    if ref_latents.len() != timesteps.len() + 1 {
        return Err(DiffusionError::LengthMismatch(format!(
            "{} reference latents for {} steps (need steps + 1)",
            ref_latents.len(),
            timesteps.len()
        )));
    }
    if blend_window > timesteps.len() {
        return Err(DiffusionError::LengthMismatch(format!(
            "blend window {blend_window} exceeds {} steps",
            timesteps.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DiffusionError::InvalidRange(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    for r in ref_latents {
        ref_latents[0].check_same_shape(r, "reference latents")?;
    }
    let directors = DirectorSchedule::uniform(Director::SDirector, timesteps.len());
    let blend = Blend {
        refs: ref_latents,
        lambda,
        window: blend_window,
    };
    run(
        denoiser,
        schedule,
        &directors,
        cond,
        &ref_latents[0],
        timesteps,
        Some(blend),
        trace,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    /// Noise level of the first pass.
    pub t0: usize,
    /// Total passes; passes after the first re-noise only to `mid_timestep`.
    pub repeats: usize,
    pub mid_timestep: usize,
    /// DDIM steps per pass (capped by the pass's start timestep).
    pub n_steps: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            t0: 400,
            repeats: 2,
            mid_timestep: 200,
            n_steps: 20,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<(), DiffusionError> {
        if self.t0 > schedule.steps() {
            return Err(DiffusionError::InvalidRange(format!(
                "t0 {} exceeds T = {}",
                self.t0,
                schedule.steps()
            )));
        }
        if self.mid_timestep > self.t0 {
            return Err(DiffusionError::InvalidRange(
                "mid_timestep must not exceed t0".into(),
            ));
        }
        if self.repeats == 0 || self.n_steps == 0 {
            return Err(DiffusionError::InvalidRange(
                "repeats and n_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One re-noise/denoise pass: noise `latent` to `t_start` with stream
/// `REFINE_STREAM_BASE + pass` of `seed`, then denoise to 0 with the
/// T-Director. `t_start = 0` returns the input unchanged.
#[allow(clippy::too_many_arguments)]
pub fn refine_pass(
    latent: &LatentVideo,
    t_start: usize,
    n_steps: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &ConditionPack,
    seed: u64,
    pass: u64,
) -> Result<LatentVideo, DiffusionError> {
    if t_start == 0 {
        return Ok(latent.clone());
    }
    let eps = LatentVideo::randn(latent.shape(), seed, REFINE_STREAM_BASE + pass);
    let noisy = q_sample(latent, t_start, &eps, schedule)?;
    let timesteps = ddim_timesteps(t_start, n_steps.min(t_start))?;
    let directors = DirectorSchedule::uniform(Director::TDirector, timesteps.len());
    sample(denoiser, schedule, &directors, cond, &noisy, &timesteps)
}

/// Appearance refinement: a pass from `t0`, then `repeats - 1` passes from
/// `mid_timestep`, each with its own noise stream.
pub fn refine_appearance(
    video_latent: &LatentVideo,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    config: &RefinementConfig,
    cond: &ConditionPack,
    rng_seed: u64,
) -> Result<LatentVideo, DiffusionError> {
    config.validate(schedule)?;
    let mut z = video_latent.clone();
    for pass in 0..config.repeats {
        let t = if pass == 0 {
            config.t0
        } else {
            config.mid_timestep
        };
        z = refine_pass(
            &z,
            t,
            config.n_steps,
            denoiser,
            schedule,
            cond,
            rng_seed,
            pass as u64,
        )?;
    }
    Ok(z)
}
