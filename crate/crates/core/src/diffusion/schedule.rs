//! Noise schedules, forward noising, deterministic DDIM steps, guidance and
//! the Switch-Once director schedule.
//!
//! `alpha_bar[t]` is the cumulative product of `1 - beta_s` for `s <= t`,
//! so `alpha_bar[0] = 1` and noising reads
//! `z_t = sqrt(alpha_bar[t]) z_0 + sqrt(1 - alpha_bar[t]) eps`.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{DiffusionError, LatentVideo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    #[default]
    Linear,
    /// Linear in `sqrt(beta)`.
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Training steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.steps() {
            return Err(DiffusionError::InvalidTimestep(format!(
                "t = {t} exceeds T = {}",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    spacing: BetaSpacing,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidRange("T must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidRange(format!(
            "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
        )));
    }
    let frac = |s: usize| {
        if steps == 1 {
            0.0
        } else {
            (s - 1) as f64 / (steps - 1) as f64
        }
    };
    let beta = |s: usize| match spacing {
        BetaSpacing::Linear => beta_start + (beta_end - beta_start) * frac(s),
        BetaSpacing::ScaledLinear => {
            let r = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * frac(s);
            r * r
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for s in 1..=steps {
        acc *= 1.0 - beta(s);
        alpha_bar.push(acc);
    }
    if !alpha_bar.windows(2).all(|w| w[1] < w[0]) || alpha_bar[steps] <= 0.0 {
        return Err(DiffusionError::InvalidRange(
            "schedule is not strictly decreasing".into(),
        ));
    }
    Ok(NoiseSchedule { alpha_bar })
}

/// Forward noising to timestep `t`.
pub fn q_sample(
    z0: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo, DiffusionError> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    z0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Deterministic DDIM update from `t` to `t_prev < t`.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo, DiffusionError> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(DiffusionError::InvalidTimestep(format!(
            "t_prev = {t_prev} must be below t = {t}"
        )));
    }
    z_t.check_same_shape(eps_hat, "ddim_step")?;
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sa_prev, sn_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| {
            let x0 = (z - sn * e) / sa;
            sa_prev * x0 + sn_prev * e
        })
        .collect();
    LatentVideo::new(z_t.shape(), data)
}

/// Classifier-free guidance, `eps_u + scale (eps_c - eps_u)`. Scales 0 and 1
/// return the corresponding input unchanged.
pub fn cfg_combine(
    eps_uncond: &LatentVideo,
    eps_cond: &LatentVideo,
    scale: f64,
) -> Result<LatentVideo, DiffusionError> {
    eps_uncond.check_same_shape(eps_cond, "cfg_combine")?;
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(u, c)| u + scale * (c - u))
        .collect();
    LatentVideo::new(eps_uncond.shape(), data)
}

/// Which adapter the denoiser should route a step through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Director {
    SDirector,
    TDirector,
    Base,
}

impl fmt::Display for Director {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Director::SDirector => "S_DIRECTOR",
            Director::TDirector => "T_DIRECTOR",
            Director::Base => "BASE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectorSchedule {
    pub assignments: Vec<Director>,
    pub switch_step: usize,
}

impl DirectorSchedule {
    pub fn uniform(director: Director, n_steps: usize) -> Self {
        Self {
            assignments: vec![director; n_steps],
            switch_step: if director == Director::SDirector {
                n_steps
            } else {
                0
            },
        }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// S-Director for steps `[0, switch_step)`, T-Director afterwards.
pub fn switch_once_schedule(
    n_steps: usize,
    switch_step: usize,
) -> Result<DirectorSchedule, DiffusionError> {
    if switch_step > n_steps {
        return Err(DiffusionError::InvalidRange(format!(
            "switch_step {switch_step} exceeds {n_steps} steps"
        )));
    }
    Ok(DirectorSchedule {
        assignments: (0..n_steps)
            .map(|i| {
                if i < switch_step {
                    Director::SDirector
                } else {
                    Director::TDirector
                }
            })
            .collect(),
        switch_step,
    })
}

/// Evenly spaced step start times `T, T - T/n, ...` (integer division of
/// `i * T / n`), all positive and strictly decreasing. The last step of a
/// sampler run always lands on 0, which is not listed.
pub fn ddim_timesteps(train_steps: usize, n_steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if n_steps == 0 || n_steps > train_steps {
        return Err(DiffusionError::InvalidRange(format!(
            "need 1 <= n_steps ({n_steps}) <= T ({train_steps})"
        )));
    }
    Ok((0..n_steps)
        .map(|i| train_steps - i * train_steps / n_steps)
        .collect())
}
