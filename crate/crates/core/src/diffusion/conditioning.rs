//! First/last-frame conditioning layout for interpolation and the masked
//! noise-prediction objective.

use super::{DiffusionError, LatentVideo};
use crate::constants::DEFAULT_GUIDANCE_SCALE;

/// What the denoiser is conditioned on besides the noisy latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPack {
    pub first_latent: Option<LatentVideo>,
    pub last_latent: Option<LatentVideo>,
    /// Opaque text conditioning; this layer never interprets it.
    pub text_token: String,
    pub guidance_scale: f64,
}

impl ConditionPack {
    pub fn text(token: impl Into<String>, guidance_scale: f64) -> Self {
        Self {
            first_latent: None,
            last_latent: None,
            text_token: token.into(),
            guidance_scale,
        }
    }

    pub fn validate(&self, sample: &LatentVideo) -> Result<(), DiffusionError> {
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(DiffusionError::InvalidRange(format!(
                "guidance_scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        for l in [&self.first_latent, &self.last_latent]
            .into_iter()
            .flatten()
        {
            if l.shape()[1..] != sample.shape()[1..] {
                return Err(DiffusionError::ShapeMismatch(format!(
                    "conditioning frame {:?} vs sample {:?}",
                    l.shape(),
                    sample.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Default for ConditionPack {
    fn default() -> Self {
        Self::text("", DEFAULT_GUIDANCE_SCALE)
    }
}

/// The assembled model input: `[z1, z_t frames.., z2]` along the frame axis.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationLayout {
    pub latent: LatentVideo,
    /// `true` for conditioning frames, which the objective skips.
    pub cond_mask: Vec<bool>,
}

/// Places the single-frame latents `z1` at the head and `z2` at the tail of
/// the noisy frames.
pub fn pack_interpolation_conditioning(
    z1: &LatentVideo,
    z2: &LatentVideo,
    z_t: &LatentVideo,
) -> Result<(ConditionPack, InterpolationLayout), DiffusionError> {
    for (name, z) in [("z1", z1), ("z2", z2)] {
        if z.frames() != 1 {
            return Err(DiffusionError::ShapeMismatch(format!(
                "{name} must be a single frame"
            )));
        }
    }
    let latent = LatentVideo::concat_frames(&[z1, z_t, z2])?;
    let n = latent.frames();
    let cond_mask = (0..n).map(|i| i == 0 || i == n - 1).collect();
    let pack = ConditionPack {
        first_latent: Some(z1.clone()),
        last_latent: Some(z2.clone()),
        ..ConditionPack::default()
    };
    Ok((pack, InterpolationLayout { latent, cond_mask }))
}

/// Inverse of [`pack_interpolation_conditioning`]: `(z1, z2, z_t)`.
pub fn unpack_interpolation(
    layout: &InterpolationLayout,
) -> Result<(LatentVideo, LatentVideo, LatentVideo), DiffusionError> {
    let latent = &layout.latent;
    let n = latent.frames();
    if n < 3 || layout.cond_mask.len() != n {
        return Err(DiffusionError::ShapeMismatch(
            "layout needs head, tail and at least one frame".into(),
        ));
    }
    Ok((
        latent.slice_frames(0, 1),
        latent.slice_frames(n - 1, n),
        latent.slice_frames(1, n - 1),
    ))
}

/// Mean squared error over frames whose mask entry is `false`.
pub fn diffusion_mse_loss(
    eps_hat: &LatentVideo,
    eps: &LatentVideo,
    mask: Option<&[bool]>,
) -> Result<f64, DiffusionError> {
    eps_hat.check_same_shape(eps, "diffusion_mse_loss")?;
    let frames = eps.frames();
    if let Some(m) = mask {
        if m.len() != frames {
            return Err(DiffusionError::ShapeMismatch(format!(
                "mask has {} entries for {frames} frames",
                m.len()
            )));
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for f in 0..frames {
        if mask.is_some_and(|m| m[f]) {
            continue;
        }
        for (a, b) in eps_hat.frame(f).iter().zip(eps.frame(f)) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(DiffusionError::ShapeMismatch(
            "mask excludes every element".into(),
        ));
    }
    Ok(sum / count as f64)
}
