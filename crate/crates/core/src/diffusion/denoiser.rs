//! The noise-prediction interface and analytic stand-ins for a real network.

use super::{ConditionPack, DiffusionError, Director, LatentVideo, NoiseSchedule};

/// Predicts the noise in `z_t` at timestep `t`. `cond = None` asks for the
/// unconditional prediction used by guidance. Implementations must be pure
/// and shape-preserving; they may be queried from several threads.
pub trait Denoiser: Sync {
    fn predict_noise(
        &self,
        z_t: &LatentVideo,
        t: usize,
        cond: Option<&ConditionPack>,
        director: Director,
    ) -> Result<LatentVideo, DiffusionError>;
}

fn noise_scales(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64), DiffusionError> {
    if t == 0 || t > schedule.steps() {
        return Err(DiffusionError::InvalidTimestep(format!(
            "denoiser queried at t = {t} (valid 1..={})",
            schedule.steps()
        )));
    }
    let ab = schedule.alpha_bar(t);
    Ok((ab, (1.0 - ab).sqrt()))
}

/// Knows the clean latent and returns the exact noise consistent with it,
/// `(z_t - sqrt(ab) z0) / sqrt(1 - ab)`. Ignores conditioning and director.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub z0: LatentVideo,
    pub schedule: NoiseSchedule,
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(
        &self,
        z_t: &LatentVideo,
        t: usize,
        _cond: Option<&ConditionPack>,
        _director: Director,
    ) -> Result<LatentVideo, DiffusionError> {
        let (ab, sn) = noise_scales(&self.schedule, t)?;
        z_t.lincomb(1.0 / sn, &self.z0, -ab.sqrt() / sn)
    }
}

/// Exact posterior-mean noise prediction when every element of the data is
/// independently `N(mean, sigma^2)`. With `z_t = sqrt(ab) x + sqrt(1 - ab) eps`
/// the pair `(eps, z_t)` is jointly Gaussian and
///
/// `E[eps | z_t] = sqrt(1 - ab) (z_t - sqrt(ab) mean) / (ab sigma^2 + 1 - ab)`.
///
/// `mean` holds one value per element of a frame and is shared by all
/// frames, so frames act as independent samples.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianDenoiser {
    /// Marginal `(mean, std)` of one element at timestep `t`.
    pub fn marginal(&self, element: usize, t: usize) -> (f64, f64) {
        let ab = self.schedule.alpha_bar(t);
        (
            ab.sqrt() * self.mean[element],
            (ab * self.sigma * self.sigma + 1.0 - ab).sqrt(),
        )
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict_noise(
        &self,
        z_t: &LatentVideo,
        t: usize,
        _cond: Option<&ConditionPack>,
        _director: Director,
    ) -> Result<LatentVideo, DiffusionError> {
        if z_t.frame_len() != self.mean.len() {
            return Err(DiffusionError::ShapeMismatch(format!(
                "frame has {} elements, model mean has {}",
                z_t.frame_len(),
                self.mean.len()
            )));
        }
        let (ab, sn) = noise_scales(&self.schedule, t)?;
        let sa = ab.sqrt();
        let var = ab * self.sigma * self.sigma + 1.0 - ab;
        let n = self.mean.len();
        let data = z_t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| sn * (z - sa * self.mean[i % n]) / var)
            .collect();
        LatentVideo::new(z_t.shape(), data)
    }
}

/// Wraps a denoiser and adds a constant per-director offset to its output,
/// so schedules that route steps differently give different samples.
#[derive(Debug, Clone)]
pub struct DirectorSensitive<D> {
    pub inner: D,
    pub s_offset: f64,
    pub t_offset: f64,
    pub base_offset: f64,
}

impl<D> DirectorSensitive<D> {
    pub fn new(inner: D, strength: f64) -> Self {
        Self {
            inner,
            s_offset: strength,
            t_offset: -strength,
            base_offset: 0.0,
        }
    }
}

impl<D: Denoiser> Denoiser for DirectorSensitive<D> {
    fn predict_noise(
        &self,
        z_t: &LatentVideo,
        t: usize,
        cond: Option<&ConditionPack>,
        director: Director,
    ) -> Result<LatentVideo, DiffusionError> {
        let offset = match director {
            Director::SDirector => self.s_offset,
            Director::TDirector => self.t_offset,
            Director::Base => self.base_offset,
        };
        Ok(self
            .inner
            .predict_noise(z_t, t, cond, director)?
            .map(|x| x + offset))
    }
}

/// Adds `shift` to the conditional prediction only, giving classifier-free
/// guidance something to amplify.
#[derive(Debug, Clone)]
pub struct ConditionShift<D> {
    pub inner: D,
    pub shift: f64,
}

impl<D: Denoiser> Denoiser for ConditionShift<D> {
    fn predict_noise(
        &self,
        z_t: &LatentVideo,
        t: usize,
        cond: Option<&ConditionPack>,
        director: Director,
    ) -> Result<LatentVideo, DiffusionError> {
        let eps = self.inner.predict_noise(z_t, t, cond, director)?;
        Ok(if cond.is_some() {
            eps.map(|x| x + self.shift)
        } else {
            eps
        })
    }
}
