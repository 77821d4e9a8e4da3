//! Sampling-time algorithms written against an abstract [`Denoiser`], so
//! each can be checked with analytic mocks instead of a trained network.

mod conditioning;
mod denoiser;
mod latent;
mod sampler;
mod schedule;

pub use conditioning::{
    diffusion_mse_loss, pack_interpolation_conditioning, unpack_interpolation, ConditionPack,
    InterpolationLayout,
};
pub use denoiser::{ConditionShift, Denoiser, DirectorSensitive, GaussianDenoiser, OracleDenoiser};
pub use latent::LatentVideo;
pub use sampler::{
    blend_reference, guided_noise, refine_appearance, refine_pass, sample, sample_trace,
    sample_with_reference, sample_with_reference_trace, RefinementConfig, REFINE_STREAM_BASE,
};
pub use schedule::{
    cfg_combine, ddim_step, ddim_timesteps, make_schedule, q_sample, switch_once_schedule,
    BetaSpacing, Director, DirectorSchedule, NoiseSchedule,
};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DiffusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid timestep: {0}")]
    InvalidTimestep(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("malformed latent file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02, BetaSpacing::Linear).unwrap()
    }

    #[test]
    fn q_sample_endpoints() {
        let s = schedule();
        let z0 = LatentVideo::randn([2, 2, 2, 2], 1, 0);
        let eps = LatentVideo::randn([2, 2, 2, 2], 1, 1);
        assert_eq!(q_sample(&z0, 0, &eps, &s).unwrap(), z0);
        let zero = LatentVideo::zeros(z0.shape());
        let scaled = q_sample(&z0, 500, &zero, &s).unwrap();
        assert_eq!(scaled, z0.map(|x| s.alpha_bar(500).sqrt() * x));
    }

    #[test]
    fn oracle_sampling_recovers_z0_for_any_schedule() {
        let s = schedule();
        let z0 = LatentVideo::randn([3, 2, 2, 2], 5, 0);
        let eps = LatentVideo::randn(z0.shape(), 5, 1);
        let ts = ddim_timesteps(1000, 50).unwrap();
        let init = q_sample(&z0, 1000, &eps, &s).unwrap();
        let oracle = OracleDenoiser {
            z0: z0.clone(),
            schedule: s.clone(),
        };
        for k in [0, 5, 50] {
            let d = switch_once_schedule(50, k).unwrap();
            let out = sample(&oracle, &s, &d, &ConditionPack::default(), &init, &ts).unwrap();
            assert!(out.max_abs_diff(&z0) < 1e-6);
        }
    }

    #[test]
    fn director_routing_matters_only_for_sensitive_mocks() {
        let s = schedule();
        let z0 = LatentVideo::randn([1, 1, 2, 2], 9, 0);
        let init = LatentVideo::randn(z0.shape(), 9, 1);
        let ts = ddim_timesteps(1000, 10).unwrap();
        let cond = ConditionPack::text("", 1.0);
        let oracle = OracleDenoiser {
            z0,
            schedule: s.clone(),
        };
        let all_s = DirectorSchedule::uniform(Director::SDirector, 10);
        let all_t = DirectorSchedule::uniform(Director::TDirector, 10);
        let a = sample(&oracle, &s, &all_s, &cond, &init, &ts).unwrap();
        let b = sample(&oracle, &s, &all_t, &cond, &init, &ts).unwrap();
        assert_eq!(a, b);
        let sensitive = DirectorSensitive::new(oracle, 0.05);
        let a = sample(&sensitive, &s, &all_s, &cond, &init, &ts).unwrap();
        let b = sample(&sensitive, &s, &all_t, &cond, &init, &ts).unwrap();
        assert_ne!(a, b);
        let zero = sample(
            &sensitive,
            &s,
            &switch_once_schedule(10, 0).unwrap(),
            &cond,
            &init,
            &ts,
        )
        .unwrap();
        assert_eq!(zero, b);
    }

    #[test]
    fn sampler_rejects_bad_inputs() {
        let s = schedule();
        let z = LatentVideo::zeros([1, 1, 1, 1]);
        let oracle = OracleDenoiser {
            z0: z.clone(),
            schedule: s.clone(),
        };
        let d = DirectorSchedule::uniform(Director::Base, 2);
        let cond = ConditionPack::default();
        assert!(sample(&oracle, &s, &d, &cond, &z, &[10, 20]).is_err());
        assert!(sample(&oracle, &s, &d, &cond, &z, &[10, 0]).is_err());
        assert!(matches!(
            sample(&oracle, &s, &d, &cond, &z, &[10]),
            Err(DiffusionError::LengthMismatch(_))
        ));
    }

    #[test]
    fn refine_with_zero_t0_is_identity() {
        let s = schedule();
        let z = LatentVideo::randn([2, 1, 2, 2], 3, 3);
        let oracle = OracleDenoiser {
            z0: z.clone(),
            schedule: s.clone(),
        };
        let cfg = RefinementConfig {
            t0: 0,
            mid_timestep: 0,
            ..RefinementConfig::default()
        };
        assert_eq!(
            refine_appearance(&z, &oracle, &s, &cfg, &ConditionPack::default(), 1).unwrap(),
            z
        );
        let cfg = RefinementConfig::default();
        let out = refine_appearance(&z, &oracle, &s, &cfg, &ConditionPack::default(), 1).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-6);
    }
}
