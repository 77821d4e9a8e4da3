//! Named settings from the reference training and inference setup. Most are
//! carried as configuration metadata only; the sampler defaults are used
//! directly.

/// LoRA rank of each director adapter.
pub const LORA_RANK: u32 = 256;
/// Fine-tuning steps per director adapter.
pub const LORA_TRAIN_STEPS: u32 = 3000;
pub const LORA_LEARNING_RATE: f64 = 1e-3;
/// Full fine-tune of the interpolation model before its S-Director.
pub const INTERPOLATION_FULL_FT_STEPS: u32 = 2000;
pub const INTERPOLATION_FULL_FT_LEARNING_RATE: f64 = 5e-5;
pub const INTERPOLATION_LORA_STEPS: u32 = 1000;

/// Frames per clip of the base video model.
pub const BASE_VIDEO_FRAMES: usize = 49;
/// Extended clip length, three times the base.
pub const EXTENDED_VIDEO_FRAMES: usize = 145;
pub const VIDEO_WIDTH: u32 = 480;
pub const VIDEO_HEIGHT: u32 = 320;
/// Frames per video used to optimize the 3D Gaussian scene.
pub const GS_TRAINING_FRAMES: usize = 49;
pub const GS_OPTIMIZATION_STEPS: u32 = 7000;
/// Views generated for the deformable 4D reconstruction.
pub const DEFORMABLE_VIEWS: usize = 32;

/// Reconstruction-loss weights for the L1, SSIM and LPIPS terms.
pub const LAMBDA_L1: f64 = 0.8;
pub const LAMBDA_SSIM: f64 = 0.2;
pub const LAMBDA_LPIPS: f64 = 0.3;

// Sampler defaults below are policy choices, not published values, except
// the switch step, which falls on "the 4th or 5th step".
pub const DEFAULT_TRAIN_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;
pub const DEFAULT_SWITCH_STEP: usize = 5;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 6.0;
pub const DEFAULT_BLEND_WINDOW: usize = 10;
pub const DEFAULT_BLEND_LAMBDA: f64 = 0.7;
