//! Non-neural machinery for camera- and motion-controlled video generation pipelines:
//! dataset curation from camera distributions and optical flow, TSDF fusion
//! and occupancy-aware trajectory planning, diffusion-sampler orchestration
//! against pluggable denoisers, and reconstruction losses.

// Range guards are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constants;
pub mod diffusion;
pub mod flow;
pub mod fusion;
pub mod geometry;
pub mod loss;
pub mod manifest;
pub mod pose;
pub mod rng;
pub mod trajectory;
