//! Truncated signed-distance fusion of posed depth frames.
//!
//! Voxel `(i, j, k)` has its center at `origin + (index + 0.5) * voxel_size`
//! and is stored x-fastest at `i + dims.x * (j + dims.y * k)`. The signed
//! distance is projective: observed depth minus the voxel's camera-frame
//! depth, positive in front of the surface.

mod io;
mod mesh;
mod occupancy;

pub use io::{
    load_depth_frame, read_depth_png, read_depth_raw, read_occupancy, read_volume, sidecar_path,
    write_depth_png, write_depth_raw, write_occupancy, write_volume, DepthSidecar, FormatError,
};
pub use mesh::{extract_mesh, write_ply, TriangleMesh};
pub use occupancy::OccupancyGrid;

use nalgebra::Vector3;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::CameraPose;

/// Weight cap so old observations cannot lock a voxel forever.
pub const DEFAULT_MAX_WEIGHT: f64 = 64.0;
/// Default truncation distance in voxels.
pub const DEFAULT_TRUNCATION_VOXELS: f64 = 4.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum FusionError {
    #[error("frame does not match the volume or camera: {0}")]
    GridMismatch(String),
    #[error("volume has no observed zero crossing")]
    EmptyVolume,
    #[error("invalid volume parameters: {0}")]
    InvalidVolume(String),
}

/// One posed depth image. `depth` is row-major `height x width` meters,
/// 0 meaning no measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub depth: Vec<f32>,
    pub color: Option<Vec<[u8; 3]>>,
    pub pose: CameraPose,
    pub frame_id: u32,
}

impl DepthFrame {
    pub fn new(depth: Vec<f32>, pose: CameraPose, frame_id: u32) -> Result<Self, FusionError> {
        let frame = Self {
            depth,
            color: None,
            pose,
            frame_id,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn width(&self) -> usize {
        self.pose.image_size.width as usize
    }

    pub fn height(&self) -> usize {
        self.pose.image_size.height as usize
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        self.pose
            .validate()
            .map_err(|e| FusionError::GridMismatch(e.to_string()))?;
        let n = self.width() * self.height();
        if self.depth.len() != n {
            return Err(FusionError::GridMismatch(format!(
                "depth has {} samples, image is {}x{}",
                self.depth.len(),
                self.width(),
                self.height()
            )));
        }
        if let Some(c) = &self.color {
            if c.len() != n {
                return Err(FusionError::GridMismatch(
                    "color size differs from depth".into(),
                ));
            }
        }
        if let Some(bad) = self.depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(FusionError::GridMismatch(format!(
                "invalid depth value {bad}"
            )));
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeParams {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// Truncation distance in world units; `None` means 4 voxels.
    #[serde(default)]
    pub truncation: Option<f64>,
    #[serde(default = "default_max_weight")]
    pub max_weight: f64,
}

fn default_max_weight() -> f64 {
    DEFAULT_MAX_WEIGHT
}

impl Default for VolumeParams {
    fn default() -> Self {
        // The sphere benchmark grid: 64^3 over [-0.75, 0.75]^3.
        Self {
            origin: [-0.75; 3],
            voxel_size: 1.5 / 64.0,
            dims: [64; 3],
            truncation: None,
            max_weight: DEFAULT_MAX_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    pub max_weight: f64,
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(params: &VolumeParams) -> Result<Self, FusionError> {
        let v = params.voxel_size;
        if !(v.is_finite() && v > 0.0) {
            return Err(FusionError::InvalidVolume(format!(
                "voxel_size must be > 0, got {v}"
            )));
        }
        if params.dims.contains(&0) {
            return Err(FusionError::InvalidVolume("dims must be positive".into()));
        }
        if !params.origin.iter().all(|x| x.is_finite()) {
            return Err(FusionError::InvalidVolume("origin must be finite".into()));
        }
        let truncation = params.truncation.unwrap_or(DEFAULT_TRUNCATION_VOXELS * v);
        if !(truncation.is_finite() && truncation >= v) {
            return Err(FusionError::InvalidVolume(format!(
                "truncation {truncation} must be at least one voxel ({v})"
            )));
        }
        if !(params.max_weight >= 1.0) {
            return Err(FusionError::InvalidVolume("max_weight must be >= 1".into()));
        }
        let n = params.dims.iter().product();
        Ok(Self {
            origin: Vector3::from(params.origin),
            voxel_size: v,
            dims: params.dims,
            truncation,
            max_weight: params.max_weight,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.tsdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tsdf.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    /// Writes `f(center)` (already in truncation units) into every voxel with
    /// weight 1. Useful for analytic fields.
    pub fn fill_with(&mut self, f: impl Fn(&Vector3<f64>) -> f64) {
        for idx in 0..self.len() {
            let [i, j, k] = self.coords(idx);
            let c = self.voxel_center(i, j, k);
            self.tsdf[idx] = (f(&c) / self.truncation).clamp(-1.0, 1.0);
            self.weight[idx] = 1.0;
        }
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }

    /// Fuses one frame (see the module docs for the geometry).
    pub fn integrate(&mut self, frame: &DepthFrame) -> Result<(), FusionError> {
        frame.validate()?;
        let [nx, ny, _] = self.dims;
        let slice = nx * ny;
        let mut tsdf = std::mem::take(&mut self.tsdf);
        let mut weight = std::mem::take(&mut self.weight);
        {
            let ctx_volume = &*self;
            let ctx = IntegrateCtx {
                volume: ctx_volume,
                frame,
            };
            let update = |k: usize, tsdf: &mut [f64], weight: &mut [f64]| {
                for j in 0..ny {
                    for i in 0..nx {
                        let idx = i + nx * j;
                        if let Some(sample) = ctx.sample(i, j, k) {
                            let w = weight[idx];
                            tsdf[idx] = (w * tsdf[idx] + sample) / (w + 1.0);
                            weight[idx] = (w + 1.0).min(ctx.volume.max_weight);
                        }
                    }
                }
            };
            #[cfg(feature = "parallel")]
            tsdf.par_chunks_mut(slice)
                .zip(weight.par_chunks_mut(slice))
                .enumerate()
                .for_each(|(k, (t, w))| update(k, t, w));
            #[cfg(not(feature = "parallel"))]
            tsdf.chunks_mut(slice)
                .zip(weight.chunks_mut(slice))
                .enumerate()
                .for_each(|(k, (t, w))| update(k, t, w));
        }
        self.tsdf = tsdf;
        self.weight = weight;
        Ok(())
    }

    /// Binarizes for path planning. A voxel is occupied when it was observed
    /// and its signed distance `s = tsdf * truncation` satisfies
    /// `-(band + voxel_size) < s <= band`. For bands of at least one
    /// truncation this is every observed voxel with `s <= band`; smaller
    /// bands keep a shell of the given half-width plus the first voxel layer
    /// behind the surface. Unobserved voxels are free.
    pub fn to_occupancy(&self, band: f64) -> OccupancyGrid {
        let band = band.max(0.0);
        let [nx, ny, nz] = self.dims;
        let s_at = |idx: usize| (self.weight[idx] > 0.0).then(|| self.tsdf[idx] * self.truncation);
        let mut occupied = vec![false; self.tsdf.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = self.index(i, j, k);
                    let Some(s) = s_at(idx) else { continue };
                    if s > band {
                        continue;
                    }
                    if s > -(band + self.voxel_size) {
                        occupied[idx] = true;
                        continue;
                    }
                    // Projective distances are stretched along oblique rays, so
                    // the sdf can step past the band in one voxel. The voxel
                    // just inside a crossing is kept so the shell has no holes.
                    // All 26 neighbors count: a path sampled at most one voxel
                    // apart can move diagonally between samples.
                    let mut crosses = false;
                    for (di, dj, dk) in NEIGHBORS_26 {
                        let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                        if a < 0
                            || b < 0
                            || c < 0
                            || a >= nx as i64
                            || b >= ny as i64
                            || c >= nz as i64
                        {
                            continue;
                        }
                        if s_at(self.index(a as usize, b as usize, c as usize))
                            .is_some_and(|n| n > band)
                        {
                            crosses = true;
                            break;
                        }
                    }
                    occupied[idx] = crosses;
                }
            }
        }
        OccupancyGrid {
            origin: self.origin,
            voxel_size: self.voxel_size,
            dims: self.dims,
            occupied,
        }
    }
}

const NEIGHBORS_26: [(i64, i64, i64); 26] = {
    let mut out = [(0, 0, 0); 26];
    let mut n = 0;
    let mut code = 0;
    while code < 27 {
        if code != 13 {
            out[n] = (code % 3 - 1, code / 3 % 3 - 1, code / 9 - 1);
            n += 1;
        }
        code += 1;
    }
    out
};

struct IntegrateCtx<'a> {
    volume: &'a TsdfVolume,
    frame: &'a DepthFrame,
}

impl IntegrateCtx<'_> {
    /// New clamped sample for a voxel, or `None` when it must stay untouched.
    fn sample(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let pose = &self.frame.pose;
        let cam = pose.world_to_camera(&self.volume.voxel_center(i, j, k));
        let (u, v) = pose.project(&cam)?;
        let (w, h) = (self.frame.width(), self.frame.height());
        if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
            return None;
        }
        let d = self.frame.depth[v as usize * w + u as usize] as f64;
        if d <= 0.0 {
            return None;
        }
        let sdf = d - cam.z;
        let trunc = self.volume.truncation;
        if sdf <= -trunc {
            return None;
        }
        Some((sdf / trunc).clamp(-1.0, 1.0))
    }
}

/// Convenience: fresh volume with every frame fused in order.
pub fn fuse_frames(
    params: &VolumeParams,
    frames: &[DepthFrame],
) -> Result<TsdfVolume, FusionError> {
    let mut volume = TsdfVolume::new(params)?;
    for f in frames {
        volume.integrate(f)?;
    }
    Ok(volume)
}

/// Renders an exact depth image of a sphere for a pinhole camera. Depth is
/// the camera-frame `z` of the first ray hit, 0 where the ray misses.
pub fn render_sphere_depth(pose: &CameraPose, center: &Vector3<f64>, radius: f64) -> Vec<f32> {
    let (w, h) = (
        pose.image_size.width as usize,
        pose.image_size.height as usize,
    );
    let mut depth = vec![0.0f32; w * h];
    for row in 0..h {
        for col in 0..w {
            let ray = pose.pixel_ray(col as f64 + 0.5, row as f64 + 0.5);
            let oc = pose.position - center;
            let b = oc.dot(&ray);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                continue;
            }
            let t = -b - disc.sqrt();
            if t > 0.0 {
                let hit = pose.position + ray * t;
                depth[row * w + col] = pose.world_to_camera(&hit).z as f32;
            }
        }
    }
    depth
}

/// Depth image of the plane `z_cam = distance` (fronto-parallel).
pub fn render_plane_depth(pose: &CameraPose, distance: f64) -> Vec<f32> {
    vec![distance as f32; (pose.image_size.width * pose.image_size.height) as usize]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{ImageSize, Intrinsics};

    fn small_camera() -> CameraPose {
        CameraPose::identity().with_camera(
            Intrinsics {
                fx: 40.0,
                fy: 40.0,
                cx: 16.0,
                cy: 16.0,
            },
            ImageSize {
                width: 32,
                height: 32,
            },
        )
    }

    fn plane_volume() -> VolumeParams {
        VolumeParams {
            origin: [-0.5, -0.5, 1.0],
            voxel_size: 0.0625,
            dims: [16, 16, 32],
            truncation: None,
            max_weight: DEFAULT_MAX_WEIGHT,
        }
    }

    #[test]
    fn plane_has_zero_crossing_at_depth() {
        let cam = small_camera();
        let frame = DepthFrame::new(render_plane_depth(&cam, 2.0), cam, 0).unwrap();
        let vol = fuse_frames(&plane_volume(), &[frame]).unwrap();
        let (i, j) = (8, 8);
        let mut crossing = None;
        for k in 0..31 {
            let (a, b) = (vol.index(i, j, k), vol.index(i, j, k + 1));
            if vol.weight[a] > 0.0 && vol.weight[b] > 0.0 && vol.tsdf[a] > 0.0 && vol.tsdf[b] <= 0.0
            {
                crossing = Some((vol.voxel_center(i, j, k).z, vol.voxel_center(i, j, k + 1).z));
            }
        }
        let (za, zb) = crossing.expect("sign change");
        assert!(za < 2.0 && zb >= 2.0);
    }

    #[test]
    fn same_frame_twice_keeps_values_doubles_weight() {
        let cam = small_camera();
        let frame = DepthFrame::new(render_plane_depth(&cam, 2.0), cam, 0).unwrap();
        let once = fuse_frames(&plane_volume(), std::slice::from_ref(&frame)).unwrap();
        let twice = fuse_frames(&plane_volume(), &[frame.clone(), frame]).unwrap();
        assert_eq!(once.tsdf, twice.tsdf);
        for (a, b) in once.weight.iter().zip(&twice.weight) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn occupancy_band_zero_is_one_voxel_shell() {
        let cam = small_camera();
        let frame = DepthFrame::new(render_plane_depth(&cam, 2.0), cam, 0).unwrap();
        let vol = fuse_frames(&plane_volume(), &[frame]).unwrap();
        let occ = vol.to_occupancy(0.0);
        let column: Vec<usize> = (0..32)
            .filter(|&k| occ.occupied[vol.index(8, 8, k)])
            .collect();
        assert_eq!(column.len(), 1);
        assert!((vol.voxel_center(8, 8, column[0]).z - 2.0).abs() <= vol.voxel_size);
        let wide = vol.to_occupancy(1.0);
        assert!(occ
            .occupied
            .iter()
            .zip(&wide.occupied)
            .all(|(a, b)| !a || *b));
        let empty = TsdfVolume::new(&plane_volume()).unwrap().to_occupancy(1.0);
        assert_eq!(empty.occupied_count(), 0);
    }

    #[test]
    fn bad_frames_are_rejected() {
        let cam = small_camera();
        assert!(DepthFrame::new(vec![1.0; 3], cam.clone(), 0).is_err());
        let mut d = render_plane_depth(&cam, 1.0);
        d[0] = f32::NAN;
        assert!(DepthFrame::new(d, cam, 0).is_err());
        let mut p = plane_volume();
        p.truncation = Some(0.01);
        assert!(TsdfVolume::new(&p).is_err());
    }
}
