//! Camera extrinsics and intrinsics.
//!
//! Cameras follow the OpenCV convention: `+x` right, `+y` down, `+z` forward
//! (optical axis). `rotation` maps camera-frame vectors into the world frame,
//! so the optical axis in world coordinates is the third column of
//! `rotation` and the camera center is `position`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating rotation orthonormality.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PoseError {
    #[error("rotation is not orthonormal with determinant +1 (residual {0:e})")]
    NotARotation(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("non-finite value in pose")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        // 480x320 pinhole with a ~60 degree horizontal field of view.
        Self {
            fx: 415.0,
            fy: 415.0,
            cx: 240.0,
            cy: 160.0,
        }
    }
}

impl Default for ImageSize {
    fn default() -> Self {
        Self {
            width: 480,
            height: 320,
        }
    }
}

/// Rigid world-from-camera pose plus pinhole intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
    pub intrinsics: Intrinsics,
    pub image_size: ImageSize,
}

impl CameraPose {
    /// Builds a pose and checks every invariant.
    pub fn new(
        rotation: Matrix3<f64>,
        position: Vector3<f64>,
        intrinsics: Intrinsics,
        image_size: ImageSize,
    ) -> Result<Self, PoseError> {
        let pose = Self {
            rotation,
            position,
            intrinsics,
            image_size,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Identity rotation at `position` with default intrinsics.
    pub fn at(position: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            position,
            intrinsics: Intrinsics::default(),
            image_size: ImageSize::default(),
        }
    }

    pub fn identity() -> Self {
        Self::at(Vector3::zeros())
    }

    pub fn with_camera(mut self, intrinsics: Intrinsics, image_size: ImageSize) -> Self {
        self.intrinsics = intrinsics;
        self.image_size = image_size;
        self
    }

    pub fn validate(&self) -> Result<(), PoseError> {
        if !self.rotation.iter().all(|v| v.is_finite())
            || !self.position.iter().all(|v| v.is_finite())
        {
            return Err(PoseError::NonFinite);
        }
        let residual = rotation_residual(&self.rotation);
        if residual > ROTATION_TOLERANCE {
            return Err(PoseError::NotARotation(residual));
        }
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.fx.is_finite() && k.fy.is_finite()) {
            return Err(PoseError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                k.fx, k.fy
            )));
        }
        let size = self.image_size;
        if size.width == 0 || size.height == 0 {
            return Err(PoseError::InvalidIntrinsics(
                "image size must be positive".into(),
            ));
        }
        if !(k.cx >= 0.0 && k.cx < size.width as f64 && k.cy >= 0.0 && k.cy < size.height as f64) {
            return Err(PoseError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                k.cx, k.cy, size.width, size.height
            )));
        }
        Ok(())
    }

    /// Optical axis (camera `+z`) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn right(&self) -> Vector3<f64> {
        self.rotation.column(0).into_owned()
    }

    pub fn down(&self) -> Vector3<f64> {
        self.rotation.column(1).into_owned()
    }

    /// World point expressed in the camera frame.
    pub fn world_to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (world - self.position)
    }

    /// Pixel coordinates `(u, v)` of a camera-frame point with `z > 0`.
    pub fn project(&self, cam: &Vector3<f64>) -> Option<(f64, f64)> {
        if cam.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy))
    }

    /// Unit ray direction (world frame) through pixel center `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (self.rotation * cam).normalize()
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }
}

/// Max absolute entry of `RᵀR − I` combined with `|det R − 1|`.
pub fn rotation_residual(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ortho.max((r.determinant() - 1.0).abs())
}

/// Rotation whose camera `+z` points from `eye` to `target`, with camera `-y`
/// as close to `up` as possible. Falls back to world `+y` as the up hint when
/// the view direction is parallel to `up`. Returns `None` when `eye == target`.
pub fn look_at(
    eye: &Vector3<f64>,
    target: &Vector3<f64>,
    up: &Vector3<f64>,
) -> Option<Matrix3<f64>> {
    let delta = target - eye;
    let norm = delta.norm();
    if !(norm > 1e-12) {
        return None;
    }
    let forward = delta / norm;
    let mut right = forward.cross(up);
    if right.norm() < 1e-9 {
        right = forward.cross(&Vector3::y());
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::x());
        }
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Some(Matrix3::from_columns(&[right, down, forward]))
}

/// Re-orthonormalizes a nearly orthonormal matrix through its quaternion.
pub fn renormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let q = UnitQuaternion::from_matrix(r);
    q.to_rotation_matrix().into_inner()
}

/// Flat record used by the line-delimited JSON formats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Row-major world-from-camera rotation.
    pub rotation: [f64; 9],
    pub position: [f64; 3],
    /// `[fx, fy, cx, cy]`.
    pub intrinsics: [f64; 4],
    /// `[width, height]`.
    pub image_size: [u32; 2],
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            position: [p.position.x, p.position.y, p.position.z],
            intrinsics: [
                p.intrinsics.fx,
                p.intrinsics.fy,
                p.intrinsics.cx,
                p.intrinsics.cy,
            ],
            image_size: [p.image_size.width, p.image_size.height],
        }
    }
}

impl TryFrom<PoseRecord> for CameraPose {
    type Error = PoseError;

    fn try_from(rec: PoseRecord) -> Result<Self, PoseError> {
        let r = rec.rotation;
        CameraPose::new(
            Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            Vector3::new(rec.position[0], rec.position[1], rec.position[2]),
            Intrinsics {
                fx: rec.intrinsics[0],
                fy: rec.intrinsics[1],
                cx: rec.intrinsics[2],
                cy: rec.intrinsics[3],
            },
            ImageSize {
                width: rec.image_size[0],
                height: rec.image_size[1],
            },
        )
    }
}

impl Serialize for CameraPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        CameraPose::try_from(rec).map_err(serde::de::Error::custom)
    }
}
