//! Binary volume and occupancy files, depth images with JSON sidecars.
//!
//! Volume layout, little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `TSDF` |
//! | 4 | version `u32` (1) |
//! | 12 | dims `3 x u32` |
//! | 8 | voxel_size `f64` |
//! | 24 | origin `3 x f64` |
//! | 8 | truncation `f64` |
//!
//! A 60-byte header, then `dims` product `f32` tsdf values and the same
//! number of `f32` weights, x-fastest. Occupancy files use magic `OCCG` and
//! the same header minus truncation (52 bytes), then one byte per voxel.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DepthFrame, FusionError, OccupancyGrid, TsdfVolume, DEFAULT_MAX_WEIGHT};
use crate::pose::{CameraPose, PoseRecord};

const VOLUME_MAGIC: &[u8; 4] = b"TSDF";
const OCCUPANCY_MAGIC: &[u8; 4] = b"OCCG";
const VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FormatError::Malformed("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<([usize; 3], f64, Vector3<f64>), FormatError> {
        let m: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if &m != magic {
            return Err(FormatError::BadMagic(m));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(FormatError::Version(version));
        }
        let dims = [
            self.u32()? as usize,
            self.u32()? as usize,
            self.u32()? as usize,
        ];
        let voxel = self.f64()?;
        let origin = Vector3::new(self.f64()?, self.f64()?, self.f64()?);
        Ok((dims, voxel, origin))
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn header_bytes(magic: &[u8; 4], dims: [usize; 3], voxel: f64, origin: &Vector3<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(60);
    out.extend_from_slice(magic);
    put_u32(&mut out, VERSION);
    for d in dims {
        put_u32(&mut out, d as u32);
    }
    put_f64(&mut out, voxel);
    for a in 0..3 {
        put_f64(&mut out, origin[a]);
    }
    out
}

pub fn write_volume<W: Write>(mut w: W, volume: &TsdfVolume) -> std::io::Result<()> {
    let mut out = header_bytes(VOLUME_MAGIC, volume.dims, volume.voxel_size, &volume.origin);
    put_f64(&mut out, volume.truncation);
    out.reserve(volume.len() * 8);
    for &t in &volume.tsdf {
        out.extend_from_slice(&(t as f32).to_le_bytes());
    }
    for &wt in &volume.weight {
        out.extend_from_slice(&(wt as f32).to_le_bytes());
    }
    w.write_all(&out)
}

pub fn read_volume<R: Read>(mut r: R) -> Result<TsdfVolume, FormatError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let (dims, voxel_size, origin) = c.header(VOLUME_MAGIC)?;
    let truncation = c.f64()?;
    let mut volume = TsdfVolume::new(&super::VolumeParams {
        origin: [origin.x, origin.y, origin.z],
        voxel_size,
        dims,
        truncation: Some(truncation),
        max_weight: DEFAULT_MAX_WEIGHT,
    })?;
    let n = volume.len();
    let floats = |c: &mut Cursor| -> Result<Vec<f64>, FormatError> {
        Ok(c.take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect())
    };
    volume.tsdf = floats(&mut c)?;
    volume.weight = floats(&mut c)?;
    c.finish()?;
    if volume.tsdf.iter().any(|t| !(t.abs() <= 1.0)) || volume.weight.iter().any(|w| !(*w >= 0.0)) {
        return Err(FormatError::Malformed(
            "tsdf outside [-1, 1] or negative weight".into(),
        ));
    }
    Ok(volume)
}

pub fn write_occupancy<W: Write>(mut w: W, grid: &OccupancyGrid) -> std::io::Result<()> {
    let mut out = header_bytes(OCCUPANCY_MAGIC, grid.dims, grid.voxel_size, &grid.origin);
    out.extend(grid.occupied.iter().map(|&o| u8::from(o)));
    w.write_all(&out)
}

pub fn read_occupancy<R: Read>(mut r: R) -> Result<OccupancyGrid, FormatError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let (dims, voxel_size, origin) = c.header(OCCUPANCY_MAGIC)?;
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(FormatError::Malformed("voxel_size must be > 0".into()));
    }
    let n: usize = dims.iter().product();
    let occupied = c
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(FormatError::Malformed(format!("occupancy byte {other}"))),
        })
        .collect::<Result<_, _>>()?;
    c.finish()?;
    Ok(OccupancyGrid {
        origin,
        voxel_size,
        dims,
        occupied,
    })
}

/// JSON sidecar next to every depth image (`frame.png` -> `frame.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthSidecar {
    pub frame_id: u32,
    pub pose: PoseRecord,
}

pub fn sidecar_path(depth: &Path) -> PathBuf {
    depth.with_extension("json")
}

/// 16-bit grayscale PNG holding millimeters; 0 is invalid.
pub fn read_depth_png(path: &Path) -> Result<(Vec<f32>, u32, u32), FormatError> {
    let img = image::open(path)?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    Ok((
        gray.pixels().map(|p| p.0[0] as f32 / 1000.0).collect(),
        w,
        h,
    ))
}

/// Rounds to the nearest millimeter; depths beyond 65.535 m saturate.
pub fn write_depth_png(
    path: &Path,
    depth: &[f32],
    width: u32,
    height: u32,
) -> Result<(), FormatError> {
    let data: Vec<u16> = depth
        .iter()
        .map(|d| (d * 1000.0).round().clamp(0.0, u16::MAX as f32) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width, height, data)
        .ok_or_else(|| FormatError::Malformed("depth size does not match image".into()))?;
    img.save(path)?;
    Ok(())
}

/// Raw little-endian `f32` meters, row-major; size comes from the sidecar pose.
pub fn read_depth_raw(path: &Path) -> Result<Vec<f32>, FormatError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(FormatError::Malformed(
            "raw depth length not a multiple of 4".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

pub fn write_depth_raw(path: &Path, depth: &[f32]) -> std::io::Result<()> {
    let bytes: Vec<u8> = depth.iter().flat_map(|d| d.to_le_bytes()).collect();
    std::fs::write(path, bytes)
}

/// Loads `path` (`.png` millimeters or `.f32` raw meters) plus its sidecar.
pub fn load_depth_frame(path: &Path) -> Result<DepthFrame, FormatError> {
    let sidecar: DepthSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let pose =
        CameraPose::try_from(sidecar.pose).map_err(|e| FusionError::GridMismatch(e.to_string()))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let depth = match ext.as_str() {
        "png" => {
            let (d, w, h) = read_depth_png(path)?;
            if (w, h) != (pose.image_size.width, pose.image_size.height) {
                return Err(FusionError::GridMismatch(format!(
                    "png is {w}x{h}, pose says {}x{}",
                    pose.image_size.width, pose.image_size.height
                ))
                .into());
            }
            d
        }
        "f32" | "raw" => read_depth_raw(path)?,
        other => {
            return Err(FormatError::Malformed(format!(
                "unknown depth extension `{other}`"
            )))
        }
    };
    Ok(DepthFrame::new(depth, pose, sidecar.frame_id)?)
}
