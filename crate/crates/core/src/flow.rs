//! Optical-flow statistics for telling object motion from camera motion,
//! and reference-frame choice for 4D generation.
//!
//! Flow fields are inputs; computing them is out of scope. A static camera
//! watching a moving object produces mostly zero flow (white in the usual
//! color coding) with a small moving region. A pan or dolly moves every pixel
//! the same way, which the uniformity statistic picks up.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("malformed flow file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense displacement field, row-major `height x width`, pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub frame_index: u32,
}

impl FlowField {
    pub fn new(
        width: usize,
        height: usize,
        u: Vec<f32>,
        v: Vec<f32>,
        frame_index: u32,
    ) -> Result<Self, FlowError> {
        let f = Self {
            width,
            height,
            u,
            v,
            frame_index,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn uniform(width: usize, height: usize, du: f32, dv: f32, frame_index: u32) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            u: vec![du; n],
            v: vec![dv; n],
            frame_index,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let n = self.width * self.height;
        if self.u.len() != n || self.v.len() != n {
            return Err(FlowError::ShapeMismatch(format!(
                "{}x{} field with {} u and {} v samples",
                self.width,
                self.height,
                self.u.len(),
                self.v.len()
            )));
        }
        if !self.u.iter().chain(&self.v).all(|x| x.is_finite()) {
            return Err(FlowError::ShapeMismatch("non-finite flow value".into()));
        }
        Ok(())
    }

    pub fn magnitude(&self, idx: usize) -> f64 {
        (self.u[idx] as f64).hypot(self.v[idx] as f64)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u.len();
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|i| self.magnitude(i)).sum::<f64>() / n as f64
    }
}

/// Boolean dynamic-object mask aligned with a flow field.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFrame {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub frame_index: u32,
}

impl MaskFrame {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub mean_magnitude: f64,
    /// Fraction of pixels with magnitude `< eps_static`.
    pub static_fraction: f64,
    /// Fraction of pixels with magnitude `> eps_dyn`.
    pub dynamic_fraction: f64,
    /// Length of the summed unit flow directions over moving pixels
    /// (magnitude `>= eps_static`), divided by the total pixel count.
    /// 1 for a pan, about the moving fraction for one coherent object,
    /// near 0 for incoherent motion.
    pub uniformity: f64,
}

pub fn flow_stats(flow: &FlowField, eps_static: f64, eps_dyn: f64) -> Result<FlowStats, FlowError> {
    flow.validate()?;
    if !(eps_static >= 0.0 && eps_static <= eps_dyn) {
        return Err(FlowError::InvalidThresholds(format!(
            "need 0 <= eps_static ({eps_static}) <= eps_dyn ({eps_dyn})"
        )));
    }
    let n = flow.u.len();
    if n == 0 {
        return Err(FlowError::ShapeMismatch("empty flow field".into()));
    }
    let (mut sum, mut stat, mut dynm) = (0.0, 0usize, 0usize);
    let (mut dx, mut dy) = (0.0, 0.0);
    for i in 0..n {
        let m = flow.magnitude(i);
        sum += m;
        if m < eps_static {
            stat += 1;
        } else if m > 0.0 {
            dx += flow.u[i] as f64 / m;
            dy += flow.v[i] as f64 / m;
        }
        if m > eps_dyn {
            dynm += 1;
        }
    }
    let total = n as f64;
    Ok(FlowStats {
        mean_magnitude: sum / total,
        static_fraction: stat as f64 / total,
        dynamic_fraction: dynm as f64 / total,
        uniformity: (dx.hypot(dy) / total).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowPolicy {
    pub eps_static: f64,
    pub eps_dyn: f64,
    pub min_static: f64,
    pub min_dynamic: f64,
    pub max_uniformity: f64,
}

impl Default for FlowPolicy {
    fn default() -> Self {
        Self {
            eps_static: 0.5,
            eps_dyn: 1.0,
            min_static: 0.6,
            min_dynamic: 0.02,
            max_uniformity: 0.8,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalVerdict {
    pub accepted: bool,
    pub score: f64,
    pub median_static: f64,
    pub median_dynamic: f64,
    pub median_uniformity: f64,
}

/// Accepts a clip as object-motion-only when its median frame is mostly
/// static, has some dynamic pixels and is not dominated by one direction.
/// Score is `median dynamic * median static`.
pub fn is_temporal_variant(
    stats: &[FlowStats],
    policy: &FlowPolicy,
) -> Result<TemporalVerdict, FlowError> {
    if stats.is_empty() {
        return Err(FlowError::EmptySequence);
    }
    let ms = median(stats.iter().map(|s| s.static_fraction).collect());
    let md = median(stats.iter().map(|s| s.dynamic_fraction).collect());
    let mu = median(stats.iter().map(|s| s.uniformity).collect());
    Ok(TemporalVerdict {
        accepted: ms >= policy.min_static
            && md >= policy.min_dynamic
            && mu <= policy.max_uniformity,
        score: md * ms,
        median_static: ms,
        median_dynamic: md,
        median_uniformity: mu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceWeights {
    pub w_mask: f64,
    pub w_flow: f64,
}

impl Default for ReferenceWeights {
    fn default() -> Self {
        Self {
            w_mask: 0.5,
            w_flow: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceChoice {
    pub index: usize,
    pub scores: Vec<f64>,
    /// Set when every score was 0 and frame 0 was returned by default.
    pub all_zero: bool,
}

/// Per-frame scores `w_mask * area / max area + w_flow * mean flow / max mean
/// flow`; a term whose maximum is 0 contributes 0.
pub fn reference_scores(
    masks: &[MaskFrame],
    flows: &[FlowField],
    weights: &ReferenceWeights,
) -> Result<Vec<f64>, FlowError> {
    if masks.is_empty() || flows.is_empty() {
        return Err(FlowError::EmptySequence);
    }
    if masks.len() != flows.len() {
        return Err(FlowError::ShapeMismatch(format!(
            "{} masks for {} flow fields",
            masks.len(),
            flows.len()
        )));
    }
    for (m, f) in masks.iter().zip(flows) {
        if (m.width, m.height) != (f.width, f.height) || m.mask.len() != m.width * m.height {
            return Err(FlowError::ShapeMismatch(format!(
                "mask {} does not match its flow",
                m.frame_index
            )));
        }
    }
    let areas: Vec<f64> = masks.iter().map(|m| m.area() as f64).collect();
    let mags: Vec<f64> = flows.iter().map(FlowField::mean_magnitude).collect();
    let norm = |xs: &[f64]| {
        let max = xs.iter().copied().fold(0.0, f64::max);
        xs.iter()
            .map(|x| if max > 0.0 { x / max } else { 0.0 })
            .collect::<Vec<_>>()
    };
    let (na, nm) = (norm(&areas), norm(&mags));
    Ok(na
        .iter()
        .zip(&nm)
        .map(|(a, m)| weights.w_mask * a + weights.w_flow * m)
        .collect())
}

/// Argmax of [`reference_scores`], lowest index on ties.
pub fn select_reference_frame(
    masks: &[MaskFrame],
    flows: &[FlowField],
    weights: &ReferenceWeights,
) -> Result<ReferenceChoice, FlowError> {
    let scores = reference_scores(masks, flows, weights)?;
    let mut index = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[index] {
            index = i;
        }
    }
    let all_zero = scores.iter().all(|s| *s == 0.0);
    Ok(ReferenceChoice {
        index,
        scores,
        all_zero,
    })
}

const FLO_TAG: f32 = 202021.25;

/// Middlebury `.flo`: tag, width, height, then interleaved `(u, v)` pairs.
pub fn write_flo<W: Write>(mut w: W, flow: &FlowField) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(12 + flow.u.len() * 8);
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&out)
}

pub fn read_flo<R: Read>(mut r: R, frame_index: u32) -> Result<FlowField, FlowError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 12 || &buf[..4] != b"PIEH" {
        return Err(FlowError::Malformed("missing PIEH tag".into()));
    }
    let int = |k: usize| i32::from_le_bytes(buf[k..k + 4].try_into().expect("4 bytes"));
    let (w, h) = (int(4), int(8));
    if w < 0 || h < 0 {
        return Err(FlowError::Malformed("negative dimensions".into()));
    }
    let (w, h) = (w as usize, h as usize);
    if buf.len() != 12 + w * h * 8 {
        return Err(FlowError::Malformed(format!(
            "{w}x{h} field needs {} bytes",
            12 + w * h * 8
        )));
    }
    let floats: Vec<f32> = buf[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let u = floats.iter().step_by(2).copied().collect();
    let v = floats.iter().skip(1).step_by(2).copied().collect();
    FlowField::new(w, h, u, v, frame_index)
}

/// Sidecar for raw flow files: the `u` plane then the `v` plane, f32 LE.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFlowSidecar {
    pub width: usize,
    pub height: usize,
    pub frame_index: u32,
}

pub fn read_raw_flow(path: &Path) -> Result<FlowField, FlowError> {
    let side: RawFlowSidecar =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    let bytes = std::fs::read(path)?;
    let n = side.width * side.height;
    if bytes.len() != n * 8 {
        return Err(FlowError::Malformed(format!(
            "raw flow needs {} bytes",
            n * 8
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    FlowField::new(
        side.width,
        side.height,
        floats[..n].to_vec(),
        floats[n..].to_vec(),
        side.frame_index,
    )
}

/// 8-bit (or any) PNG; nonzero luma marks dynamic pixels.
pub fn read_mask_png(path: &Path, frame_index: u32) -> Result<MaskFrame, FlowError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(MaskFrame {
        width: w as usize,
        height: h as usize,
        mask: img.pixels().map(|p| p.0[0] > 0).collect(),
        frame_index,
    })
}

pub fn write_mask_png(path: &Path, mask: &MaskFrame) -> Result<(), FlowError> {
    let data: Vec<u8> = mask.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, data)
        .ok_or_else(|| FlowError::ShapeMismatch("mask size".into()))?;
    img.save(path)?;
    Ok(())
}

/// Static background with a `side x side` square moving by `(du, dv)`.
pub fn moving_square(
    width: usize,
    height: usize,
    side: usize,
    at: (usize, usize),
    du: f32,
    dv: f32,
    frame_index: u32,
) -> (FlowField, MaskFrame) {
    let mut flow = FlowField::uniform(width, height, 0.0, 0.0, frame_index);
    let mut mask = vec![false; width * height];
    for y in at.1..(at.1 + side).min(height) {
        for x in at.0..(at.0 + side).min(width) {
            flow.u[y * width + x] = du;
            flow.v[y * width + x] = dv;
            mask[y * width + x] = true;
        }
    }
    (
        flow,
        MaskFrame {
            width,
            height,
            mask,
            frame_index,
        },
    )
}
