//! Reconstruction losses: confidence-weighted L1, SSIM, total variation,
//! and the two composite objectives built from them.
//!
//! SSIM uses a valid-mode Gaussian window (no padding): the local map has
//! `(H - w + 1) x (W - w + 1)` entries per channel, each centered on pixel
//! `(row + w / 2, col + w / 2)`. Confidence weights a map entry by the value at
//! that center pixel. SSIM enters as the loss `1 - SSIM`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{LAMBDA_L1, LAMBDA_LPIPS, LAMBDA_SSIM};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_SSIM_WINDOW: usize = 11;
pub const DEFAULT_SSIM_SIGMA: f64 = 1.5;

#[derive(Error, Debug)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {width}x{height} is smaller than {needed}x{needed}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        needed: usize,
    },
    #[error("invalid pixel data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// RGB image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Rejects non-finite values and values outside `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if data.len() != width * height * 3 {
            return Err(LossError::ShapeMismatch(format!(
                "{width}x{height}x3 image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LossError::InvalidData(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Like [`Self::new`] but clamps into `[0, 1]`; only non-finite values fail.
    pub fn new_clamped(width: usize, height: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidData("non-finite pixel value".into()));
        }
        Self::new(
            width,
            height,
            data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.data[(row * self.width + col) * 3 + ch] = value;
    }

    /// Loads an 8- or 16-bit PNG (any color type) as RGB.
    pub fn from_png(path: &Path) -> Result<Self, LossError> {
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = img.dimensions();
        Self::new_clamped(
            w as usize,
            h as usize,
            img.into_raw().into_iter().map(f64::from).collect(),
        )
    }

    pub fn write_png(&self, path: &Path) -> Result<(), LossError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| LossError::ShapeMismatch("image size".into()))?
            .save(path)?;
        Ok(())
    }
}

/// Per-pixel nonnegative weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    width: usize,
    height: usize,
    conf: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, conf: Vec<f64>) -> Result<Self, LossError> {
        if conf.len() != width * height {
            return Err(LossError::ShapeMismatch(format!(
                "{width}x{height} confidence needs {} values, got {}",
                width * height,
                conf.len()
            )));
        }
        if let Some(bad) = conf.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(LossError::InvalidData(format!(
                "confidence {bad} must be finite and >= 0"
            )));
        }
        Ok(Self {
            width,
            height,
            conf,
        })
    }

    pub fn uniform(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            conf: vec![value; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.conf[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.conf.iter().sum::<f64>() / self.conf.len() as f64
    }

    /// Grayscale PNG scaled to `[0, 1]`, or raw little-endian `f32` values
    /// (`.f32`/`.raw`) for an image of the given size.
    pub fn load(path: &Path, width: usize, height: usize) -> Result<Self, LossError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        let conf = if ext == "f32" || ext == "raw" {
            let bytes = std::fs::read(path)?;
            if bytes.len() != width * height * 4 {
                return Err(LossError::ShapeMismatch(format!(
                    "raw confidence has {} bytes, expected {}",
                    bytes.len(),
                    width * height * 4
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect()
        } else {
            let img = image::open(path)?.to_luma32f();
            if (img.width() as usize, img.height() as usize) != (width, height) {
                return Err(LossError::ShapeMismatch(
                    "confidence size differs from images".into(),
                ));
            }
            img.into_raw().into_iter().map(f64::from).collect()
        };
        Self::new(width, height, conf)
    }
}

fn same_shape(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), LossError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(LossError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn conf_shape(img: &ImageBuffer, conf: Option<&ConfidenceMap>) -> Result<(), LossError> {
    if let Some(c) = conf {
        if (c.width, c.height) != (img.width, img.height) {
            return Err(LossError::ShapeMismatch(
                "confidence map size differs from image".into(),
            ));
        }
    }
    Ok(())
}

/// Mean over all `H * W * 3` values of `conf * |pred - gt|`; missing
/// confidence counts as 1.
pub fn l1_loss(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    conf: Option<&ConfidenceMap>,
) -> Result<f64, LossError> {
    same_shape(pred, gt)?;
    conf_shape(pred, conf)?;
    let mut sum = 0.0;
    for (i, (p, g)) in pred.data.iter().zip(&gt.data).enumerate() {
        let c = conf.map_or(1.0, |c| c.conf[i / 3]);
        sum += c * (p - g).abs();
    }
    Ok(sum / pred.data.len() as f64)
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|k| (-(k as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Valid-mode separable filter of one `h x w` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Local SSIM maps, one per channel, each `(H - w + 1) x (W - w + 1)`.
pub fn ssim_map(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    window: usize,
    sigma: f64,
) -> Result<Vec<Vec<f64>>, LossError> {
    same_shape(pred, gt)?;
    if window == 0 || pred.width < window || pred.height < window {
        return Err(LossError::ImageTooSmall {
            width: pred.width,
            height: pred.height,
            needed: window,
        });
    }
    let taps = gaussian_window(window, sigma);
    let (w, h) = (pred.width, pred.height);
    let plane = |img: &ImageBuffer, ch: usize| -> Vec<f64> {
        (0..w * h).map(|i| img.data[i * 3 + ch]).collect()
    };
    let mut maps = Vec::with_capacity(3);
    for ch in 0..3 {
        let (x, y) = (plane(pred, ch), plane(gt, ch));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &taps));
        maps.push(
            (0..mx.len())
                .map(|i| {
                    let (ux, uy) = (mx[i], my[i]);
                    let vx = sxx[i] - ux * ux;
                    let vy = syy[i] - uy * uy;
                    let cov = sxy[i] - ux * uy;
                    ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
                })
                .collect(),
        );
    }
    Ok(maps)
}

/// Mean over map entries and channels of `conf(center) * (1 - ssim)`.
pub fn ssim_loss(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    window: usize,
    sigma: f64,
    conf: Option<&ConfidenceMap>,
) -> Result<f64, LossError> {
    conf_shape(pred, conf)?;
    let maps = ssim_map(pred, gt, window, sigma)?;
    let ow = pred.width - window + 1;
    let half = window / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for map in &maps {
        for (i, s) in map.iter().enumerate() {
            let (row, col) = (i / ow + half, i % ow + half);
            let c = conf.map_or(1.0, |c| c.get(row, col));
            sum += c * (1.0 - s);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

fn tv_raw(data: &[f64], w: usize, h: usize) -> Result<f64, LossError> {
    if w < 2 || h < 2 {
        return Err(LossError::ImageTooSmall {
            width: w,
            height: h,
            needed: 2,
        });
    }
    let at = |r: usize, c: usize, ch: usize| data[(r * w + c) * 3 + ch];
    let (mut dx, mut dy) = (0.0, 0.0);
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w - 1 {
                dx += (at(r, c + 1, ch) - at(r, c, ch)).abs();
            }
        }
        for r in 0..h - 1 {
            for c in 0..w {
                dy += (at(r + 1, c, ch) - at(r, c, ch)).abs();
            }
        }
    }
    Ok(dx / (3 * h * (w - 1)) as f64 + dy / (3 * (h - 1) * w) as f64)
}

/// Mean absolute forward difference along x plus the same along y.
pub fn tv_loss(img: &ImageBuffer) -> Result<f64, LossError> {
    tv_raw(&img.data, img.width, img.height)
}

/// Stand-in for a learned perceptual metric.
pub trait PerceptualProvider {
    fn perceptual_loss(&self, pred: &ImageBuffer, gt: &ImageBuffer) -> f64;
}

/// Returns a fixed value; the default provider is `ConstantPerceptual(0.0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPerceptual(pub f64);

impl PerceptualProvider for ConstantPerceptual {
    fn perceptual_loss(&self, _pred: &ImageBuffer, _gt: &ImageBuffer) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    /// The published 3DGS weights; TV is unused there.
    fn default() -> Self {
        Self {
            l1: LAMBDA_L1,
            ssim: LAMBDA_SSIM,
            lpips: LAMBDA_LPIPS,
            tv: 0.0,
        }
    }
}

impl LossWeights {
    /// Unit weights on L1, TV and SSIM for the dynamic-scene objective.
    pub fn dynamic() -> Self {
        Self {
            l1: 1.0,
            ssim: 1.0,
            lpips: 0.0,
            tv: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if [self.l1, self.ssim, self.lpips, self.tv]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(LossError::InvalidData(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted term values.
    pub per_term: BTreeMap<String, f64>,
    pub weights: LossWeights,
}

/// `lambda_1 L1 + lambda_ssim L_ssim + lambda_lpips L_lpips`, each term
/// weighted by confidence. The perceptual score, a single number, is scaled
/// by the mean confidence.
pub fn confidence_weighted_loss(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    conf: &ConfidenceMap,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualProvider>,
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let l1 = l1_loss(pred, gt, Some(conf))?;
    let ssim = ssim_loss(
        pred,
        gt,
        DEFAULT_SSIM_WINDOW,
        DEFAULT_SSIM_SIGMA,
        Some(conf),
    )?;
    let lpips = perceptual.map_or(0.0, |p| p.perceptual_loss(pred, gt) * conf.mean());
    let total = weights.l1 * l1 + weights.ssim * ssim + weights.lpips * lpips;
    Ok(LossBreakdown {
        total,
        per_term: BTreeMap::from([
            ("l1".into(), l1),
            ("ssim".into(), ssim),
            ("lpips".into(), lpips),
        ]),
        weights: *weights,
    })
}

/// `L1 + L_tv + L_ssim` without confidence. The TV term is taken on the
/// residual `pred - gt`, so it penalizes structured error rather than image
/// content.
pub fn dynamic_scene_loss(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    same_shape(pred, gt)?;
    let l1 = l1_loss(pred, gt, None)?;
    let ssim = ssim_loss(pred, gt, DEFAULT_SSIM_WINDOW, DEFAULT_SSIM_SIGMA, None)?;
    let residual: Vec<f64> = pred.data.iter().zip(&gt.data).map(|(p, g)| p - g).collect();
    let tv = tv_raw(&residual, pred.width, pred.height)?;
    let total = weights.l1 * l1 + weights.tv * tv + weights.ssim * ssim;
    Ok(LossBreakdown {
        total,
        per_term: BTreeMap::from([("l1".into(), l1), ("tv".into(), tv), ("ssim".into(), ssim)]),
        weights: *weights,
    })
}
