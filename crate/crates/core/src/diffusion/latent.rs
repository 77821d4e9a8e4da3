use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::DiffusionError;
use crate::rng::normal_vec;

const MAGIC: &[u8; 4] = b"LATV";
const VERSION: u32 = 1;

/// Dense `[frames, channels, height, width]` tensor, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self, DiffusionError> {
        if shape[0] == 0 {
            return Err(DiffusionError::ShapeMismatch(
                "latent needs at least one frame".into(),
            ));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(DiffusionError::ShapeMismatch(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(DiffusionError::ShapeMismatch(
                "latent contains non-finite values".into(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Standard normal entries from random stream `(seed, stream)`.
    pub fn randn(shape: [usize; 4], seed: u64, stream: u64) -> Self {
        Self {
            shape,
            data: normal_vec(seed, stream, shape.iter().product()),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    /// Elements per frame (`C * H * W`).
    pub fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn check_same_shape(&self, other: &LatentVideo, what: &str) -> Result<(), DiffusionError> {
        if self.shape != other.shape {
            return Err(DiffusionError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(
        &self,
        a: f64,
        other: &LatentVideo,
        b: f64,
    ) -> Result<LatentVideo, DiffusionError> {
        self.check_same_shape(other, "linear combination")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentVideo {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Concatenates along the frame axis.
    pub fn concat_frames(parts: &[&LatentVideo]) -> Result<LatentVideo, DiffusionError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffusionError::ShapeMismatch("nothing to concatenate".into()))?;
        let inner = &first.shape[1..];
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if &p.shape[1..] != inner {
                return Err(DiffusionError::ShapeMismatch(format!(
                    "frame shape {:?} vs {:?}",
                    &p.shape[1..],
                    inner
                )));
            }
            frames += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: [frames, inner[0], inner[1], inner[2]],
            data,
        })
    }

    /// Frames `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> LatentVideo {
        let n = self.frame_len();
        Self {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Rounds every entry to the nearest `f32`, matching what a latent file stores.
    pub fn to_f32_precision(&self) -> LatentVideo {
        self.map(|x| x as f32 as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<LatentVideo, DiffusionError> {
        if buf.len() < 24 || &buf[..4] != MAGIC {
            return Err(DiffusionError::Malformed("missing LATV header".into()));
        }
        let word = |k: usize| u32::from_le_bytes(buf[k..k + 4].try_into().expect("4 bytes"));
        if word(4) != VERSION {
            return Err(DiffusionError::Malformed(format!(
                "unsupported version {}",
                word(4)
            )));
        }
        let shape = [
            word(8) as usize,
            word(12) as usize,
            word(16) as usize,
            word(20) as usize,
        ];
        let n: usize = shape.iter().product();
        if buf.len() != 24 + n * 4 {
            return Err(DiffusionError::Malformed(format!(
                "shape {shape:?} needs {} bytes",
                24 + n * 4
            )));
        }
        let data = buf[24..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        LatentVideo::new(shape, data)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<LatentVideo, DiffusionError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// SHA-256 of the file encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
