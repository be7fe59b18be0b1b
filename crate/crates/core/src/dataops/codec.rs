use std::fs;
use std::path::Path;

use crate::tensor::Tensor;

use super::{DataError, Result};

/// Pixel ↔ latent mapping. Images and latents are `[C, H, W]`.
pub trait LatentCodec {
    fn downsample(&self) -> usize;
    fn latent_channels(&self, image_channels: usize) -> usize;
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<Tensor>;
}

/// Exact space-to-depth: each `f×f` pixel patch becomes `C·f²` channels, so
/// decoding is the bitwise inverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpaceToDepth {
    pub factor: usize,
}

impl Default for SpaceToDepth {
    fn default() -> Self {
        Self { factor: 8 }
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(DataError::Codec(format!(
            "{what} must be [C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

impl LatentCodec for SpaceToDepth {
    fn downsample(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels * self.factor * self.factor
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let f = self.factor;
        let (c, h, w) = dims3(image, "image")?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(DataError::Codec(format!(
                "image {h}x{w} is not divisible by the factor {f}"
            )));
        }
        let (lh, lw) = (h / f, w / f);
        let src = image.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let lc = (ch * f + y % f) * f + x % f;
                    out[(lc * lh + y / f) * lw + x / f] = src[(ch * h + y) * w + x];
                }
            }
        }
        Ok(Tensor::new(&[c * f * f, lh, lw], out)?)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let f = self.factor;
        let (lc, lh, lw) = dims3(latent, "latent")?;
        if f == 0 || lc % (f * f) != 0 {
            return Err(DataError::Codec(format!(
                "{lc} latent channels do not split into {f}x{f} patches"
            )));
        }
        let (c, h, w) = (lc / (f * f), lh * f, lw * f);
        let src = latent.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let k = (ch * f + y % f) * f + x % f;
                    out[(ch * h + y) * w + x] = src[(k * lh + y / f) * lw + x / f];
                }
            }
        }
        Ok(Tensor::new(&[c, h, w], out)?)
    }
}

/// Lossy stand-in: space-to-depth followed by rounding to a fixed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizingCodec {
    pub inner: SpaceToDepth,
    pub step: f64,
}

impl LatentCodec for QuantizingCodec {
    fn downsample(&self) -> usize {
        self.inner.downsample()
    }

    fn latent_channels(&self, image_channels: usize) -> usize {
        self.inner.latent_channels(image_channels)
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let step = self.step;
        Ok(self.inner.encode(image)?.map(|v| (v / step).round() * step))
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.inner.decode(latent)
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"PXTN";

/// Raw tensor file: magic, u32 ndim, u64 dims, f64 values (little-endian).
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 8 * t.shape().len() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| DataError::Codec(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("not a tensor file"));
    }
    let ndim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| {
            u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize
        })
        .collect();
    let body = &bytes[header..];
    if body.len() % 8 != 0 {
        return Err(bad("ragged body"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))
}
