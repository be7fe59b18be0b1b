//! Fixed (non-learned) embeddings and the latent <-> token rearrangement.

use crate::tensor::Tensor;

use super::ModelError;

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal timestep features `[sin(t·f_0..), cos(t·f_0..)]`, length `dim`.
pub fn timestep_features(t: f64, dim: usize) -> Result<Tensor, ModelError> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(ModelError::Config(format!(
            "frequency embedding width must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(Tensor::from_vec(out))
}

fn sincos_1d(dim: usize, positions: &[f64]) -> Vec<Vec<f64>> {
    let half = dim / 2;
    positions
        .iter()
        .map(|&p| {
            let mut row = vec![0.0; dim];
            for i in 0..half {
                let omega = 1.0 / MAX_PERIOD.powf(i as f64 / half as f64);
                row[i] = (p * omega).sin();
                row[half + i] = (p * omega).cos();
            }
            row
        })
        .collect()
}

/// 2-D sinusoidal positional embedding for a `grid_h × grid_w` token grid,
/// row-major token order. First half of each vector encodes the row
/// coordinate, second half the column. Coordinates are scaled by
/// `base_grid / grid` per axis so every grid spans the same coordinate range.
pub fn pos_embed_2d(hidden: usize, grid_h: usize, grid_w: usize, base_grid: usize) -> Tensor {
    let half = hidden / 2;
    let ys: Vec<f64> = (0..grid_h)
        .map(|i| i as f64 * base_grid as f64 / grid_h as f64)
        .collect();
    let xs: Vec<f64> = (0..grid_w)
        .map(|j| j as f64 * base_grid as f64 / grid_w as f64)
        .collect();
    let (ey, ex) = (sincos_1d(half, &ys), sincos_1d(half, &xs));
    let mut data = Vec::with_capacity(grid_h * grid_w * hidden);
    for row in &ey {
        for col in &ex {
            data.extend_from_slice(row);
            data.extend_from_slice(col);
        }
    }
    Tensor::new(&[grid_h * grid_w, hidden], data).expect("grid dims positive")
}

/// Flat source index of each `(token, c, dy, dx)` entry, row-major over the
/// token grid and `(c, dy, dx)` within a patch.
pub fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>, ModelError> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(ModelError::Shape(format!(
            "latent {h}x{w} is not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(c * h * w);
    for ty in 0..gh {
        for tx in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        index.push(ch * h * w + (ty * p + dy) * w + tx * p + dx);
                    }
                }
            }
        }
    }
    Ok(index)
}

fn latent_dims(latent: &Tensor) -> Result<(usize, usize, usize), ModelError> {
    match *latent.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(ModelError::Shape(format!(
            "expected a [C, H, W] latent, got {s:?}"
        ))),
    }
}

/// `[C, H, W]` → `[(H/p)·(W/p), C·p·p]`.
pub fn patchify(latent: &Tensor, p: usize) -> Result<Tensor, ModelError> {
    let (c, h, w) = latent_dims(latent)?;
    let index = patch_index(c, h, w, p)?;
    let data = index.iter().map(|&i| latent.data()[i]).collect();
    Ok(Tensor::new(&[(h / p) * (w / p), c * p * p], data)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Tensor, ModelError> {
    let index = patch_index(c, h, w, p)?;
    if tokens.numel() != index.len() {
        return Err(ModelError::Shape(format!(
            "{:?} tokens cannot fill a {c}x{h}x{w} latent",
            tokens.shape()
        )));
    }
    let mut out = vec![0.0; c * h * w];
    for (&dst, &v) in index.iter().zip(tokens.data()) {
        out[dst] = v;
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}
