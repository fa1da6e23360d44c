//! Sinusoidal positional embeddings.
//!
//! The 1-D table interleaves `sin(pos / 10000^(2i/d))` and
//! `cos(pos / 10000^(2i/d))`. The 3-D table for a `(t, h, w)` token grid
//! concatenates three 1-D tables, one per axis. Rows follow the voxel token
//! order: time-block major, then height, then width.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `[len, dim]` table; `dim` must be even.
pub fn sinusoidal_1d(len: usize, dim: usize) -> Result<Tensor<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "1-D positional dim must be even and nonzero, got {dim}"
        )));
    }
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
            let a = pos as f64 * freq;
            data.push(a.sin());
            data.push(a.cos());
        }
    }
    Ok(Tensor::from_vec(&[len, dim], data))
}

/// Per-axis widths `(t, h, w)` for a 3-D table of width `dim`: `h` and `w`
/// get `dim / 3` rounded down to even, `t` takes the remainder.
pub fn split_3d(dim: usize) -> Result<(usize, usize, usize)> {
    let base = (dim / 3) & !1;
    if !dim.is_multiple_of(2) || base < 2 {
        return Err(Error::Validation(format!(
            "3-D positional dim must be even and at least 6, got {dim}"
        )));
    }
    Ok((dim - 2 * base, base, base))
}

/// `[t*h*w, dim]` table for a grid of `(t, h, w)` token blocks.
pub fn sinusoidal_3d(grid: (usize, usize, usize), dim: usize) -> Result<Tensor<f64>> {
    let (gt, gh, gw) = grid;
    let (dt, dh, dw) = split_3d(dim)?;
    let et = sinusoidal_1d(gt, dt)?;
    let eh = sinusoidal_1d(gh, dh)?;
    let ew = sinusoidal_1d(gw, dw)?;
    let mut data = Vec::with_capacity(gt * gh * gw * dim);
    for t in 0..gt {
        for h in 0..gh {
            for w in 0..gw {
                data.extend_from_slice(et.row(t));
                data.extend_from_slice(eh.row(h));
                data.extend_from_slice(ew.row(w));
            }
        }
    }
    Ok(Tensor::from_vec(&[gt * gh * gw, dim], data))
}
