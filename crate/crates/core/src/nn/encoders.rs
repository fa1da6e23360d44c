//! Encoder stacks: the strided convolutional subsampler, the Conformer
//! audio encoder and the ViT token encoder.

use super::graph::{Graph, Var};
use super::layers::{ConformerBlock, EncoderConfig, LayerNorm, Linear, SeqLayout, TransformerBlock};
use super::params::{Init, ParamTree};
use super::posenc;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Frames removed per output step by the audio subsampler.
pub const SUBSAMPLE_STRIDE: usize = 4;

/// Output length of a stride-`stride` convolution with "same" padding.
pub fn same_output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Left padding of a "same" convolution (the extra frame, if any, goes right).
pub fn same_pad_left(len: usize, kernel: usize, stride: usize) -> usize {
    let out = same_output_len(len, stride);
    let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(len);
    total / 2
}

/// Im2col index for a strided 1-D convolution over each example's rows.
pub fn conv_windows(batch: usize, len: usize, kernel: usize, stride: usize) -> Vec<Option<usize>> {
    let out = same_output_len(len, stride);
    let pad = same_pad_left(len, kernel, stride) as isize;
    let mut idx = Vec::with_capacity(batch * out * kernel);
    for b in 0..batch {
        for o in 0..out {
            for j in 0..kernel {
                let src = (o * stride) as isize + j as isize - pad;
                idx.push((src >= 0 && src < len as isize).then(|| b * len + src as usize));
            }
        }
    }
    idx
}

/// Tiles a `[len, dim]` table `batch` times and converts it to `T`.
pub fn tile_rows<T: Scalar>(table: &Tensor<f64>, batch: usize) -> Tensor<T> {
    let (len, dim) = (table.rows(), table.cols());
    let mut data = Vec::with_capacity(batch * len * dim);
    for _ in 0..batch {
        data.extend(table.data().iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::from_vec(&[batch * len, dim], data)
}

/// Strided 1-D convolution over LFBE frames: `[batch*T, F]` becomes
/// `[batch*ceil(T/stride), dim]`.
#[derive(Clone, Debug)]
pub struct ConvSubsample {
    pub proj: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub n_mels: usize,
}

impl ConvSubsample {
    pub fn new(
        tree: &mut ParamTree<f32>,
        init: &Init,
        path: &str,
        n_mels: usize,
        dim: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Validation("subsample kernel and stride must be positive".into()));
        }
        Ok(Self {
            proj: Linear::new(tree, init, path, kernel * n_mels, dim)?,
            kernel,
            stride,
            n_mels,
        })
    }

    pub fn output_len(&self, frames: usize) -> usize {
        same_output_len(frames, self.stride)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        frames: Var,
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let (rows, f) = g.shape(frames);
        if rows != batch * len || f != self.n_mels {
            return Err(Error::Shape(format!(
                "subsample expects [{}x{}, {}] frames, got [{rows}, {f}]",
                batch, len, self.n_mels
            )));
        }
        let windows = g.gather(frames, conv_windows(batch, len, self.kernel, self.stride), self.kernel);
        self.proj.forward(g, p, windows)
    }
}

/// Stack of Conformer blocks; length-preserving.
#[derive(Clone, Debug)]
pub struct ConformerEncoder {
    pub blocks: Vec<ConformerBlock>,
    pub dim: usize,
}

impl ConformerEncoder {
    pub fn new(tree: &mut ParamTree<f32>, init: &Init, path: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate(path, true)?;
        let blocks = (0..cfg.layers)
            .map(|i| ConformerBlock::new(tree, init, &format!("{path}.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, dim: cfg.dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamTree<T>, x: Var, layout: &SeqLayout) -> Result<Var> {
        let (rows, d) = g.shape(x);
        if rows != layout.rows() || d != self.dim || layout.len == 0 {
            return Err(Error::Shape(format!(
                "conformer expects [{}, {}], got [{rows}, {d}]",
                layout.rows(),
                self.dim
            )));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, p, h, layout)?;
        }
        Ok(h)
    }
}

/// Stack of pre-norm transformer blocks with a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl TransformerStack {
    pub fn new(
        tree: &mut ParamTree<f32>,
        init: &Init,
        path: &str,
        cfg: &EncoderConfig,
        with_cross: bool,
    ) -> Result<Self> {
        cfg.validate(path, false)?;
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(tree, init, &format!("{path}.{i}"), cfg, with_cross))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(tree, init, &format!("{path}.ln"), cfg.dim)?,
            dim: cfg.dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        x: Var,
        layout: &SeqLayout,
        causal: bool,
        memory: Option<(Var, &SeqLayout)>,
    ) -> Result<Var> {
        let (rows, d) = g.shape(x);
        if rows != layout.rows() || d != self.dim || layout.len == 0 {
            return Err(Error::Shape(format!(
                "transformer expects [{}, {}], got [{rows}, {d}]",
                layout.rows(),
                self.dim
            )));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, p, h, layout, causal, memory)?;
        }
        self.norm.forward(g, p, h)
    }
}

/// ViT encoder over flattened tokens: linear embedding, additive positional
/// table, transformer blocks.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    pub embed: Linear,
    pub stack: TransformerStack,
}

impl VitEncoder {
    pub fn new(
        tree: &mut ParamTree<f32>,
        init: &Init,
        path: &str,
        token_dim: usize,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        Ok(Self {
            embed: Linear::new(tree, init, &format!("{path}.embed"), token_dim, cfg.dim)?,
            stack: TransformerStack::new(tree, init, &format!("{path}.blocks"), cfg, false)?,
        })
    }

    /// Embeds raw tokens and adds `positions` (one row per token row).
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        tokens: Var,
        positions: Tensor<T>,
    ) -> Result<Var> {
        let e = self.embed.forward(g, p, tokens)?;
        if positions.rows() != g.shape(e).0 || positions.cols() != g.shape(e).1 {
            return Err(Error::Shape("positional table does not match token rows".into()));
        }
        let pos = g.constant(positions);
        Ok(g.add(e, pos))
    }

    pub fn encode_embedded<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        x: Var,
        layout: &SeqLayout,
    ) -> Result<Var> {
        self.stack.forward(g, p, x, layout, false, None)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        tokens: Var,
        positions: Tensor<T>,
        layout: &SeqLayout,
    ) -> Result<Var> {
        let x = self.embed(g, p, tokens, positions)?;
        self.encode_embedded(g, p, x, layout)
    }
}

/// 1-D sinusoidal table tiled over a batch.
pub fn positions_1d<T: Scalar>(batch: usize, len: usize, dim: usize) -> Result<Tensor<T>> {
    Ok(tile_rows(&posenc::sinusoidal_1d(len, dim)?, batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousand_frames_subsample_to_250() {
        assert_eq!(same_output_len(1000, SUBSAMPLE_STRIDE), 250);
        assert_eq!(same_pad_left(1000, 4, 4), 0);
    }

    #[test]
    fn same_padding_arithmetic_for_17_frames() {
        // ceil(17/4) = 5 outputs; a kernel-4 window at stride 4 over 5 outputs
        // spans 20 frames, so 3 frames of padding: 1 left, 2 right.
        assert_eq!(same_output_len(17, 4), 5);
        assert_eq!(same_pad_left(17, 4, 4), 1);
        let idx = conv_windows(1, 17, 4, 4);
        assert_eq!(idx.len(), 20);
        assert_eq!(&idx[..4], &[None, Some(0), Some(1), Some(2)]);
        assert_eq!(&idx[16..], &[Some(15), Some(16), None, None]);
    }

    #[test]
    fn windows_stay_inside_each_example() {
        let idx = conv_windows(2, 8, 4, 4);
        assert_eq!(idx[8..12], [Some(8), Some(9), Some(10), Some(11)]);
    }
}
