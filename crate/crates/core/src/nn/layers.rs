//! Parameterized building blocks. Each layer stores the paths of its
//! tensors in a [`ParamTree`] and records its forward pass on a [`Graph`].

use serde::{Deserialize, Serialize};

use super::graph::{AttentionSpec, Graph, Var};
use super::params::{Init, ParamTree};
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Size of a transformer-style encoder or decoder stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Depthwise convolution width (Conformer only; ignored by ViT stacks).
    pub conv_kernel: usize,
    pub ff_mult: usize,
}

impl EncoderConfig {
    pub fn validate(&self, what: &str, needs_conv: bool) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "{what}: dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if needs_conv && self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "{what}: conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if self.ff_mult == 0 {
            return Err(Error::Validation(format!("{what}: ff_mult must be positive")));
        }
        Ok(())
    }

    /// Desk-scale audio Conformer: 4 layers, 2 heads, width 64, kernel 7.
    pub fn desk_audio() -> Self {
        Self {
            layers: 4,
            heads: 2,
            dim: 64,
            conv_kernel: 7,
            ff_mult: 4,
        }
    }

    /// Desk-scale video ViT: 4 blocks, width 64.
    pub fn desk_video() -> Self {
        Self {
            layers: 4,
            heads: 2,
            dim: 64,
            conv_kernel: 0,
            ff_mult: 4,
        }
    }

    /// Desk-scale shared MAE decoder: 2 blocks, width 32.
    pub fn desk_decoder() -> Self {
        Self {
            layers: 2,
            heads: 2,
            dim: 32,
            conv_kernel: 0,
            ff_mult: 4,
        }
    }

    /// Full-size audio Conformer: 16 layers, 4 heads, kernel 31.
    pub fn paper_audio() -> Self {
        Self {
            layers: 16,
            heads: 4,
            dim: 256,
            conv_kernel: 31,
            ff_mult: 4,
        }
    }

    /// Full-size video encoder: 12 ViT blocks of width 768.
    pub fn paper_video() -> Self {
        Self {
            layers: 12,
            heads: 12,
            dim: 768,
            conv_kernel: 0,
            ff_mult: 4,
        }
    }

    /// Full-size decoder: 4 ViT blocks of width 512.
    pub fn paper_decoder() -> Self {
        Self {
            layers: 4,
            heads: 8,
            dim: 512,
            conv_kernel: 0,
            ff_mult: 4,
        }
    }
}

/// Batch layout of a stacked sequence tensor (`batch * len` rows).
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    /// Valid prefix length per example, if any example is padded.
    pub valid: Option<Vec<usize>>,
}

impl SeqLayout {
    pub fn new(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            valid: None,
        }
    }

    pub fn with_valid(batch: usize, len: usize, valid: Vec<usize>) -> Self {
        let valid = if valid.iter().all(|&v| v >= len) {
            None
        } else {
            Some(valid)
        };
        Self { batch, len, valid }
    }

    pub fn valid_len(&self, b: usize) -> usize {
        self.valid.as_ref().map_or(self.len, |v| v[b].min(self.len))
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(tree: &mut ParamTree<f32>, init: &Init, path: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = format!("{path}.w");
        let b = format!("{path}.b");
        init.weight(tree, &w, &[d_in, d_out])?;
        init.zeros(tree, &b, &[d_out])?;
        Ok(Self {
            w,
            b: Some(b),
            d_in,
            d_out,
        })
    }

    pub fn without_bias(tree: &mut ParamTree<f32>, init: &Init, path: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = format!("{path}.w");
        init.weight(tree, &w, &[d_in, d_out])?;
        Ok(Self {
            w,
            b: None,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamTree<T>, x: Var) -> Result<Var> {
        let w = g.param(p, &self.w)?;
        let y = g.matmul(x, w);
        match &self.b {
            Some(b) => {
                let b = g.param(p, b)?;
                Ok(g.add_row(y, b))
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn new(tree: &mut ParamTree<f32>, init: &Init, path: &str, dim: usize) -> Result<Self> {
        let gain = format!("{path}.g");
        let bias = format!("{path}.b");
        init.ones(tree, &gain, &[dim])?;
        init.zeros(tree, &bias, &[dim])?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamTree<T>, x: Var) -> Result<Var> {
        let gain = g.param(p, &self.gain)?;
        let bias = g.param(p, &self.bias)?;
        Ok(g.layer_norm(x, gain, bias))
    }
}

/// Multi-head attention with separate query/key/value/output projections.
/// The key projection has no bias: a shift shared by all keys cancels in
/// the softmax.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(tree: &mut ParamTree<f32>, init: &Init, path: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(tree, init, &format!("{path}.q"), dim, dim)?,
            k: Linear::without_bias(tree, init, &format!("{path}.k"), dim, dim)?,
            v: Linear::new(tree, init, &format!("{path}.v"), dim, dim)?,
            o: Linear::new(tree, init, &format!("{path}.o"), dim, dim)?,
            heads,
        })
    }

    pub fn self_attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        x: Var,
        layout: &SeqLayout,
        causal: bool,
    ) -> Result<Var> {
        let spec = AttentionSpec {
            batch: layout.batch,
            q_len: layout.len,
            kv_len: layout.len,
            heads: self.heads,
            causal,
            key_valid: layout.valid.clone(),
        };
        self.attend(g, p, x, x, spec)
    }

    /// Queries from `x` (laid out by `q`), keys and values from `memory`
    /// (laid out by `kv`).
    pub fn cross_attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        x: Var,
        q: &SeqLayout,
        memory: Var,
        kv: &SeqLayout,
    ) -> Result<Var> {
        let spec = AttentionSpec {
            batch: q.batch,
            q_len: q.len,
            kv_len: kv.len,
            heads: self.heads,
            causal: false,
            key_valid: kv.valid.clone(),
        };
        self.attend(g, p, x, memory, spec)
    }

    fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        x: Var,
        memory: Var,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, memory)?;
        let v = self.v.forward(g, p, memory)?;
        let a = g.attention(q, k, v, spec);
        self.o.forward(g, p, a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Gelu,
}

/// Pre-norm position-wise feed-forward module.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(
        tree: &mut ParamTree<f32>,
        init: &Init,
        path: &str,
        dim: usize,
        mult: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(tree, init, &format!("{path}.ln"), dim)?,
            up: Linear::new(tree, init, &format!("{path}.up"), dim, dim * mult)?,
            down: Linear::new(tree, init, &format!("{path}.down"), dim * mult, dim)?,
            act,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamTree<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let h = self.up.forward(g, p, h)?;
        let h = match self.act {
            Activation::Swish => g.silu(h),
            Activation::Gelu => g.gelu(h),
        };
        self.down.forward(g, p, h)
    }
}

/// Conformer convolution module: pointwise expansion with GLU, depthwise
/// convolution, normalization, swish, pointwise projection.
///
/// The normalization after the depthwise convolution is a layer norm, so
/// examples in a batch never influence each other. Padding rows are zeroed
/// before the depthwise convolution so they never leak into valid frames.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pw_in: Linear,
    pub dw_w: String,
    pub dw_b: String,
    pub mid_norm: LayerNorm,
    pub pw_out: Linear,
}

impl ConvModule {
    pub fn new(tree: &mut ParamTree<f32>, init: &Init, path: &str, dim: usize, kernel: usize) -> Result<Self> {
        let dw_w = format!("{path}.dw.w");
        let dw_b = format!("{path}.dw.b");
        init.weight(tree, &dw_w, &[kernel, dim])?;
        init.zeros(tree, &dw_b, &[dim])?;
        Ok(Self {
            norm: LayerNorm::new(tree, init, &format!("{path}.ln"), dim)?,
            pw_in: Linear::new(tree, init, &format!("{path}.pw_in"), dim, 2 * dim)?,
            dw_w,
            dw_b,
            mid_norm: LayerNorm::new(tree, init, &format!("{path}.mid_ln"), dim)?,
            pw_out: Linear::new(tree, init, &format!("{path}.pw_out"), dim, dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamTree<T>, x: Var, layout: &SeqLayout) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let h = self.pw_in.forward(g, p, h)?;
        let mut h = g.glu(h);
        if (0..layout.batch).any(|b| layout.valid_len(b) < layout.len) {
            let keep = (0..layout.rows())
                .map(|r| {
                    if r % layout.len < layout.valid_len(r / layout.len) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            h = g.scale_rows(h, keep);
        }
        let w = g.param(p, &self.dw_w)?;
        let b = g.param(p, &self.dw_b)?;
        let h = g.depthwise_conv(h, w, b, layout.batch, layout.len);
        let h = self.mid_norm.forward(g, p, h)?;
        let h = g.silu(h);
        self.pw_out.forward(g, p, h)
    }
}

/// Conformer block: ½·FFN, self-attention, convolution module, ½·FFN, each
/// residual, followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub out_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new(tree: &mut ParamTree<f32>, init: &Init, path: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            ff1: FeedForward::new(tree, init, &format!("{path}.ff1"), d, cfg.ff_mult, Activation::Swish)?,
            attn_norm: LayerNorm::new(tree, init, &format!("{path}.attn_ln"), d)?,
            attn: MultiHeadAttention::new(tree, init, &format!("{path}.attn"), d, cfg.heads)?,
            conv: ConvModule::new(tree, init, &format!("{path}.conv"), d, cfg.conv_kernel)?,
            ff2: FeedForward::new(tree, init, &format!("{path}.ff2"), d, cfg.ff_mult, Activation::Swish)?,
            out_norm: LayerNorm::new(tree, init, &format!("{path}.out_ln"), d)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamTree<T>, x: Var, layout: &SeqLayout) -> Result<Var> {
        let half = T::from_f64_lossy(0.5);
        let h = self.ff1.forward(g, p, x)?;
        let h = g.scale(h, half);
        let x = g.add(x, h);
        let h = self.attn_norm.forward(g, p, x)?;
        let h = self.attn.self_attend(g, p, h, layout, false)?;
        let x = g.add(x, h);
        let h = self.conv.forward(g, p, x, layout)?;
        let x = g.add(x, h);
        let h = self.ff2.forward(g, p, x)?;
        let h = g.scale(h, half);
        let x = g.add(x, h);
        self.out_norm.forward(g, p, x)
    }
}

/// Pre-norm transformer block (ViT style), optionally with causal
/// self-attention and a cross-attention sublayer for sequence decoding.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub mlp: FeedForward,
}

impl TransformerBlock {
    pub fn new(
        tree: &mut ParamTree<f32>,
        init: &Init,
        path: &str,
        cfg: &EncoderConfig,
        with_cross: bool,
    ) -> Result<Self> {
        let d = cfg.dim;
        let cross = if with_cross {
            Some((
                LayerNorm::new(tree, init, &format!("{path}.cross_ln"), d)?,
                MultiHeadAttention::new(tree, init, &format!("{path}.cross"), d, cfg.heads)?,
            ))
        } else {
            None
        };
        Ok(Self {
            attn_norm: LayerNorm::new(tree, init, &format!("{path}.attn_ln"), d)?,
            attn: MultiHeadAttention::new(tree, init, &format!("{path}.attn"), d, cfg.heads)?,
            cross,
            mlp: FeedForward::new(tree, init, &format!("{path}.mlp"), d, cfg.ff_mult, Activation::Gelu)?,
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
        let h = self.attn_norm.forward(g, p, x)?;
        let h = self.attn.self_attend(g, p, h, layout, causal)?;
        let mut x = g.add(x, h);
        if let (Some((norm, attn)), Some((mem, mem_layout))) = (&self.cross, memory) {
            let h = norm.forward(g, p, x)?;
            let h = attn.cross_attend(g, p, h, layout, mem, mem_layout)?;
            x = g.add(x, h);
        }
        let h = self.mlp.forward(g, p, x)?;
        Ok(g.add(x, h))
    }
}
