//! Audio encoder, video encoder, the shared reconstruction decoder and the
//! contrastive projection heads.

use serde::{Deserialize, Serialize};

use super::clr::{clr_graph, ClrMode};
use super::mask::{sample_mask, MaskSpec};
use crate::data::AvExample;
use crate::error::{Error, Result};
use crate::nn::encoders::{
    positions_1d, same_output_len, tile_rows, ConformerEncoder, ConvSubsample, TransformerStack, VitEncoder,
    SUBSAMPLE_STRIDE,
};
use crate::nn::layers::{EncoderConfig, Linear, SeqLayout};
use crate::nn::loss::mse_rows;
use crate::nn::posenc::sinusoidal_3d;
use crate::nn::{Graph, Init, ParamTree, Scalar, Tensor, Var};

/// Variance floor of the per-frame / per-patch target standardization.
pub const TARGET_EPS: f64 = 1e-6;

/// Audio encoder shape: LFBE width plus the Conformer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    pub n_mels: usize,
    pub encoder: EncoderConfig,
}

impl AudioConfig {
    pub fn desk() -> Self {
        Self {
            n_mels: 80,
            encoder: EncoderConfig::desk_audio(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub audio: AudioConfig,
    pub video: EncoderConfig,
    pub decoder: EncoderConfig,
    /// Flattened voxel width `p_t·p_h·p_w·C`.
    pub token_dim: usize,
    /// Width of the contrastive embedding space.
    pub proj_dim: usize,
}

impl ModelConfig {
    /// 8×8×2 RGB patches, small encoders.
    pub fn desk() -> Self {
        Self {
            audio: AudioConfig::desk(),
            video: EncoderConfig::desk_video(),
            decoder: EncoderConfig::desk_decoder(),
            token_dim: 8 * 8 * 2 * 3,
            proj_dim: 128,
        }
    }

    /// 16×16×2 RGB patches and the full-size encoders.
    pub fn paper() -> Self {
        Self {
            audio: AudioConfig {
                n_mels: 80,
                encoder: EncoderConfig::paper_audio(),
            },
            video: EncoderConfig::paper_video(),
            decoder: EncoderConfig::paper_decoder(),
            token_dim: 16 * 16 * 2 * 3,
            proj_dim: 1024,
        }
    }
}

/// Strided convolutional subsampler followed by Conformer blocks.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub cfg: AudioConfig,
    pub sub: ConvSubsample,
    pub conformer: ConformerEncoder,
}

impl AudioEncoder {
    /// Parameter path prefix shared by every stage.
    pub const PREFIX: &'static str = "audio.";

    pub fn new(tree: &mut ParamTree<f32>, init: &Init, cfg: &AudioConfig) -> Result<Self> {
        let d = cfg.encoder.dim;
        Ok(Self {
            cfg: cfg.clone(),
            sub: ConvSubsample::new(
                tree,
                init,
                "audio.sub",
                cfg.n_mels,
                d,
                SUBSAMPLE_STRIDE,
                SUBSAMPLE_STRIDE,
            )?,
            conformer: ConformerEncoder::new(tree, init, "audio.enc", &cfg.encoder)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.encoder.dim
    }

    pub fn token_len(&self, frames: usize) -> usize {
        same_output_len(frames, SUBSAMPLE_STRIDE)
    }

    /// Encodes `[batch·frames, F]` features. Masked token rows are zeroed
    /// after subsampling, before positions are added.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        audio: Var,
        batch: usize,
        frames: usize,
        valid_frames: &[usize],
        masks: Option<&[MaskSpec]>,
    ) -> Result<(Var, SeqLayout)> {
        let len = self.token_len(frames);
        let valid: Vec<usize> = valid_frames.iter().map(|&v| self.token_len(v).max(1)).collect();
        let layout = SeqLayout::with_valid(batch, len, valid.clone());
        let mut h = self.sub.forward(g, p, audio, batch, frames)?;
        if let Some(masks) = masks {
            if masks.len() != batch {
                return Err(Error::Shape(format!(
                    "{} audio masks for a batch of {batch}",
                    masks.len()
                )));
            }
            let mut keep = vec![T::one(); batch * len];
            for (b, m) in masks.iter().enumerate() {
                if m.total != valid[b] {
                    return Err(Error::Shape(format!(
                        "audio mask covers {} tokens, example {b} has {}",
                        m.total, valid[b]
                    )));
                }
                for &i in &m.masked {
                    keep[b * len + i] = T::zero();
                }
            }
            h = g.scale_rows(h, keep);
        }
        let pos = g.constant(positions_1d(batch, len, self.dim())?);
        let h = g.add(h, pos);
        let e = self.conformer.forward(g, p, h, &layout)?;
        Ok((e, layout))
    }
}

/// Modality-shared transformer decoder with per-modality input and output
/// projections and a learned mask token for dropped video positions.
#[derive(Clone, Debug)]
pub struct CommonDecoder {
    pub in_a: Linear,
    pub in_v: Linear,
    pub mask_token: String,
    pub stack: TransformerStack,
    pub out_a: Linear,
    pub out_v: Linear,
    pub dim: usize,
    pub n_mels: usize,
}

impl CommonDecoder {
    fn new(tree: &mut ParamTree<f32>, init: &Init, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder.dim;
        let mask_token = "dec.mask_token".to_string();
        init.weight(tree, &mask_token, &[d])?;
        Ok(Self {
            in_a: Linear::new(tree, init, "dec.in_a", cfg.audio.encoder.dim, d)?,
            in_v: Linear::new(tree, init, "dec.in_v", cfg.video.dim, d)?,
            mask_token,
            stack: TransformerStack::new(tree, init, "dec.blocks", &cfg.decoder, false)?,
            out_a: Linear::new(tree, init, "dec.out_a", d, SUBSAMPLE_STRIDE * cfg.audio.n_mels)?,
            out_v: Linear::new(tree, init, "dec.out_v", d, cfg.token_dim)?,
            dim: d,
            n_mels: cfg.audio.n_mels,
        })
    }

    /// Reconstructs `SUBSAMPLE_STRIDE` frames per encoded token:
    /// `[batch·len, d_a]` becomes `[batch·len·stride, F]`.
    pub fn decode_audio<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        e_a: Var,
        layout: &SeqLayout,
    ) -> Result<Var> {
        let h = self.in_a.forward(g, p, e_a)?;
        let pos = g.constant(positions_1d(layout.batch, layout.len, self.dim)?);
        let h = g.add(h, pos);
        let h = self.stack.forward(g, p, h, layout, false, None)?;
        let o = self.out_a.forward(g, p, h)?;
        Ok(g.reshape(o, layout.rows() * SUBSAMPLE_STRIDE, self.n_mels))
    }

    /// Reconstructs every voxel token from the encodings of the visible
    /// ones; masked positions start from the mask token.
    pub fn decode_video<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        e_vis: Var,
        grid: (usize, usize, usize),
        visible: &[Vec<usize>],
    ) -> Result<Var> {
        let batch = visible.len();
        let n = grid.0 * grid.1 * grid.2;
        let n_vis = visible.first().map_or(0, Vec::len);
        let h = self.in_v.forward(g, p, e_vis)?;
        let mask = g.param(p, &self.mask_token)?;
        let pool = g.concat_rows(&[h, mask]);
        let mask_row = batch * n_vis;
        let mut index = vec![Some(mask_row); batch * n];
        for (b, vis) in visible.iter().enumerate() {
            for (k, &j) in vis.iter().enumerate() {
                index[b * n + j] = Some(b * n_vis + k);
            }
        }
        let full = g.gather(pool, index, 1);
        let pos = g.constant(tile_rows(&sinusoidal_3d(grid, self.dim)?, batch));
        let full = g.add(full, pos);
        let h = self.stack.forward(g, p, full, &SeqLayout::new(batch, n), false, None)?;
        self.out_v.forward(g, p, h)
    }
}

/// Which positions the reconstruction loss covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeScope {
    /// Every (non-padding) position, masked or not.
    Full,
    MaskedOnly,
}

impl MaeScope {
    pub const NAMES: &'static str = "full, masked_only";

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::MaskedOnly => "masked_only",
        }
    }
}

impl std::str::FromStr for MaeScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "masked_only" => Ok(Self::MaskedOnly),
            _ => Err(Error::InvalidEnum {
                field: "mae_scope",
                value: s.into(),
                valid: Self::NAMES.into(),
            }),
        }
    }
}

/// Per-example masks for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMasks {
    pub audio: Vec<MaskSpec>,
    pub video: Vec<MaskSpec>,
}

impl BatchMasks {
    pub fn sample<T>(b: &AvBatch<T>, ratio: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        let audio = b
            .audio_tokens()
            .iter()
            .map(|&n| sample_mask(n, ratio, rng))
            .collect::<Result<_>>()?;
        let video = (0..b.batch)
            .map(|_| sample_mask(b.n_video_tokens(), ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Self { audio, video })
    }
}

fn standardize(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = 1.0 / (var + TARGET_EPS).sqrt();
    row.iter().map(move |v| (v - mean) * scale)
}

/// A stacked batch of paired examples with reconstruction targets.
#[derive(Clone, Debug)]
pub struct AvBatch<T> {
    pub batch: usize,
    /// `[batch·frames, F]`.
    pub audio: Tensor<T>,
    pub frames: usize,
    pub audio_valid: Vec<usize>,
    /// `[batch·stride·ceil(frames/stride), F]`; rows past `frames` or past
    /// the valid length are zero.
    pub audio_target: Tensor<T>,
    /// `[batch·N, token_dim]`.
    pub video: Tensor<T>,
    pub video_target: Tensor<T>,
    pub grid: (usize, usize, usize),
}

impl<T: Scalar> AvBatch<T> {
    /// Stacks examples; with `normalize` each target frame and patch is
    /// standardized to zero mean and unit variance.
    pub fn new(examples: &[&AvExample], normalize: bool) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Validation("empty batch".into()))?;
        let (frames, n_mels) = (first.audio.n_frames(), first.audio.n_mels());
        let geometry = (first.video.source_dims, first.video.geometry);
        let (n, d) = (first.video.n_tokens(), first.video.token_dim());
        let padded = same_output_len(frames, SUBSAMPLE_STRIDE) * SUBSAMPLE_STRIDE;
        let batch = examples.len();
        let mut audio = Vec::with_capacity(batch * frames * n_mels);
        let mut audio_target = vec![T::zero(); batch * padded * n_mels];
        let mut audio_valid = Vec::with_capacity(batch);
        let mut video = Vec::with_capacity(batch * n * d);
        let mut video_target = Vec::with_capacity(batch * n * d);
        for (b, ex) in examples.iter().enumerate() {
            if ex.audio.n_frames() != frames || ex.audio.n_mels() != n_mels {
                return Err(Error::Shape("audio shapes differ within a batch".into()));
            }
            if (ex.video.source_dims, ex.video.geometry) != geometry {
                return Err(Error::Shape("video shapes differ within a batch".into()));
            }
            audio.extend(ex.audio.values.data().iter().map(|&v| T::from_f64_lossy(v)));
            let valid = ex.audio.valid_len.min(frames);
            audio_valid.push(valid);
            for r in 0..valid {
                let src = ex.audio.frame(r);
                let dst = &mut audio_target[(b * padded + r) * n_mels..(b * padded + r + 1) * n_mels];
                if normalize {
                    dst.iter_mut()
                        .zip(standardize(src))
                        .for_each(|(o, v)| *o = T::from_f64_lossy(v));
                } else {
                    dst.iter_mut().zip(src).for_each(|(o, &v)| *o = T::from_f64_lossy(v));
                }
            }
            for t in 0..n {
                let row: Vec<f64> = ex.video.tokens.row(t).iter().map(|&v| v as f64).collect();
                video.extend(row.iter().map(|&v| T::from_f64_lossy(v)));
                if normalize {
                    video_target.extend(standardize(&row).map(T::from_f64_lossy));
                } else {
                    video_target.extend(row.iter().map(|&v| T::from_f64_lossy(v)));
                }
            }
        }
        Ok(Self {
            batch,
            audio: Tensor::from_vec(&[batch * frames, n_mels], audio),
            frames,
            audio_valid,
            audio_target: Tensor::from_vec(&[batch * padded, n_mels], audio_target),
            video: Tensor::from_vec(&[batch * n, d], video),
            video_target: Tensor::from_vec(&[batch * n, d], video_target),
            grid: first.video.grid(),
        })
    }
}

impl<T> AvBatch<T> {
    pub fn n_video_tokens(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    /// Valid encoder tokens per example.
    pub fn audio_tokens(&self) -> Vec<usize> {
        self.audio_valid
            .iter()
            .map(|&v| same_output_len(v, SUBSAMPLE_STRIDE).max(1))
            .collect()
    }

    fn audio_rows_per_example(&self) -> usize {
        same_output_len(self.frames, SUBSAMPLE_STRIDE) * SUBSAMPLE_STRIDE
    }

    /// Target frames that enter the audio reconstruction loss.
    pub fn audio_include(&self, masks: &[MaskSpec], scope: MaeScope) -> Vec<bool> {
        let per = self.audio_rows_per_example();
        let mut inc = vec![false; self.batch * per];
        for b in 0..self.batch {
            let flags = masks[b].flags();
            for r in 0..self.audio_valid[b] {
                inc[b * per + r] = match scope {
                    MaeScope::Full => true,
                    MaeScope::MaskedOnly => flags[r / SUBSAMPLE_STRIDE],
                };
            }
        }
        inc
    }

    pub fn video_include(&self, masks: &[MaskSpec], scope: MaeScope) -> Vec<bool> {
        masks
            .iter()
            .flat_map(|m| match scope {
                MaeScope::Full => vec![true; m.total],
                MaeScope::MaskedOnly => m.flags(),
            })
            .collect()
    }
}

/// Reconstructions and loss terms of one masked-autoencoding pass.
#[derive(Clone, Copy, Debug)]
pub struct MaeOutput {
    /// `[batch·stride·len, F]`.
    pub o_a: Var,
    /// `[batch·N, token_dim]`.
    pub o_v: Var,
    pub l_audio: Var,
    pub l_video: Var,
    /// `l_audio + l_video`.
    pub loss: Var,
}

/// Pooled, projected, unit-norm embeddings and the contrastive loss.
#[derive(Clone, Copy, Debug)]
pub struct ClrOutput {
    pub a_enc: Var,
    pub v_enc: Var,
    pub loss: Var,
}

/// Loss terms of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mae: Option<Var>,
    pub clr: Option<Var>,
}

/// Everything trained during pre-training.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub cfg: ModelConfig,
    pub audio: AudioEncoder,
    pub video: VitEncoder,
    pub decoder: CommonDecoder,
    pub proj_a: Linear,
    pub proj_v: Linear,
}

impl PretrainModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamTree<f32>)> {
        let mut tree = ParamTree::new();
        let init = Init::new(seed);
        let m = Self::build(&mut tree, &init, cfg)?;
        Ok((m, tree))
    }

    /// Registers all parameters in `tree`.
    pub fn build(tree: &mut ParamTree<f32>, init: &Init, cfg: &ModelConfig) -> Result<Self> {
        cfg.video.validate("video", false)?;
        cfg.decoder.validate("decoder", false)?;
        Ok(Self {
            cfg: cfg.clone(),
            audio: AudioEncoder::new(tree, init, &cfg.audio)?,
            video: VitEncoder::new(tree, init, "video.vit", cfg.token_dim, &cfg.video)?,
            decoder: CommonDecoder::new(tree, init, cfg)?,
            proj_a: Linear::new(tree, init, "clr.proj_a", cfg.audio.encoder.dim, cfg.proj_dim)?,
            proj_v: Linear::new(tree, init, "clr.proj_v", cfg.video.dim, cfg.proj_dim)?,
        })
    }

    fn check_batch<T>(&self, b: &AvBatch<T>) -> Result<()> {
        if b.audio.cols() != self.cfg.audio.n_mels {
            return Err(Error::Shape(format!(
                "batch has {} mel bins, model expects {}",
                b.audio.cols(),
                self.cfg.audio.n_mels
            )));
        }
        if b.video.cols() != self.cfg.token_dim {
            return Err(Error::Shape(format!(
                "batch tokens have width {}, model expects {}",
                b.video.cols(),
                self.cfg.token_dim
            )));
        }
        Ok(())
    }

    /// Masked autoencoding: audio tokens are zeroed in place, masked video
    /// tokens are dropped before the encoder and restored as mask tokens in
    /// the shared decoder. The loss is the per-element mean squared error of
    /// each modality, summed.
    pub fn mae_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        b: &AvBatch<T>,
        masks: &BatchMasks,
        scope: MaeScope,
    ) -> Result<MaeOutput> {
        self.check_batch(b)?;
        let n = b.n_video_tokens();
        if masks.video.len() != b.batch || masks.video.iter().any(|m| m.total != n) {
            return Err(Error::Shape(format!(
                "video masks must cover {n} tokens for each of {} examples",
                b.batch
            )));
        }
        let visible: Vec<Vec<usize>> = masks.video.iter().map(MaskSpec::visible).collect();
        let n_vis = visible[0].len();
        if n_vis == 0 || visible.iter().any(|v| v.len() != n_vis) {
            return Err(Error::Shape(
                "every example needs the same nonzero number of visible tokens".into(),
            ));
        }

        let audio = g.constant(b.audio.clone());
        let (e_a, layout) = self
            .audio
            .encode(g, p, audio, b.batch, b.frames, &b.audio_valid, Some(&masks.audio))?;
        let o_a = self.decoder.decode_audio(g, p, e_a, &layout)?;

        let d = b.video.cols();
        let mut vis_tokens = Vec::with_capacity(b.batch * n_vis * d);
        let table = sinusoidal_3d(b.grid, self.cfg.video.dim)?;
        let mut vis_pos = Vec::with_capacity(b.batch * n_vis * self.cfg.video.dim);
        for (bi, vis) in visible.iter().enumerate() {
            for &j in vis {
                vis_tokens.extend_from_slice(b.video.row(bi * n + j));
                vis_pos.extend(table.row(j).iter().map(|&v| T::from_f64_lossy(v)));
            }
        }
        let tokens = g.constant(Tensor::from_vec(&[b.batch * n_vis, d], vis_tokens));
        let pos = Tensor::from_vec(&[b.batch * n_vis, self.cfg.video.dim], vis_pos);
        let e_v = self.video.forward(g, p, tokens, pos, &SeqLayout::new(b.batch, n_vis))?;
        let o_v = self.decoder.decode_video(g, p, e_v, b.grid, &visible)?;

        let l_audio = mse_rows(g, o_a, &b.audio_target, &b.audio_include(&masks.audio, scope))?;
        let l_video = mse_rows(g, o_v, &b.video_target, &b.video_include(&masks.video, scope))?;
        let loss = g.add(l_audio, l_video);
        Ok(MaeOutput {
            o_a,
            o_v,
            l_audio,
            l_video,
            loss,
        })
    }

    /// Temporal average of the unmasked audio encoding and spatio-temporal
    /// average of the video encoding, before projection: `[batch, d_a]` and
    /// `[batch, d_v]`.
    ///
    /// With `spatial_reduce`, each temporal block of video tokens is first
    /// averaged to a single token, so the video encoder sees one token per
    /// frame group.
    pub fn pool<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        b: &AvBatch<T>,
        spatial_reduce: bool,
    ) -> Result<(Var, Var)> {
        self.check_batch(b)?;
        let audio = g.constant(b.audio.clone());
        let (e_a, layout) = self
            .audio
            .encode(g, p, audio, b.batch, b.frames, &b.audio_valid, None)?;
        let segs = (0..b.batch).map(|i| (i * layout.len, layout.valid_len(i))).collect();
        let pooled_a = g.segment_mean(e_a, segs);

        let (gt, gh, gw) = b.grid;
        let n = b.n_video_tokens();
        let (tokens, grid) = if spatial_reduce {
            let spatial = gh * gw;
            let segs = (0..b.batch * gt).map(|s| (s * spatial, spatial)).collect();
            let mut tmp = Graph::<T>::inference();
            let raw = tmp.constant(b.video.clone());
            let reduced = tmp.segment_mean(raw, segs);
            (tmp.value(reduced).clone(), (gt, 1, 1))
        } else {
            (b.video.clone(), b.grid)
        };
        let len = grid.0 * grid.1 * grid.2;
        debug_assert!(spatial_reduce || len == n);
        let pos = tile_rows(&sinusoidal_3d(grid, self.cfg.video.dim)?, b.batch);
        let tokens = g.constant(tokens);
        let e_v = self.video.forward(g, p, tokens, pos, &SeqLayout::new(b.batch, len))?;
        let segs = (0..b.batch).map(|i| (i * len, len)).collect();
        let pooled_v = g.segment_mean(e_v, segs);
        Ok((pooled_a, pooled_v))
    }

    fn project<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamTree<T>, head: &Linear, x: Var) -> Result<Var> {
        let h = head.forward(g, p, x)?;
        let v = g.value(h);
        if (0..v.rows()).any(|r| v.row(r).iter().all(|&x| x == T::zero())) {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(g.l2_normalize_rows(h))
    }

    /// Unit-norm audio and video embeddings `[batch, proj_dim]`.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        b: &AvBatch<T>,
        spatial_reduce: bool,
    ) -> Result<(Var, Var)> {
        let (pa, pv) = self.pool(g, p, b, spatial_reduce)?;
        let a = self.project(g, p, &self.proj_a, pa)?;
        let v = self.project(g, p, &self.proj_v, pv)?;
        Ok((a, v))
    }

    pub fn clr_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        b: &AvBatch<T>,
        opts: &LossOptions,
    ) -> Result<ClrOutput> {
        let (a_enc, v_enc) = self.embed(g, p, b, opts.spatial_reduce)?;
        let loss = clr_graph(g, a_enc, v_enc, opts.clr_mode, opts.temperature)?;
        Ok(ClrOutput { a_enc, v_enc, loss })
    }

    /// The selected objective; for MAE+CLR the total is `(mae + clr) / 2`.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        b: &AvBatch<T>,
        masks: Option<&BatchMasks>,
        opts: &LossOptions,
    ) -> Result<LossParts> {
        let need_masks = || masks.ok_or_else(|| Error::Validation("MAE objective needs masks".into()));
        let mae = match opts.objective {
            Objective::Mae | Objective::MaeClr => Some(self.mae_forward(g, p, b, need_masks()?, opts.mae_scope)?.loss),
            Objective::Clr => None,
        };
        let clr = match opts.objective {
            Objective::Clr | Objective::MaeClr => Some(self.clr_forward(g, p, b, opts)?.loss),
            Objective::Mae => None,
        };
        let total = match (mae, clr) {
            (Some(m), Some(c)) => {
                let s = g.add(m, c);
                g.scale(s, T::from_f64_lossy(0.5))
            }
            (Some(m), None) => m,
            (None, Some(c)) => c,
            (None, None) => unreachable!("objective selects at least one loss"),
        };
        Ok(LossParts { total, mae, clr })
    }
}

/// Pre-training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "MAE")]
    Mae,
    #[serde(rename = "CLR")]
    Clr,
    #[serde(rename = "MAE+CLR")]
    MaeClr,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Self::Mae, Self::Clr, Self::MaeClr];
    pub const NAMES: &'static str = "MAE, CLR, MAE+CLR";

    pub fn name(self) -> &'static str {
        match self {
            Self::Mae => "MAE",
            Self::Clr => "CLR",
            Self::MaeClr => "MAE+CLR",
        }
    }

    pub fn uses_masks(self) -> bool {
        self != Self::Clr
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MAE" => Ok(Self::Mae),
            "CLR" => Ok(Self::Clr),
            "MAE+CLR" | "MAE_CLR" => Ok(Self::MaeClr),
            _ => Err(Error::InvalidEnum {
                field: "objective",
                value: s.into(),
                valid: Self::NAMES.into(),
            }),
        }
    }
}

/// Loss switches shared by the training loop and the gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub objective: Objective,
    pub clr_mode: ClrMode,
    pub temperature: f64,
    pub mae_scope: MaeScope,
    /// Average each temporal block of video tokens before the contrastive
    /// video pass.
    pub spatial_reduce: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            objective: Objective::MaeClr,
            clr_mode: ClrMode::Stabilized,
            temperature: 1.0,
            mae_scope: MaeScope::Full,
            spatial_reduce: true,
        }
    }
}

impl PretrainModel {
    /// Rebuilds the module structure for `cfg` and checks that `params`
    /// holds exactly its tensors with matching shapes.
    pub fn for_params(cfg: &ModelConfig, params: &ParamTree<f32>) -> Result<Self> {
        let (model, fresh) = Self::new(cfg, 0)?;
        check_same_layout(&fresh, params)?;
        Ok(model)
    }
}

/// Fails unless `have` holds exactly the paths and shapes of `want`.
pub fn check_same_layout(want: &ParamTree<f32>, have: &ParamTree<f32>) -> Result<()> {
    for (path, p) in want.iter() {
        let got = have
            .get(path)
            .map_err(|_| Error::IncompatibleConfig(format!("checkpoint lacks `{path}`")))?;
        if got.tensor.shape() != p.tensor.shape() {
            return Err(Error::IncompatibleConfig(format!(
                "`{path}` has shape {:?}, configuration expects {:?}",
                got.tensor.shape(),
                p.tensor.shape()
            )));
        }
    }
    if let Some(extra) = have.paths().find(|k| !want.contains(k)) {
        return Err(Error::IncompatibleConfig(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_paired_av, PairedAvConfig, Profile};
    use crate::nn::loss::mse_rows;
    use crate::seed;

    fn batch(n: usize, frames: usize) -> AvBatch<f64> {
        let cfg = PairedAvConfig {
            n_frames: frames,
            ..PairedAvConfig::desk(Profile::Clean)
        };
        let ds = gen_paired_av(4, n, &cfg).unwrap();
        let refs: Vec<&AvExample> = ds.examples.iter().collect();
        AvBatch::new(&refs, true).unwrap()
    }

    fn model() -> (PretrainModel, ParamTree<f64>) {
        let (m, p) = PretrainModel::new(&ModelConfig::desk(), 9).unwrap();
        (m, p.cast())
    }

    #[test]
    fn reconstruction_hand_case() {
        let mut g = Graph::<f64>::inference();
        let o = g.constant(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 7.0, 7.0]));
        let target = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 5.0, 5.0]);
        let l = mse_rows(&mut g, o, &target, &[true, false]).unwrap();
        assert_eq!(g.scalar(l), 0.5);
        let exact = g.constant(target.clone());
        let z = mse_rows(&mut g, exact, &target, &[true, true]).unwrap();
        assert_eq!(g.scalar(z), 0.0);
    }

    #[test]
    fn padded_frames_are_outside_the_audio_loss() {
        let mut b = batch(2, 32);
        b.audio_valid[1] = 21;
        let masks = BatchMasks::sample(&b, 0.6, &mut seed::rng(0, "m")).unwrap();
        assert_eq!(masks.audio[1].total, 6);
        let inc = b.audio_include(&masks.audio, MaeScope::Full);
        assert_eq!(inc.iter().filter(|&&x| x).count(), 32 + 21);
        let masked_only = b.audio_include(&masks.audio, MaeScope::MaskedOnly);
        let want = masks.audio.iter().map(|m| m.masked.len()).sum::<usize>() * SUBSAMPLE_STRIDE;
        assert!(masked_only.iter().filter(|&&x| x).count() <= want);
    }

    #[test]
    fn fully_masked_audio_hides_the_input() {
        let (m, p) = model();
        let b = batch(2, 32);
        let masks: Vec<MaskSpec> = b
            .audio_tokens()
            .iter()
            .map(|&n| sample_mask(n, 1.0, &mut seed::rng(0, "m")).unwrap())
            .collect();
        let encode = |audio: Tensor<f64>| {
            let mut g = Graph::inference();
            let x = g.constant(audio);
            let (e, _) = m
                .audio
                .encode(&mut g, &p, x, b.batch, b.frames, &b.audio_valid, Some(&masks))
                .unwrap();
            g.value(e).clone()
        };
        let scaled = Tensor::from_vec(b.audio.shape(), b.audio.data().iter().map(|v| v * 3.0 + 1.0).collect());
        assert_eq!(encode(b.audio.clone()).data(), encode(scaled).data());
    }

    #[test]
    fn mask_lengths_must_match_the_batch() {
        let (m, p) = model();
        let b = batch(2, 32);
        let mut masks = BatchMasks::sample(&b, 0.6, &mut seed::rng(0, "m")).unwrap();
        masks.video[0] = sample_mask(5, 0.6, &mut seed::rng(0, "v")).unwrap();
        let mut g = Graph::inference();
        assert!(matches!(
            m.mae_forward(&mut g, &p, &b, &masks, MaeScope::Full),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn audio_pooling_is_the_mean_over_valid_tokens() {
        let (m, p) = model();
        let mut b = batch(2, 32);
        b.audio_valid[1] = 21;
        let mut g = Graph::inference();
        let (pa, _) = m.pool(&mut g, &p, &b, true).unwrap();
        let x = g.constant(b.audio.clone());
        let (e, layout) = m
            .audio
            .encode(&mut g, &p, x, b.batch, b.frames, &b.audio_valid, None)
            .unwrap();
        let (e, pooled) = (g.value(e).clone(), g.value(pa).clone());
        for i in 0..b.batch {
            let n = layout.valid_len(i);
            for j in 0..e.cols() {
                let mut sum = 0.0;
                for t in 0..n {
                    sum += e.row(i * layout.len + t)[j];
                }
                assert!((pooled.row(i)[j] - sum / n as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_of_a_constant_sequence_is_the_constant() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_vec(&[6, 2], [0.25, -3.0].repeat(6)));
        let m = g.segment_mean(x, vec![(0, 4), (4, 2)]);
        assert_eq!(g.value(m).data(), &[0.25, -3.0, 0.25, -3.0]);
    }

    #[test]
    fn embeddings_have_unit_norm() {
        let (m, p) = model();
        let b = batch(3, 32);
        for spatial in [true, false] {
            let mut g = Graph::inference();
            let (a, v) = m.embed(&mut g, &p, &b, spatial).unwrap();
            for t in [g.value(a), g.value(v)] {
                for r in 0..t.rows() {
                    let norm = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_projection_is_a_degenerate_embedding() {
        let (m, mut p) = model();
        let zeros = vec![0.0; p.tensor("clr.proj_a.w").unwrap().numel()];
        p.set_values("clr.proj_a.w", &zeros).unwrap();
        let zeros = vec![0.0; p.tensor("clr.proj_a.b").unwrap().numel()];
        p.set_values("clr.proj_a.b", &zeros).unwrap();
        let mut g = Graph::inference();
        assert!(matches!(
            m.embed(&mut g, &p, &batch(2, 32), true),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn joint_loss_is_exactly_the_mean_of_both_terms() {
        let (m, p) = model();
        let b = batch(3, 32);
        let masks = BatchMasks::sample(&b, 0.6, &mut seed::rng(1, "m")).unwrap();
        let run = |objective| {
            let mut g = Graph::inference();
            let opts = LossOptions {
                objective,
                ..LossOptions::default()
            };
            let parts = m.loss(&mut g, &p, &b, Some(&masks), &opts).unwrap();
            let get = |v: Option<Var>| v.map(|v| g.scalar(v));
            (g.scalar(parts.total), get(parts.mae), get(parts.clr))
        };
        let (total, mae, clr) = run(Objective::MaeClr);
        let (mae_only, _, _) = run(Objective::Mae);
        let (clr_only, _, _) = run(Objective::Clr);
        assert_eq!(mae, Some(mae_only));
        assert_eq!(clr, Some(clr_only));
        assert_eq!(
            total.to_bits(),
            super::super::combined_loss(mae_only, clr_only).to_bits()
        );
    }

    #[test]
    fn objectives_parse_case_insensitively() {
        assert_eq!("mae+clr".parse::<Objective>().unwrap(), Objective::MaeClr);
        let e = "byol".parse::<Objective>().unwrap_err().to_string();
        assert!(e.contains("MAE, CLR, MAE+CLR"), "{e}");
        assert!(!Objective::Clr.uses_masks());
    }
}
