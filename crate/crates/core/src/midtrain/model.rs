use serde::{Deserialize, Serialize};

use super::vocab::{TokenSequence, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::encoders::{positions_1d, TransformerStack};
use crate::nn::layers::{EncoderConfig, Linear, SeqLayout};
use crate::nn::loss::{argmax, cross_entropy};
use crate::nn::{Graph, Init, ParamTree, Scalar, Tensor, Var};
use crate::pretrain::{AudioConfig, AudioEncoder};
use crate::signal::LogMelFrames;

/// Translation decoder shape plus the target vocabulary size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub stack: EncoderConfig,
    pub vocab_size: usize,
}

impl DecoderConfig {
    /// 2 blocks, width 64, 2 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            stack: EncoderConfig {
                layers: 2,
                heads: 2,
                dim: 64,
                conv_kernel: 0,
                ff_mult: 4,
            },
            vocab_size,
        }
    }
}

/// Causal transformer over target tokens with cross-attention to the audio
/// encoder output. Parameters live under `mt.`.
#[derive(Clone, Debug)]
pub struct TranslationDecoder {
    pub cfg: DecoderConfig,
    pub embed: String,
    pub memory: Linear,
    pub stack: TransformerStack,
    pub out: Linear,
}

impl TranslationDecoder {
    pub const PREFIX: &'static str = "mt.";

    pub fn new(tree: &mut ParamTree<f32>, init: &Init, cfg: &DecoderConfig, memory_dim: usize) -> Result<Self> {
        let d = cfg.stack.dim;
        let embed = "mt.embed".to_string();
        init.weight(tree, &embed, &[cfg.vocab_size, d])?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            memory: Linear::new(tree, init, "mt.memory", memory_dim, d)?,
            stack: TransformerStack::new(tree, init, "mt.blocks", &cfg.stack, true)?,
            out: Linear::new(tree, init, "mt.out", d, cfg.vocab_size)?,
        })
    }

    /// Next-token logits `[batch·len, V]` for input ids laid out
    /// `batch × len`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamTree<T>,
        inputs: &[usize],
        batch: usize,
        len: usize,
        memory: Var,
        mem_layout: &SeqLayout,
    ) -> Result<Var> {
        let v = self.cfg.vocab_size;
        if let Some(&bad) = inputs.iter().find(|&&i| i >= v) {
            return Err(Error::LabelOutOfRange { label: bad, classes: v });
        }
        let table = g.param(p, &self.embed)?;
        let x = g.gather(table, inputs.iter().map(|&i| Some(i)).collect(), 1);
        let pos = g.constant(positions_1d(batch, len, self.cfg.stack.dim)?);
        let x = g.add(x, pos);
        let mem = self.memory.forward(g, p, memory)?;
        let layout = SeqLayout::new(batch, len);
        let h = self.stack.forward(g, p, x, &layout, true, Some((mem, mem_layout)))?;
        self.out.forward(g, p, h)
    }
}

/// Audio encoder plus translation decoder.
#[derive(Clone, Debug)]
pub struct TranslationModel {
    pub encoder: AudioEncoder,
    pub decoder: TranslationDecoder,
}

impl TranslationModel {
    /// Builds the module structure; `tree` receives freshly initialized
    /// encoder and decoder tensors.
    pub fn new(tree: &mut ParamTree<f32>, init: &Init, audio: &AudioConfig, dec: &DecoderConfig) -> Result<Self> {
        let encoder = AudioEncoder::new(tree, init, audio)?;
        let decoder = TranslationDecoder::new(tree, init, dec, audio.encoder.dim)?;
        Ok(Self { encoder, decoder })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.cfg.vocab_size
    }
}

/// Audio of several utterances stacked for the encoder.
#[derive(Clone, Debug)]
pub struct AudioBatch<T> {
    pub values: Tensor<T>,
    pub batch: usize,
    pub frames: usize,
    pub valid: Vec<usize>,
}

impl<T: Scalar> AudioBatch<T> {
    pub fn new(utts: &[&LogMelFrames]) -> Result<Self> {
        let first = utts
            .first()
            .ok_or_else(|| Error::Validation("empty audio batch".into()))?;
        let (frames, f) = (first.n_frames(), first.n_mels());
        let mut data = Vec::with_capacity(utts.len() * frames * f);
        let mut valid = Vec::with_capacity(utts.len());
        for u in utts {
            if u.n_frames() != frames || u.n_mels() != f {
                return Err(Error::Shape(
                    "utterances in a batch must share their padded shape".into(),
                ));
            }
            data.extend(u.values.data().iter().map(|&v| T::from_f64_lossy(v)));
            valid.push(u.valid_len.min(frames));
        }
        Ok(Self {
            values: Tensor::from_vec(&[utts.len() * frames, f], data),
            batch: utts.len(),
            frames,
            valid,
        })
    }

    pub fn encode(&self, g: &mut Graph<T>, p: &ParamTree<T>, enc: &AudioEncoder) -> Result<(Var, SeqLayout)> {
        let x = g.constant(self.values.clone());
        enc.encode(g, p, x, self.batch, self.frames, &self.valid, None)
    }
}

/// Teacher-forcing inputs and targets for `BOS … EOS` sequences, padded to
/// a common length.
pub fn teacher_forcing(targets: &[&TokenSequence]) -> Result<(Vec<usize>, Vec<Option<usize>>, usize)> {
    for t in targets {
        t.check_target()?;
    }
    let len = targets.iter().map(|t| t.len() - 1).max().unwrap_or(0);
    let mut inputs = Vec::with_capacity(targets.len() * len);
    let mut gold = Vec::with_capacity(targets.len() * len);
    for t in targets {
        let n = t.len() - 1;
        inputs.extend_from_slice(&t.ids[..n]);
        inputs.extend(std::iter::repeat_n(PAD, len - n));
        gold.extend(t.ids[1..].iter().map(|&i| Some(i)));
        gold.extend(std::iter::repeat_n(None, len - n));
    }
    Ok((inputs, gold, len))
}

/// Output of [`translate_forward`].
#[derive(Clone, Debug)]
pub struct TranslateOutput {
    /// `[batch·len, V]` next-token logits.
    pub logits: Var,
    /// Mean token cross-entropy over non-PAD positions.
    pub loss: Var,
    pub gold: Vec<Option<usize>>,
    pub len: usize,
}

/// Teacher-forced next-token logits and cross-entropy for a batch of
/// utterances and their `BOS … EOS` targets.
pub fn translate_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamTree<T>,
    model: &TranslationModel,
    audio: &AudioBatch<T>,
    targets: &[&TokenSequence],
) -> Result<TranslateOutput> {
    let (mem, mem_layout) = audio.encode(g, p, &model.encoder)?;
    decoder_loss(g, p, &model.decoder, mem, &mem_layout, targets)
}

/// [`translate_forward`] over already encoded audio.
pub fn decoder_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamTree<T>,
    decoder: &TranslationDecoder,
    memory: Var,
    mem_layout: &SeqLayout,
    targets: &[&TokenSequence],
) -> Result<TranslateOutput> {
    if targets.len() != mem_layout.batch {
        return Err(Error::Shape(format!(
            "{} targets for {} utterances",
            targets.len(),
            mem_layout.batch
        )));
    }
    let (inputs, gold, len) = teacher_forcing(targets)?;
    let logits = decoder.forward(g, p, &inputs, mem_layout.batch, len, memory, mem_layout)?;
    let loss = cross_entropy(g, logits, &gold)?;
    Ok(TranslateOutput {
        logits,
        loss,
        gold,
        len,
    })
}

/// Encoder output of one or more utterances, detached from any graph.
#[derive(Clone, Debug)]
pub struct Memory<T> {
    pub values: Tensor<T>,
    pub layout: SeqLayout,
}

impl<T: Scalar> Memory<T> {
    /// Encodes `audio` without recording gradients.
    pub fn encode(audio: &AudioBatch<T>, p: &ParamTree<T>, enc: &AudioEncoder) -> Result<Self> {
        let mut g = Graph::inference();
        let (v, layout) = audio.encode(&mut g, p, enc)?;
        Ok(Self {
            values: g.value(v).clone(),
            layout,
        })
    }

    /// Splits a batch into single-utterance memories.
    pub fn split(&self) -> Vec<Self> {
        let (len, d) = (self.layout.len, self.values.cols());
        (0..self.layout.batch)
            .map(|b| Self {
                values: Tensor::from_vec(&[len, d], self.values.data()[b * len * d..(b + 1) * len * d].to_vec()),
                layout: SeqLayout::with_valid(1, len, vec![self.layout.valid_len(b)]),
            })
            .collect()
    }

    /// Stacks single-utterance memories of equal length.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("empty memory batch".into()))?;
        let (len, d) = (first.layout.len, first.values.cols());
        let mut data = Vec::with_capacity(parts.len() * len * d);
        let mut valid = Vec::with_capacity(parts.len());
        for m in parts {
            if m.layout.len != len || m.values.cols() != d {
                return Err(Error::Shape("memories in a batch must share their shape".into()));
            }
            for b in 0..m.layout.batch {
                valid.push(m.layout.valid_len(b));
            }
            data.extend_from_slice(m.values.data());
        }
        Ok(Self {
            values: Tensor::from_vec(&[valid.len() * len, d], data),
            layout: SeqLayout::with_valid(valid.len(), len, valid),
        })
    }
}

/// Share of non-PAD positions whose argmax logit is the gold token.
pub fn token_accuracy<T: Scalar>(logits: &Tensor<T>, gold: &[Option<usize>]) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for (r, g) in gold.iter().enumerate() {
        if let Some(g) = *g {
            total += 1;
            if argmax(logits.row(r)) == g {
                hit += 1;
            }
        }
    }
    (hit, total)
}

/// Argmax decoding from BOS until EOS or `max_len` tokens, for every
/// utterance of the batch. The returned sequences exclude BOS and EOS.
pub fn greedy_decode(
    model: &TranslationModel,
    params: &ParamTree<f32>,
    audio: &AudioBatch<f32>,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let memory = Memory::encode(audio, params, &model.encoder)?;
    greedy_from_memory(&model.decoder, params, &memory, max_len)
}

/// [`greedy_decode`] over already encoded audio.
pub fn greedy_from_memory(
    decoder: &TranslationDecoder,
    params: &ParamTree<f32>,
    memory: &Memory<f32>,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let b = memory.layout.batch;
    let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; b];
    let mut done = vec![false; b];
    for step in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let len = step + 1;
        let inputs: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let mut g = Graph::inference();
        let mem = g.constant(memory.values.clone());
        let logits = decoder.forward(&mut g, params, &inputs, b, len, mem, &memory.layout)?;
        let values = g.value(logits);
        for (i, s) in seqs.iter_mut().enumerate() {
            let next = if done[i] {
                PAD
            } else {
                argmax(values.row(i * len + step))
            };
            if next == EOS {
                done[i] = true;
            }
            s.push(if done[i] { PAD } else { next });
        }
    }
    Ok(seqs
        .into_iter()
        .map(|s| s.into_iter().skip(1).take_while(|&t| t != PAD && t != EOS).collect())
        .collect())
}
