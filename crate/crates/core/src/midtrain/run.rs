use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{
    decoder_loss, greedy_from_memory, token_accuracy, AudioBatch, DecoderConfig, Memory, TranslationModel,
};
use super::vocab::TokenSequence;
use crate::data::{PairTag, Split, ToyParallelCorpus, TranslationExample};
use crate::error::{Error, Result};
use crate::nn::optim::{optimizer_step, AdamConfig, AdamState};
use crate::nn::{Graph, Init, ParamTree};
use crate::orchestrator::{Checkpoint, Stage};
use crate::pretrain::{batch_indices, AudioConfig};
use crate::seed;

/// Setting key under which a midtrain checkpoint stores its decoder shape.
pub const DECODER_SETTING: &str = "decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidtrainConfig {
    /// Step budget; with `until_convergence` training may stop earlier.
    pub steps: usize,
    pub until_convergence: bool,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps between validation cross-entropy evaluations.
    pub eval_every: usize,
    /// Evaluations without an improvement of at least `min_delta` before
    /// training counts as converged.
    pub patience: usize,
    pub min_delta: f64,
    pub freeze_encoder: bool,
    /// Expected audio encoder shape; must match the upstream checkpoint.
    pub audio: AudioConfig,
    pub decoder: crate::nn::layers::EncoderConfig,
    pub seed: u64,
}

impl Default for MidtrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            until_convergence: true,
            batch_size: 16,
            lr: 1e-3,
            eval_every: 50,
            patience: 5,
            min_delta: 1e-3,
            freeze_encoder: false,
            audio: AudioConfig::desk(),
            decoder: DecoderConfig::desk(0).stack,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidtrainReport {
    pub pair: PairTag,
    /// Mean token cross-entropy on the validation split after training.
    pub final_ce: f64,
    /// Teacher-forced token accuracy on the training split.
    pub token_accuracy: f64,
    pub steps: usize,
    pub converged: bool,
    /// `(step, validation cross-entropy)` of every evaluation.
    pub evals: Vec<(usize, f64)>,
}

impl MidtrainReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct MidtrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: MidtrainReport,
}

/// Rebuilds the translation model held by a midtrain checkpoint.
pub fn translation_model(ckpt: &Checkpoint) -> Result<TranslationModel> {
    let dec: DecoderConfig = match ckpt.meta.settings.get(DECODER_SETTING) {
        Some(s) => serde_json::from_str(s)?,
        None => {
            return Err(Error::Stage(format!(
                "{} checkpoint has no translation decoder",
                ckpt.meta.stage
            )))
        }
    };
    let mut tree = ParamTree::new();
    let model = TranslationModel::new(&mut tree, &Init::new(0), &ckpt.meta.model.audio, &dec)?;
    crate::pretrain::check_same_layout(&tree, &ckpt.params)?;
    Ok(model)
}

enum Encoded {
    Fixed(Vec<Memory<f32>>),
    Live,
}

fn audio_batch(examples: &[&TranslationExample]) -> Result<AudioBatch<f32>> {
    let utts: Vec<_> = examples.iter().map(|e| &e.speech.utt.features).collect();
    AudioBatch::new(&utts)
}

fn encode_all(
    model: &TranslationModel,
    params: &ParamTree<f32>,
    examples: &[&TranslationExample],
) -> Result<Vec<Memory<f32>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        out.extend(Memory::encode(&audio_batch(chunk)?, params, &model.encoder)?.split());
    }
    Ok(out)
}

fn mean_ce(
    model: &TranslationModel,
    params: &ParamTree<f32>,
    examples: &[&TranslationExample],
    fixed: Option<&[Memory<f32>]>,
) -> Result<(f64, f64)> {
    let mut ce = 0.0;
    let (mut hit, mut total) = (0, 0);
    for (c, chunk) in examples.chunks(32).enumerate() {
        let memory = match fixed {
            Some(m) => Memory::stack(&m[c * 32..c * 32 + chunk.len()].iter().collect::<Vec<_>>())?,
            None => Memory::encode(&audio_batch(chunk)?, params, &model.encoder)?,
        };
        let targets: Vec<&TokenSequence> = chunk.iter().map(|e| &e.target).collect();
        let mut g = Graph::inference();
        let mem = g.constant(memory.values);
        let out = decoder_loss(&mut g, params, &model.decoder, mem, &memory.layout, &targets)?;
        let n = out.gold.iter().filter(|t| t.is_some()).count();
        ce += g.scalar(out.loss) as f64 * n as f64;
        let (h, t) = token_accuracy(g.value(out.logits), &out.gold);
        hit += h;
        total += t;
    }
    Ok((ce / total.max(1) as f64, hit as f64 / total.max(1) as f64))
}

/// Mid-trains the audio encoder of `upstream` on speech translation.
///
/// The decoder is freshly initialized; the encoder starts from `upstream`
/// and is updated unless `freeze_encoder` is set. Validation cross-entropy
/// on the test split is evaluated every `eval_every` steps. The returned
/// checkpoint holds the encoder and decoder tensors.
pub fn midtrain_run(
    upstream: &Checkpoint,
    corpus: &ToyParallelCorpus,
    cfg: &MidtrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<MidtrainOutcome> {
    if upstream.meta.stage > Stage::Pretrain {
        return Err(Error::Stage(format!(
            "mid-training starts from a none or pretrain checkpoint, got {}",
            upstream.meta.stage
        )));
    }
    if upstream.meta.model.audio != cfg.audio {
        return Err(Error::IncompatibleConfig(format!(
            "checkpoint audio encoder {:?} differs from configured {:?}",
            upstream.meta.model.audio, cfg.audio
        )));
    }
    if let Some(e) = corpus.examples.first() {
        if e.speech.utt.features.n_mels() != cfg.audio.n_mels {
            return Err(Error::IncompatibleConfig(format!(
                "corpus has {} mel bins, encoder expects {}",
                e.speech.utt.features.n_mels(),
                cfg.audio.n_mels
            )));
        }
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Validation("batch_size and eval_every must be positive".into()));
    }
    let dec_cfg = DecoderConfig {
        stack: cfg.decoder.clone(),
        vocab_size: corpus.vocab.len(),
    };
    let train: Vec<&TranslationExample> = corpus.split(Split::Train).collect();
    let mut valid: Vec<&TranslationExample> = corpus.split(Split::Test).collect();
    if train.is_empty() {
        return Err(Error::Validation("translation corpus has no training examples".into()));
    }
    if valid.is_empty() {
        valid = train.clone();
    }

    let mut params = ParamTree::new();
    let init = Init::new(seed::derive(cfg.seed, "midtrain/init"));
    let model = TranslationModel::new(&mut params, &init, &cfg.audio, &dec_cfg)?;
    params.load_from(&upstream.params.subset(&["audio."]))?;
    params.set_trainable("audio.", !cfg.freeze_encoder);

    let train_mem = if cfg.freeze_encoder {
        Encoded::Fixed(encode_all(&model, &params, &train)?)
    } else {
        Encoded::Live
    };
    let valid_mem = match &train_mem {
        Encoded::Fixed(_) => Some(encode_all(&model, &params, &valid)?),
        Encoded::Live => None,
    };

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut evals = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut converged = false;
    let mut step = 0;
    while step < cfg.steps {
        let idx = batch_indices(train.len(), cfg.batch_size, seed::derive(cfg.seed, "midtrain"), step);
        let batch: Vec<&TranslationExample> = idx.iter().map(|&i| train[i]).collect();
        let targets: Vec<&TokenSequence> = batch.iter().map(|e| &e.target).collect();
        let mut g = Graph::new();
        let (mem, layout) = match &train_mem {
            Encoded::Fixed(all) => {
                let m = Memory::stack(&idx.iter().map(|&i| &all[i]).collect::<Vec<_>>())?;
                (g.constant(m.values), m.layout)
            }
            Encoded::Live => audio_batch(&batch)?.encode(&mut g, &params, &model.encoder)?,
        };
        let out = decoder_loss(&mut g, &params, &model.decoder, mem, &layout, &targets)?;
        let loss = g.scalar(out.loss) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward(out.loss).into_params();
        optimizer_step(&mut params, &grads, &mut state, &adam)?;
        step += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (ce, _) = mean_ce(&model, &params, &valid, valid_mem.as_deref())?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(
                    w,
                    "{}",
                    serde_json::json!({"step": step, "train_ce": loss, "valid_ce": ce})
                )?;
            }
            evals.push((step, ce));
            if ce <= best - cfg.min_delta {
                best = ce;
                stale = 0;
            } else {
                stale += 1;
            }
            if stale >= cfg.patience {
                converged = true;
                if cfg.until_convergence {
                    break;
                }
            }
        }
    }

    let fixed_train = match &train_mem {
        Encoded::Fixed(m) => Some(m.as_slice()),
        Encoded::Live => None,
    };
    let (final_ce, _) = mean_ce(&model, &params, &valid, valid_mem.as_deref())?;
    let (_, token_accuracy) = mean_ce(&model, &params, &train, fixed_train)?;

    params.set_trainable("audio.", true);
    let mut meta = upstream.child_meta(Stage::Midtrain)?;
    meta.pair = Some(corpus.pair);
    let s = &mut meta.settings;
    s.insert(DECODER_SETTING.into(), serde_json::to_string(&dec_cfg)?);
    s.insert("steps".into(), step.to_string());
    s.insert("batch_size".into(), cfg.batch_size.to_string());
    s.insert("lr".into(), cfg.lr.to_string());
    s.insert("freeze_encoder".into(), cfg.freeze_encoder.to_string());
    s.insert("corpus_seed".into(), corpus.seed.to_string());
    s.insert("seed".into(), cfg.seed.to_string());
    Ok(MidtrainOutcome {
        checkpoint: Checkpoint { meta, params },
        report: MidtrainReport {
            pair: corpus.pair,
            final_ce,
            token_accuracy,
            steps: step,
            converged,
            evals,
        },
    })
}

/// Greedy translations of `examples` by a midtrain checkpoint.
pub fn translate(ckpt: &Checkpoint, examples: &[&TranslationExample], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let model = translation_model(ckpt)?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let memory = Memory::encode(&audio_batch(chunk)?, &ckpt.params, &model.encoder)?;
        out.extend(greedy_from_memory(&model.decoder, &ckpt.params, &memory, max_len)?);
    }
    Ok(out)
}

fn ids(s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Malformed(format!("bad token id `{t}`"))))
        .collect()
}

/// Writes one `source ids<TAB>target ids` line per example; the target
/// excludes BOS and EOS.
pub fn write_corpus_tsv(corpus: &ToyParallelCorpus, mut w: impl Write) -> Result<()> {
    let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    for e in &corpus.examples {
        writeln!(w, "{}\t{}", join(&e.speech.utt.words), join(e.target.body()))?;
    }
    Ok(())
}

/// Reads `source ids<TAB>target ids` lines.
pub fn read_corpus_tsv(r: impl BufRead) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::Malformed(format!("line {}: expected two tab-separated fields", n + 1)))?;
        out.push((ids(src)?, ids(tgt)?));
    }
    Ok(out)
}
