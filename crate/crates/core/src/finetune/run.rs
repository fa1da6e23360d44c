use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ctc::{ctc_batch, ctc_greedy};
use super::metrics::ErrorCounts;
use crate::data::{SpeechExample, Split, ToyAsrCorpus, ToyClassCorpus};
use crate::error::{Error, Result};
use crate::midtrain::{AudioBatch, Memory, Vocab, BLANK, RESERVED};
use crate::nn::encoders::SUBSAMPLE_STRIDE;
use crate::nn::layers::Linear;
use crate::nn::loss::{argmax, cross_entropy};
use crate::nn::optim::{optimizer_step, AdamConfig, AdamState};
use crate::nn::{Graph, Init, ParamTree, Tensor, Var};
use crate::orchestrator::{Checkpoint, Stage};
use crate::pretrain::{batch_indices, check_same_layout, AudioEncoder};
use crate::seed;

/// Prefix of the frozen encoder tensors.
pub const ENCODER_PREFIX: &str = "audio.";
/// Prefix of the task head tensors.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "ctc-asr")]
    Ctc,
    #[serde(rename = "classification")]
    Classification,
    #[serde(rename = "framewise")]
    Framewise,
}

impl TaskKind {
    pub const ALL: [Self; 3] = [Self::Ctc, Self::Classification, Self::Framewise];
    pub const NAMES: &'static str = "ctc-asr, classification, framewise";

    pub fn name(self) -> &'static str {
        match self {
            Self::Ctc => "ctc-asr",
            Self::Classification => "classification",
            Self::Framewise => "framewise",
        }
    }

    pub fn metric(self) -> Metric {
        match self {
            Self::Ctc => Metric::Wer,
            Self::Classification => Metric::Accuracy,
            Self::Framewise => Metric::Per,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidEnum {
                field: "task",
                value: s.into(),
                valid: Self::NAMES.into(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Wer,
    Accuracy,
    Per,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Wer => "WER",
            Self::Accuracy => "accuracy",
            Self::Per => "PER",
        }
    }

    pub fn lower_is_better(self) -> bool {
        self != Self::Accuracy
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskKind,
    pub metric: Metric,
    pub value: f64,
    pub dataset: String,
    pub n_examples: usize,
}

/// Reference and hypothesis of one evaluated utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub reference: String,
    pub hypothesis: String,
}

/// Writes one `reference<TAB>hypothesis` line per utterance.
pub fn write_transcripts(transcripts: &[Transcript], mut w: impl Write) -> Result<()> {
    for t in transcripts {
        writeln!(w, "{}\t{}", t.reference, t.hypothesis)?;
    }
    Ok(())
}

/// Linear projection from encoder features to task classes. Classification
/// heads read the mean of the valid encoder frames; the others read every
/// frame.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub classes: usize,
    pub proj: Linear,
}

impl TaskHead {
    pub fn new(tree: &mut ParamTree<f32>, init: &Init, kind: TaskKind, dim: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            kind,
            classes,
            proj: Linear::new(tree, init, "head.proj", dim, classes)?,
        })
    }

    /// Logits: one row per example for classification, one row per encoder
    /// frame otherwise.
    pub fn forward(&self, g: &mut Graph<f32>, p: &ParamTree<f32>, memory: &Memory<f32>) -> Result<Var> {
        let x = g.constant(memory.values.clone());
        let x = match self.kind {
            TaskKind::Classification => {
                let l = &memory.layout;
                g.segment_mean(x, (0..l.batch).map(|b| (b * l.len, l.valid_len(b))).collect())
            }
            _ => x,
        };
        self.proj.forward(g, p, x)
    }
}

/// Downstream task with its corpus.
#[derive(Clone, Copy, Debug)]
pub enum FinetuneTask<'a> {
    /// Word-level recognition with a CTC head.
    Asr(&'a ToyAsrCorpus),
    /// Phone recognition from per-frame phone labels.
    Phoneme(&'a ToyAsrCorpus),
    /// Utterance classification (keyword spotting or intent).
    Classify(&'a ToyClassCorpus),
}

#[derive(Clone, Debug)]
enum Target {
    Seq(Vec<usize>),
    Frames { labels: Vec<usize>, phones: Vec<usize> },
    Class(usize),
}

impl<'a> FinetuneTask<'a> {
    pub fn kind(&self) -> TaskKind {
        match self {
            Self::Asr(_) => TaskKind::Ctc,
            Self::Phoneme(_) => TaskKind::Framewise,
            Self::Classify(_) => TaskKind::Classification,
        }
    }

    /// Head output size, including the reserved ids for sequence tasks.
    pub fn classes(&self) -> usize {
        match self {
            Self::Asr(c) => c.vocab().len(),
            Self::Phoneme(c) => c.phone_vocab().len(),
            Self::Classify(c) => c.n_classes,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Self::Asr(c) => format!("toy-asr/{}", c.seed),
            Self::Phoneme(c) => format!("toy-phones/{}", c.seed),
            Self::Classify(c) => format!("toy-{}/{}", c.task.name(), c.seed),
        }
    }

    fn vocab(&self) -> Option<Vocab> {
        match self {
            Self::Asr(c) => Some(c.vocab()),
            Self::Phoneme(c) => Some(c.phone_vocab()),
            Self::Classify(_) => None,
        }
    }

    fn samples(&self, split: Split) -> Vec<(&'a SpeechExample, Target)> {
        match *self {
            Self::Asr(c) => c
                .split(split)
                .map(|e| (e, Target::Seq(e.utt.words.iter().map(|w| w + RESERVED).collect())))
                .collect(),
            Self::Phoneme(c) => c.split(split).map(|e| (e, frame_target(e))).collect(),
            Self::Classify(c) => c.split(split).map(|e| (&e.speech, Target::Class(e.label))).collect(),
        }
    }
}

/// Label of each encoder frame: the majority phone of the input frames it
/// covers, BLANK where silence wins.
fn frame_target(e: &SpeechExample) -> Target {
    let fp = &e.utt.frame_phones;
    let tokens = fp.len().div_ceil(SUBSAMPLE_STRIDE);
    let labels = (0..tokens)
        .map(|i| {
            let span = &fp[i * SUBSAMPLE_STRIDE..((i + 1) * SUBSAMPLE_STRIDE).min(fp.len())];
            let mut counts = std::collections::BTreeMap::new();
            for f in span {
                *counts.entry(f.map(|p| p + RESERVED)).or_insert(0usize) += 1;
            }
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(k, _)| *k);
            best.flatten().unwrap_or(BLANK)
        })
        .collect();
    Target::Frames {
        labels,
        phones: e.utt.phones.iter().map(|p| p + RESERVED).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Must stay false: encoder weights are frozen in this stage.
    pub unfreeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            lr: 3e-3,
            unfreeze_encoder: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Frozen encoder plus trained head.
    pub checkpoint: Checkpoint,
    pub head: TaskHead,
    pub result: EvalResult,
    pub transcripts: Vec<Transcript>,
    /// Train-split loss after each step.
    pub losses: Vec<f64>,
}

/// Frozen audio encoder of any checkpoint stage.
pub fn frozen_encoder(ckpt: &Checkpoint) -> Result<(AudioEncoder, ParamTree<f32>)> {
    let mut tree = ParamTree::new();
    let enc = AudioEncoder::new(&mut tree, &Init::new(0), &ckpt.meta.model.audio)?;
    let mut params = ckpt.params.subset(&[ENCODER_PREFIX]);
    check_same_layout(&tree, &params)?;
    params.set_trainable(ENCODER_PREFIX, false);
    Ok((enc, params))
}

fn encode(enc: &AudioEncoder, params: &ParamTree<f32>, examples: &[&SpeechExample]) -> Result<Vec<Memory<f32>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let utts: Vec<_> = chunk.iter().map(|e| &e.utt.features).collect();
        out.extend(Memory::encode(&AudioBatch::new(&utts)?, params, enc)?.split());
    }
    Ok(out)
}

fn check_labels(targets: &[&Target], classes: usize) -> Result<()> {
    for t in targets {
        let bad = match t {
            Target::Seq(s) => s.iter().find(|&&l| l >= classes).copied(),
            Target::Frames { labels, .. } => labels.iter().find(|&&l| l >= classes).copied(),
            Target::Class(c) => Some(*c).filter(|&c| c >= classes),
        };
        if let Some(label) = bad {
            return Err(Error::LabelOutOfRange { label, classes });
        }
    }
    Ok(())
}

fn batch_loss(g: &mut Graph<f32>, logits: Var, memory: &Memory<f32>, targets: &[&Target]) -> Result<Var> {
    let layout = &memory.layout;
    match targets.first() {
        Some(Target::Seq(_)) => {
            let seqs: Vec<&[usize]> = targets
                .iter()
                .map(|t| match t {
                    Target::Seq(s) => Ok(s.as_slice()),
                    _ => Err(Error::Validation("mixed targets".into())),
                })
                .collect::<Result<_>>()?;
            ctc_batch(g, logits, layout, &seqs, BLANK)
        }
        Some(Target::Frames { .. }) => {
            let mut gold = vec![None; layout.rows()];
            for (b, t) in targets.iter().enumerate() {
                if let Target::Frames { labels, .. } = t {
                    for (i, &l) in labels.iter().take(layout.valid_len(b)).enumerate() {
                        gold[b * layout.len + i] = Some(l);
                    }
                }
            }
            cross_entropy(g, logits, &gold)
        }
        Some(Target::Class(_)) => {
            let gold: Vec<Option<usize>> = targets
                .iter()
                .map(|t| if let Target::Class(c) = t { Some(*c) } else { None })
                .collect();
            cross_entropy(g, logits, &gold)
        }
        None => Err(Error::Validation("empty batch".into())),
    }
}

fn collapse(labels: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for k in labels {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn evaluate_memories(
    head: &TaskHead,
    params: &ParamTree<f32>,
    memories: &[Memory<f32>],
    targets: &[&Target],
    vocab: Option<&Vocab>,
    dataset: String,
) -> Result<(EvalResult, Vec<Transcript>)> {
    if memories.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    check_labels(targets, head.classes)?;
    let mut errors = ErrorCounts::default();
    let mut correct = 0usize;
    let mut transcripts = Vec::new();
    let render = |ids: &[usize]| vocab.map_or_else(String::new, |v| v.render(ids));
    for (mems, tgts) in memories.chunks(32).zip(targets.chunks(32)) {
        let memory = Memory::stack(&mems.iter().collect::<Vec<_>>())?;
        let mut g = Graph::inference();
        let logits = head.forward(&mut g, params, &memory)?;
        let values = g.value(logits);
        let layout = &memory.layout;
        for (b, t) in tgts.iter().enumerate() {
            let rows = || (0..layout.valid_len(b)).map(|i| values.row(b * layout.len + i));
            let (reference, hypothesis) = match t {
                Target::Seq(r) => (r.clone(), ctc_greedy(rows(), BLANK)),
                Target::Frames { phones, .. } => (phones.clone(), collapse(rows().map(argmax))),
                Target::Class(c) => {
                    correct += usize::from(argmax(values.row(b)) == *c);
                    continue;
                }
            };
            errors.add(ErrorCounts::of(&reference, &hypothesis)?);
            transcripts.push(Transcript {
                reference: render(&reference),
                hypothesis: render(&hypothesis),
            });
        }
    }
    let value = match head.kind {
        TaskKind::Classification => correct as f64 / memories.len() as f64,
        _ => errors.rate()?,
    };
    Ok((
        EvalResult {
            task: head.kind,
            metric: head.kind.metric(),
            value,
            dataset,
            n_examples: memories.len(),
        },
        transcripts,
    ))
}

/// Trains a task head on top of the frozen audio encoder of `ckpt` and
/// evaluates it on the test split.
///
/// Encoder features are computed once; only `head.` tensors are updated.
pub fn finetune_run(
    ckpt: &Checkpoint,
    task: FinetuneTask<'_>,
    cfg: &FinetuneConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FinetuneOutcome> {
    if cfg.unfreeze_encoder {
        return Err(Error::EncoderUnfreeze);
    }
    if ckpt.meta.stage >= Stage::Finetune {
        return Err(Error::Stage(format!(
            "fine-tuning starts from a none, pretrain or midtrain checkpoint, got {}",
            ckpt.meta.stage
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    let (enc, enc_params) = frozen_encoder(ckpt)?;
    let before = enc_params.digest(ENCODER_PREFIX);
    let kind = task.kind();
    let classes = task.classes();

    let train = task.samples(Split::Train);
    let test = task.samples(Split::Test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation(
            "fine-tuning needs non-empty train and test splits".into(),
        ));
    }
    let train_targets: Vec<&Target> = train.iter().map(|(_, t)| t).collect();
    let test_targets: Vec<&Target> = test.iter().map(|(_, t)| t).collect();
    check_labels(&train_targets, classes)?;
    let train_mem = encode(&enc, &enc_params, &train.iter().map(|(e, _)| *e).collect::<Vec<_>>())?;
    let test_mem = encode(&enc, &enc_params, &test.iter().map(|(e, _)| *e).collect::<Vec<_>>())?;

    let mut head_params = ParamTree::new();
    let init = Init::new(seed::derive(cfg.seed, "finetune/head"));
    let head = TaskHead::new(&mut head_params, &init, kind, enc.dim(), classes)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let batch_seed = seed::derive(cfg.seed, "finetune/batch");
    for step in 0..cfg.steps {
        let idx = batch_indices(train.len(), cfg.batch_size, batch_seed, step);
        let memory = Memory::stack(&idx.iter().map(|&i| &train_mem[i]).collect::<Vec<_>>())?;
        let targets: Vec<&Target> = idx.iter().map(|&i| train_targets[i]).collect();
        let mut g = Graph::new();
        let logits = head.forward(&mut g, &head_params, &memory)?;
        let loss = batch_loss(&mut g, logits, &memory, &targets)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::json!({"step": step, "loss": value}))?;
        }
        losses.push(value);
        let grads = g.backward(loss).into_params();
        optimizer_step(&mut head_params, &grads, &mut state, &adam)?;
    }

    let (result, transcripts) = evaluate_memories(
        &head,
        &head_params,
        &test_mem,
        &test_targets,
        task.vocab().as_ref(),
        task.tag(),
    )?;
    if enc_params.digest(ENCODER_PREFIX) != before {
        return Err(Error::EncoderUnfreeze);
    }

    let mut meta = ckpt.child_meta(Stage::Finetune)?;
    meta.task = Some(kind.name().into());
    let s = &mut meta.settings;
    s.insert("classes".into(), classes.to_string());
    s.insert("dataset".into(), task.tag());
    s.insert("steps".into(), cfg.steps.to_string());
    s.insert("batch_size".into(), cfg.batch_size.to_string());
    s.insert("lr".into(), cfg.lr.to_string());
    s.insert("seed".into(), cfg.seed.to_string());
    let mut params = enc_params;
    params.merge(head_params)?;
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint { meta, params },
        head,
        result,
        transcripts,
        losses,
    })
}

/// Head stored in a finetune checkpoint.
pub fn stored_head(ckpt: &Checkpoint) -> Result<TaskHead> {
    let kind: TaskKind = ckpt
        .meta
        .task
        .as_deref()
        .ok_or_else(|| Error::Stage(format!("{} checkpoint has no task head", ckpt.meta.stage)))?
        .parse()?;
    let classes: usize = ckpt
        .meta
        .settings
        .get("classes")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Malformed("finetune checkpoint lacks its class count".into()))?;
    let mut tree = ParamTree::new();
    let head = TaskHead::new(
        &mut tree,
        &Init::new(0),
        kind,
        ckpt.meta.model.audio.encoder.dim,
        classes,
    )?;
    check_same_layout(&tree, &ckpt.params.subset(&[HEAD_PREFIX]))?;
    Ok(head)
}

/// Re-evaluates a finetune checkpoint on the test split of `task`.
pub fn evaluate(ckpt: &Checkpoint, task: FinetuneTask<'_>) -> Result<(EvalResult, Vec<Transcript>)> {
    let head = stored_head(ckpt)?;
    if head.kind != task.kind() {
        return Err(Error::Validation(format!(
            "checkpoint head is {}, task needs {}",
            head.kind,
            task.kind()
        )));
    }
    let (enc, enc_params) = frozen_encoder(ckpt)?;
    let test = task.samples(Split::Test);
    let targets: Vec<&Target> = test.iter().map(|(_, t)| t).collect();
    let memories = encode(&enc, &enc_params, &test.iter().map(|(e, _)| *e).collect::<Vec<_>>())?;
    evaluate_memories(
        &head,
        &ckpt.params,
        &memories,
        &targets,
        task.vocab().as_ref(),
        task.tag(),
    )
}

/// Test-split accuracy of a classification checkpoint.
pub fn classify_eval(ckpt: &Checkpoint, corpus: &ToyClassCorpus) -> Result<f64> {
    Ok(evaluate(ckpt, FinetuneTask::Classify(corpus))?.0.value)
}

/// Test-split phone error rate of a framewise checkpoint.
pub fn framewise_eval(ckpt: &Checkpoint, corpus: &ToyAsrCorpus) -> Result<f64> {
    Ok(evaluate(ckpt, FinetuneTask::Phoneme(corpus))?.0.value)
}

/// Test-split word error rate of a CTC checkpoint.
pub fn asr_eval(ckpt: &Checkpoint, corpus: &ToyAsrCorpus) -> Result<f64> {
    Ok(evaluate(ckpt, FinetuneTask::Asr(corpus))?.0.value)
}

/// Phone error rate of framewise `logits` (`T × V`) against `gold`.
pub fn framewise_per(logits: &Tensor<f64>, gold: &[usize]) -> Result<f64> {
    let hyp = collapse((0..logits.rows()).map(|r| argmax(logits.row(r))));
    ErrorCounts::of(gold, &hyp)?.rate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_toy_asr, gen_toy_classification, ClassTask, CorpusConfig};
    use crate::pretrain::ModelConfig;

    fn root() -> Checkpoint {
        Checkpoint::init(&ModelConfig::desk(), 2).unwrap()
    }

    fn quick(steps: usize) -> FinetuneConfig {
        FinetuneConfig {
            steps,
            batch_size: 4,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn encoder_stays_bitwise_frozen_for_every_task() {
        let c = root();
        let asr = gen_toy_asr(1, 10, &CorpusConfig::default()).unwrap();
        let cls = gen_toy_classification(1, ClassTask::Keyword, 4, 10, &CorpusConfig::default()).unwrap();
        for task in [
            FinetuneTask::Asr(&asr),
            FinetuneTask::Phoneme(&asr),
            FinetuneTask::Classify(&cls),
        ] {
            let out = finetune_run(&c, task, &quick(3), None).unwrap();
            assert_eq!(
                out.checkpoint.params.digest(ENCODER_PREFIX),
                c.params.digest(ENCODER_PREFIX)
            );
            assert_eq!(out.checkpoint.meta.stage, Stage::Finetune);
            assert_eq!(out.result.task, task.kind());
            assert!(out.result.value >= 0.0);
            let (again, _) = evaluate(&out.checkpoint, task).unwrap();
            assert_eq!(again, out.result);
        }
    }

    #[test]
    fn zero_steps_keep_head_at_init() {
        let asr = gen_toy_asr(1, 10, &CorpusConfig::default()).unwrap();
        let out = finetune_run(&root(), FinetuneTask::Asr(&asr), &quick(0), None).unwrap();
        let mut tree = ParamTree::new();
        TaskHead::new(
            &mut tree,
            &Init::new(seed::derive(0, "finetune/head")),
            TaskKind::Ctc,
            64,
            asr.vocab().len(),
        )
        .unwrap();
        assert_eq!(out.checkpoint.params.digest(HEAD_PREFIX), tree.digest(HEAD_PREFIX));
    }

    #[test]
    fn unfreezing_is_refused() {
        let asr = gen_toy_asr(1, 10, &CorpusConfig::default()).unwrap();
        let cfg = FinetuneConfig {
            unfreeze_encoder: true,
            ..quick(1)
        };
        assert!(matches!(
            finetune_run(&root(), FinetuneTask::Asr(&asr), &cfg, None),
            Err(Error::EncoderUnfreeze)
        ));
    }

    #[test]
    fn label_outside_head_is_rejected() {
        let mut cls = gen_toy_classification(1, ClassTask::Keyword, 4, 10, &CorpusConfig::default()).unwrap();
        cls.examples[0].label = 9;
        assert!(matches!(
            finetune_run(&root(), FinetuneTask::Classify(&cls), &quick(1), None),
            Err(Error::LabelOutOfRange { label: 9, classes: 4 })
        ));
    }

    #[test]
    fn majority_head_scores_chance() {
        let cls = gen_toy_classification(1, ClassTask::Keyword, 4, 40, &CorpusConfig::default()).unwrap();
        let mut out = finetune_run(&root(), FinetuneTask::Classify(&cls), &quick(0), None).unwrap();
        out.checkpoint
            .params
            .set_values("head.proj.w", &vec![0.0; 64 * 4])
            .unwrap();
        out.checkpoint
            .params
            .set_values("head.proj.b", &[0.0, 0.0, 5.0, 0.0])
            .unwrap();
        let acc = classify_eval(&out.checkpoint, &cls).unwrap();
        assert_eq!(acc, 0.25);
    }

    #[test]
    fn one_hot_gold_frames_give_zero_per() {
        let gold_frames = [BLANK, 4, 4, 5, BLANK, 5, 6, 6, BLANK];
        let mut logits = Tensor::full(&[gold_frames.len(), 8], -5.0);
        for (t, &k) in gold_frames.iter().enumerate() {
            logits.row_mut(t)[k] = 5.0;
        }
        assert_eq!(framewise_per(&logits, &[4, 5, 5, 6]).unwrap(), 0.0);
        assert_eq!(framewise_per(&logits, &[4, 5, 6]).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn frame_labels_follow_majority() {
        let asr = gen_toy_asr(1, 4, &CorpusConfig::default()).unwrap();
        let e = &asr.examples[0];
        let Target::Frames { labels, phones } = frame_target(e) else {
            unreachable!()
        };
        assert_eq!(labels.len(), e.utt.frame_phones.len().div_ceil(4));
        assert_eq!(collapse(labels.iter().copied()).len(), phones.len());
    }

    #[test]
    fn task_names_parse() {
        for k in TaskKind::ALL {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
        }
        let err = "asr".parse::<TaskKind>().unwrap_err().to_string();
        assert!(err.contains("ctc-asr, classification, framewise"));
    }

    #[test]
    fn transcripts_are_tab_separated() {
        let mut buf = Vec::new();
        let t = Transcript {
            reference: "w0 w1".into(),
            hypothesis: "w0".into(),
        };
        write_transcripts(&[t], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "w0 w1\tw0\n");
    }
}
