//! Downstream and mid-training corpora spoken in the toy language.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::speech::{SpeechConfig, ToyLanguage, Utterance};
use super::Split;
use crate::error::{Error, Result};
use crate::midtrain::{TokenSequence, Vocab, RESERVED};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub speech: SpeechConfig,
    /// Padded length of every utterance.
    pub frames: usize,
    /// Inclusive range of words per sentence.
    pub words: (usize, usize),
    pub jitter: f64,
    /// Share of examples tagged [`Split::Test`].
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speech: SpeechConfig::default(),
            frames: 96,
            words: (2, 3),
            jitter: 0.15,
            test_fraction: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.speech.validate()?;
        if self.words.0 == 0 || self.words.0 > self.words.1 {
            return Err(Error::Validation(
                "sentence length range must satisfy 1 ≤ lo ≤ hi".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Validation("test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Evenly interleaved split: example `i` is a test example when the running
/// test quota increases at `i`.
pub fn split_of(i: usize, test_fraction: f64) -> Split {
    let quota = |k: usize| (k as f64 * test_fraction).floor();
    if quota(i + 1) > quota(i) {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechExample {
    pub id: usize,
    pub split: Split,
    pub utt: Utterance,
}

/// Distinct random word sequences; fails if the language cannot supply `n`.
fn distinct_sentences(cfg: &CorpusConfig, n_words: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::Validation(format!(
                "cannot draw {n} distinct sentences from this language"
            )));
        }
        let len = rng.random_range(cfg.words.0..=cfg.words.1);
        let s: Vec<usize> = (0..len).map(|_| rng.random_range(0..n_words)).collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

fn speak(
    lang: &ToyLanguage,
    cfg: &CorpusConfig,
    seed: u64,
    kind: &str,
    sentences: Vec<Vec<usize>>,
) -> Result<Vec<SpeechExample>> {
    sentences
        .into_iter()
        .enumerate()
        .map(|(i, words)| {
            let mut rng = seed::rng(seed, &format!("{kind}/render/{i}"));
            Ok(SpeechExample {
                id: i,
                split: split_of(i, cfg.test_fraction),
                utt: lang.render_fitting(&words, cfg.frames, cfg.jitter, &mut rng)?,
            })
        })
        .collect()
}

/// Spoken word sequences with their transcripts; train and test sentences
/// never coincide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyAsrCorpus {
    pub cfg: CorpusConfig,
    pub seed: u64,
    pub examples: Vec<SpeechExample>,
}

impl ToyAsrCorpus {
    /// Transcript vocabulary: one symbol per word.
    pub fn vocab(&self) -> Vocab {
        Vocab::numbered("w", self.cfg.speech.n_words)
    }

    /// Phone vocabulary for framewise recognition.
    pub fn phone_vocab(&self) -> Vocab {
        Vocab::numbered("p", self.cfg.speech.n_phones)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SpeechExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }
}

pub fn gen_toy_asr(seed: u64, n: usize, cfg: &CorpusConfig) -> Result<ToyAsrCorpus> {
    cfg.validate()?;
    let lang = ToyLanguage::new(&cfg.speech)?;
    let mut rng = seed::rng(seed, "asr/sentences");
    let sentences = distinct_sentences(cfg, lang.n_words(), n, &mut rng)?;
    Ok(ToyAsrCorpus {
        cfg: cfg.clone(),
        seed,
        examples: speak(&lang, cfg, seed, "asr", sentences)?,
    })
}

/// Analogue of a source-target language pair, realized as a bijection on
/// the word alphabet plus a fixed reordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairTag {
    /// Word-level cipher.
    #[serde(rename = "en-de")]
    EnDe,
    /// Reversal followed by a cipher.
    #[serde(rename = "en-it")]
    EnIt,
    /// Adjacent pairs swapped, then a cipher.
    #[serde(rename = "en-nl")]
    EnNl,
}

impl PairTag {
    pub const ALL: [PairTag; 3] = [Self::EnDe, Self::EnIt, Self::EnNl];
    pub const NAMES: &'static str = "en-de, en-it, en-nl";

    pub fn name(self) -> &'static str {
        match self {
            Self::EnDe => "en-de",
            Self::EnIt => "en-it",
            Self::EnNl => "en-nl",
        }
    }

    fn target_prefix(self) -> &'static str {
        match self {
            Self::EnDe => "de",
            Self::EnIt => "it",
            Self::EnNl => "nl",
        }
    }

    /// Cipher `σ` of the pair: source word `w` maps to target word `σ[w]`.
    pub fn cipher(self, world_seed: u64, n_words: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n_words).collect();
        perm.shuffle(&mut seed::rng(world_seed, &format!("pair/{}", self.name())));
        perm
    }

    fn reorder(self, words: &[usize]) -> Vec<usize> {
        match self {
            Self::EnDe => words.to_vec(),
            Self::EnIt => words.iter().rev().copied().collect(),
            Self::EnNl => {
                let mut w = words.to_vec();
                for c in w.chunks_mut(2) {
                    c.reverse();
                }
                w
            }
        }
    }

    /// Target vocabulary: reserved ids then one symbol per target word.
    pub fn vocab(self, n_words: usize) -> Vocab {
        Vocab::numbered(self.target_prefix(), n_words)
    }

    /// Target ids (without BOS/EOS) of a source word sequence.
    pub fn translate(self, cipher: &[usize], words: &[usize]) -> Vec<usize> {
        self.reorder(words).into_iter().map(|w| RESERVED + cipher[w]).collect()
    }

    /// Inverse of [`translate`](Self::translate).
    pub fn invert(self, cipher: &[usize], target: &[usize]) -> Result<Vec<usize>> {
        let mut inverse = vec![0; cipher.len()];
        for (w, &c) in cipher.iter().enumerate() {
            inverse[c] = w;
        }
        let words = target
            .iter()
            .map(|&t| {
                t.checked_sub(RESERVED)
                    .filter(|&c| c < inverse.len())
                    .map(|c| inverse[c])
                    .ok_or(Error::LabelOutOfRange {
                        label: t,
                        classes: RESERVED + cipher.len(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        // every reordering used here is an involution
        Ok(self.reorder(&words))
    }
}

impl std::fmt::Display for PairTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PairTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en-de" => Ok(Self::EnDe),
            "en-it" => Ok(Self::EnIt),
            "en-nl" => Ok(Self::EnNl),
            _ => Err(Error::InvalidEnum {
                field: "pair",
                value: s.into(),
                valid: Self::NAMES.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationExample {
    pub speech: SpeechExample,
    /// `BOS target EOS`.
    pub target: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyParallelCorpus {
    pub pair: PairTag,
    pub cfg: CorpusConfig,
    pub seed: u64,
    pub vocab: Vocab,
    pub cipher: Vec<usize>,
    pub examples: Vec<TranslationExample>,
}

impl ToyParallelCorpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TranslationExample> {
        self.examples.iter().filter(move |e| e.speech.split == split)
    }
}

pub fn gen_toy_translation(seed: u64, pair: PairTag, n: usize, cfg: &CorpusConfig) -> Result<ToyParallelCorpus> {
    cfg.validate()?;
    let lang = ToyLanguage::new(&cfg.speech)?;
    let mut rng = seed::rng(seed, &format!("mt/{}/sentences", pair.name()));
    let sentences = distinct_sentences(cfg, lang.n_words(), n, &mut rng)?;
    let vocab = pair.vocab(lang.n_words());
    let cipher = pair.cipher(cfg.speech.world_seed, lang.n_words());
    let speech = speak(&lang, cfg, seed, &format!("mt/{}", pair.name()), sentences)?;
    let examples = speech
        .into_iter()
        .map(|s| {
            let target = TokenSequence::target(&pair.translate(&cipher, &s.utt.words), &vocab)?;
            Ok(TranslationExample { speech: s, target })
        })
        .collect::<Result<_>>()?;
    Ok(ToyParallelCorpus {
        pair,
        cfg: cfg.clone(),
        seed,
        vocab,
        cipher,
        examples,
    })
}

/// Utterance-level classification task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTask {
    /// A single spoken keyword; the class is the word.
    Keyword,
    /// One intent word among filler words; the class is the intent word.
    Intent,
}

impl ClassTask {
    pub fn name(self) -> &'static str {
        match self {
            Self::Keyword => "keyword",
            Self::Intent => "intent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassExample {
    pub speech: SpeechExample,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyClassCorpus {
    pub task: ClassTask,
    pub n_classes: usize,
    pub cfg: CorpusConfig,
    pub seed: u64,
    pub examples: Vec<ClassExample>,
}

impl ToyClassCorpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClassExample> {
        self.examples.iter().filter(move |e| e.speech.split == split)
    }
}

/// Balanced classification corpus: example `i` has class `i mod n_classes`.
/// Keyword utterances are one word; intent utterances hold the intent word
/// at a random position among `cfg.words.1 - 1` fillers drawn from the
/// remaining words.
pub fn gen_toy_classification(
    seed: u64,
    task: ClassTask,
    n_classes: usize,
    n: usize,
    cfg: &CorpusConfig,
) -> Result<ToyClassCorpus> {
    cfg.validate()?;
    let lang = ToyLanguage::new(&cfg.speech)?;
    let fillers = lang.n_words().saturating_sub(n_classes);
    if n_classes < 2 || n_classes > lang.n_words() || (task == ClassTask::Intent && fillers == 0) {
        return Err(Error::Validation(format!(
            "{} classes do not fit a {}-word language",
            n_classes,
            lang.n_words()
        )));
    }
    let kind = format!("class/{}", task.name());
    let mut rng = seed::rng(seed, &format!("{kind}/sentences"));
    let mut labels = Vec::with_capacity(n);
    let sentences = (0..n)
        .map(|i| {
            let label = i % n_classes;
            labels.push(label);
            match task {
                ClassTask::Keyword => vec![label],
                ClassTask::Intent => {
                    let mut s: Vec<usize> = (1..cfg.words.1.max(2))
                        .map(|_| n_classes + rng.random_range(0..fillers))
                        .collect();
                    let at = rng.random_range(0..=s.len());
                    s.insert(at, label);
                    s
                }
            }
        })
        .collect();
    let examples = speak(&lang, cfg, seed, &kind, sentences)?
        .into_iter()
        .zip(labels)
        .map(|(speech, label)| ClassExample { speech, label })
        .collect();
    Ok(ToyClassCorpus {
        task,
        n_classes,
        cfg: cfg.clone(),
        seed,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_evenly_interleaved() {
        let tests = (0..100).filter(|&i| split_of(i, 0.2) == Split::Test).count();
        assert_eq!(tests, 20);
        assert!((0..10).all(|i| split_of(i, 0.0) == Split::Train));
    }

    #[test]
    fn reorderings_are_involutions() {
        let w = [1, 2, 3, 4, 5];
        for p in PairTag::ALL {
            assert_eq!(p.reorder(&p.reorder(&w)), w);
        }
        assert_eq!(PairTag::EnNl.reorder(&w), vec![2, 1, 4, 3, 5]);
    }

    #[test]
    fn ciphers_are_permutations_and_differ_by_pair() {
        let a = PairTag::EnDe.cipher(0, 12);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        assert_ne!(a, PairTag::EnIt.cipher(0, 12));
    }

    #[test]
    fn empty_corpus_is_allowed() {
        let c = gen_toy_asr(0, 0, &CorpusConfig::default()).unwrap();
        assert!(c.examples.is_empty());
    }
}
