//! A toy spoken language rendered directly in the LFBE domain: a small phone
//! inventory with fixed spectral signatures, and words spelled with those
//! phones.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed;
use crate::signal::LogMelFrames;

/// Frame rate of synthesized features (10 ms hop).
pub const FRAME_RATE: f64 = 100.0;

/// Level of a silent frame in every mel bin.
pub const SILENCE_LEVEL: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechConfig {
    /// Seed of the language itself (signatures and spellings), shared by
    /// every corpus that should speak the same language.
    pub world_seed: u64,
    pub n_mels: usize,
    pub n_phones: usize,
    pub n_words: usize,
    /// Inclusive range of phones per word.
    pub word_phones: (usize, usize),
    /// Inclusive range of frames per phone.
    pub phone_frames: (usize, usize),
    /// Inclusive range of silent frames before the first and after each word.
    pub gap_frames: (usize, usize),
    /// Standard deviation of per-element Gaussian jitter.
    pub jitter: f64,
}

impl Default for SpeechConfig {
    fn default() -> Self {
        Self {
            world_seed: 0,
            n_mels: 80,
            n_phones: 8,
            n_words: 12,
            word_phones: (2, 3),
            phone_frames: (6, 10),
            gap_frames: (3, 6),
            jitter: 0.15,
        }
    }
}

impl SpeechConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo <= hi;
        if self.n_mels == 0 || self.n_phones < 2 || self.n_words == 0 {
            return Err(Error::Validation(
                "speech config needs mel bins, ≥ 2 phones and words".into(),
            ));
        }
        if !range_ok(self.word_phones) || !range_ok(self.phone_frames) || !range_ok(self.gap_frames) {
            return Err(Error::Validation("speech config ranges must satisfy lo ≤ hi".into()));
        }
        if self.word_phones.0 == 0 || self.phone_frames.0 == 0 {
            return Err(Error::Validation("words need phones and phones need frames".into()));
        }
        let (lo, hi) = self.word_phones;
        let spellings: usize = (lo..=hi)
            .map(|n| self.n_phones * (self.n_phones - 1).pow(n as u32 - 1))
            .sum();
        if spellings < self.n_words {
            return Err(Error::Validation(format!(
                "{} words cannot be spelled with {} phones",
                self.n_words, self.n_phones
            )));
        }
        Ok(())
    }
}

/// One rendered utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub features: LogMelFrames,
    /// Word ids in speaking order.
    pub words: Vec<usize>,
    /// Gold phone string (no silences).
    pub phones: Vec<usize>,
    /// Phone id of each frame, `None` for silence and padding.
    pub frame_phones: Vec<Option<usize>>,
}

/// Phone signatures and word spellings derived from `world_seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLanguage {
    pub cfg: SpeechConfig,
    /// `[n_phones][n_mels]` noiseless frame of each phone.
    pub signatures: Vec<Vec<f64>>,
    /// Phone spelling of each word; adjacent phones always differ.
    pub words: Vec<Vec<usize>>,
}

impl ToyLanguage {
    pub fn new(cfg: &SpeechConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(cfg.world_seed, "speech/signatures");
        let f = cfg.n_mels as f64;
        let signatures = (0..cfg.n_phones)
            .map(|_| {
                let bumps: Vec<(f64, f64, f64)> = (0..3)
                    .map(|_| {
                        (
                            rng.random_range(1.5..4.0),
                            rng.random_range(0.0..f),
                            rng.random_range(0.03 * f..0.08 * f),
                        )
                    })
                    .collect();
                (0..cfg.n_mels)
                    .map(|m| {
                        let m = m as f64;
                        SILENCE_LEVEL
                            + bumps
                                .iter()
                                .map(|&(a, c, w)| a * (-(m - c).powi(2) / (2.0 * w * w)).exp())
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect();

        let mut rng = seed::rng(cfg.world_seed, "speech/lexicon");
        let mut words: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_words);
        while words.len() < cfg.n_words {
            let n = rng.random_range(cfg.word_phones.0..=cfg.word_phones.1);
            let mut w = vec![rng.random_range(0..cfg.n_phones)];
            while w.len() < n {
                let p = rng.random_range(0..cfg.n_phones - 1);
                let last = *w.last().expect("nonempty");
                w.push(if p >= last { p + 1 } else { p });
            }
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            signatures,
            words,
        })
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn silence(&self) -> Vec<f64> {
        vec![SILENCE_LEVEL; self.cfg.n_mels]
    }

    /// Longest possible rendering of `n` words.
    pub fn max_frames(&self, n: usize) -> usize {
        let c = &self.cfg;
        c.gap_frames.1 + n * (c.word_phones.1 * c.phone_frames.1 + c.gap_frames.1)
    }

    /// Speaks `words` into a `frames`-long matrix: a leading gap, then each
    /// word followed by a gap. Frames past the valid length are zero.
    pub fn render(&self, words: &[usize], frames: usize, jitter: f64, rng: &mut impl Rng) -> Result<Utterance> {
        let c = &self.cfg;
        let mut plan: Vec<(Option<usize>, usize)> = Vec::new();
        plan.push((None, rng.random_range(c.gap_frames.0..=c.gap_frames.1)));
        let mut phones = Vec::new();
        for &w in words {
            let spelling = self
                .words
                .get(w)
                .ok_or_else(|| Error::Validation(format!("word {w} outside lexicon of {}", self.words.len())))?;
            for &p in spelling {
                plan.push((Some(p), rng.random_range(c.phone_frames.0..=c.phone_frames.1)));
                phones.push(p);
            }
            plan.push((None, rng.random_range(c.gap_frames.0..=c.gap_frames.1)));
        }
        let valid: usize = plan.iter().map(|&(_, d)| d).sum();
        if valid > frames {
            return Err(Error::Validation(format!(
                "utterance needs {valid} frames, only {frames} available"
            )));
        }
        let mut values = vec![0.0; frames * c.n_mels];
        let mut frame_phones = vec![None; frames];
        let silence = self.silence();
        let mut t = 0;
        for (p, d) in plan {
            let base = match p {
                Some(p) => &self.signatures[p],
                None => &silence,
            };
            for _ in 0..d {
                for (o, &b) in values[t * c.n_mels..(t + 1) * c.n_mels].iter_mut().zip(base) {
                    let n: f64 = StandardNormal.sample(rng);
                    *o = b + jitter * n;
                }
                frame_phones[t] = p;
                t += 1;
            }
        }
        let mut features = LogMelFrames::new(Tensor::from_vec(&[frames, c.n_mels], values), FRAME_RATE)?;
        features.valid_len = valid;
        Ok(Utterance {
            features,
            words: words.to_vec(),
            phones,
            frame_phones,
        })
    }

    /// Renders a random sentence of `n_words` words (resampling durations
    /// until it fits; fewer words if it never does).
    pub fn random_utterance(
        &self,
        n_words: usize,
        frames: usize,
        jitter: f64,
        rng: &mut impl Rng,
    ) -> Result<Utterance> {
        let words: Vec<usize> = (0..n_words).map(|_| rng.random_range(0..self.n_words())).collect();
        self.render_fitting(&words, frames, jitter, rng)
    }

    /// Like [`render`](Self::render), resampling durations until `words`
    /// fit in `frames`.
    pub fn render_fitting(&self, words: &[usize], frames: usize, jitter: f64, rng: &mut impl Rng) -> Result<Utterance> {
        for _ in 0..64 {
            if let Ok(u) = self.render(words, frames, jitter, rng) {
                return Ok(u);
            }
        }
        Err(Error::Validation(format!(
            "{} words never fit in {frames} frames",
            words.len()
        )))
    }

    /// Nearest signature (or silence) of every valid frame.
    pub fn nearest_phones(&self, features: &LogMelFrames) -> Vec<Option<usize>> {
        let silence = self.silence();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        (0..features.valid_len)
            .map(|t| {
                let x = features.frame(t);
                let mut best = (dist(x, &silence), None);
                for (p, s) in self.signatures.iter().enumerate() {
                    let d = dist(x, s);
                    if d < best.0 {
                        best = (d, Some(p));
                    }
                }
                best.1
            })
            .collect()
    }

    /// Reads words back from per-frame phone decisions: silence separates
    /// words, repeated frames collapse, and each phone string is looked up.
    pub fn words_from_frames(&self, frames: &[Option<usize>]) -> Vec<Option<usize>> {
        let mut out = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        let mut flush = |cur: &mut Vec<usize>| {
            if !cur.is_empty() {
                out.push(self.words.iter().position(|w| w == cur));
                cur.clear();
            }
        };
        let mut prev = None;
        for &f in frames {
            match f {
                None => flush(&mut current),
                Some(p) if prev != Some(p) => current.push(p),
                Some(_) => {}
            }
            prev = f;
        }
        flush(&mut current);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spellings_are_unique_without_adjacent_repeats() {
        let lang = ToyLanguage::new(&SpeechConfig::default()).unwrap();
        assert_eq!(lang.words.len(), 12);
        for (i, w) in lang.words.iter().enumerate() {
            assert!(w.windows(2).all(|p| p[0] != p[1]));
            assert!(!lang.words[..i].contains(w));
        }
    }

    #[test]
    fn render_marks_frames_and_padding() {
        let lang = ToyLanguage::new(&SpeechConfig::default()).unwrap();
        let mut rng = seed::rng(1, "t");
        let u = lang.render(&[0, 3], 100, 0.0, &mut rng).unwrap();
        assert_eq!(u.features.n_frames(), 100);
        assert!(u.features.valid_len <= 100);
        let phones: usize = u.frame_phones.iter().filter(|p| p.is_some()).count();
        assert!(phones >= (lang.words[0].len() + lang.words[3].len()) * 6);
        assert!(u.features.frame(99).iter().all(|&v| v == 0.0) || u.features.valid_len == 100);
        assert_eq!(lang.words_from_frames(&u.frame_phones), vec![Some(0), Some(3)]);
    }

    #[test]
    fn overlong_sentence_is_rejected() {
        let lang = ToyLanguage::new(&SpeechConfig::default()).unwrap();
        let mut rng = seed::rng(1, "t");
        assert!(lang.render(&[0; 10], 40, 0.0, &mut rng).is_err());
    }
}
