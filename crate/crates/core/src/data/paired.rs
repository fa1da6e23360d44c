//! Paired audio-video examples tied together by a shared Gaussian latent.
//!
//! Each example draws `z ~ N(0, I_k)`. The video is a fixed linear template
//! bank applied to `z`; the audio applies its own bank to
//! `ρ·z + sqrt(1 − ρ²)·u` with a private latent `u`. The coupling `ρ` and the
//! noise level set how much the two modalities share.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::speech::{SpeechConfig, ToyLanguage, FRAME_RATE};
use super::{AvExample, Split};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed;
use crate::signal::LogMelFrames;
use crate::vision::{voxelize, PatchGeometry, VideoClip, VoxelGrid};

/// Dataset axis of the pre-training corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Profile {
    /// Speech-like audio, low noise, full audio-video redundancy.
    #[serde(rename = "clean")]
    Clean,
    /// Speech-like audio with heavier noise and a partly private latent.
    #[serde(rename = "noisy")]
    Noisy,
    /// Texture audio only weakly tied to the video.
    #[serde(rename = "non-speech")]
    NonSpeech,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Self::NonSpeech, Self::Noisy, Self::Clean];
    pub const NAMES: &'static str = "non-speech, noisy, clean";

    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Noisy => "noisy",
            Self::NonSpeech => "non-speech",
        }
    }

    /// Weight `ρ` of the shared latent in the audio.
    pub fn coupling(self) -> f64 {
        match self {
            Self::Clean => 1.0,
            Self::Noisy => 0.8,
            Self::NonSpeech => 0.3,
        }
    }

    pub fn noise(self) -> f64 {
        match self {
            Self::Clean => 0.1,
            Self::Noisy => 0.5,
            Self::NonSpeech => 0.3,
        }
    }

    pub fn speech_like(self) -> bool {
        self != Self::NonSpeech
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "noisy" => Ok(Self::Noisy),
            "non-speech" | "non_speech" => Ok(Self::NonSpeech),
            _ => Err(Error::InvalidEnum {
                field: "profile",
                value: s.into(),
                valid: Self::NAMES.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedAvConfig {
    pub profile: Profile,
    pub n_frames: usize,
    pub n_mels: usize,
    /// `(T, H, W, C)` of each clip.
    pub video: (usize, usize, usize, usize),
    pub geometry: PatchGeometry,
    pub latent_dim: usize,
    pub coupling: f64,
    pub noise: f64,
    /// Language used to render the speech-like audio templates.
    pub speech: SpeechConfig,
    /// Seed of the template banks (shared by every dataset of a world).
    pub world_seed: u64,
}

impl PairedAvConfig {
    /// 200×80 audio, 4×32×32×3 video, 8×8×2 patches, preset noise.
    pub fn desk(profile: Profile) -> Self {
        Self {
            profile,
            n_frames: 200,
            n_mels: 80,
            video: (4, 32, 32, 3),
            geometry: PatchGeometry::desk(),
            latent_dim: 8,
            coupling: profile.coupling(),
            noise: profile.noise(),
            speech: SpeechConfig::default(),
            world_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (t, h, w, _) = self.video;
        self.geometry.check(t, h, w)?;
        if self.latent_dim == 0 || self.n_frames == 0 || self.n_mels != self.speech.n_mels {
            return Err(Error::Validation(
                "paired AV config needs a latent, frames and matching mel bins".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.coupling) || !(self.noise >= 0.0) {
            return Err(Error::Validation(
                "coupling must lie in [0, 1] and noise must be ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Smooth random `[rows, cols]` field: a coarse Gaussian grid upsampled by
/// bilinear interpolation.
fn smooth_field(rows: usize, cols: usize, coarse: (usize, usize), rng: &mut impl Rng) -> Vec<f64> {
    let (cr, cc) = (coarse.0.max(2), coarse.1.max(2));
    let grid: Vec<f64> = (0..cr * cc).map(|_| normal(rng)).collect();
    let at = |i: usize, n: usize, m: usize| {
        let x = i as f64 * (m - 1) as f64 / (n.max(2) - 1) as f64;
        let i0 = (x.floor() as usize).min(m - 2);
        (i0, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (r0, fr) = at(r, rows, cr);
        for c in 0..cols {
            let (c0, fc) = at(c, cols, cc);
            let g = |a: usize, b: usize| grid[a * cc + b];
            let top = g(r0, c0) * (1.0 - fc) + g(r0, c0 + 1) * fc;
            let bot = g(r0 + 1, c0) * (1.0 - fc) + g(r0 + 1, c0 + 1) * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

/// Linear template banks of a world: `k` audio templates over `T·F`
/// elements and `k` video templates over voxel-token elements, each
/// standardized to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct AvTemplates {
    pub audio: Vec<Vec<f64>>,
    pub video: Vec<Vec<f64>>,
    audio_gram: Vec<f64>,
    video_gram: Vec<f64>,
}

impl AvTemplates {
    pub fn new(cfg: &PairedAvConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.latent_dim;
        let world = cfg.world_seed;
        let audio: Vec<Vec<f64>> = if cfg.profile.speech_like() {
            let lang = ToyLanguage::new(&cfg.speech)?;
            let n_words = (1..)
                .take_while(|&n| lang.max_frames(n) <= cfg.n_frames)
                .last()
                .unwrap_or(1);
            let mut rng = seed::rng(world, "paired/audio/speech");
            (0..k)
                .map(|_| {
                    let u = lang.random_utterance(n_words, cfg.n_frames, 0.0, &mut rng)?;
                    let mut v = u.features.values.into_data();
                    standardize(&mut v);
                    Ok(v)
                })
                .collect::<Result<_>>()?
        } else {
            let mut rng = seed::rng(world, "paired/audio/texture");
            (0..k)
                .map(|_| {
                    let mut v = smooth_field(cfg.n_frames, cfg.n_mels, (cfg.n_frames / 8, cfg.n_mels / 8), &mut rng);
                    standardize(&mut v);
                    v
                })
                .collect()
        };
        let (t, h, w, c) = cfg.video;
        let mut rng = seed::rng(world, "paired/video");
        let video = (0..k)
            .map(|_| {
                let mut pixels = Vec::with_capacity(t * h * w * c);
                for _ in 0..t {
                    let planes: Vec<Vec<f64>> = (0..c).map(|_| smooth_field(h, w, (4, 4), &mut rng)).collect();
                    for i in 0..h * w {
                        pixels.extend(planes.iter().map(|p| p[i] as f32));
                    }
                }
                let clip = VideoClip::new(t, h, w, c, pixels)?;
                let grid = voxelize(&clip, &cfg.geometry)?;
                let mut v: Vec<f64> = grid.tokens.data().iter().map(|&x| x as f64).collect();
                standardize(&mut v);
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        let gram = |b: &[Vec<f64>]| {
            let mut m = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    m[i * k + j] = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                }
            }
            m
        };
        Ok(Self {
            audio_gram: gram(&audio),
            video_gram: gram(&video),
            audio,
            video,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.audio.len()
    }

    fn project(bank: &[Vec<f64>], gram: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let rhs: Vec<f64> = bank.iter().map(|b| b.iter().zip(x).map(|(p, q)| p * q).sum()).collect();
        solve_spd(gram, &rhs)
    }

    /// Least-squares latent of an audio matrix under the audio bank.
    pub fn audio_latent(&self, audio: &LogMelFrames) -> Result<Vec<f64>> {
        Self::project(&self.audio, &self.audio_gram, audio.values.data())
    }

    pub fn video_latent(&self, video: &VoxelGrid) -> Result<Vec<f64>> {
        let x: Vec<f64> = video.tokens.data().iter().map(|&v| v as f64).collect();
        Self::project(&self.video, &self.video_gram, &x)
    }

    /// Cosine similarity of the two recovered latents.
    pub fn similarity(&self, audio: &LogMelFrames, video: &VoxelGrid) -> Result<f64> {
        let a = self.audio_latent(audio)?;
        let v = self.video_latent(video)?;
        let dot: f64 = a.iter().zip(&v).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(dot / (na * nv).max(1e-300))
    }
}

/// Solves `A x = b` for a symmetric positive definite `A` by Cholesky.
fn solve_spd(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Validation("template bank is rank deficient".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedAvDataset {
    pub cfg: PairedAvConfig,
    pub seed: u64,
    pub examples: Vec<AvExample>,
    /// Shared latent `z` of each example.
    pub latents: Vec<Vec<f64>>,
}

impl PairedAvDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Generates `n ≥ 2` paired examples. Example `i` depends only on
/// `(seed, i)` and the world templates.
pub fn gen_paired_av(seed: u64, n: usize, cfg: &PairedAvConfig) -> Result<PairedAvDataset> {
    if n < 2 {
        return Err(Error::Validation(format!(
            "paired dataset needs at least 2 examples, got {n}"
        )));
    }
    let templates = AvTemplates::new(cfg)?;
    gen_paired_with(seed, n, cfg, &templates)
}

pub fn gen_paired_with(seed: u64, n: usize, cfg: &PairedAvConfig, templates: &AvTemplates) -> Result<PairedAvDataset> {
    let k = cfg.latent_dim;
    let norm = 1.0 / (k as f64).sqrt();
    let rho = cfg.coupling;
    let private = (1.0 - rho * rho).max(0.0).sqrt();
    let mut examples = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seed::rng(seed, &format!("paired/{i}"));
        let z: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let u: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let ca: Vec<f64> = z.iter().zip(&u).map(|(z, u)| norm * (rho * z + private * u)).collect();
        let mut audio = vec![0.0; cfg.n_frames * cfg.n_mels];
        for (c, t) in ca.iter().zip(&templates.audio) {
            audio.iter_mut().zip(t).for_each(|(o, v)| *o += c * v);
        }
        if cfg.noise > 0.0 {
            audio.iter_mut().for_each(|o| *o += cfg.noise * normal(&mut rng));
        }
        let mut video = vec![0.0; templates.video[0].len()];
        for (c, t) in z.iter().zip(&templates.video) {
            video.iter_mut().zip(t).for_each(|(o, v)| *o += norm * c * v);
        }
        if cfg.noise > 0.0 {
            video.iter_mut().for_each(|o| *o += cfg.noise * normal(&mut rng));
        }
        let (t, h, w, c) = cfg.video;
        let (gt, gh, gw) = cfg.geometry.grid(t, h, w);
        let tokens = Tensor::from_vec(
            &[gt * gh * gw, cfg.geometry.token_dim(c)],
            video.into_iter().map(|v| v as f32).collect(),
        );
        examples.push(AvExample {
            id: i,
            split: Split::Train,
            audio: LogMelFrames::new(Tensor::from_vec(&[cfg.n_frames, cfg.n_mels], audio), FRAME_RATE)?,
            video: VoxelGrid {
                tokens,
                geometry: cfg.geometry,
                source_dims: cfg.video,
            },
        });
        latents.push(z);
    }
    Ok(PairedAvDataset {
        cfg: cfg.clone(),
        seed,
        examples,
        latents,
    })
}

/// Mean matched minus mean mismatched (example `i` against `i + 1`)
/// template similarity.
pub fn similarity_gap(ds: &PairedAvDataset, templates: &AvTemplates) -> Result<f64> {
    let n = ds.examples.len();
    let mut matched = 0.0;
    let mut mismatched = 0.0;
    for i in 0..n {
        let a = &ds.examples[i].audio;
        matched += templates.similarity(a, &ds.examples[i].video)?;
        mismatched += templates.similarity(a, &ds.examples[(i + 1) % n].video)?;
    }
    Ok((matched - mismatched) / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_small_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = solve_spd(&a, &[2.0, 1.0]).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_field_hits_grid_corners() {
        let mut rng = seed::rng(0, "f");
        let f = smooth_field(9, 5, (3, 2), &mut rng);
        assert_eq!(f.len(), 45);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn profile_names_round_trip() {
        for p in Profile::ALL {
            assert_eq!(p.name().parse::<Profile>().unwrap(), p);
        }
        assert!("kinetics".parse::<Profile>().is_err());
    }
}
