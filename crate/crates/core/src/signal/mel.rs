use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{LogMelFrames, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Short-time analysis settings for [`lfbe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LfbeConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    /// Energies are clamped to this before the log.
    pub floor: f64,
}

impl Default for LfbeConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            floor: 1e-10,
        }
    }
}

impl LfbeConfig {
    pub fn win_samples(&self, rate: u32) -> usize {
        (self.win_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, rate: u32) -> usize {
        (self.hop_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.win_samples(SAMPLE_RATE);
        let hop = self.hop_samples(SAMPLE_RATE);
        if self.n_mels == 0 {
            return Err(Error::Validation("n_mels must be at least 1".into()));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.win_ms) || hop == 0 {
            return Err(Error::Validation(format!(
                "need 0 < hop_ms <= win_ms, got hop {} win {}",
                self.hop_ms, self.win_ms
            )));
        }
        if self.n_fft < win {
            return Err(Error::Validation(format!(
                "n_fft {} is shorter than the {win}-sample window",
                self.n_fft
            )));
        }
        if !(self.floor > 0.0) {
            return Err(Error::Validation("floor must be positive".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of whole windows that fit in `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        1 + (len - win) / hop
    }
}

/// Triangular filters with unit peaks, centers equally spaced in mel from
/// 0 Hz to Nyquist. Returns `[n_mels, n_fft/2 + 1]`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, rate: u32) -> Tensor<f64> {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut w = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * rate as f64 / n_fft as f64;
            w[m * bins + k] = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
        }
    }
    Tensor::from_vec(&[n_mels, bins], w)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Log-mel filterbank energies of 16 kHz audio.
pub fn lfbe(w: &Waveform, cfg: &LfbeConfig) -> Result<LogMelFrames> {
    w.validate()?;
    cfg.validate()?;
    if w.rate != SAMPLE_RATE {
        return Err(Error::Validation(format!(
            "LFBE expects {SAMPLE_RATE} Hz audio, got {} Hz",
            w.rate
        )));
    }
    let win = cfg.win_samples(w.rate);
    let hop = cfg.hop_samples(w.rate);
    if w.len() < win {
        return Err(Error::AudioTooShort {
            len: w.len(),
            window: win,
        });
    }
    let frames = frame_count(w.len(), win, hop);
    let bank = mel_filterbank(cfg.n_mels, cfg.n_fft, w.rate);
    let bins = bank.cols();
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; bins];
    let log_floor = cfg.floor.ln();
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let seg = &w.samples[t * hop..t * hop + win];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(if i < win { seg[i] * window[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = bank.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(if e > cfg.floor { e.ln() } else { log_floor });
        }
    }
    LogMelFrames::new(Tensor::from_vec(&[frames, cfg.n_mels], out), w.rate as f64 / hop as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_window_and_hop_in_samples() {
        let c = LfbeConfig::default();
        assert_eq!((c.win_samples(16_000), c.hop_samples(16_000)), (400, 160));
    }

    #[test]
    fn one_second_gives_98_frames() {
        assert_eq!(frame_count(16_000, 400, 160), 98);
        assert_eq!(frame_count(399, 400, 160), 0);
        assert_eq!(frame_count(400, 400, 160), 1);
    }

    #[test]
    fn short_audio_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(matches!(
            lfbe(&w, &LfbeConfig::default()),
            Err(Error::AudioTooShort { len: 399, window: 400 })
        ));
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let w = Waveform::new(vec![0.1; 8000], 8000).unwrap();
        assert!(lfbe(&w, &LfbeConfig::default()).is_err());
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            LfbeConfig {
                n_mels: 0,
                ..Default::default()
            },
            LfbeConfig {
                hop_ms: 30.0,
                ..Default::default()
            },
            LfbeConfig {
                n_fft: 256,
                ..Default::default()
            },
            LfbeConfig {
                floor: 0.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn filters_are_nonnegative_and_peak_at_most_one() {
        let b = mel_filterbank(80, 512, 16_000);
        assert!(b.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
