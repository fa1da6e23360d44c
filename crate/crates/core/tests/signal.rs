use std::f64::consts::PI;

use avstage::signal::{frame_count, lfbe, resample, LfbeConfig, Waveform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

fn mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Filter edges computed from the natural-log form of the mel scale.
fn edges(n_mels: usize, rate: f64) -> Vec<f64> {
    let top = mel(rate / 2.0);
    (0..n_mels + 2)
        .map(|i| inv_mel(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

fn reference_lfbe(samples: &[f64], cfg: &LfbeConfig) -> Vec<Vec<f64>> {
    let (win, hop) = (400, 160);
    let e = edges(cfg.n_mels, 16_000.0);
    let mut out = Vec::new();
    let mut start = 0;
    while start + win <= samples.len() {
        let frame: Vec<f64> = (0..win)
            .map(|n| samples[start + n] * (0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()))
            .collect();
        let p = naive_power(&frame, cfg.n_fft);
        let row = (0..cfg.n_mels)
            .map(|m| {
                let mut s = 0.0;
                for (k, &pk) in p.iter().enumerate() {
                    let f = k as f64 * 16_000.0 / cfg.n_fft as f64;
                    let w = if f > e[m] && f <= e[m + 1] {
                        (f - e[m]) / (e[m + 1] - e[m])
                    } else if f > e[m + 1] && f < e[m + 2] {
                        (e[m + 2] - f) / (e[m + 2] - e[m + 1])
                    } else {
                        0.0
                    };
                    s += w * pk;
                }
                s.max(cfg.floor).ln()
            })
            .collect();
        out.push(row);
        start += hop;
    }
    out
}

#[test]
fn white_noise_matches_naive_dft_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples: Vec<f64> = (0..2400).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cfg = LfbeConfig::default();
    let got = lfbe(&Waveform::new(samples.clone(), 16_000).unwrap(), &cfg).unwrap();
    let want = reference_lfbe(&samples, &cfg);
    assert_eq!(got.n_frames(), want.len());
    for (t, row) in want.iter().enumerate() {
        for (m, &w) in row.iter().enumerate() {
            let g = got.frame(t)[m];
            assert!(
                (g - w).abs() <= 1e-9 * w.abs().max(1.0),
                "frame {t} mel {m}: {g} vs {w}"
            );
        }
    }
}

#[test]
fn tone_peaks_in_nearest_center_bin() {
    let cfg = LfbeConfig::default();
    let samples: Vec<f64> = (0..16_000)
        .map(|n| 0.5 * (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin())
        .collect();
    let f = lfbe(&Waveform::new(samples, 16_000).unwrap(), &cfg).unwrap();
    let e = edges(cfg.n_mels, 16_000.0);
    let expected = (0..cfg.n_mels)
        .min_by(|&a, &b| (e[a + 1] - 1000.0).abs().total_cmp(&(e[b + 1] - 1000.0).abs()))
        .unwrap();
    for t in 0..f.n_frames() {
        let row = f.frame(t);
        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, expected, "frame {t}");
    }
}

#[test]
fn silence_is_exactly_log_floor() {
    let cfg = LfbeConfig::default();
    let f = lfbe(&Waveform::new(vec![0.0; 16_000], 16_000).unwrap(), &cfg).unwrap();
    assert_eq!(f.n_frames(), 98);
    assert_eq!(f.n_mels(), 80);
    assert!(f.values.data().iter().all(|&v| v == cfg.floor.ln()));
}

#[test]
fn resampled_sine_keeps_its_frequency() {
    let src: Vec<f64> = (0..48_000)
        .map(|n| (2.0 * PI * 440.0 * n as f64 / 48_000.0).sin())
        .collect();
    let out = resample(&Waveform::new(src, 48_000).unwrap(), 16_000).unwrap();
    assert_eq!(out.len(), 16_000);
    // Brute-force DFT over 1 s: bin k is k Hz.
    let x = &out.samples;
    let mag = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &v) in x.iter().enumerate() {
            let a = -2.0 * PI * (k * n) as f64 / x.len() as f64;
            re += v * a.cos();
            im += v * a.sin();
        }
        re * re + im * im
    };
    let peak = (300..600).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
    assert!(peak.abs_diff(440) <= 1, "peak at {peak} Hz");
}

#[test]
fn constant_upsampled_is_constant() {
    let out = resample(&Waveform::new(vec![0.5; 8000], 8000).unwrap(), 16_000).unwrap();
    assert_eq!(out.len(), 16_000);
    let interior = &out.samples[100..15_900];
    assert!(interior.iter().all(|&s| (s - 0.5).abs() < 1e-9));
}

#[test]
fn lfbe_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s: Vec<f64> = (0..4000).map(|_| rng.random_range(-0.3..0.3)).collect();
    let w = Waveform::new(s, 16_000).unwrap();
    let a = lfbe(&w, &LfbeConfig::default()).unwrap();
    let b = lfbe(&w, &LfbeConfig::default()).unwrap();
    assert!(a
        .values
        .data()
        .iter()
        .zip(b.values.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn framing_formula_matches_loop(len in 1usize..5000, win in 1usize..600, hop_frac in 0.01f64..1.0) {
        let hop = ((win as f64 * hop_frac).ceil() as usize).max(1);
        let mut count = 0;
        let mut start = 0;
        while start + win <= len {
            count += 1;
            start += hop;
        }
        prop_assert_eq!(frame_count(len, win, hop), count);
    }

    #[test]
    fn no_entry_below_log_floor(seed in any::<u64>(), scale in prop_oneof![Just(0.0), 1e-8f64..1.0], len in 400usize..1200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..len).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let cfg = LfbeConfig::default();
        let f = lfbe(&Waveform::new(s, 16_000).unwrap(), &cfg).unwrap();
        prop_assert!(f.values.data().iter().all(|&v| v >= cfg.floor.ln()));
    }

    #[test]
    fn resampling_twice_to_the_same_rate_is_idempotent(seed in any::<u64>(), rate in prop_oneof![Just(8000u32), Just(22_050), Just(44_100)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let once = resample(&Waveform::new(s, rate).unwrap(), 16_000).unwrap();
        let twice = resample(&once, 16_000).unwrap();
        prop_assert_eq!(once.len(), twice.len());
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
