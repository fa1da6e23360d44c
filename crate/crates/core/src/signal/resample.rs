use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the interpolation kernel on each side.
const ZEROS: usize = 16;
/// Passband edge as a fraction of the lower Nyquist rate.
const ROLLOFF: f64 = 0.95;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(x: f64, half: f64) -> f64 {
    if x.abs() >= half {
        0.0
    } else {
        let r = x / half;
        0.42 + 0.5 * (PI * r).cos() + 0.08 * (2.0 * PI * r).cos()
    }
}

/// Band-limited rational-ratio resampling with a windowed-sinc polyphase
/// filter. Each phase's taps are normalized to unit sum so DC passes exactly.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    w.validate()?;
    if target_rate == 0 {
        return Err(Error::Validation("target rate must be positive".into()));
    }
    if target_rate == w.rate || w.is_empty() {
        return Ok(Waveform {
            samples: w.samples.clone(),
            rate: target_rate,
        });
    }
    let g = gcd(w.rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = w.rate as u64 / g;
    let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
    let half = ZEROS as f64 / cutoff;
    let reach = half.ceil() as i64;

    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut taps: Vec<f64> = (-reach..=reach)
                .map(|j| {
                    let d = frac - j as f64;
                    cutoff * sinc(cutoff * d) * blackman(d, half)
                })
                .collect();
            let s: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= s);
            taps
        })
        .collect();

    let n_in = w.len() as u64;
    let n_out = (n_in * up).div_ceil(down);
    let x = &w.samples;
    let mut out = Vec::with_capacity(n_out as usize);
    for n in 0..n_out {
        let pos = n * down;
        let base = (pos / up) as i64;
        let taps = &phases[(pos % up) as usize];
        let mut acc = 0.0;
        for (i, &h) in taps.iter().enumerate() {
            let k = base + i as i64 - reach;
            if k >= 0 && (k as u64) < n_in {
                acc += h * x[k as usize];
            }
        }
        out.push(acc);
    }
    Ok(Waveform {
        samples: out,
        rate: target_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_rate_is_identity() {
        let w = Waveform::new(vec![0.1, -0.4, 0.25], 16_000).unwrap();
        assert_eq!(resample(&w, 16_000).unwrap(), w);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let w = Waveform::new(vec![], 8000).unwrap();
        let r = resample(&w, 16_000).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.rate, 16_000);
    }

    #[test]
    fn dc_is_preserved_away_from_edges() {
        let w = Waveform::new(vec![0.5; 8000], 8000).unwrap();
        let r = resample(&w, 16_000).unwrap();
        assert_eq!(r.len(), 16_000);
        let edge = 2 * ZEROS * 2;
        for &s in &r.samples[edge..16_000 - edge] {
            assert!((s - 0.5).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn output_length_is_ceiling_of_ratio() {
        let w = Waveform::new(vec![0.0; 1001], 48_000).unwrap();
        assert_eq!(resample(&w, 16_000).unwrap().len(), 334);
    }
}
