//! Audio frontend: resampling, log-mel filterbank energies (LFBE) and
//! fixed-length frame clipping.
//!
//! ```
//! use avstage::signal::{lfbe, LfbeConfig, Waveform};
//!
//! let silence = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
//! let cfg = LfbeConfig::default();
//! let f = lfbe(&silence, &cfg).unwrap();
//! assert_eq!(f.n_frames(), 98);
//! assert!(f.values.data().iter().all(|&v| v == cfg.floor.ln()));
//! ```

mod mel;
mod resample;
pub mod wav;

pub use mel::{frame_count, hz_to_mel, lfbe, mel_filterbank, mel_to_hz, LfbeConfig};
pub use resample::resample;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Rate every feature extractor expects.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, rate: u32) -> Result<Self> {
        let w = Self { samples, rate };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Validation(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }
}

/// A `T × F` LFBE matrix. Rows past `valid_len` are padding.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogMelFrames {
    pub values: Tensor<f64>,
    pub frame_rate: f64,
    pub valid_len: usize,
}

impl LogMelFrames {
    /// Wraps a `[T, F]` matrix with every row valid.
    pub fn new(values: Tensor<f64>, frame_rate: f64) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape(format!(
                "LFBE frames must be rank 2, got {:?}",
                values.shape()
            )));
        }
        let valid_len = values.rows();
        Ok(Self {
            values,
            frame_rate,
            valid_len,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }
}

/// Keeps the first `max_frames` frames, zero-padding shorter inputs up to
/// `max_frames` and recording how many rows are real.
pub fn clip_frames(f: &LogMelFrames, max_frames: usize) -> Result<LogMelFrames> {
    if max_frames == 0 {
        return Err(Error::Validation("max_frames must be at least 1".into()));
    }
    let n_mels = f.n_mels();
    let keep = f.n_frames().min(max_frames);
    let mut data = vec![0.0; max_frames * n_mels];
    data[..keep * n_mels].copy_from_slice(&f.values.data()[..keep * n_mels]);
    Ok(LogMelFrames {
        values: Tensor::from_vec(&[max_frames, n_mels], data),
        frame_rate: f.frame_rate,
        valid_len: f.valid_len.min(keep),
    })
}
