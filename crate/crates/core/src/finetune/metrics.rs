//! Edit-distance error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimal number of substitutions, insertions and deletions turning
/// `reference` into `hypothesis`, all at unit cost.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Accumulated edit errors over reference tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub errors: usize,
    pub reference_len: usize,
}

impl ErrorCounts {
    pub fn of<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::EmptyReference);
        }
        Ok(Self {
            errors: edit_distance(reference, hypothesis),
            reference_len: reference.len(),
        })
    }

    pub fn add(&mut self, other: Self) {
        self.errors += other.errors;
        self.reference_len += other.reference_len;
    }

    pub fn rate(self) -> Result<f64> {
        if self.reference_len == 0 {
            return Err(Error::EmptyReference);
        }
        Ok(self.errors as f64 / self.reference_len as f64)
    }
}

/// Word error rate of one hypothesis.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    ErrorCounts::of(reference, hypothesis)?.rate()
}

/// Phone error rate of one hypothesis.
pub fn per<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    wer(reference, hypothesis)
}
