use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// A set of masked positions drawn without replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    /// Strictly increasing.
    pub masked: Vec<usize>,
    pub total: usize,
    pub ratio: f64,
}

impl MaskSpec {
    /// A mask that hides nothing.
    pub fn none(total: usize) -> Self {
        Self {
            masked: Vec::new(),
            total,
            ratio: 0.0,
        }
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.total];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }

    /// Unmasked positions in increasing order.
    pub fn visible(&self) -> Vec<usize> {
        let f = self.flags();
        (0..self.total).filter(|&i| !f[i]).collect()
    }
}

/// Number of positions a ratio masks out of `total`.
pub fn mask_count(total: usize, ratio: f64) -> usize {
    ((ratio * total as f64).round() as usize).min(total)
}

/// Uniformly samples `round(ratio · total)` distinct positions.
pub fn sample_mask(total: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Validation(format!("mask ratio must lie in [0, 1], got {ratio}")));
    }
    let mut masked = sample(rng, total, mask_count(total, ratio)).into_vec();
    masked.sort_unstable();
    Ok(MaskSpec { masked, total, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn sixty_percent_of_250_is_150() {
        let m = sample_mask(250, 0.6, &mut seed::rng(0, "m")).unwrap();
        assert_eq!(m.masked.len(), 150);
        assert!(m.masked.windows(2).all(|w| w[0] < w[1]));
        assert!(m.masked.iter().all(|&i| i < 250));
    }

    #[test]
    fn boundary_ratios() {
        let mut rng = seed::rng(0, "m");
        assert!(sample_mask(40, 0.0, &mut rng).unwrap().masked.is_empty());
        assert_eq!(
            sample_mask(40, 1.0, &mut rng).unwrap().masked,
            (0..40).collect::<Vec<_>>()
        );
        assert!(sample_mask(40, 1.5, &mut rng).is_err());
    }

    #[test]
    fn visible_complements_masked() {
        let m = sample_mask(10, 0.3, &mut seed::rng(1, "m")).unwrap();
        let mut all = m.visible();
        all.extend(&m.masked);
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn every_index_is_masked_sixty_percent_of_the_time() {
        let mut rng = seed::rng(5, "monte-carlo");
        let mut hits = [0usize; 100];
        let draws = 10_000;
        for _ in 0..draws {
            for i in sample_mask(100, 0.6, &mut rng).unwrap().masked {
                hits[i] += 1;
            }
        }
        for (i, h) in hits.iter().enumerate() {
            let f = *h as f64 / draws as f64;
            assert!((f - 0.6).abs() <= 0.02, "index {i}: {f}");
        }
    }

    proptest::proptest! {
        #[test]
        fn count_is_rounded_ratio(total in 0usize..400, ratio in 0.0f64..=1.0, s in 0u64..1000) {
            let m = sample_mask(total, ratio, &mut seed::rng(s, "p")).unwrap();
            proptest::prop_assert_eq!(m.masked.len(), (ratio * total as f64).round() as usize);
            proptest::prop_assert!(m.masked.windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert!(m.masked.iter().all(|&i| i < total));
        }
    }
}
