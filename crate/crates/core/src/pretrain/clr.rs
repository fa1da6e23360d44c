//! Audio-video contrastive loss over a batch of pooled embeddings.
//!
//! For similarities `s_ik = a_i · v_k / τ` the per-example term is
//! `−s_ii + log Σ_{k ∈ D_i} exp(s_ik)`. In [`ClrMode::AsWritten`] the
//! denominator set `D_i` excludes the positive `k = i`; in
//! [`ClrMode::Stabilized`] it includes it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClrMode {
    /// Positive excluded from the denominator; unbounded below.
    AsWritten,
    /// Positive included; the usual InfoNCE, bounded below by 0.
    Stabilized,
}

impl ClrMode {
    pub const NAMES: &'static str = "as_written, stabilized";

    pub fn name(self) -> &'static str {
        match self {
            Self::AsWritten => "as_written",
            Self::Stabilized => "stabilized",
        }
    }
}

impl fmt::Display for ClrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(Self::AsWritten),
            "stabilized" => Ok(Self::Stabilized),
            _ => Err(Error::InvalidEnum {
                field: "clr_mode",
                value: s.into(),
                valid: Self::NAMES.into(),
            }),
        }
    }
}

/// Loss and `∂loss/∂s` for an `n × n` row-major similarity matrix.
fn loss_and_grad<T: Scalar>(s: &[T], n: usize, mode: ClrMode) -> (T, Vec<T>) {
    let nt = T::from_usize(n).expect("n");
    let mut total = T::zero();
    let mut grad = vec![T::zero(); n * n];
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        let in_denom = |k: usize| k != i || mode == ClrMode::Stabilized;
        let mx = (0..n)
            .filter(|&k| in_denom(k))
            .map(|k| row[k])
            .fold(T::neg_infinity(), T::max);
        let z: T = (0..n).filter(|&k| in_denom(k)).map(|k| (row[k] - mx).exp()).sum();
        let lse = z.ln() + mx;
        total += lse - row[i];
        for k in 0..n {
            let p = if in_denom(k) { (row[k] - lse).exp() } else { T::zero() };
            let pos = if k == i { T::one() } else { T::zero() };
            grad[i * n + k] = (p - pos) / nt;
        }
    }
    (total / nt, grad)
}

/// Loss from a precomputed similarity matrix (already divided by τ).
pub fn clr_loss_from_similarity(s: &Tensor<f64>, mode: ClrMode) -> Result<f64> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::Shape(format!("similarity must be square, got {:?}", s.shape())));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    Ok(loss_and_grad(s.data(), n, mode).0)
}

fn similarity<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>, tau: T) -> Vec<T> {
    let n = a.rows();
    let mut s = Vec::with_capacity(n * n);
    for i in 0..n {
        for k in 0..n {
            s.push(a.row(i).iter().zip(v.row(k)).map(|(&x, &y)| x * y).sum::<T>() / tau);
        }
    }
    s
}

fn check_batch<T>(a: &Tensor<T>, v: &Tensor<T>, tau: f64) -> Result<usize> {
    if a.rows() != v.rows() || a.cols() != v.cols() {
        return Err(Error::Shape(format!(
            "audio {:?} vs video {:?} embeddings",
            a.shape(),
            v.shape()
        )));
    }
    if a.rows() < 2 {
        return Err(Error::BatchTooSmall(a.rows()));
    }
    if !(tau > 0.0) {
        return Err(Error::Validation(format!("temperature must be positive, got {tau}")));
    }
    Ok(a.rows())
}

/// Batch-mean contrastive loss of `[N, d]` audio and video embeddings.
pub fn clr_loss(a: &Tensor<f64>, v: &Tensor<f64>, mode: ClrMode, tau: f64) -> Result<f64> {
    let n = check_batch(a, v, tau)?;
    Ok(loss_and_grad(&similarity(a, v, tau), n, mode).0)
}

/// The contrastive loss as a node on the tape.
pub fn clr_graph<T: Scalar>(g: &mut Graph<T>, a: Var, v: Var, mode: ClrMode, tau: f64) -> Result<Var> {
    let (av, vv) = (g.value(a).clone(), g.value(v).clone());
    let n = check_batch(&av, &vv, tau)?;
    let d = av.cols();
    let t = T::from_f64_lossy(tau);
    let (loss, ds) = loss_and_grad(&similarity(&av, &vv, t), n, mode);
    let mut da = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    for i in 0..n {
        for k in 0..n {
            let w = ds[i * n + k] / t;
            if w == T::zero() {
                continue;
            }
            for j in 0..d {
                da[i * d + j] += w * vv.row(k)[j];
                dv[k * d + j] += w * av.row(i)[j];
            }
        }
    }
    Ok(g.fused_scalar(
        loss,
        vec![(a, Tensor::from_vec(&[n, d], da)), (v, Tensor::from_vec(&[n, d], dv))],
    ))
}

/// Fraction of rows whose most similar video embedding is their own.
pub fn retrieval_accuracy(a: &Tensor<f64>, v: &Tensor<f64>) -> f64 {
    let n = a.rows();
    if n == 0 {
        return 0.0;
    }
    let s = similarity(a, v, 1.0);
    let hits = (0..n)
        .filter(|&i| {
            let row = &s[i * n..(i + 1) * n];
            (0..n).all(|k| k == i || row[k] < row[i])
        })
        .count();
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_embeddings_as_written_is_log_n_minus_one() {
        let e = Tensor::from_vec(&[5, 2], [0.6, 0.8].repeat(5));
        let l = clr_loss(&e, &e, ClrMode::AsWritten, 1.0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let s = clr_loss(&e, &e, ClrMode::Stabilized, 1.0).unwrap();
        assert!((s - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn diagonal_similarity_hand_case() {
        let s = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert!((clr_loss_from_similarity(&s, ClrMode::AsWritten).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_batch_is_rejected() {
        let e = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]);
        assert!(matches!(
            clr_loss(&e, &e, ClrMode::AsWritten, 1.0),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!("as_written".parse::<ClrMode>().unwrap(), ClrMode::AsWritten);
        assert!("both"
            .parse::<ClrMode>()
            .unwrap_err()
            .to_string()
            .contains("stabilized"));
    }

    #[test]
    fn retrieval_of_orthonormal_pairs_is_perfect() {
        let e = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(retrieval_accuracy(&e, &e), 1.0);
    }

    /// The batch mean of `−ln(exp(s_ii) / Σ_k exp(s_ik))`, summed term by
    /// term without any log-sum-exp shift.
    fn literal(s: &[Vec<f64>], mode: ClrMode) -> f64 {
        let n = s.len();
        let mut total = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for k in 0..n {
                if k != i || mode == ClrMode::Stabilized {
                    denom += s[i][k].exp();
                }
            }
            total += -(s[i][i].exp() / denom).ln();
        }
        total / n as f64
    }

    fn random_similarity(rng: &mut impl rand::Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    }

    #[test]
    fn matches_literal_formula_on_random_batches() {
        let mut rng = crate::seed::rng(11, "clr");
        for trial in 0..100 {
            let n = if trial % 2 == 0 { 3 } else { 2 + trial % 7 };
            let s = random_similarity(&mut rng, n);
            let t = Tensor::from_vec(&[n, n], s.concat());
            for mode in [ClrMode::AsWritten, ClrMode::Stabilized] {
                let got = clr_loss_from_similarity(&t, mode).unwrap();
                let want = literal(&s, mode);
                assert!((got - want).abs() <= 1e-12, "{mode} n={n}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn temperature_divides_similarities() {
        let mut rng = crate::seed::rng(2, "tau");
        let a = Tensor::from_vec(&[4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let v = Tensor::from_vec(&[4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let s: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                (0..4)
                    .map(|k| a.row(i).iter().zip(v.row(k)).map(|(x, y)| x * y).sum::<f64>() / 0.5)
                    .collect()
            })
            .collect();
        let got = clr_loss(&a, &v, ClrMode::Stabilized, 0.5).unwrap();
        assert!((got - literal(&s, ClrMode::Stabilized)).abs() < 1e-12);
        assert!(clr_loss(&a, &v, ClrMode::Stabilized, 0.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn stabilized_loss_is_nonnegative(seed in 0u64..10_000, n in 2usize..8) {
            let mut rng = crate::seed::rng(seed, "nonneg");
            let s = random_similarity(&mut rng, n);
            let l = clr_loss_from_similarity(&Tensor::from_vec(&[n, n], s.concat()), ClrMode::Stabilized).unwrap();
            proptest::prop_assert!(l >= 0.0);
        }

        #[test]
        fn batch_permutation_leaves_loss_unchanged(seed in 0u64..10_000, n in 2usize..8, rot in 1usize..8) {
            let mut rng = crate::seed::rng(seed, "perm");
            let a: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let permute = |x: &[f64]| -> Vec<f64> { (0..n).flat_map(|i| x[((i + rot) % n) * 3..][..3].to_vec()).collect() };
            for mode in [ClrMode::AsWritten, ClrMode::Stabilized] {
                let l = clr_loss(&Tensor::from_vec(&[n, 3], a.clone()), &Tensor::from_vec(&[n, 3], v.clone()), mode, 1.0).unwrap();
                let p = clr_loss(&Tensor::from_vec(&[n, 3], permute(&a)), &Tensor::from_vec(&[n, 3], permute(&v)), mode, 1.0).unwrap();
                proptest::prop_assert!((l - p).abs() < 1e-12);
            }
        }
    }
}
