//! Connectionist temporal classification in log space.

use crate::error::{Error, Result};
use crate::nn::layers::SeqLayout;
use crate::nn::loss::{argmax, log_softmax};
use crate::nn::{Graph, Scalar, Tensor, Var};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Fewest frames that can emit `target`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame `logits` (`T × V`,
/// unnormalized) and its gradient with respect to the logits.
pub fn ctc_loss_grad(logits: &[Vec<f64>], target: &[usize], blank: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let t_len = logits.len();
    let needed = min_frames(target);
    if needed > t_len {
        return Err(Error::Unalignable { frames: t_len, needed });
    }
    let v = logits.first().map_or(0, Vec::len);
    if blank >= v {
        return Err(Error::LabelOutOfRange {
            label: blank,
            classes: v,
        });
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= v || l == blank) {
        return Err(Error::LabelOutOfRange { label: bad, classes: v });
    }
    let lp: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax(r)).collect();
    // extended label sequence: blank, l1, blank, l2, ..., blank
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![vec![neg; s_len]; t_len];
    alpha[0][0] = lp[0][ext[0]];
    if s_len > 1 {
        alpha[0][1] = lp[0][ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if skip(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + lp[t][ext[s]];
        }
    }
    let last = t_len - 1;
    let log_p = if s_len > 1 {
        log_add(alpha[last][s_len - 1], alpha[last][s_len - 2])
    } else {
        alpha[last][0]
    };

    let mut beta = vec![vec![neg; s_len]; t_len];
    beta[last][s_len - 1] = lp[last][ext[s_len - 1]];
    if s_len > 1 {
        beta[last][s_len - 2] = lp[last][ext[s_len - 2]];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + lp[t][ext[s]];
        }
    }

    let mut grad: Vec<Vec<f64>> = lp.iter().map(|r| r.iter().map(|x| x.exp()).collect()).collect();
    for t in 0..t_len {
        let mut occ = vec![neg; v];
        for s in 0..s_len {
            let k = ext[s];
            occ[k] = log_add(occ[k], alpha[t][s] + beta[t][s] - lp[t][k]);
        }
        for (g, o) in grad[t].iter_mut().zip(&occ) {
            *g -= (o - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss of one utterance.
pub fn ctc_loss(logits: &[Vec<f64>], target: &[usize], blank: usize) -> Result<f64> {
    Ok(ctc_loss_grad(logits, target, blank)?.0)
}

/// Mean CTC loss over a batch of `[batch·len, V]` logits; only the valid
/// prefix of each sequence takes part.
pub fn ctc_batch<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    layout: &SeqLayout,
    targets: &[&[usize]],
    blank: usize,
) -> Result<Var> {
    if targets.len() != layout.batch {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {}",
            targets.len(),
            layout.batch
        )));
    }
    let values = g.value(logits);
    let v = values.cols();
    if values.rows() != layout.rows() {
        return Err(Error::Shape(format!(
            "ctc: {} logit rows, layout needs {}",
            values.rows(),
            layout.rows()
        )));
    }
    let mut grad = Tensor::<T>::zeros(&[layout.rows(), v]);
    let mut total = 0.0;
    let scale = 1.0 / layout.batch as f64;
    for (b, target) in targets.iter().enumerate() {
        let n = layout.valid_len(b);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                values
                    .row(b * layout.len + t)
                    .iter()
                    .map(|x| x.to_f64_lossy())
                    .collect()
            })
            .collect();
        let (l, gr) = ctc_loss_grad(&rows, target, blank)?;
        total += l;
        for (t, r) in gr.iter().enumerate() {
            for (dst, x) in grad.row_mut(b * layout.len + t).iter_mut().zip(r) {
                *dst = T::from_f64_lossy(x * scale);
            }
        }
    }
    Ok(g.fused_scalar(T::from_f64_lossy(total * scale), vec![(logits, grad)]))
}

/// Best-path decoding: per-frame argmax, repeats collapsed, blanks dropped.
pub fn ctc_greedy<T: Scalar>(rows: impl IntoIterator<Item = impl AsRef<[T]>>, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for r in rows {
        let k = argmax(r.as_ref());
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use crate::nn::ParamTree;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &k in path {
            if Some(k) != prev && k != blank {
                out.push(k);
            }
            prev = Some(k);
        }
        out
    }

    /// Sums the probability of every length-T path that collapses to
    /// `target`.
    fn brute_force(logits: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
        let (t_len, v) = (logits.len(), logits[0].len());
        let probs: Vec<Vec<f64>> = logits
            .iter()
            .map(|r| {
                let z: f64 = r.iter().map(|x| x.exp()).sum();
                r.iter().map(|x| x.exp() / z).collect()
            })
            .collect();
        let mut total = 0.0;
        for code in 0..v.pow(t_len as u32) {
            let mut c = code;
            let path: Vec<usize> = (0..t_len)
                .map(|_| {
                    let k = c % v;
                    c /= v;
                    k
                })
                .collect();
            if collapse(&path, blank) == target {
                total += path.iter().enumerate().map(|(t, &k)| probs[t][k]).product::<f64>();
            }
        }
        -total.ln()
    }

    fn targets(v: usize, blank: usize) -> Vec<Vec<usize>> {
        let labels: Vec<usize> = (0..v).filter(|&k| k != blank).collect();
        let mut out = vec![vec![]];
        for &a in &labels {
            out.push(vec![a]);
            for &b in &labels {
                out.push(vec![a, b]);
            }
        }
        out
    }

    #[test]
    fn forward_recursion_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cases = 0;
        for v in 2..=3 {
            for t_len in 1..=4 {
                for blank in [0, v - 1] {
                    for target in targets(v, blank) {
                        let logits: Vec<Vec<f64>> = (0..t_len)
                            .map(|_| (0..v).map(|_| rng.random_range(-3.0..3.0)).collect())
                            .collect();
                        match ctc_loss(&logits, &target, blank) {
                            Ok(l) => {
                                let want = brute_force(&logits, &target, blank);
                                assert!((l - want).abs() <= 1e-9, "T={t_len} V={v} {target:?}: {l} vs {want}");
                                cases += 1;
                            }
                            Err(Error::Unalignable { .. }) => assert!(min_frames(&target) > t_len),
                            Err(e) => panic!("{e}"),
                        }
                    }
                }
            }
        }
        assert!(cases > 50);
    }

    #[test]
    fn single_uniform_step() {
        let l = ctc_loss(&[vec![0.0, 0.0]], &[1], 0).unwrap();
        assert!((l - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let logits = vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.0, -0.5], vec![-2.0, 0.5, 0.5]];
        let want: f64 = logits.iter().map(|r| -log_softmax(r)[0]).sum();
        assert!((ctc_loss(&logits, &[], 0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn repeated_labels_need_a_blank() {
        assert_eq!(min_frames(&[4, 4]), 3);
        let logits = vec![vec![0.0; 5]; 2];
        assert!(matches!(
            ctc_loss(&logits, &[4, 4], 3),
            Err(Error::Unalignable { frames: 2, needed: 3 })
        ));
        assert!(ctc_loss(&logits, &[4, 1], 3).is_ok());
    }

    #[test]
    fn blank_inside_target_is_rejected() {
        assert!(ctc_loss(&vec![vec![0.0; 3]; 3], &[1, 0], 0).is_err());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut p = ParamTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..2 * 5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.insert("z", Tensor::from_vec(&[10, 4], vals), true).unwrap();
        let layout = SeqLayout::with_valid(2, 5, vec![5, 3]);
        let r = grad_check(&p, 1e-5, 64, 0, |g, p| {
            let z = g.param(p, "z")?;
            ctc_batch(g, z, &layout, &[&[1, 2, 2], &[3]], 0)
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-6, "{}", r.max_rel_error());
    }

    #[test]
    fn greedy_recovers_blank_separated_alignment() {
        let blank = 3;
        let alignment = [4, 4, 3, 4, 5, 5, 3, 3, 6];
        let rows: Vec<Vec<f64>> = alignment
            .iter()
            .map(|&k| {
                let mut r = vec![f64::NEG_INFINITY; 8];
                r[k] = 0.0;
                r
            })
            .collect();
        assert_eq!(ctc_greedy(&rows, blank), vec![4, 4, 5, 6]);
    }
}
