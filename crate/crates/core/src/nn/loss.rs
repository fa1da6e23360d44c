use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean squared error over the rows flagged in `include`, averaged per
/// element. Returns 0 if no row is included.
pub fn mse_rows<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, include: &[bool]) -> Result<Var> {
    let p = g.value(pred);
    let (r, c) = (p.rows(), p.cols());
    if target.rows() != r || target.cols() != c || include.len() != r {
        return Err(Error::Shape(format!(
            "mse: prediction {r}x{c}, target {}x{}, mask {}",
            target.rows(),
            target.cols(),
            include.len()
        )));
    }
    let rows = include.iter().filter(|&&b| b).count();
    let count = T::from_usize((rows * c).max(1)).expect("count");
    let two = T::from_f64_lossy(2.0);
    let mut grad = Tensor::zeros(&[r, c]);
    let mut total = T::zero();
    for i in 0..r {
        if !include[i] {
            continue;
        }
        for ((gv, &pv), &tv) in grad.row_mut(i).iter_mut().zip(p.row(i)).zip(target.row(i)) {
            let d = pv - tv;
            total += d * d;
            *gv = two * d / count;
        }
    }
    Ok(g.fused_scalar(total / count, vec![(pred, grad)]))
}

/// Row-wise log-softmax.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
    row.iter().map(|&v| v - z).collect()
}

/// Mean token cross-entropy of `logits` (`[rows, classes]`) against
/// `targets`; `None` rows (padding) are skipped.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let l = g.value(logits);
    let (r, v) = (l.rows(), l.cols());
    if targets.len() != r {
        return Err(Error::Shape(format!(
            "cross_entropy: {r} rows, {} targets",
            targets.len()
        )));
    }
    let n = targets.iter().filter(|t| t.is_some()).count();
    let count = T::from_usize(n.max(1)).expect("count");
    let mut grad = Tensor::zeros(&[r, v]);
    let mut total = T::zero();
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= v {
            return Err(Error::LabelOutOfRange { label: t, classes: v });
        }
        let lp = log_softmax(l.row(i));
        total -= lp[t];
        for (j, gv) in grad.row_mut(i).iter_mut().enumerate() {
            let p = lp[j].exp();
            *gv = (p - if j == t { T::one() } else { T::zero() }) / count;
        }
    }
    Ok(g.fused_scalar(total / count, vec![(logits, grad)]))
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[3, 20]));
        let l = cross_entropy(&mut g, x, &[Some(1), Some(7), None]).unwrap();
        assert!((g.scalar(l) - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let mut g = Graph::<f64>::new();
        let mut t = Tensor::full(&[2, 4], -1e3);
        t.data_mut()[2] = 0.0;
        t.data_mut()[4 + 1] = 0.0;
        let x = g.variable(t);
        let l = cross_entropy(&mut g, x, &[Some(2), Some(1)]).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_softmax_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]));
        let l = cross_entropy(&mut g, x, &[Some(0)]).unwrap();
        let grads = g.backward(l);
        let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
        let want = [0.5f64.exp() / z - 1.0, (-1.0f64).exp() / z, 2.0f64.exp() / z];
        for (a, b) in grads.get(x).unwrap().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn label_outside_range_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            cross_entropy(&mut g, x, &[Some(3)]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn mse_hand_case() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 9.0, 9.0]));
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let l = mse_rows(&mut g, p, &t, &[true, false]).unwrap();
        assert_eq!(g.scalar(l), 0.5);
    }
}
