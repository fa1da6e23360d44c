//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::params::ParamTree;
use crate::error::{Error, Result};
use crate::seed;

/// Gradient magnitudes below this are compared in absolute terms: the
/// relative error denominator is `max(|analytic|, |numeric|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradReport {
    pub h: f64,
    /// Max relative error per trainable parameter reachable from the loss.
    pub per_param: BTreeMap<String, f64>,
    /// Max absolute deviation per parameter divided by the largest analytic
    /// gradient entry of that tensor.
    pub per_param_scaled: BTreeMap<String, f64>,
    pub coords_checked: usize,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn max_scaled_error(&self) -> f64 {
        self.per_param_scaled.values().copied().fold(0.0, f64::max)
    }

    pub fn worst_scaled(&self) -> Option<(&str, f64)> {
        self.per_param_scaled
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }

    /// Parameter with the largest error, if any was checked.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(loss_fn: &F, params: &ParamTree<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamTree<f64>) -> Result<Var>,
{
    let mut g = Graph::inference();
    let l = loss_fn(&mut g, params)?;
    Ok(g.scalar(l))
}

/// Compares the analytic gradient of `loss_fn` against
/// `(f(θ+h) − f(θ−h)) / 2h` on up to `coords_per_tensor` sampled
/// coordinates of every trainable tensor the loss depends on.
pub fn grad_check<F>(
    params: &ParamTree<f64>,
    h: f64,
    coords_per_tensor: usize,
    sample_seed: u64,
    loss_fn: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamTree<f64>) -> Result<Var>,
{
    let first = eval(&loss_fn, params)?;
    let second = eval(&loss_fn, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let l = loss_fn(&mut g, params)?;
    let grads = g.backward(l).into_params();

    let mut work = params.clone();
    let mut per_param = BTreeMap::new();
    let mut per_param_scaled = BTreeMap::new();
    let mut coords_checked = 0;
    for (path, grad) in &grads {
        let n = grad.numel();
        let idx: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            let mut rng = seed::rng(sample_seed, path);
            let mut v = sample(&mut rng, n, coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for i in idx {
            let orig = work.tensor(path)?.data()[i];
            let mut vals = work.tensor(path)?.data().to_vec();
            let (hi, lo) = (orig + h, orig - h);
            vals[i] = hi;
            work.set_values(path, &vals)?;
            let up = eval(&loss_fn, &work)?;
            vals[i] = lo;
            work.set_values(path, &vals)?;
            let down = eval(&loss_fn, &work)?;
            vals[i] = orig;
            work.set_values(path, &vals)?;
            // divide by the representable step, not the nominal 2h
            let numeric = (up - down) / (hi - lo);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            worst_abs = worst_abs.max((grad.data()[i] - numeric).abs());
            coords_checked += 1;
        }
        let scale = grad
            .data()
            .iter()
            .fold(0.0f64, |m, g| m.max(g.abs()))
            .max(REL_ERROR_FLOOR);
        per_param.insert(path.clone(), worst);
        per_param_scaled.insert(path.clone(), worst_abs / scale);
    }
    Ok(GradReport {
        h,
        per_param,
        per_param_scaled,
        coords_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{loss, Tensor};
    use std::cell::Cell;

    fn params() -> ParamTree<f64> {
        let mut p = ParamTree::new();
        p.insert(
            "w",
            Tensor::from_vec(&[3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]),
            true,
        )
        .unwrap();
        p
    }

    #[test]
    fn linear_map_is_exact() {
        for h in [1e-1, 1e-3, 1e-5] {
            let r = grad_check(&params(), h, 32, 0, |g, p| {
                let x = g.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -0.5, 0.5, 4.0]));
                let w = g.param(p, "w")?;
                let y = g.matmul(x, w);
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_error() <= 1e-9, "h={h}: {}", r.max_rel_error());
            assert_eq!(r.coords_checked, 6);
        }
    }

    #[test]
    fn softmax_cross_entropy_within_1e6() {
        let r = grad_check(&params(), 1e-5, 32, 0, |g, p| {
            let x = g.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]));
            let w = g.param(p, "w")?;
            let y = g.matmul(x, w);
            loss::cross_entropy(g, y, &[Some(0), Some(1)])
        })
        .unwrap();
        assert!(r.max_rel_error() <= 1e-6, "{}", r.max_rel_error());
    }

    #[test]
    fn nondeterministic_loss_is_detected() {
        let calls = Cell::new(0.0);
        let err = grad_check(&params(), 1e-5, 4, 0, |g, p| {
            calls.set(calls.get() + 1.0);
            let w = g.param(p, "w")?;
            let s = g.sum(w);
            Ok(g.scale(s, calls.get()))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
