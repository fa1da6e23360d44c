use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamTree;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First and second moment estimates, keyed by parameter path.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update with bias correction. Frozen tensors and tensors without
/// a gradient are left untouched. All gradients are checked for finiteness
/// before anything is modified.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamTree<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (path, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(path.clone()));
        }
        let p = params.get(path)?;
        if p.tensor.numel() != g.numel() {
            return Err(Error::Shape(format!(
                "gradient for `{path}` has {} values, parameter has {}",
                g.numel(),
                p.tensor.numel()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (path, g) in grads {
        let p = params.get_mut(path).expect("checked above");
        if !p.trainable {
            continue;
        }
        let n = g.numel();
        let m = state.m.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        for (i, (w, gv)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv.to_f64_lossy();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv * gv;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            let upd = cfg.lr * mh / (vh.sqrt() + cfg.eps);
            if upd != 0.0 {
                *w = T::from_f64_lossy(w.to_f64_lossy() - upd);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(trainable: bool) -> ParamTree<f32> {
        let mut t = ParamTree::new();
        t.insert("w", Tensor::from_vec(&[2], vec![1.5, -0.25]), trainable)
            .unwrap();
        t
    }

    fn grads(vals: Vec<f32>) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(&[2], vals))])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = tree(true);
        let before = p.clone();
        let mut s = AdamState::new();
        for _ in 0..3 {
            optimizer_step(&mut p, &grads(vec![0.0, 0.0]), &mut s, &AdamConfig::with_lr(0.1)).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let mut p = ParamTree::<f64>::new();
        p.insert("w", Tensor::from_vec(&[1], vec![0.0]), true).unwrap();
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![1.0]))]);
        let mut s = AdamState::new();
        optimizer_step(&mut p, &g, &mut s, &AdamConfig::with_lr(0.1)).unwrap();
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1; step = 0.1 · 1 / (1 + 1e-8)
        let want = -0.1 / (1.0 + 1e-8);
        assert_eq!(p.tensor("w").unwrap().data()[0], want);
        // Second step with the same gradient is again ≈ lr.
        optimizer_step(&mut p, &g, &mut s, &AdamConfig::with_lr(0.1)).unwrap();
        let m2 = 0.9 * 0.1 + 0.1;
        let v2 = 0.999 * 0.001 + 0.001;
        let step2 = 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.998001f64)).sqrt() + 1e-8);
        assert!((p.tensor("w").unwrap().data()[0] - (want - step2)).abs() < 1e-15);
    }

    #[test]
    fn frozen_tensor_is_bitwise_unchanged() {
        let mut p = tree(false);
        let before = p.clone();
        let mut s = AdamState::new();
        optimizer_step(&mut p, &grads(vec![3.0, -7.0]), &mut s, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = tree(true);
        let mut s = AdamState::new();
        let err = optimizer_step(&mut p, &grads(vec![f32::NAN, 0.0]), &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref path) if path == "w"));
        assert_eq!(s.step, 0);
    }
}
