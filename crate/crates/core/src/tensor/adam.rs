//! Adam with bias correction, plus optional global-norm gradient clipping.

use super::{pairwise_sum, GradMap, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, keyed like the parameter store.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T: Scalar> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        AdamState {
            m: params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect(),
            v: params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect(),
        }
    }
}

/// One Adam update, in place. `t` counts steps from 1 for bias correction.
/// Gradient keys must match parameter keys exactly.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    grads: &GradMap<T>,
    hyper: &AdamHyper,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArg("adam_step: t must be >= 1".into()));
    }
    if grads.len() != params.len() {
        return Err(Error::KeyMismatch(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for name in grads.keys() {
        if !params.contains(name) {
            return Err(Error::KeyMismatch(format!("adam_step: gradient for unknown parameter {name:?}")));
        }
    }
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - hyper.beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - hyper.beta2.powi(t as i32));
    let lr = T::from_f64(hyper.lr);
    let eps = T::from_f64(hyper.eps);

    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        if g.shape() != p.shape() {
            return Err(Error::KeyMismatch(format!(
                "adam_step: gradient shape {:?} for parameter {name:?} of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.get_mut(name).expect("state tracks params").data_mut();
        let v = state.v.get_mut(name).expect("state tracks params").data_mut();
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut GradMap<T>, max_norm: f64) -> f64 {
    let mut sq = Vec::with_capacity(grads.len());
    for g in grads.values() {
        let squares: Vec<T> = g.data().iter().map(|&x| x * x).collect();
        sq.push(pairwise_sum(&squares));
    }
    let norm = pairwise_sum(&sq).to_f64().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * f;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_1d(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_moments_unchanged() {
        let mut params = store_1d(&[1.0, -2.0]);
        let mut state = AdamState::zeros_like(&params);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        adam_step(&mut params, &mut state, &grads, &AdamHyper::default(), 1).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(state.m["p"].data(), &[0.0, 0.0]);
        assert_eq!(state.v["p"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // from zero moments: m = (1-b1) g, v = (1-b2) g^2, m_hat = g,
        // v_hat = g^2, delta = -lr * g / (|g| + eps)
        let hyper = AdamHyper { lr: 1e-2, ..AdamHyper::default() };
        let g = 0.37;
        let mut params = store_1d(&[0.5]);
        let mut state = AdamState::zeros_like(&params);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::new(vec![1], vec![g]).unwrap());
        adam_step(&mut params, &mut state, &grads, &hyper, 1).unwrap();
        let expected = 0.5 - hyper.lr * g / (g.abs() + hyper.eps);
        assert!((params.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_steps_do_not_move_parameters() {
        let hyper = AdamHyper { lr: 0.0, ..AdamHyper::default() };
        let mut params = store_1d(&[3.0, 4.0]);
        let mut state = AdamState::zeros_like(&params);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        adam_step(&mut params, &mut state, &grads, &hyper, 1).unwrap();
        adam_step(&mut params, &mut state, &grads, &hyper, 2).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn key_mismatch_is_rejected() {
        let mut params = store_1d(&[1.0]);
        let mut state = AdamState::zeros_like(&params);
        let mut grads = GradMap::new();
        grads.insert("q".into(), Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(adam_step(&mut params, &mut state, &grads, &AdamHyper::default(), 1).is_err());
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut grads: GradMap<f64> = GradMap::new();
        grads.insert("a".into(), Tensor::new(vec![2], vec![3.0, 0.0]).unwrap());
        grads.insert("b".into(), Tensor::new(vec![1], vec![4.0]).unwrap());
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads["a"].data()[0] - 0.6).abs() < 1e-12);
        assert!((grads["b"].data()[0] - 0.8).abs() < 1e-12);
    }
}
