//! Bias-corrected Adam over a named parameter map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update over every parameter that has a grad buffer.
///
/// `lr` overrides the state's base learning rate for this step (schedules).
/// A NaN or infinite gradient rejects the whole update and names the tensor.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        if let Some(g) = &p.grad {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter '{name}': update rejected"
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = p.grad.as_deref() else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
        if m.len() != p.data.len() {
            return Err(Error::Dim(format!(
                "optimizer moment shape for '{name}' does not match parameter"
            )));
        }
        for i in 0..p.data.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64, g: Option<f64>) -> BTreeMap<String, Tensor> {
        let mut t = Tensor::scalar(v).with_grad();
        t.grad = g.map(|x| vec![x]);
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), t);
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single(1.5, Some(0.0));
        let mut st = AdamState::new(0.1);
        adam_step(&mut params, &mut st, 0.1).unwrap();
        assert_eq!(params["w"].data[0], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first step size exactly lr (up to eps).
        let mut params = single(1.0, Some(1.0));
        let mut st = AdamState::new(0.1);
        adam_step(&mut params, &mut st, 0.1).unwrap();
        assert!((params["w"].data[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_rejected_naming_parameter() {
        let mut params = single(1.0, Some(f64::NAN));
        let mut st = AdamState::new(0.1);
        let err = adam_step(&mut params, &mut st, 0.1).unwrap_err().to_string();
        assert!(err.contains("'w'"), "{err}");
        assert_eq!(params["w"].data[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical_after_100_steps() {
        let run = || {
            let mut params = single(1.0, None);
            let mut st = AdamState::new(0.01);
            for i in 0..100 {
                let g = ((i as f64) * 0.37).sin();
                params.get_mut("w").unwrap().grad = Some(vec![g]);
                adam_step(&mut params, &mut st, 0.01).unwrap();
            }
            params["w"].data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
