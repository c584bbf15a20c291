use super::params::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

/// Moment estimates and hyperparameters of Adam for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], lr: f64) -> Self {
        Self {
            step: 0,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_param(param: &Parameter, lr: f64) -> Self {
        Self::new(param.value.shape(), lr)
    }
}

/// One bias-corrected Adam update of `param` from its current `grad`.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState) -> Result<()> {
    if param.value.is_empty() {
        return Err(Error::dim(format!("parameter {} is empty", param.name)));
    }
    if param.grad.shape() != param.value.shape() || state.m.shape() != param.value.shape() {
        return Err(Error::dim(format!(
            "adam state for {} does not match shape {:?}",
            param.name,
            param.value.shape()
        )));
    }
    param.grad.ensure_finite(&param.name)?;

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);

    let g = param.grad.data();
    let m = state.m.data_mut();
    for (mi, &gi) in m.iter_mut().zip(g) {
        *mi = b1 * *mi + (1.0 - b1) * gi;
    }
    let v = state.v.data_mut();
    for (vi, &gi) in v.iter_mut().zip(g) {
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
    }
    let (m, v) = (state.m.data(), state.v.data());
    for ((w, &mi), &vi) in param.value.data_mut().iter_mut().zip(m).zip(v) {
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    param.value.ensure_finite(&param.name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64, g: f64) -> Parameter {
        let mut p = Parameter::new("w", Tensor::scalar(w));
        p.grad = Tensor::scalar(g);
        p
    }

    /// Plain scalar recurrence, written independently of the tensor code.
    fn scalar_adam(mut w: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        w
    }

    #[test]
    fn zero_gradient_leaves_value_unchanged() {
        let mut p = scalar_param(0.7, 0.0);
        let mut s = AdamState::for_param(&p, DEFAULT_LEARNING_RATE);
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.value.data(), &[0.7]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.0, 1.0);
        let mut s = AdamState::for_param(&p, 1e-4);
        adam_step(&mut p, &mut s).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr/(1 + ε)
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let mut p = scalar_param(0.5, 0.3);
        let mut s = AdamState::for_param(&p, 1e-4);
        adam_step(&mut p, &mut s).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        let expected = scalar_adam(0.5, &[0.3, 0.3], 1e-4);
        assert!((p.value.data()[0] - expected).abs() <= 1e-12);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn deterministic_from_identical_state() {
        let p0 = {
            let mut p = Parameter::new("w", Tensor::vector(&[0.1, -0.2, 0.3]).unwrap());
            p.grad = Tensor::vector(&[0.5, -1.5, 2.0]).unwrap();
            p
        };
        let s0 = AdamState::for_param(&p0, 1e-3);
        let (mut p1, mut s1) = (p0.clone(), s0.clone());
        let (mut p2, mut s2) = (p0.clone(), s0.clone());
        adam_step(&mut p1, &mut s1).unwrap();
        adam_step(&mut p2, &mut s2).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut p = scalar_param(0.0, 1.0);
        let mut s = AdamState::new(&[2], 1e-4);
        assert!(matches!(adam_step(&mut p, &mut s), Err(Error::Dimension(_))));
    }
}
