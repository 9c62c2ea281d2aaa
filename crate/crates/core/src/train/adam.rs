use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::{Parameter, Tensor};

/// Adam coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step counter and first/second moments, one pair per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Gradients are checked before anything is
/// modified, so a rejected step leaves parameters and state untouched.
pub fn adam_step(
    params: &mut [&mut Parameter],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::GradientCount {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value().shape() != g.shape() {
            return Err(TrainError::GradientShape {
                param: p.name().to_string(),
                expected: p.value().shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: p.name().to_string(),
                index: i,
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(TrainError::GradientCount {
            params: params.len(),
            grads: state.m.len(),
        });
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let trainable = p.trainable();
        let pd = p.data_mut();
        for (((x, &gi), mi), vi) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            if trainable {
                *x -= cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> Parameter {
        Parameter::new("w", Tensor::scalar(x))
    }

    /// Scalar Adam written out independently.
    fn oracle(mut x: f64, g: f64, steps: u32) -> f64 {
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 1e-3, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t as f64));
            let vh = v / (1.0 - b2.powf(t as f64));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn first_step_magnitude() {
        let mut p = scalar_param(0.5);
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st, &AdamConfig::default()).unwrap();
        let delta = 0.5 - p.value().item().unwrap();
        assert!((delta - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Parameter::new("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap());
        let before = p.clone();
        let mut st = AdamState::new();
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn matches_scalar_oracle() {
        for (x0, g) in [(0.3, 1.0), (-1.2, -0.37), (2.0, 5e-4)] {
            let mut p = scalar_param(x0);
            let mut st = AdamState::new();
            for _ in 0..2 {
                adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut st, &AdamConfig::default()).unwrap();
            }
            assert!((p.value().item().unwrap() - oracle(x0, g, 2)).abs() <= 1e-12);
        }
    }

    #[test]
    fn vector_update_is_per_coordinate() {
        let gs = [0.5, -3.0, 1e-3, 0.0];
        let xs = [1.0, 2.0, -0.5, 0.7];
        let mut p = Parameter::new("w", Tensor::new(vec![4], xs.to_vec()).unwrap());
        let mut st = AdamState::new();
        for _ in 0..5 {
            adam_step(
                &mut [&mut p],
                &[Tensor::new(vec![4], gs.to_vec()).unwrap()],
                &mut st,
                &AdamConfig::default(),
            )
            .unwrap();
        }
        for i in 0..4 {
            assert!((p.value().data()[i] - oracle(xs[i], gs[i], 5)).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Parameter::new("encoder.w", Tensor::zeros(&[2]));
        let mut st = AdamState::new();
        let g = Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap();
        match adam_step(&mut [&mut p], &[g], &mut st, &AdamConfig::default()) {
            Err(TrainError::NonFiniteGradient { param, index }) => {
                assert_eq!(param, "encoder.w");
                assert_eq!(index, 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_parameters_keep_their_value() {
        let mut p = Parameter::frozen("f", Tensor::scalar(1.0));
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.value().item().unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new();
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, &AdamConfig::default()).is_err());
    }
}
