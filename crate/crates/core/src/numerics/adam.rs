use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor2D;
use crate::scalar::Scalar;

/// Gradients keyed by parameter name. Only trainable parameters have entries.
pub type Gradients<T> = BTreeMap<String, Tensor2D<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count used
/// for bias correction.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: u64,
    moments: BTreeMap<String, (Tensor2D<T>, Tensor2D<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One Adam update with bias correction. Parameters rejected by `trainable`
/// or lacking a gradient entry are left untouched.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = (String, &'a mut Tensor2D<T>)>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let step_size = T::of(lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(cfg.eps);

    for (name, param) in params {
        if !trainable(&name) {
            continue;
        }
        let Some(grad) = grads.get(&name) else {
            continue;
        };
        if grad.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left_rows: param.rows(),
                left_cols: param.cols(),
                right_rows: grad.rows(),
                right_cols: grad.cols(),
            });
        }
        let (m, v) = state.moments.entry(name).or_insert_with(|| {
            (
                Tensor2D::zeros(param.rows(), param.cols()),
                Tensor2D::zeros(param.rows(), param.cols()),
            )
        });
        if m.shape() != param.shape() {
            return Err(Error::invalid("optimizer state shape differs from parameter"));
        }
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            *p -= step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor2D::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> (String, Tensor2D<f64>) {
        (name.to_string(), Tensor2D::from_vec(1, 1, vec![v]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (name, mut p) = single("w", 0.7);
        let grads: Gradients<f64> = [(name.clone(), Tensor2D::zeros(1, 1))].into();
        let mut st = AdamState::new();
        adam_step([(name, &mut p)], &grads, &mut st, 1e-3, &AdamConfig::default(), &|_| true).unwrap();
        assert_eq!(p.data()[0], 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g, v̂ = g², so the first update is -lr·g/(|g| + eps).
        let (name, mut p) = single("w", 1.0);
        let g = -0.25;
        let grads: Gradients<f64> = [(name.clone(), Tensor2D::from_vec(1, 1, vec![g]).unwrap())].into();
        let cfg = AdamConfig::default();
        let lr = 3e-4;
        let mut st = AdamState::new();
        adam_step([(name, &mut p)], &grads, &mut st, lr, &cfg, &|_| true).unwrap();
        let expected = 1.0 - lr * g / (g.abs() + cfg.eps);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!(p.data()[0] > 1.0);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let (name, mut p) = single("frozen", 0.123_456_789);
        let before = p.data()[0].to_bits();
        let grads: Gradients<f64> = [(name.clone(), Tensor2D::from_vec(1, 1, vec![5.0]).unwrap())].into();
        let mut st = AdamState::new();
        adam_step([(name, &mut p)], &grads, &mut st, 0.1, &AdamConfig::default(), &|n| n != "frozen").unwrap();
        assert_eq!(p.data()[0].to_bits(), before);
    }

    #[test]
    fn shape_mismatch() {
        let (name, mut p) = single("w", 0.0);
        let grads: Gradients<f64> = [(name.clone(), Tensor2D::zeros(2, 1))].into();
        let mut st = AdamState::new();
        assert!(adam_step([(name, &mut p)], &grads, &mut st, 0.1, &AdamConfig::default(), &|_| true).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads: Gradients<f64> = [
            ("a".to_string(), Tensor2D::from_vec(1, 2, vec![3.0, 0.0]).unwrap()),
            ("b".to_string(), Tensor2D::from_vec(1, 1, vec![4.0]).unwrap()),
        ]
        .into();
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        let after: f64 = grads.values().map(Tensor2D::sum_squares).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
