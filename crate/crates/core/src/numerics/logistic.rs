use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor2D;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            epochs: 500,
            lr: 0.1,
        }
    }
}

/// Binary logistic-regression classifier over a subset of feature columns.
///
/// Inputs are standardized with the training-set mean and standard deviation
/// of each selected column before the linear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_indices: Vec<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

impl LogisticProbe {
    fn standardized<T: Scalar>(&self, row: &[T], out: &mut [f64]) {
        for (k, &j) in self.feature_indices.iter().enumerate() {
            out[k] = (row[j].as_f64() - self.feature_mean[k]) / self.feature_scale[k];
        }
    }

    /// Probability of the positive class for one full-width feature row.
    pub fn predict_proba<T: Scalar>(&self, row: &[T]) -> f64 {
        let mut z = vec![0.0; self.feature_indices.len()];
        self.standardized(row, &mut z);
        sigmoid(self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    pub fn accuracy<T: Scalar>(&self, x: &Tensor2D<T>, y: &[bool]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let hits = (0..x.rows())
            .filter(|&r| (self.predict_proba(x.row(r)) >= 0.5) == y[r])
            .count();
        hits as f64 / y.len() as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on the L2-regularized logistic loss, starting
/// from zero weights.
pub fn logistic_fit<T: Scalar>(
    x: &Tensor2D<T>,
    feature_indices: &[usize],
    y: &[bool],
    cfg: &LogisticConfig,
) -> Result<LogisticProbe> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} rows", y.len())));
    }
    let distinct: BTreeSet<_> = feature_indices.iter().collect();
    if distinct.len() != feature_indices.len() || feature_indices.iter().any(|&j| j >= d) {
        return Err(Error::invalid(format!(
            "feature indices must be distinct and below {d}"
        )));
    }
    let positives = y.iter().filter(|&&v| v).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }

    let k = feature_indices.len();
    let mut mean = vec![0.0; k];
    let mut scale = vec![0.0; k];
    for r in 0..n {
        for (m, &j) in mean.iter_mut().zip(feature_indices) {
            *m += x.get(r, j).as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for r in 0..n {
        for ((s, &j), m) in scale.iter_mut().zip(feature_indices).zip(&mean) {
            let c = x.get(r, j).as_f64() - m;
            *s += c * c;
        }
    }
    for s in &mut scale {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let mut probe = LogisticProbe {
        weights: vec![0.0; k],
        bias: 0.0,
        feature_indices: feature_indices.to_vec(),
        feature_mean: mean,
        feature_scale: scale,
    };

    let mut design = vec![0.0; n * k];
    for r in 0..n {
        probe.standardized(x.row(r), &mut design[r * k..(r + 1) * k]);
    }
    let targets: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mut grad_w = vec![0.0; k];
    for _ in 0..cfg.epochs {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for r in 0..n {
            let row = &design[r * k..(r + 1) * k];
            let z = probe.bias + row.iter().zip(&probe.weights).map(|(a, b)| a * b).sum::<f64>();
            let err = sigmoid(z) - targets[r];
            grad_b += err;
            for (g, a) in grad_w.iter_mut().zip(row) {
                *g += err * a;
            }
        }
        let inv = 1.0 / n as f64;
        for (w, g) in probe.weights.iter_mut().zip(&grad_w) {
            *w -= cfg.lr * (g * inv + cfg.l2 * *w);
        }
        probe.bias -= cfg.lr * grad_b * inv;
    }
    Ok(probe)
}
