use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, Tensor2D};
use crate::scalar::Scalar;

/// Top principal components of a point cloud.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaProjection<T> {
    /// `m × d`, one unit-norm component per row.
    pub components: Tensor2D<T>,
    pub mean: Vec<T>,
    /// Sample-covariance eigenvalue of each component, descending.
    pub explained_variance: Vec<T>,
}

impl<T: Scalar> PcaProjection<T> {
    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    /// Projects rows of `x` (n × d) onto the components, giving n × m.
    pub fn project(&self, x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        let mut centered = x.clone();
        if x.cols() != self.mean.len() {
            return Err(Error::invalid(format!(
                "projecting {}-dimensional points with a {}-dimensional PCA",
                x.cols(),
                self.mean.len()
            )));
        }
        for r in 0..centered.rows() {
            for (v, &m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul_t(&self.components)
    }

    /// Maps projected coordinates back to the (mean-centered) input space.
    pub fn reconstruct_centered(&self, coords: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        coords.matmul(&self.components)
    }

    pub fn component(&self, i: usize) -> &[T] {
        self.components.row(i)
    }
}

/// Fits `m` principal components by eigendecomposition of the sample
/// covariance of mean-centered `x`.
///
/// Each component is oriented so that its largest-magnitude entry is positive.
pub fn pca_fit<T: Scalar>(x: &Tensor2D<T>, m: usize) -> Result<PcaProjection<T>> {
    let (n, d) = x.shape();
    if m == 0 {
        return Err(Error::invalid("PCA needs at least one component"));
    }
    if m > d {
        return Err(Error::invalid(format!("{m} components requested from {d}-dimensional data")));
    }
    if n < m + 1 {
        return Err(Error::invalid(format!("PCA with {m} components needs at least {} rows, got {n}", m + 1)));
    }

    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (acc, v) in mean.iter_mut().zip(x.row(r)) {
            *acc += v.as_f64();
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for r in 0..n {
        for ((c, v), mu) in centered.iter_mut().zip(x.row(r)).zip(&mean) {
            *c = v.as_f64() - mu;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let (values, vectors) = symmetric_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let top = values[order[0]].max(0.0);
    let tol = top * 1e-10 * d as f64;
    let rank = values.iter().filter(|&&v| v > tol && v > 0.0).count();
    if rank < m {
        return Err(Error::RankDeficient {
            achieved: rank,
            requested: m,
        });
    }

    let mut components = Tensor2D::zeros(m, d);
    let mut explained = Vec::with_capacity(m);
    for (row, &k) in order.iter().take(m).enumerate() {
        let mut v: Vec<f64> = (0..d).map(|i| vectors[i * d + k]).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let pivot = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &a)| if a.abs() > best.1.abs() { (i, a) } else { best })
            .0;
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for a in &mut v {
            *a *= sign / norm;
        }
        for (dst, a) in components.row_mut(row).iter_mut().zip(&v) {
            *dst = T::of(*a);
        }
        explained.push(T::of(values[k].max(0.0)));
    }

    Ok(PcaProjection {
        components,
        mean: mean.into_iter().map(T::of).collect(),
        explained_variance: explained,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n × n` matrix.
/// Returns eigenvalues and a column-major-by-eigenvalue eigenvector matrix
/// (`vectors[i * n + k]` is entry `i` of eigenvector `k`).
fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return (vec![0.0; n], v);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= scale * 1e-15 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Largest singular value of `m` by power iteration on `mᵀm`.
pub fn spectral_norm<T: Scalar>(m: &Tensor2D<T>, iters: usize) -> f64 {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut v = vec![1.0f64 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..iters {
        let mv: Vec<f64> = (0..rows)
            .map(|r| m.row(r).iter().zip(&v).map(|(a, b)| a.as_f64() * b).sum())
            .collect();
        let mut w = vec![0.0f64; cols];
        for (r, &s) in mv.iter().enumerate() {
            for (wc, a) in w.iter_mut().zip(m.row(r)) {
                *wc += a.as_f64() * s;
            }
        }
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        for (vc, wc) in v.iter_mut().zip(&w) {
            *vc = wc / norm;
        }
    }
    sigma
}
