use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, norm2, Tensor2D};
use crate::scalar::Scalar;

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `log softmax(logits)[index]`, evaluated in `f64`.
pub(crate) fn log_prob(logits: &[impl Scalar], index: usize) -> f64 {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    logits[index].as_f64() - lse
}

/// Mean next-token cross entropy over the rows of `logits` and its gradient
/// `(softmax − one_hot) / rows`.
pub fn cross_entropy_loss_and_grad<T: Scalar>(
    logits: &Tensor2D<T>,
    targets: &[usize],
) -> Result<(f64, Tensor2D<T>)> {
    cross_entropy_with_denominator(logits, targets, targets.len())
}

/// Cross entropy where the mean is taken over `denominator` positions; used
/// when one batch spans several sequences.
pub(crate) fn cross_entropy_with_denominator<T: Scalar>(
    logits: &Tensor2D<T>,
    targets: &[usize],
    denominator: usize,
) -> Result<(f64, Tensor2D<T>)> {
    if targets.len() != logits.rows() {
        return Err(Error::invalid(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let vocab = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab_size: vocab,
        });
    }
    let inv = T::one() / T::of(denominator as f64);
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        loss -= log_prob(logits.row(r), t);
        let row = grad.row_mut(r);
        softmax_in_place(row);
        row[t] -= T::one();
        for g in row.iter_mut() {
            *g *= inv;
        }
    }
    Ok((loss / denominator as f64, grad))
}

/// Cosine of the angle between two nonzero vectors.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm2(u);
    let nv = norm2(v);
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
        assert!(s.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let c = 0.37;
        let s = softmax(&[c, c + 2f64.ln()]).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-12 && (s[1] - 2.0 / 3.0).abs() < 1e-12);
        let big = softmax(&[1000.0f64, 1001.0]).unwrap();
        let small = softmax(&[0.0f64, 1.0]).unwrap();
        assert_eq!(big, small);
        assert!(softmax::<f64>(&[]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_on_the_simplex(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let s = softmax(&v).unwrap();
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor2D::<f64>::zeros(3, 7);
        let (loss, _) = cross_entropy_loss_and_grad(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let mut logits = Tensor2D::<f64>::zeros(1, 4);
        logits.set(0, 2, 60.0);
        let (loss, _) = cross_entropy_loss_and_grad(&logits, &[2]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn out_of_range_target() {
        let logits = Tensor2D::<f64>::zeros(1, 4);
        assert!(matches!(
            cross_entropy_loss_and_grad(&logits, &[4]),
            Err(Error::TokenOutOfRange { token: 4, .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor2D::from_fn(4, 6, |_, _| rng.gen_range(-2.0..2.0));
        let targets = [1usize, 5, 0, 3];
        let (_, grad) = cross_entropy_loss_and_grad(&logits, &targets).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let fp = cross_entropy_loss_and_grad(&plus, &targets).unwrap().0;
            let fm = cross_entropy_loss_and_grad(&minus, &targets).unwrap().0;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grad.data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f64, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[3.0f64, 4.0], &[4.0, 3.0]).unwrap() - 24.0 / 25.0).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
