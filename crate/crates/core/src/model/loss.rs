use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Vector};

/// Per-token weights for [`weighted_ce_with`]. Long-context objectives plug
/// in here by up-weighting tokens that depend on distant context.
pub trait TokenWeighting<T: Scalar> {
    fn weights(&self, logits: &Matrix<T>, targets: &[usize]) -> Vector<T>;
}

/// Every token weighs 1, which reduces to mean cross-entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformWeights;

impl<T: Scalar> TokenWeighting<T> for UniformWeights {
    fn weights(&self, _logits: &Matrix<T>, targets: &[usize]) -> Vector<T> {
        vec![T::one(); targets.len()].into()
    }
}

/// `logsumexp(row) − row[target]` for every row.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[usize]) -> Result<Vector<T>> {
    if logits.rows() != targets.len() {
        return Err(shape_err("cross_entropy", logits.rows(), targets.len()));
    }
    logits
        .row_iter()
        .zip(targets)
        .map(|(row, &t)| {
            if t >= row.len() {
                return Err(Error::Input(format!("target {t} outside {} logits", row.len())));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            Ok(lse - row[t])
        })
        .collect::<Result<Vec<_>>>()
        .map(Vector::from)
}

/// `Σ w_t CE_t / Σ w_t`.
pub fn weighted_ce<T: Scalar>(logits: &Matrix<T>, targets: &[usize], weights: &[T]) -> Result<T> {
    if weights.len() != targets.len() {
        return Err(shape_err("weighted_ce", targets.len(), weights.len()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= T::zero())) {
        return Err(Error::Input(format!("token weight {w} is negative")));
    }
    let total: T = weights.iter().copied().sum();
    if total == T::zero() {
        return Err(Error::DegenerateWeights);
    }
    let ce = cross_entropy(logits, targets)?;
    let weighted: T = ce.iter().zip(weights).map(|(&c, &w)| c * w).sum();
    Ok(weighted / total)
}

pub fn weighted_ce_with<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[usize],
    weighting: &dyn TokenWeighting<T>,
) -> Result<T> {
    let w = weighting.weights(logits, targets);
    weighted_ce(logits, targets, &w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits() -> Matrix<f64> {
        Matrix::from_fn(5, 7, |r, c| ((r * 7 + c) as f64 * 0.91).sin() * 3.0)
    }

    const TARGETS: [usize; 5] = [0, 6, 3, 3, 1];

    #[test]
    fn uniform_weights_give_mean_ce() {
        let ce = cross_entropy(&logits(), &TARGETS).unwrap();
        let mean = ce.iter().sum::<f64>() / 5.0;
        let l = weighted_ce(&logits(), &TARGETS, &[1.0; 5]).unwrap();
        assert!((l - mean).abs() < 1e-12);
        let l = weighted_ce_with(&logits(), &TARGETS, &UniformWeights).unwrap();
        assert!((l - mean).abs() < 1e-12);
    }

    #[test]
    fn one_hot_weights_select_a_token() {
        let ce = cross_entropy(&logits(), &TARGETS).unwrap();
        let l = weighted_ce(&logits(), &TARGETS, &[0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(l, ce[2]);
    }

    #[test]
    fn scaling_weights_is_invariant() {
        let w = [0.5, 2.0, 1.0, 0.0, 3.25];
        let w2: Vec<f64> = w.iter().map(|x| x * 2.0).collect();
        let a = weighted_ce(&logits(), &TARGETS, &w).unwrap();
        let b = weighted_ce(&logits(), &TARGETS, &w2).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn degenerate_and_malformed_inputs() {
        assert!(matches!(
            weighted_ce(&logits(), &TARGETS, &[0.0; 5]),
            Err(Error::DegenerateWeights)
        ));
        assert!(weighted_ce(&logits(), &TARGETS, &[1.0; 4]).is_err());
        assert!(weighted_ce(&logits(), &TARGETS, &[1.0, -1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(cross_entropy(&logits(), &[0, 0, 0, 0, 7]).is_err());
    }

    #[test]
    fn ce_matches_log_softmax_definition() {
        let m = Matrix::from_rows(&[[0.0, 2f64.ln()]]).unwrap();
        // softmax = [1/3, 2/3]
        let ce = cross_entropy(&m, &[1]).unwrap();
        assert!((ce[0] - (1.5f64).ln()).abs() < 1e-15);
    }
}
