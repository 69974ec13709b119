use super::{elementwise::softmax_rows, expect_rank};
use crate::tape::Backward;
use crate::{Result, Scalar, Tape, Tensor, TensorError, Var};

struct WeightedCeOp<T> {
    probs: Vec<T>,
    targets: Vec<usize>,
    sample_w: Vec<T>,
    classes: usize,
}

impl<T: Scalar> Backward<T> for WeightedCeOp<T> {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let c = self.classes;
            let mut d = vec![T::zero(); self.probs.len()];
            for (i, (&y, &w)) in self.targets.iter().zip(&self.sample_w).enumerate() {
                for j in 0..c {
                    let onehot = if j == y { T::one() } else { T::zero() };
                    d[i * c + j] = g[0] * w * (self.probs[i * c + j] - onehot);
                }
            }
            d
        })]
    }
}

impl<T: Scalar> Tape<T> {
    /// Class-weighted cross-entropy on raw logits, normalised by the summed
    /// weight of the batch: `Σ w_yᵢ·(−log softmax(zᵢ)_yᵢ) / Σ w_yᵢ`.
    pub fn weighted_cross_entropy(&self, logits: &Var<T>, targets: &[usize], weights: &[f64]) -> Result<Var<T>> {
        expect_rank("weighted_cross_entropy", logits.shape(), 2, "logits")?;
        let (n, c) = (logits.shape()[0], logits.shape()[1]);
        if targets.len() != n {
            return Err(TensorError::shape(
                "weighted_cross_entropy",
                format!("{n} logit rows but {} targets", targets.len()),
            ));
        }
        if weights.len() != c {
            return Err(TensorError::Config(format!("{} class weights for {c} classes", weights.len())));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(TensorError::Config(format!("class weight {w} must be a positive finite number")));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Config(format!("target class {t} outside [0, {c})")));
        }
        if !logits.value().is_finite() {
            return Err(TensorError::NonFinite { op: "weighted_cross_entropy", context: " in logits".into() });
        }
        let probs = softmax_rows(logits.data(), c);
        let wsum: f64 = targets.iter().map(|&t| weights[t]).sum();
        let sample_w: Vec<T> = targets.iter().map(|&t| T::lit(weights[t] / wsum)).collect();
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|v| (*v - m).exp()).sum::<T>().ln();
            loss += sample_w[i] * (lse - row[t]);
        }
        let op = WeightedCeOp { probs, targets: targets.to_vec(), sample_w, classes: c };
        Ok(self.record(Tensor::scalar(loss), vec![logits.clone()], op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: Vec<f64>, n: usize, targets: &[usize], w: &[f64]) -> f64 {
        let tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::new(vec![n, logits.len() / n], logits).unwrap());
        tape.weighted_cross_entropy(&l, targets, w).unwrap().value().item()
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        assert!(ce(vec![50.0, -50.0], 1, &[0], &[1.0, 1.0]) < 1e-12);
    }

    #[test]
    fn uniform_weights_give_plain_mean() {
        let logits = vec![0.3, -0.2, 1.1, 0.4];
        let plain = {
            let l0 = -(0.3f64.exp() / (0.3f64.exp() + (-0.2f64).exp())).ln();
            let l1 = -(0.4f64.exp() / (1.1f64.exp() + 0.4f64.exp())).ln();
            (l0 + l1) / 2.0
        };
        assert!((ce(logits.clone(), 2, &[0, 1], &[1.0, 1.0]) - plain).abs() < 1e-12);
        assert!((ce(logits, 2, &[0, 1], &[3.0, 3.0]) - plain).abs() < 1e-12);
    }

    #[test]
    fn single_sample_is_weight_invariant() {
        let a = ce(vec![0.5, 0.1, -0.3], 1, &[2], &[1.0, 1.0, 1.0]);
        let b = ce(vec![0.5, 0.1, -0.3], 1, &[2], &[1.0, 1.0, 2.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn doubling_a_class_weight_follows_weighted_mean() {
        let logits = vec![0.3, -0.2, 1.1, 0.4];
        let l0 = -(0.3f64.exp() / (0.3f64.exp() + (-0.2f64).exp())).ln();
        let l1 = -(0.4f64.exp() / (1.1f64.exp() + 0.4f64.exp())).ln();
        let want = (2.0 * l0 + l1) / 3.0;
        assert!((ce(logits, 2, &[0, 1], &[2.0, 1.0]) - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_weights_and_logits() {
        let tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        assert!(matches!(tape.weighted_cross_entropy(&l, &[0], &[0.0, 1.0]), Err(TensorError::Config(_))));
        assert!(matches!(tape.weighted_cross_entropy(&l, &[0], &[-1.0, 1.0]), Err(TensorError::Config(_))));
        let bad = tape.leaf(Tensor::new(vec![1, 2], vec![f64::NAN, 1.0]).unwrap());
        assert!(matches!(tape.weighted_cross_entropy(&bad, &[0], &[1.0, 1.0]), Err(TensorError::NonFinite { .. })));
    }
}
