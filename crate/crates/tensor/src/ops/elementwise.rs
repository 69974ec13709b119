use rand::Rng;

use super::same_shape;
use crate::tape::Backward;
use crate::{Result, Scalar, Tape, Tensor, TensorError, Var};

struct AddOp;
impl<T: Scalar> Backward<T> for AddOp {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct MulOp;
impl<T: Scalar> Backward<T> for MulOp {
    fn backward(&self, inputs: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(g, b)| *g * *b).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(g, a)| *g * *a).collect()),
        ]
    }
}

struct ScaleOp<T>(T);
impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| g.iter().map(|g| *g * self.0).collect())]
    }
}

/// `x + b` where `b` matches the trailing dimensions of `x`.
struct AddBroadcastOp {
    inner: usize,
}
impl<T: Scalar> Backward<T> for AddBroadcastOp {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let db = needs[1].then(|| {
            let mut acc = vec![T::zero(); self.inner];
            for row in g.chunks(self.inner) {
                acc.iter_mut().zip(row).for_each(|(a, r)| *a += *r);
            }
            acc
        });
        vec![needs[0].then(|| g.to_vec()), db]
    }
}

struct ReluOp;
impl<T: Scalar> Backward<T> for ReluOp {
    fn backward(&self, inputs: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        vec![needs[0].then(|| {
            g.iter().zip(x).map(|(g, x)| if *x > T::zero() { *g } else { T::zero() }).collect()
        })]
    }
}

struct SumOp;
impl<T: Scalar> Backward<T> for SumOp {
    fn backward(&self, inputs: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| vec![g[0]; inputs[0].value().numel()])]
    }
}

/// Softmax over the last axis; keeps the output for the backward pass.
struct SoftmaxOp<T> {
    out: Vec<T>,
    cols: usize,
}
impl<T: Scalar> Backward<T> for SoftmaxOp<T> {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let mut dx = vec![T::zero(); g.len()];
            for ((dxr, gr), yr) in dx
                .chunks_mut(self.cols)
                .zip(g.chunks(self.cols))
                .zip(self.out.chunks(self.cols))
            {
                let dot: T = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
                for ((d, g), y) in dxr.iter_mut().zip(gr).zip(yr) {
                    *d = *y * (*g - dot);
                }
            }
            dx
        })]
    }
}

struct DropoutOp<T> {
    mask: Vec<T>,
}
impl<T: Scalar> Backward<T> for DropoutOp<T> {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| g.iter().zip(&self.mask).map(|(g, m)| *g * *m).collect())]
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (o, r) in out.chunks_mut(cols).zip(x.chunks(cols)) {
        let m = r.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, v) in o.iter_mut().zip(r) {
            *o = (*v - m).exp();
            s += *o;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(t, vec![a.clone(), b.clone()], AddOp))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(t, vec![a.clone(), b.clone()], MulOp))
    }

    pub fn scale(&self, x: &Var<T>, s: f64) -> Var<T> {
        let s = T::lit(s);
        let data = x.data().iter().map(|v| *v * s).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.record(t, vec![x.clone()], ScaleOp(s))
    }

    /// Adds `b` to every trailing block of `x`; `b.shape()` must equal the
    /// trailing dimensions of `x`. Covers bias addition and positional encodings.
    pub fn add_broadcast(&self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (xs, bs) = (x.shape(), b.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(TensorError::shape(
                "add_broadcast",
                format!("{bs:?} does not match the trailing dims of {xs:?}"),
            ));
        }
        let inner = b.value().numel();
        let bd = b.data();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(inner) {
            row.iter_mut().zip(bd).for_each(|(v, b)| *v += *b);
        }
        let t = Tensor::new(xs.to_vec(), data)?;
        Ok(self.record(t, vec![x.clone(), b.clone()], AddBroadcastOp { inner }))
    }

    /// Rectifier with subgradient 0 at the origin; NaN passes through.
    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        #[allow(clippy::eq_op)]
        let data = x.data().iter().map(|v| if *v > T::zero() || *v != *v { *v } else { T::zero() }).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.record(t, vec![x.clone()], ReluOp)
    }

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let s: T = x.data().iter().copied().sum();
        self.record(Tensor::scalar(s), vec![x.clone()], SumOp)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: &Var<T>) -> Var<T> {
        let cols = *x.shape().last().expect("rank >= 1");
        let out = softmax_rows(x.data(), cols);
        let t = Tensor::new(x.shape().to_vec(), out.clone()).expect("same shape");
        self.record(t, vec![x.clone()], SoftmaxOp { out, cols })
    }

    /// Inverted dropout. With `p == 0` the input handle is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&self, x: &Var<T>, p: f64, rng: &mut R) -> Result<Var<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x.clone());
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.value().numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(t, vec![x.clone()], DropoutOp { mask }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_propagates_nan() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, f32::NAN, 2.0]).unwrap());
        let y = tape.relu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1].is_nan());
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_definition() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = tape.backward(&tape.sum(&y)).unwrap();
        // subgradient at 0 is 0
        assert_eq!(g.get(&x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 5], 3.7));
        let y = tape.softmax(&x);
        for v in y.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap());
        let y = tape.softmax(&x);
        assert!(y.value().is_finite());
        assert!((y.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dropout_zero_rate_is_identity_handle() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[4], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = tape.dropout(&x, 0.0, &mut rng).unwrap();
        assert_eq!(x.id(), y.id());
    }

    #[test]
    fn dropout_preserves_expectation_roughly() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::full(&[20000], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tape.dropout(&x, 0.4, &mut rng).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 20000.0;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn add_broadcast_rejects_mismatch() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let err = tape.add_broadcast(&x, &b).unwrap_err();
        assert!(err.to_string().contains("add_broadcast"));
    }
}
