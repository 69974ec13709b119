use crate::tape::Backward;
use crate::{Result, Scalar, Tape, Tensor, TensorError, Var};

struct ReshapeOp;
impl<T: Scalar> Backward<T> for ReshapeOp {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| g.to_vec())]
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with shape `shape`) into the axis order `perm`.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

struct PermuteOp {
    out_shape: Vec<usize>,
    inverse: Vec<usize>,
}
impl<T: Scalar> Backward<T> for PermuteOp {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| permute_data(g, &self.out_shape, &self.inverse))]
    }
}

struct ConcatOp {
    axis_sizes: Vec<usize>,
    outer: usize,
    inner: usize,
}
impl<T: Scalar> Backward<T> for ConcatOp {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.axis_sizes.iter().sum();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.axis_sizes.len());
        for (i, &sz) in self.axis_sizes.iter().enumerate() {
            if needs[i] {
                let mut d = Vec::with_capacity(self.outer * sz * self.inner);
                for o in 0..self.outer {
                    let base = (o * total + start) * self.inner;
                    d.extend_from_slice(&g[base..base + sz * self.inner]);
                }
                out.push(Some(d));
            } else {
                out.push(None);
            }
            start += sz;
        }
        out
    }
}

struct MeanAxisOp {
    outer: usize,
    len: usize,
    inner: usize,
}
impl<T: Scalar> Backward<T> for MeanAxisOp {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let scale = T::one() / T::lit(self.len as f64);
            let mut dx = vec![T::zero(); self.outer * self.len * self.inner];
            for o in 0..self.outer {
                let gr = &g[o * self.inner..(o + 1) * self.inner];
                for l in 0..self.len {
                    let base = (o * self.len + l) * self.inner;
                    dx[base..base + self.inner]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(d, g)| *d = *g * scale);
                }
            }
            dx
        })]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let t = x.value().clone().reshape(shape)?;
        Ok(self.record(t, vec![x.clone()], ReshapeOp))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
        let shape = x.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(x.data(), shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let t = Tensor::new(out_shape.clone(), data)?;
        Ok(self.record(t, vec![x.clone()], PermuteOp { out_shape, inverse }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let first = xs.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for x in xs {
            let s = x.shape();
            if s.len() != base.len()
                || s.iter().zip(base).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::shape(
                    "concat",
                    format!("cannot join {s:?} with {base:?} along axis {axis}"),
                ));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let axis_sizes: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        let total: usize = axis_sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &sz) in xs.iter().zip(&axis_sizes) {
                data.extend_from_slice(&x.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.record(t, xs.to_vec(), ConcatOp { axis_sizes, outer, inner }))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        let shape = x.shape();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(TensorError::shape("mean_axis", format!("axis {axis} invalid for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = T::one() / T::lit(len as f64);
        let src = x.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let acc = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                acc.iter_mut().zip(&src[base..base + inner]).for_each(|(a, v)| *a += *v);
            }
            acc.iter_mut().for_each(|a| *a *= scale);
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.record(t, vec![x.clone()], MeanAxisOp { outer, len, inner }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(y.data()[(1 * 2 + 1) * 3 + 2], x.data()[(1 * 3 + 2) * 4 + 1]);
        let z = tape.permute(&y, &[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn permute_rejects_bad_axes() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(tape.permute(&x, &[0, 0]).is_err());
        assert!(tape.permute(&x, &[0]).is_err());
    }

    #[test]
    fn concat_middle_axis() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 1, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]);
        let w = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let loss = tape.sum(&tape.mul(&c, &w).unwrap());
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&a).unwrap(), &[0.0, 1.0, 6.0, 7.0]);
    }

    #[test]
    fn concat_rejects_mismatched_extent() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 1]));
        let b = tape.leaf(Tensor::zeros(&[3, 1]));
        assert!(tape.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn mean_axis_values() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let m = tape.mean_axis(&x, 1).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[2.0, 3.0, 8.0, 9.0]);
    }
}
