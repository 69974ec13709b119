use super::expect_rank;
use crate::tape::Backward;
use crate::{gemm, Result, Scalar, Tape, Tensor, TensorError, Var};

struct MatMulOp {
    m: usize,
    k: usize,
    n: usize,
}
impl<T: Scalar> Backward<T> for MatMulOp {
    fn backward(&self, inputs: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let da = needs[0].then(|| {
            let mut d = vec![T::zero(); m * k];
            gemm(false, true, m, k, n, g, b, T::zero(), &mut d);
            d
        });
        let db = needs[1].then(|| {
            let mut d = vec![T::zero(); k * n];
            gemm(true, false, k, n, m, a, g, T::zero(), &mut d);
            d
        });
        vec![da, db]
    }
}

struct BatchMatMulOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}
impl<T: Scalar> Backward<T> for BatchMatMulOp {
    fn backward(&self, inputs: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let da = needs[0].then(|| {
            let mut d = vec![T::zero(); self.batch * m * k];
            for i in 0..self.batch {
                gemm(
                    false,
                    true,
                    m,
                    k,
                    n,
                    &g[i * m * n..(i + 1) * m * n],
                    &b[i * k * n..(i + 1) * k * n],
                    T::zero(),
                    &mut d[i * m * k..(i + 1) * m * k],
                );
            }
            d
        });
        let db = needs[1].then(|| {
            let mut d = vec![T::zero(); self.batch * k * n];
            for i in 0..self.batch {
                gemm(
                    true,
                    false,
                    k,
                    n,
                    m,
                    &a[i * m * k..(i + 1) * m * k],
                    &g[i * m * n..(i + 1) * m * n],
                    T::zero(),
                    &mut d[i * k * n..(i + 1) * k * n],
                );
            }
            d
        });
        vec![da, db]
    }
}

impl<T: Scalar> Tape<T> {
    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        expect_rank("matmul", a.shape(), 2, "lhs")?;
        expect_rank("matmul", b.shape(), 2, "rhs")?;
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimension {k} (lhs {:?}) != {k2} (rhs {:?})", a.shape(), b.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, a.data(), b.data(), T::zero(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.record(t, vec![a.clone(), b.clone()], MatMulOp { m, k, n }))
    }

    /// `[B,m,k] × [B,k,n] → [B,m,n]`.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        expect_rank("bmm", a.shape(), 3, "lhs")?;
        expect_rank("bmm", b.shape(), 3, "rhs")?;
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (b2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        if batch != b2 || k != k2 {
            return Err(TensorError::shape(
                "bmm",
                format!("incompatible operands {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                false,
                false,
                m,
                n,
                k,
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.record(t, vec![a.clone(), b.clone()], BatchMatMulOp { batch, m, k, n }))
    }
}
