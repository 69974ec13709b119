use crate::exec;
use crate::tape::Backward;
use crate::{Result, Scalar, Tape, Tensor, TensorError, Var};

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalise with the batch's own statistics.
    Train,
    /// Normalise with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics observed in train mode (variance unbiased).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

struct BatchNormOp<T> {
    n: usize,
    c: usize,
    s: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn backward(&self, inputs: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, c, s) = (self.n, self.c, self.s);
        let gamma = inputs[1].data();
        // Per-channel Σdy and Σdy·x̂.
        let sums: Vec<(T, T)> = (0..c)
            .map(|ch| {
                let (mut sd, mut sdx) = (T::zero(), T::zero());
                for b in 0..n {
                    let base = (b * c + ch) * s;
                    for i in base..base + s {
                        sd += g[i];
                        sdx += g[i] * self.xhat[i];
                    }
                }
                (sd, sdx)
            })
            .collect();
        let dx = needs[0].then(|| {
            let m = T::lit((n * s) as f64);
            let mut dx = vec![T::zero(); n * c * s];
            exec::for_each_chunk_mut(&mut dx, c * s, |b, d| {
                for ch in 0..c {
                    let k = gamma[ch] * self.inv_std[ch];
                    let (sd, sdx) = sums[ch];
                    let base = (b * c + ch) * s;
                    for i in 0..s {
                        let gi = g[base + i];
                        d[ch * s + i] = if self.train {
                            k / m * (m * gi - sd - self.xhat[base + i] * sdx)
                        } else {
                            k * gi
                        };
                    }
                }
            });
            dx
        });
        let dgamma = needs[1].then(|| sums.iter().map(|p| p.1).collect());
        let dbeta = needs[2].then(|| sums.iter().map(|p| p.0).collect());
        vec![dx, dgamma, dbeta]
    }
}

struct LayerNormOp<T> {
    d: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNormOp<T> {
    fn backward(&self, inputs: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let d = self.d;
        let gamma = inputs[1].data();
        let dx = needs[0].then(|| {
            let dm = T::lit(d as f64);
            let mut dx = vec![T::zero(); g.len()];
            for (r, (dxr, gr)) in dx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                let xh = &self.xhat[r * d..(r + 1) * d];
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for j in 0..d {
                    let dxh = gr[j] * gamma[j];
                    s1 += dxh;
                    s2 += dxh * xh[j];
                }
                for j in 0..d {
                    let dxh = gr[j] * gamma[j];
                    dxr[j] = self.inv_std[r] / dm * (dm * dxh - s1 - xh[j] * s2);
                }
            }
            dx
        });
        let dgamma = needs[1].then(|| {
            let mut acc = vec![T::zero(); d];
            for (gr, xr) in g.chunks(d).zip(self.xhat.chunks(d)) {
                for j in 0..d {
                    acc[j] += gr[j] * xr[j];
                }
            }
            acc
        });
        let dbeta = needs[2].then(|| {
            let mut acc = vec![T::zero(); d];
            for gr in g.chunks(d) {
                acc.iter_mut().zip(gr).for_each(|(a, v)| *a += *v);
            }
            acc
        });
        vec![dx, dgamma, dbeta]
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalisation over axis 1 of a `[N,C]` or `[N,C,H,W]` input.
    ///
    /// Returns the observed batch statistics in train mode so the caller can
    /// update its running averages.
    pub fn batch_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var<T>, Option<BatchStats<T>>)> {
        let shape = x.shape();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(TensorError::shape("batch_norm", format!("expected [N,C] or [N,C,H,W], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::shape(
                "batch_norm",
                format!("channels: input has {c}, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
            ));
        }
        let xd = x.data();
        let eps = T::lit(eps);
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let m = n * s;
                let per_channel = exec::map_indexed(c, |ch| {
                    let mut sum = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * s;
                        sum += xd[base..base + s].iter().copied().sum::<T>();
                    }
                    let mean = sum / T::lit(m as f64);
                    let mut sq = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * s;
                        for v in &xd[base..base + s] {
                            let d = *v - mean;
                            sq += d * d;
                        }
                    }
                    (mean, sq / T::lit(m as f64))
                });
                let mean: Vec<T> = per_channel.iter().map(|p| p.0).collect();
                let var: Vec<T> = per_channel.iter().map(|p| p.1).collect();
                let corr = if m > 1 { T::lit(m as f64 / (m - 1) as f64) } else { T::one() };
                let stats = BatchStats { mean: mean.clone(), var: var.iter().map(|v| *v * corr).collect() };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::shape("batch_norm", "running statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); xd.len()];
        exec::for_each_chunk_mut(&mut xhat, c * s, |b, xh| {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in 0..s {
                    xh[ch * s + i] = (xd[base + i] - mean[ch]) * inv_std[ch];
                }
            }
        });
        let mut out = vec![T::zero(); xd.len()];
        exec::for_each_chunk_mut(&mut out, c * s, |b, o| {
            for ch in 0..c {
                for i in 0..s {
                    o[ch * s + i] = gd[ch] * xhat[(b * c + ch) * s + i] + bd[ch];
                }
            }
        });
        let t = Tensor::new(shape.to_vec(), out)?;
        let train = stats.is_some();
        let op = BatchNormOp { n, c, s, xhat, inv_std, train };
        Ok((self.record(t, vec![x.clone(), gamma.clone(), beta.clone()], op), stats))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let d = *x.shape().last().ok_or_else(|| TensorError::shape("layer_norm", "scalar input"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("feature dim {d} vs gamma {:?} / beta {:?}", gamma.shape(), beta.shape()),
            ));
        }
        let eps = T::lit(eps);
        let rows = x.value().numel() / d;
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        for (r, row) in x.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / T::lit(d as f64);
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / T::lit(d as f64);
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (*v - mean) * is;
            }
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, v)| gd[i % d] * *v + bd[i % d]).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.record(t, vec![x.clone(), gamma.clone(), beta.clone()], LayerNormOp { d, xhat, inv_std }))
    }
}
