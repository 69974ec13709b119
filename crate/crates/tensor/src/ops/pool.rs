use super::expect_rank;
use crate::exec;
use crate::tape::Backward;
use crate::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy)]
struct PoolGeom {
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl PoolGeom {
    fn new(op: &'static str, shape: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        expect_rank(op, shape, 4, "input")?;
        if k == 0 || stride == 0 {
            return Err(TensorError::shape(op, "kernel and stride must be at least 1"));
        }
        if pad * 2 > k {
            return Err(TensorError::shape(op, format!("padding {pad} exceeds half the window {k}")));
        }
        let (h, w) = (shape[2], shape[3]);
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(TensorError::shape(
                op,
                format!("window {k} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(PoolGeom {
            planes: shape[0] * shape[1],
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn window(&self, o: usize, extent: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.k as isize) as usize).min(extent);
        (lo, hi)
    }
}

struct MaxPoolOp {
    geom: PoolGeom,
    argmax: Vec<u32>,
}
impl<T: Scalar> Backward<T> for MaxPoolOp {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let pg = self.geom;
            let mut dx = vec![T::zero(); pg.planes * pg.h * pg.w];
            let out_plane = pg.ho * pg.wo;
            exec::for_each_chunk_mut(&mut dx, pg.h * pg.w, |p, d| {
                let base = p * out_plane;
                for i in 0..out_plane {
                    d[self.argmax[base + i] as usize] += g[base + i];
                }
            });
            dx
        })]
    }
}

struct AvgPoolOp {
    geom: PoolGeom,
}
impl<T: Scalar> Backward<T> for AvgPoolOp {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let pg = self.geom;
            let inv = T::one() / T::lit((pg.k * pg.k) as f64);
            let mut dx = vec![T::zero(); pg.planes * pg.h * pg.w];
            exec::for_each_chunk_mut(&mut dx, pg.h * pg.w, |p, d| {
                for oy in 0..pg.ho {
                    let (y0, y1) = pg.window(oy, pg.h);
                    for ox in 0..pg.wo {
                        let (x0, x1) = pg.window(ox, pg.w);
                        let v = g[(p * pg.ho + oy) * pg.wo + ox] * inv;
                        for y in y0..y1 {
                            d[y * pg.w + x0..y * pg.w + x1].iter_mut().for_each(|e| *e += v);
                        }
                    }
                }
            });
            dx
        })]
    }
}

struct GlobalAvgPoolOp {
    plane: usize,
}
impl<T: Scalar> Backward<T> for GlobalAvgPoolOp {
    fn backward(&self, _: &[Var<T>], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let inv = T::one() / T::lit(self.plane as f64);
            g.iter().flat_map(|v| std::iter::repeat_n(*v * inv, self.plane)).collect()
        })]
    }
}

impl<T: Scalar> Tape<T> {
    /// Max pooling over `k×k` windows; padded cells never win and a NaN
    /// anywhere in a window wins it.
    pub fn max_pool2d(&self, x: &Var<T>, k: usize, stride: usize, pad: usize) -> Result<Var<T>> {
        let pg = PoolGeom::new("max_pool2d", x.shape(), k, stride, pad)?;
        let out_plane = pg.ho * pg.wo;
        let xd = x.data();
        let per_plane = exec::map_indexed(pg.planes, |p| {
            let src = &xd[p * pg.h * pg.w..(p + 1) * pg.h * pg.w];
            let mut vals = Vec::with_capacity(out_plane);
            let mut idx = Vec::with_capacity(out_plane);
            for oy in 0..pg.ho {
                let (y0, y1) = pg.window(oy, pg.h);
                for ox in 0..pg.wo {
                    let (x0, x1) = pg.window(ox, pg.w);
                    let mut best = T::neg_infinity();
                    let mut at = y0 * pg.w + x0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let v = src[y * pg.w + xx];
                            #[allow(clippy::eq_op)]
                            if v > best || (v != v && best == best) {
                                best = v;
                                at = y * pg.w + xx;
                            }
                        }
                    }
                    vals.push(best);
                    idx.push(at as u32);
                }
            }
            (vals, idx)
        });
        let mut out = Vec::with_capacity(pg.planes * out_plane);
        let mut argmax = Vec::with_capacity(pg.planes * out_plane);
        for (v, i) in per_plane {
            out.extend(v);
            argmax.extend(i);
        }
        let s = x.shape();
        let t = Tensor::new(vec![s[0], s[1], pg.ho, pg.wo], out)?;
        Ok(self.record(t, vec![x.clone()], MaxPoolOp { geom: pg, argmax }))
    }

    /// Average pooling; padded cells count as zeros in the `k²` denominator.
    pub fn avg_pool2d(&self, x: &Var<T>, k: usize, stride: usize, pad: usize) -> Result<Var<T>> {
        let pg = PoolGeom::new("avg_pool2d", x.shape(), k, stride, pad)?;
        let inv = T::one() / T::lit((k * k) as f64);
        let xd = x.data();
        let mut out = vec![T::zero(); pg.planes * pg.ho * pg.wo];
        exec::for_each_chunk_mut(&mut out, pg.ho * pg.wo, |p, o| {
            let src = &xd[p * pg.h * pg.w..(p + 1) * pg.h * pg.w];
            for oy in 0..pg.ho {
                let (y0, y1) = pg.window(oy, pg.h);
                for ox in 0..pg.wo {
                    let (x0, x1) = pg.window(ox, pg.w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for v in &src[y * pg.w + x0..y * pg.w + x1] {
                            acc += *v;
                        }
                    }
                    o[oy * pg.wo + ox] = acc * inv;
                }
            }
        });
        let s = x.shape();
        let t = Tensor::new(vec![s[0], s[1], pg.ho, pg.wo], out)?;
        Ok(self.record(t, vec![x.clone()], AvgPoolOp { geom: pg }))
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        expect_rank("global_avg_pool", x.shape(), 4, "input")?;
        let s = x.shape();
        let plane = s[2] * s[3];
        let inv = T::one() / T::lit(plane as f64);
        let out: Vec<T> = x.data().chunks(plane).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let t = Tensor::new(vec![s[0], s[1]], out)?;
        Ok(self.record(t, vec![x.clone()], GlobalAvgPoolOp { plane }))
    }
}
