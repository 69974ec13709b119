use super::expect_rank;
use crate::exec::{self, REDUCE_GROUP};
use crate::tape::Backward;
use crate::{gemm, Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    /// Output columns `ox` whose input column `ox*stride + k - pad` is in range.
    fn valid_cols(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = (self.pad.saturating_sub(k) + self.stride - 1) / self.stride;
        let hi_in = extent as isize - 1 + self.pad as isize - k as isize;
        if hi_in < 0 {
            return (0, 0);
        }
        let hi = ((hi_in as usize) / self.stride + 1).min(out);
        (lo.min(hi), hi)
    }
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_cols(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_cols(kj, g.w, g.wo);
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    drow[..ox_lo].fill(T::zero());
                    drow[ox_hi..].fill(T::zero());
                    let ix0 = ox_lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (i, d) in drow[ox_lo..ox_hi].iter_mut().enumerate() {
                            *d = src[ix0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_cols(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_cols(kj, g.w, g.wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    let ix0 = ox_lo * g.stride + kj - g.pad;
                    for (i, s) in srow[ox_lo..ox_hi].iter().enumerate() {
                        drow[ix0 + i * g.stride] += *s;
                    }
                }
            }
        }
    }
}

/// Applies `f` to the im2col matrix of image `n` without copying pointwise convs.
fn with_cols<T: Scalar, R>(x: &[T], g: &ConvGeom, n: usize, f: impl FnOnce(&[T]) -> R) -> R {
    let img = &x[n * g.in_image()..(n + 1) * g.in_image()];
    if g.is_pointwise() {
        f(img)
    } else {
        let mut cols = vec![T::zero(); g.patch() * g.out_plane()];
        im2col(img, g, &mut cols);
        f(&cols)
    }
}

struct Conv2dOp {
    geom: ConvGeom,
}

impl<T: Scalar> Backward<T> for Conv2dOp {
    fn backward(&self, inputs: &[Var<T>], grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = self.geom;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let out_img = g.f * g.out_plane();
        let dw = needs[1].then(|| {
            let groups = g.n.div_ceil(REDUCE_GROUP);
            let partials = exec::map_indexed(groups, |gi| {
                let mut acc = vec![T::zero(); g.f * g.patch()];
                for n in gi * REDUCE_GROUP..((gi + 1) * REDUCE_GROUP).min(g.n) {
                    let dy = &grad[n * out_img..(n + 1) * out_img];
                    with_cols(x, &g, n, |cols| {
                        gemm(false, true, g.f, g.patch(), g.out_plane(), dy, cols, T::one(), &mut acc)
                    });
                }
                acc
            });
            let mut total = vec![T::zero(); g.f * g.patch()];
            for p in partials {
                total.iter_mut().zip(&p).for_each(|(t, v)| *t += *v);
            }
            total
        });
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); g.n * g.in_image()];
            exec::for_each_chunk_mut(&mut dx, g.in_image(), |n, dx_img| {
                let dy = &grad[n * out_img..(n + 1) * out_img];
                if g.is_pointwise() {
                    gemm(true, false, g.c, g.out_plane(), g.f, w, dy, T::zero(), dx_img);
                } else {
                    let mut dcols = vec![T::zero(); g.patch() * g.out_plane()];
                    gemm(true, false, g.patch(), g.out_plane(), g.f, w, dy, T::zero(), &mut dcols);
                    col2im(&dcols, &g, dx_img);
                }
            });
            dx
        });
        vec![dx, dw]
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x[N,C,H,W]` with `kernel[F,C,kh,kw]`, zero padding
    /// on every side. Output is `[N,F,(H+2p-kh)/s+1,(W+2p-kw)/s+1]`.
    pub fn conv2d(&self, x: &Var<T>, kernel: &Var<T>, stride: usize, padding: usize) -> Result<Var<T>> {
        expect_rank("conv2d", x.shape(), 4, "input")?;
        expect_rank("conv2d", kernel.shape(), 4, "kernel")?;
        let (xs, ks) = (x.shape(), kernel.shape());
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be at least 1"));
        }
        if xs[1] != ks[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("input channels: input has {} but kernel expects {}", xs[1], ks[1]),
            ));
        }
        if ks[2] > xs[2] + 2 * padding {
            return Err(TensorError::shape(
                "conv2d",
                format!("height: kernel {} exceeds padded input {}", ks[2], xs[2] + 2 * padding),
            ));
        }
        if ks[3] > xs[3] + 2 * padding {
            return Err(TensorError::shape(
                "conv2d",
                format!("width: kernel {} exceeds padded input {}", ks[3], xs[3] + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            ho: (xs[2] + 2 * padding - ks[2]) / stride + 1,
            wo: (xs[3] + 2 * padding - ks[3]) / stride + 1,
        };
        let out_img = geom.f * geom.out_plane();
        let mut out = vec![T::zero(); geom.n * out_img];
        let (xd, wd) = (x.data(), kernel.data());
        exec::for_each_chunk_mut(&mut out, out_img, |n, o| {
            with_cols(xd, &geom, n, |cols| {
                gemm(false, false, geom.f, geom.out_plane(), geom.patch(), wd, cols, T::zero(), o)
            });
        });
        let t = Tensor::new(vec![geom.n, geom.f, geom.ho, geom.wo], out)?;
        Ok(self.record(t, vec![x.clone(), kernel.clone()], Conv2dOp { geom }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as an independent reference.
    fn direct(x: &Tensor<f64>, k: &Tensor<f64>, s: usize, p: usize) -> Vec<f64> {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (w + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; n * f * ho * wo];
        for b in 0..n {
            for o in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * s + i) as isize - p as isize;
                                    let ix = (ox * s + j) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((o * c + ch) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((b * f + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        for (s, p, kh) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (3, 0, 2), (1, 0, 1), (2, 0, 1)] {
            let x = Tensor::from_fn(&[2, 3, 9, 8], |i| ((i * 7919) % 97) as f64 / 50.0 - 1.0);
            let k = Tensor::from_fn(&[4, 3, kh, kh], |i| ((i * 104729) % 31) as f64 / 15.0 - 1.0);
            let tape = Tape::new();
            let y = tape.conv2d(&tape.leaf(x.clone()), &tape.leaf(k.clone()), s, p).unwrap();
            let want = direct(&x, &k, s, p);
            assert_eq!(y.data().len(), want.len());
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "s={s} p={p} kh={kh}");
            }
        }
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f32);
        let tape = Tape::new();
        let y = tape.conv2d(&tape.leaf(x.clone()), &tape.leaf(Tensor::full(&[1, 1, 1, 1], 1.0)), 1, 0).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn all_ones_three_by_three() {
        let tape = Tape::<f32>::new();
        let y = tape
            .conv2d(&tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0)), &tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0)), 1, 0)
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let tape = Tape::<f32>::new();
        let err = tape
            .conv2d(&tape.leaf(Tensor::zeros(&[1, 2, 5, 5])), &tape.leaf(Tensor::zeros(&[1, 3, 3, 3])), 1, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("input channels"), "{err}");
        let err = tape
            .conv2d(&tape.leaf(Tensor::zeros(&[1, 1, 2, 5])), &tape.leaf(Tensor::zeros(&[1, 1, 3, 3])), 1, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("height"), "{err}");
    }
}
