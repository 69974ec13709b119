use adbench_tensor::nn::{BatchNorm, Conv2d, Ctx, Linear, ParamBuilder};
use adbench_tensor::{Scalar, TensorError, Var};

use super::check_finite;

type TResult<T> = adbench_tensor::Result<T>;

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
struct BasicConv {
    conv: Conv2d,
    bn: BatchNorm,
}

impl BasicConv {
    fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> TResult<Self> {
        pb.scope(name, |pb| {
            Ok(BasicConv { conv: Conv2d::new(pb, "conv", cin, cout, k, stride, pad)?, bn: BatchNorm::new(pb, "bn", cout)? })
        })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> TResult<Var<T>> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, &y)?;
        Ok(cx.tape.relu(&y))
    }

    fn out(&self) -> usize {
        self.conv.out_ch
    }
}

/// 1×1, 1×1→3×3, 1×1→3×3→3×3 and avg-pool→1×1 branches.
#[derive(Clone, Debug)]
struct InceptionA {
    b1: BasicConv,
    b3: [BasicConv; 2],
    b33: [BasicConv; 3],
    pool: BasicConv,
}

impl InceptionA {
    fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, pool_ch: usize, w: &impl Fn(usize) -> usize) -> TResult<Self> {
        pb.scope(name, |pb| {
            Ok(InceptionA {
                b1: BasicConv::new(pb, "branch1x1", cin, w(64), 1, 1, 0)?,
                b3: [
                    BasicConv::new(pb, "branch3x3_1", cin, w(48), 1, 1, 0)?,
                    BasicConv::new(pb, "branch3x3_2", w(48), w(64), 3, 1, 1)?,
                ],
                b33: [
                    BasicConv::new(pb, "branch3x3dbl_1", cin, w(64), 1, 1, 0)?,
                    BasicConv::new(pb, "branch3x3dbl_2", w(64), w(96), 3, 1, 1)?,
                    BasicConv::new(pb, "branch3x3dbl_3", w(96), w(96), 3, 1, 1)?,
                ],
                pool: BasicConv::new(pb, "branch_pool", cin, pool_ch, 1, 1, 0)?,
            })
        })
    }

    fn out(&self) -> usize {
        self.b1.out() + self.b3[1].out() + self.b33[2].out() + self.pool.out()
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> TResult<Var<T>> {
        let a = self.b1.forward(cx, x)?;
        let mut b = x.clone();
        for c in &self.b3 {
            b = c.forward(cx, &b)?;
        }
        let mut d = x.clone();
        for c in &self.b33 {
            d = c.forward(cx, &d)?;
        }
        let p = cx.tape.avg_pool2d(x, 3, 1, 1)?;
        let p = self.pool.forward(cx, &p)?;
        cx.tape.concat(&[a, b, d, p], 1)
    }
}

/// Grid reduction: 3×3/2, 1×1→3×3→3×3/2 and max-pool branches.
#[derive(Clone, Debug)]
struct Reduction {
    b3: BasicConv,
    b33: [BasicConv; 3],
    cin: usize,
}

impl Reduction {
    fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, w: &impl Fn(usize) -> usize) -> TResult<Self> {
        pb.scope(name, |pb| {
            Ok(Reduction {
                b3: BasicConv::new(pb, "branch3x3", cin, w(384), 3, 2, 0)?,
                b33: [
                    BasicConv::new(pb, "branch3x3dbl_1", cin, w(64), 1, 1, 0)?,
                    BasicConv::new(pb, "branch3x3dbl_2", w(64), w(96), 3, 1, 1)?,
                    BasicConv::new(pb, "branch3x3dbl_3", w(96), w(96), 3, 2, 0)?,
                ],
                cin,
            })
        })
    }

    fn out(&self) -> usize {
        self.b3.out() + self.b33[2].out() + self.cin
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> TResult<Var<T>> {
        let a = self.b3.forward(cx, x)?;
        let mut d = x.clone();
        for c in &self.b33 {
            d = c.forward(cx, &d)?;
        }
        let p = cx.tape.max_pool2d(x, 3, 2, 0)?;
        cx.tape.concat(&[a, d, p], 1)
    }
}

#[derive(Clone, Debug)]
enum Block {
    A(InceptionA),
    R(Reduction),
}

/// Inception-style classifier over a single-channel montage.
#[derive(Clone, Debug)]
pub struct InceptionGrid {
    stem: Vec<BasicConv>,
    blocks: Vec<Block>,
    fc: Linear,
    dropout: f64,
    pub feature_dim: usize,
}

/// Stem layers as (out, kernel, stride, pad), with max pools after the
/// third and fifth convolutions.
const STEM: [(usize, usize, usize, usize); 5] = [(32, 3, 2, 0), (32, 3, 1, 0), (64, 3, 1, 1), (80, 1, 1, 0), (192, 3, 1, 0)];

impl InceptionGrid {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, width: f64, num_classes: usize, dropout: f64) -> TResult<Self> {
        let w = move |c: usize| super::scaled(c, width);
        let mut stem = Vec::new();
        let mut cin = 1;
        for (i, &(c, k, s, p)) in STEM.iter().enumerate() {
            let conv = BasicConv::new(pb, &format!("stem.conv{}", i + 1), cin, w(c), k, s, p)?;
            cin = conv.out();
            stem.push(conv);
        }
        let mut blocks = Vec::new();
        let a1 = InceptionA::new(pb, "mixed_a1", cin, w(32), &w)?;
        let a2 = InceptionA::new(pb, "mixed_a2", a1.out(), w(64), &w)?;
        let r = Reduction::new(pb, "reduction", a2.out(), &w)?;
        let a3 = InceptionA::new(pb, "mixed_a3", r.out(), w(64), &w)?;
        let feature_dim = a3.out();
        blocks.extend([Block::A(a1), Block::A(a2), Block::R(r), Block::A(a3)]);
        let fc = Linear::new(pb, "fc", feature_dim, num_classes, true)?;
        Ok(InceptionGrid { stem, blocks, fc, dropout, feature_dim })
    }

    /// `[N, 1, H, W]` montage to `(logits, pooled features)`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> TResult<(Var<T>, Var<T>)> {
        if x.shape().len() != 4 || x.shape()[1] != 1 {
            return Err(TensorError::Shape { op: "inception", detail: format!("expected [N, 1, H, W] montage, got {:?}", x.shape()) });
        }
        let mut y = x.clone();
        for (i, c) in self.stem.iter().enumerate() {
            y = c.forward(cx, &y)?;
            if i == 2 || i == 4 {
                y = cx.tape.max_pool2d(&y, 3, 2, 0)?;
            }
        }
        check_finite(&y, "stem")?;
        for (i, b) in self.blocks.iter().enumerate() {
            y = match b {
                Block::A(a) => a.forward(cx, &y)?,
                Block::R(r) => r.forward(cx, &y)?,
            };
            check_finite(&y, &format!("block{}", i + 1))?;
        }
        let f = cx.tape.global_avg_pool(&y)?;
        let d = cx.dropout(&f, self.dropout)?;
        Ok((self.fc.forward(cx, &d)?, f))
    }
}
