use adbench_tensor::nn::{BatchNorm, Conv2d, Ctx, Linear, ParamBuilder};
use adbench_tensor::{Scalar, TensorError, Var};

use super::check_finite;

type TResult<T> = adbench_tensor::Result<T>;

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, stride: usize) -> TResult<Self> {
        pb.scope(name, |pb| {
            let down = if stride != 1 || cin != cout {
                Some((Conv2d::new(pb, "down_conv", cin, cout, 1, stride, 0)?, BatchNorm::new(pb, "down_bn", cout)?))
            } else {
                None
            };
            Ok(BasicBlock {
                conv1: Conv2d::new(pb, "conv1", cin, cout, 3, stride, 1)?,
                bn1: BatchNorm::new(pb, "bn1", cout)?,
                conv2: Conv2d::new(pb, "conv2", cout, cout, 3, 1, 1)?,
                bn2: BatchNorm::new(pb, "bn2", cout)?,
                down,
            })
        })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> TResult<Var<T>> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.bn1.forward(cx, &y)?;
        let y = cx.tape.relu(&y);
        let y = self.conv2.forward(cx, &y)?;
        let y = self.bn2.forward(cx, &y)?;
        let skip = match &self.down {
            Some((c, b)) => {
                let s = c.forward(cx, x)?;
                b.forward(cx, &s)?
            }
            None => x.clone(),
        };
        Ok(cx.tape.relu(&cx.tape.add(&y, &skip)?))
    }
}

/// ResNet-18 topology on single-channel slices: 7×7/2 stem, max pool, four
/// stages of two basic blocks, global average pool, linear projection.
#[derive(Clone, Debug)]
pub struct ResNetEncoder {
    name: String,
    stem: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
    proj: Linear,
    pub out_dim: usize,
}

impl ResNetEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, widths: [usize; 4], out_dim: usize) -> TResult<Self> {
        pb.scope(name, |pb| {
            let stem = Conv2d::new(pb, "stem_conv", 1, widths[0], 7, 2, 3)?;
            let stem_bn = BatchNorm::new(pb, "stem_bn", widths[0])?;
            let mut stages = Vec::with_capacity(4);
            let mut cin = widths[0];
            for (s, &w) in widths.iter().enumerate() {
                let stride = if s == 0 { 1 } else { 2 };
                let b0 = BasicBlock::new(pb, &format!("layer{}.0", s + 1), cin, w, stride)?;
                let b1 = BasicBlock::new(pb, &format!("layer{}.1", s + 1), w, w, 1)?;
                stages.push(vec![b0, b1]);
                cin = w;
            }
            let proj = Linear::new(pb, "proj", cin, out_dim, true)?;
            Ok(ResNetEncoder { name: name.to_string(), stem, stem_bn, stages, proj, out_dim })
        })
    }

    /// `[B, 1, H, W] → [B, out_dim]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> TResult<Var<T>> {
        if x.shape().len() != 4 || x.shape()[1] != 1 {
            return Err(TensorError::Shape { op: "resnet encoder", detail: format!("expected [B, 1, H, W], got {:?}", x.shape()) });
        }
        let y = self.stem.forward(cx, x)?;
        let y = self.stem_bn.forward(cx, &y)?;
        let y = cx.tape.relu(&y);
        let mut y = cx.tape.max_pool2d(&y, 3, 2, 1)?;
        check_finite(&y, &format!("{}.stem", self.name))?;
        for (s, stage) in self.stages.iter().enumerate() {
            for b in stage {
                y = b.forward(cx, &y)?;
            }
            check_finite(&y, &format!("{}.layer{}", self.name, s + 1))?;
        }
        let y = cx.tape.global_avg_pool(&y)?;
        self.proj.forward(cx, &y)
    }
}
