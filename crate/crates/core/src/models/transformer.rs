use adbench_tensor::nn::{sinusoidal_positional_encoding, Ctx, Linear, ParamBuilder, TransformerEncoderLayer};
use adbench_tensor::{Scalar, TensorError, Var};

use super::resnet::ResNetEncoder;
use super::{check_finite, PLANE_NAMES};

type TResult<T> = adbench_tensor::Result<T>;

/// Per-plane ResNet encoders produce one token per slice; the concatenated
/// sequence gets fixed positional encodings and goes through self-attention.
#[derive(Clone, Debug)]
pub struct PlaneTransformer {
    encoders: Vec<ResNetEncoder>,
    layers: Vec<TransformerEncoderLayer>,
    fc1: Linear,
    fc2: Linear,
    dropout: f64,
    pub token_dim: usize,
}

pub struct TransformerOutput<T> {
    pub logits: Var<T>,
    pub pooled: Var<T>,
    pub tokens: Var<T>,
    pub attention: Vec<Var<T>>,
}

impl PlaneTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        planes: usize,
        widths: [usize; 4],
        token_dim: usize,
        heads: usize,
        layers: usize,
        ff_dim: usize,
        num_classes: usize,
        dropout: f64,
    ) -> TResult<Self> {
        if heads == 0 || token_dim % heads != 0 {
            return Err(TensorError::Config(format!("token dim {token_dim} is not divisible by {heads} heads")));
        }
        let encoders = (0..planes)
            .map(|p| ResNetEncoder::new(pb, &format!("encoder_{}", PLANE_NAMES[p]), widths, token_dim))
            .collect::<TResult<Vec<_>>>()?;
        let layers = (0..layers)
            .map(|i| TransformerEncoderLayer::new(pb, &format!("transformer.{i}"), token_dim, heads, ff_dim))
            .collect::<TResult<Vec<_>>>()?;
        let hidden = token_dim / 2;
        Ok(PlaneTransformer {
            encoders,
            layers,
            fc1: Linear::new(pb, "fc1", token_dim, hidden, true)?,
            fc2: Linear::new(pb, "fc2", hidden, num_classes, true)?,
            dropout,
            token_dim,
        })
    }

    pub fn planes(&self) -> usize {
        self.encoders.len()
    }

    /// Each plane is `[N, K_p, S, S]`; the token sequence has `Σ K_p` entries.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, planes: &[Var<T>]) -> TResult<TransformerOutput<T>> {
        if planes.len() != self.encoders.len() {
            return Err(TensorError::Shape {
                op: "transformer",
                detail: format!("expected {} planes, got {}", self.encoders.len(), planes.len()),
            });
        }
        let n = planes[0].shape()[0];
        let mut seq = Vec::with_capacity(planes.len());
        for (enc, x) in self.encoders.iter().zip(planes) {
            let s = x.shape();
            if s.len() != 4 || s[0] != n {
                return Err(TensorError::Shape { op: "transformer", detail: format!("plane input must be [{n}, K, H, W], got {s:?}") });
            }
            let flat = cx.tape.reshape(x, &[n * s[1], 1, s[2], s[3]])?;
            let t = enc.forward(cx, &flat)?;
            seq.push(cx.tape.reshape(&t, &[n, s[1], self.token_dim])?);
        }
        let tokens = if seq.len() == 1 { seq.pop().expect("one plane") } else { cx.tape.concat(&seq, 1)? };
        check_finite(&tokens, "tokens")?;
        let len = tokens.shape()[1];
        let pe = cx.tape.constant(sinusoidal_positional_encoding(len, self.token_dim));
        let mut y = cx.tape.add_broadcast(&tokens, &pe)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (z, a) = l.forward(cx, &y)?;
            check_finite(&z, &format!("transformer.{i}"))?;
            attention.push(a);
            y = z;
        }
        let y = cx.dropout(&y, self.dropout)?;
        let pooled = cx.tape.mean_axis(&y, 1)?;
        let h = self.fc1.forward(cx, &pooled)?;
        let h = cx.tape.relu(&h);
        let logits = self.fc2.forward(cx, &h)?;
        Ok(TransformerOutput { logits, pooled, tokens, attention })
    }
}
