//! Parameter storage and the layers assembled by the model zoo.
//!
//! Layers only hold [`ParamId`]/[`BufferId`] indices. A forward pass receives
//! the parameter values as tape leaves through a [`Ctx`], which lets the same
//! layer code serve training, inference and finite-difference checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::{BatchNormMode, BatchStats};
use crate::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Ordered, uniquely named tensors: trainable parameters or state buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> NamedTensors<T> {
    pub fn new() -> Self {
        NamedTensors { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.names.iter().any(|n| *n == name) {
            return Err(TensorError::Config(format!("duplicate tensor name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NamedTensors<U> {
        NamedTensors { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Registers every tensor as a tracked leaf on `tape`.
    pub fn to_vars(&self, tape: &Tape<T>) -> Vec<Var<T>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Replaces all values, checking names and shapes.
    pub fn assign(&mut self, other: &NamedTensors<T>) -> Result<()> {
        if other.names != self.names {
            return Err(TensorError::Config("tensor names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(TensorError::shape("assign", format!("{:?} vs {:?}", dst.shape(), src.shape())));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `N(0, 2/fan_in)`, suited to ReLU networks.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

/// Allocates named parameters with deterministic initial values.
pub struct ParamBuilder<T> {
    params: NamedTensors<T>,
    buffers: NamedTensors<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            params: NamedTensors::new(),
            buffers: NamedTensors::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    /// Runs `f` with `name` appended to the dotted name prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect()
            }
        };
        let full = self.full_name(name);
        Ok(ParamId(self.params.push(full, Tensor::new(shape.to_vec(), data)?)?))
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let full = self.full_name(name);
        Ok(BufferId(self.buffers.push(full, value)?))
    }

    pub fn finish(self) -> (NamedTensors<T>, NamedTensors<T>) {
        (self.params, self.buffers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BnUpdate<T> {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats<T>,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a Tape<T>,
    params: &'a [Var<T>],
    buffers: &'a NamedTensors<T>,
    mode: Mode,
    dropout_enabled: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a [Var<T>], buffers: &'a NamedTensors<T>, mode: Mode, seed: u64) -> Self {
        Ctx {
            tape,
            params,
            buffers,
            mode,
            dropout_enabled: mode == Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    /// Disables dropout while keeping train-mode batch statistics; used by
    /// gradient checks, which need a deterministic forward.
    pub fn without_dropout(mut self) -> Self {
        self.dropout_enabled = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> &Var<T> {
        &self.params[id.0]
    }

    pub fn dropout(&mut self, x: &Var<T>, p: f64) -> Result<Var<T>> {
        if !self.dropout_enabled {
            return Ok(x.clone());
        }
        self.tape.dropout(x, p, &mut self.rng)
    }

    /// Ends the pass, returning the running-statistics updates gathered by
    /// batch-norm layers in train mode.
    pub fn finish(self) -> BnUpdates<T> {
        BnUpdates(self.bn_updates)
    }
}

/// Pending batch-norm running-average updates from one forward pass.
pub struct BnUpdates<T>(Vec<BnUpdate<T>>);

impl<T: Scalar> BnUpdates<T> {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(self, buffers: &mut NamedTensors<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for u in self.0 {
            for (id, new) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let buf = buffers.tensors_mut()[id.0].data_mut();
                buf.iter_mut().zip(new).for_each(|(b, v)| *b = keep * *b + m * *v);
            }
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        pb.scope(name, |pb| {
            let w = pb.param("weight", &[in_dim, out_dim], Init::Kaiming { fan_in: in_dim })?;
            let b = if bias { Some(pb.param("bias", &[out_dim], Init::Zeros)?) } else { None };
            Ok(Linear { w, b, in_dim, out_dim })
        })
    }

    /// Applies `x·W + b` over the last axis of `x`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        let last = *shape.last().ok_or_else(|| TensorError::shape("linear", "scalar input"))?;
        if last != self.in_dim {
            return Err(TensorError::shape("linear", format!("expected {} input features, got {last}", self.in_dim)));
        }
        let rows = x.value().numel() / last;
        let tape = cx.tape;
        let flat = if shape.len() == 2 { x.clone() } else { tape.reshape(x, &[rows, last])? };
        let mut y = tape.matmul(&flat, cx.param(self.w))?;
        if let Some(b) = self.b {
            y = tape.add_broadcast(&y, cx.param(b))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("non-empty") = self.out_dim;
            tape.reshape(&y, &out_shape)
        }
    }
}

/// Bias-free 2-D convolution (a batch norm always follows).
#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = pb.scope(name, |pb| pb.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Kaiming { fan_in }))?;
        Ok(Conv2d { w, stride, padding, in_ch, out_ch })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        cx.tape.conv2d(x, cx.param(self.w), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(BatchNorm {
                gamma: pb.param("weight", &[channels], Init::Ones)?,
                beta: pb.param("bias", &[channels], Init::Zeros)?,
                mean: pb.buffer("running_mean", Tensor::zeros(&[channels]))?,
                var: pb.buffer("running_var", Tensor::full(&[channels], T::one()))?,
                channels,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (gamma, beta) = (cx.param(self.gamma).clone(), cx.param(self.beta).clone());
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.tape.batch_norm(x, &gamma, &beta, BatchNormMode::Train, BN_EPS)?;
                if let Some(stats) = stats {
                    cx.bn_updates.push(BnUpdate { mean: self.mean, var: self.var, stats });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mode = BatchNormMode::Eval {
                    mean: cx.buffers.get(self.mean.0).data(),
                    var: cx.buffers.get(self.var.0).data(),
                };
                Ok(cx.tape.batch_norm(x, &gamma, &beta, mode, BN_EPS)?.0)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(LayerNorm {
                gamma: pb.param("weight", &[dim], Init::Ones)?,
                beta: pb.param("bias", &[dim], Init::Zeros)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        cx.tape.layer_norm(x, cx.param(self.gamma), cx.param(self.beta), LN_EPS)
    }
}

/// Scaled dot-product self-attention with learned Q/K/V/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!("token dim {dim} is not divisible by {heads} heads")));
        }
        pb.scope(name, |pb| {
            Ok(MultiHeadSelfAttention {
                q: Linear::new(pb, "q", dim, dim, true)?,
                k: Linear::new(pb, "k", dim, dim, true)?,
                v: Linear::new(pb, "v", dim, dim, true)?,
                o: Linear::new(pb, "out", dim, dim, true)?,
                heads,
                dim,
            })
        })
    }

    /// `x[N,L,d] → (y[N,L,d], attention[N·heads, L, L])`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let s = x.shape().to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(TensorError::shape("attention", format!("expected [N, L, {}], got {s:?}", self.dim)));
        }
        let (n, l, h) = (s[0], s[1], self.heads);
        let dh = self.dim / h;
        let tape = cx.tape;
        let split = |y: Var<T>, perm: &[usize]| -> Result<Var<T>> {
            let y = tape.reshape(&y, &[n, l, h, dh])?;
            let y = tape.permute(&y, perm)?;
            let shape = if perm == [0, 2, 1, 3] { [n * h, l, dh] } else { [n * h, dh, l] };
            tape.reshape(&y, &shape)
        };
        let q = split(self.q.forward(cx, x)?, &[0, 2, 1, 3])?;
        let kt = split(self.k.forward(cx, x)?, &[0, 2, 3, 1])?;
        let v = split(self.v.forward(cx, x)?, &[0, 2, 1, 3])?;
        let scores = tape.scale(&tape.bmm(&q, &kt)?, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(&scores);
        let ctx = tape.bmm(&attn, &v)?;
        let ctx = tape.reshape(&ctx, &[n, h, l, dh])?;
        let ctx = tape.permute(&ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(&ctx, &[n, l, self.dim])?;
        Ok((self.o.forward(cx, &ctx)?, attn))
    }
}

/// Post-norm encoder layer: `LN(x + MHSA(x))` then `LN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerEncoderLayer {
    pub attention: MultiHeadSelfAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl TransformerEncoderLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(TransformerEncoderLayer {
                attention: MultiHeadSelfAttention::new(pb, "attn", dim, heads)?,
                ln1: LayerNorm::new(pb, "norm1", dim)?,
                ff1: Linear::new(pb, "ff1", dim, ff_dim, true)?,
                ff2: Linear::new(pb, "ff2", ff_dim, dim, true)?,
                ln2: LayerNorm::new(pb, "norm2", dim)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (a, attn) = self.attention.forward(cx, x)?;
        let x = self.ln1.forward(cx, &cx.tape.add(x, &a)?)?;
        let f = self.ff1.forward(cx, &x)?;
        let f = cx.tape.relu(&f);
        let f = self.ff2.forward(cx, &f)?;
        let x = self.ln2.forward(cx, &cx.tape.add(&x, &f)?)?;
        Ok((x, attn))
    }
}

/// Fixed sinusoidal encodings `[len, dim]`: even columns sine, odd cosine.
pub fn sinusoidal_positional_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let angle = pos as f64 / rate;
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_attention(dim: usize, heads: usize) -> (MultiHeadSelfAttention, NamedTensors<f64>, NamedTensors<f64>) {
        let mut pb = ParamBuilder::<f64>::new(11);
        let a = MultiHeadSelfAttention::new(&mut pb, "mhsa", dim, heads).unwrap();
        let (p, b) = pb.finish();
        (a, p, b)
    }

    fn random_tokens(n: usize, l: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(&[n, l, d], |_| dist.sample(&mut rng))
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (a, p, b) = build_attention(8, 4);
        let tape = Tape::inference();
        let vars = p.to_vars(&tape);
        let mut cx = Ctx::new(&tape, &vars, &b, Mode::Eval, 0);
        let x = tape.constant(random_tokens(2, 5, 8, 1));
        let (y, attn) = a.forward(&mut cx, &x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 8]);
        assert_eq!(attn.shape(), &[8, 5, 5]);
        for row in attn.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_attention_reduces_to_value_projection() {
        let (a, p, b) = build_attention(8, 2);
        let tape = Tape::inference();
        let vars = p.to_vars(&tape);
        let mut cx = Ctx::new(&tape, &vars, &b, Mode::Eval, 0);
        let x = tape.constant(random_tokens(1, 1, 8, 2));
        let (y, attn) = a.forward(&mut cx, &x).unwrap();
        assert!(attn.data().iter().all(|&w| w == 1.0));
        let v = a.v.forward(&mut cx, &x).unwrap();
        let want = a.o.forward(&mut cx, &v).unwrap();
        for (p, q) in y.data().iter().zip(want.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (a, p, b) = build_attention(8, 4);
        let tape = Tape::inference();
        let vars = p.to_vars(&tape);
        let mut cx = Ctx::new(&tape, &vars, &b, Mode::Eval, 0);
        let (l, d) = (6, 8);
        let x = random_tokens(1, l, d, 3);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Tensor::from_fn(&[1, l, d], |i| x.data()[perm[i / d] * d + i % d]);
        let (y, _) = a.forward(&mut cx, &tape.constant(x)).unwrap();
        let (yp, _) = a.forward(&mut cx, &tape.constant(xp)).unwrap();
        for t in 0..l {
            for j in 0..d {
                assert!((yp.data()[t * d + j] - y.data()[perm[t] * d + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut pb = ParamBuilder::<f32>::new(0);
        assert!(matches!(MultiHeadSelfAttention::new(&mut pb, "a", 10, 4), Err(TensorError::Config(_))));
    }

    #[test]
    fn linear_param_count() {
        let mut pb = ParamBuilder::<f32>::new(0);
        Linear::new(&mut pb, "fc", 16, 2, true).unwrap();
        assert_eq!(pb.finish().0.numel(), 34);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut pb = ParamBuilder::<f32>::new(0);
        Linear::new(&mut pb, "fc", 2, 2, true).unwrap();
        assert!(Linear::new(&mut pb, "fc", 2, 2, true).is_err());
    }

    #[test]
    fn positional_encoding_first_row() {
        let pe = sinusoidal_positional_encoding::<f64>(333, 64);
        assert_eq!(pe.shape(), &[333, 64]);
        assert_eq!(pe.data()[0], 0.0);
        assert_eq!(pe.data()[1], 1.0);
    }

    #[test]
    fn bn_running_stats_update() {
        let mut pb = ParamBuilder::<f64>::new(0);
        let bn = BatchNorm::new(&mut pb, "bn", 1).unwrap();
        let (p, mut b) = pb.finish();
        let tape = Tape::new();
        let vars = p.to_vars(&tape);
        let mut cx = Ctx::new(&tape, &vars, &b, Mode::Train, 0);
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut cx, &x).unwrap();
        cx.finish().apply(&mut b, 0.1);
        assert!((b.get(0).data()[0] - 0.2).abs() < 1e-12);
        // var: 0.9 * 1 + 0.1 * 2 (unbiased)
        assert!((b.get(1).data()[0] - 1.1).abs() < 1e-12);
    }
}
