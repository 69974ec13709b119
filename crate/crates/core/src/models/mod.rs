//! The three classifiers and a uniform wrapper over them.

mod inception;
mod resnet;
mod transformer;

use std::fmt;
use std::str::FromStr;

use adbench_tensor::gradcheck::{finite_difference_check, FdConfig, FdReport};
use adbench_tensor::nn::{Ctx, Linear, Mode, NamedTensors, ParamBuilder};
use adbench_tensor::{Scalar, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use inception::InceptionGrid;
pub use resnet::ResNetEncoder;
pub use transformer::PlaneTransformer;

type TResult<T> = adbench_tensor::Result<T>;

pub const PLANE_NAMES: [&str; 3] = ["axial", "coronal", "sagittal"];
pub const TRANSFORMER_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const PRESNET_WIDTHS: [usize; 4] = [16, 32, 64, 128];

pub(crate) fn scaled(c: usize, width: f64) -> usize {
    ((c as f64 * width).round() as usize).max(1)
}

pub(crate) fn check_finite<T: Scalar>(v: &Var<T>, layer: &str) -> TResult<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op: "forward", context: format!(" after {layer}") })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(alias = "inception")]
    InceptionGrid,
    #[serde(alias = "transformer")]
    PlaneTransformer,
    #[serde(alias = "presnet", alias = "p-resnet")]
    PrunedResnet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::InceptionGrid => "inception_grid",
            ModelKind::PlaneTransformer => "plane_transformer",
            ModelKind::PrunedResnet => "pruned_resnet",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::InceptionGrid => "Inception",
            ModelKind::PlaneTransformer => "Transformer",
            ModelKind::PrunedResnet => "P-ResNet",
        }
    }

    pub fn default_dropout(self) -> f64 {
        match self {
            ModelKind::InceptionGrid => 0.6,
            _ => 0.4,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inception_grid" | "inception" => Ok(ModelKind::InceptionGrid),
            "plane_transformer" | "transformer" => Ok(ModelKind::PlaneTransformer),
            "pruned_resnet" | "presnet" | "p-resnet" => Ok(ModelKind::PrunedResnet),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

fn default_width() -> f64 {
    1.0
}
fn default_token_dim() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_layers() -> usize {
    1
}
fn default_ff_dim() -> usize {
    128
}
fn default_image_size() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_classes: usize,
    pub slices: usize,
    /// Falls back to the per-architecture default when absent.
    #[serde(default)]
    pub dropout: Option<f64>,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_token_dim")]
    pub token_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_ff_dim")]
    pub ff_dim: usize,
    /// In-plane side of every slice fed to the network.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, num_classes: usize, slices: usize) -> Self {
        ModelConfig {
            kind,
            num_classes,
            slices,
            dropout: None,
            width: default_width(),
            token_dim: default_token_dim(),
            heads: default_heads(),
            layers: default_layers(),
            ff_dim: default_ff_dim(),
            image_size: default_image_size(),
        }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn dropout(&self) -> f64 {
        self.dropout.unwrap_or_else(|| self.kind.default_dropout())
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.num_classes, 2 | 3) {
            return Err(Error::Config(format!("num_classes must be 2 or 3, got {}", self.num_classes)));
        }
        match (self.kind, self.slices) {
            (ModelKind::PlaneTransformer, 16 | 77) => {}
            (ModelKind::PlaneTransformer, s) => {
                return Err(Error::Config(format!("plane_transformer takes 16 or 77 slices, got {s}")))
            }
            (_, 16) => {}
            (k, s) => return Err(Error::Config(format!("{k} requires 16 slices, got {s}"))),
        }
        let d = self.dropout();
        if !(0.0..1.0).contains(&d) {
            return Err(Error::Config(format!("dropout {d} outside [0, 1)")));
        }
        if !(self.width > 0.0) || self.image_size == 0 {
            return Err(Error::Config("width and image_size must be positive".into()));
        }
        if self.kind == ModelKind::PlaneTransformer && (self.heads == 0 || self.token_dim % self.heads != 0) {
            return Err(Error::Config(format!("token_dim {} not divisible by {} heads", self.token_dim, self.heads)));
        }
        Ok(())
    }

    /// Expected input tensors for a batch of `n`; `depth` is the number of
    /// axial slices in full-plane mode and is ignored otherwise.
    pub fn input_shapes(&self, n: usize, depth: usize) -> Vec<Vec<usize>> {
        let s = self.image_size;
        match self.kind {
            ModelKind::InceptionGrid => vec![vec![n, 1, 4 * s, 4 * s]],
            ModelKind::PrunedResnet => vec![vec![n, 16, s, s]],
            ModelKind::PlaneTransformer if self.slices == 16 => vec![vec![n, 16, s, s]],
            ModelKind::PlaneTransformer => vec![vec![n, depth, s, s], vec![n, s, s, s], vec![n, s, s, s]],
        }
    }
}

/// Narrow ResNet shared across the 16 axial slices, one scalar per slice,
/// and a linear head on the resulting 16-vector.
#[derive(Clone, Debug)]
pub struct PrunedResNet {
    encoder: ResNetEncoder,
    fc: Linear,
    dropout: f64,
}

impl PrunedResNet {
    fn new<T: Scalar>(pb: &mut ParamBuilder<T>, widths: [usize; 4], num_classes: usize, dropout: f64) -> TResult<Self> {
        Ok(PrunedResNet {
            encoder: ResNetEncoder::new(pb, "encoder", widths, 1)?,
            fc: Linear::new(pb, "fc", 16, num_classes, true)?,
            dropout,
        })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> TResult<(Var<T>, Var<T>)> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != 16 {
            return Err(TensorError::Shape { op: "pruned_resnet", detail: format!("expected [N, 16, H, W], got {s:?}") });
        }
        let flat = cx.tape.reshape(x, &[s[0] * 16, 1, s[2], s[3]])?;
        let per_slice = self.encoder.forward(cx, &flat)?;
        let features = cx.tape.reshape(&per_slice, &[s[0], 16])?;
        let d = cx.dropout(&features, self.dropout)?;
        Ok((self.fc.forward(cx, &d)?, features))
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Inception(InceptionGrid),
    Transformer(PlaneTransformer),
    PResNet(PrunedResNet),
}

/// Output of one forward pass.
pub struct ModelOutput<T> {
    pub logits: Var<T>,
    /// Input to the classification head: pooled features, the mean token, or
    /// the 16 per-slice scalars.
    pub features: Var<T>,
    pub tokens: Option<Var<T>>,
    pub attention: Vec<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    arch: Arch,
    pub params: NamedTensors<f32>,
    pub buffers: NamedTensors<f32>,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut pb = ParamBuilder::<f32>::new(seed);
        let (c, d, w) = (config.num_classes, config.dropout(), config.width);
        let arch = match config.kind {
            ModelKind::InceptionGrid => Arch::Inception(InceptionGrid::new(&mut pb, w, c, d)?),
            ModelKind::PrunedResnet => {
                Arch::PResNet(PrunedResNet::new(&mut pb, PRESNET_WIDTHS.map(|x| scaled(x, w)), c, d)?)
            }
            ModelKind::PlaneTransformer => {
                let planes = if config.slices == 16 { 1 } else { 3 };
                Arch::Transformer(PlaneTransformer::new(
                    &mut pb,
                    planes,
                    TRANSFORMER_WIDTHS.map(|x| scaled(x, w)),
                    config.token_dim,
                    config.heads,
                    config.layers,
                    config.ff_dim,
                    c,
                    d,
                )?)
            }
        };
        let (params, buffers) = pb.finish();
        Ok(Model { config: config.clone(), arch, params, buffers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Parameter count per named block, grouping names by their first
    /// `depth` dotted components, in first-appearance order.
    pub fn parameter_table(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params.iter() {
            let key = name.split('.').take(depth.max(1)).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += t.numel(),
                None => out.push((key, t.numel())),
            }
        }
        out
    }

    /// Runs the network on already-taped inputs. Parameters and buffers
    /// inside `cx` may be of any scalar type.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, inputs: &[Var<T>]) -> Result<ModelOutput<T>> {
        let need = match &self.arch {
            Arch::Transformer(t) => t.planes(),
            _ => 1,
        };
        if inputs.len() != need {
            return Err(TensorError::Shape { op: "model", detail: format!("expected {need} input tensors, got {}", inputs.len()) }.into());
        }
        let out = match &self.arch {
            Arch::Inception(m) => {
                let (logits, features) = m.forward(cx, &inputs[0])?;
                ModelOutput { logits, features, tokens: None, attention: Vec::new() }
            }
            Arch::PResNet(m) => {
                let (logits, features) = m.forward(cx, &inputs[0])?;
                ModelOutput { logits, features, tokens: None, attention: Vec::new() }
            }
            Arch::Transformer(m) => {
                let o = m.forward(cx, inputs)?;
                ModelOutput { logits: o.logits, features: o.pooled, tokens: Some(o.tokens), attention: o.attention }
            }
        };
        check_finite(&out.logits, "head")?;
        Ok(out)
    }

    /// Eval-mode class probabilities, one row per sample.
    pub fn predict(&self, inputs: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::<f32>::inference();
        let params = self.params.to_vars(&tape);
        let mut cx = Ctx::new(&tape, &params, &self.buffers, Mode::Eval, 0);
        let xs: Vec<Var<f32>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward(&mut cx, &xs)?;
        Ok(softmax_rows(out.logits.value()))
    }
}

/// Central-difference check of every parameter block and the inputs of a
/// 64-bit copy of `model`, using train-mode batch statistics without dropout
/// and an unweighted cross-entropy against `targets`.
pub fn gradient_report(model: &Model, inputs: &[Tensor<f64>], targets: &[usize], cfg: &FdConfig) -> Result<FdReport> {
    let mut blocks = model.params.cast::<f64>();
    let n_params = blocks.len();
    for (i, x) in inputs.iter().enumerate() {
        blocks.push(format!("input{i}"), x.clone())?;
    }
    let buffers = model.buffers.cast::<f64>();
    let weights = vec![1.0; model.config.num_classes];
    let report = finite_difference_check(&blocks, cfg, |tape, vars| {
        let mut cx = Ctx::new(tape, &vars[..n_params], &buffers, Mode::Train, 0).without_dropout();
        let out = model.forward(&mut cx, &vars[n_params..]).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::Config(other.to_string()),
        })?;
        tape.weighted_cross_entropy(&out.logits, targets, &weights)
    })?;
    Ok(report)
}

/// Row-wise softmax of `[N, C]` logits, computed in f64.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}
