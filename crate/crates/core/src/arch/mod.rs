//! Network variants compiled to a small layer IR and interpreted on a [`Graph`].
//!
//! A [`NetworkSpec`] is a list of layers in SSA form (value 0 is the input,
//! layer `i` produces value `i + 1`) plus a registry of named parameters and
//! batch-norm layers. [`ParamStore`] holds the tensors; [`forward`] replays the
//! layers onto a graph.

mod build;
mod store;

use std::fmt;
use std::str::FromStr;

pub use build::{build_network, build_residual_unit};
pub use store::ParamStore;

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::real::Real;
use crate::{NUM_CLASSES, NUM_MODALITIES};

pub const BN_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of their old value per update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Standard deviation of the logit layers' initial weights.
pub const LOGIT_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    VggStyle,
    ResnetStyle,
    UnetStyle,
    ResidualUnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderKind {
    SkipAdd,
    Concat,
}

/// The four named variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Fcn8sVgg,
    Fcn8sResnet,
    Unet,
    ResUnet,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Self::Fcn8sVgg, Self::Fcn8sResnet, Self::Unet, Self::ResUnet];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fcn8sVgg => "fcn8s-vgg",
            Self::Fcn8sResnet => "fcn8s-resnet",
            Self::Unet => "unet",
            Self::ResUnet => "res-unet",
        }
    }

    pub fn kinds(self) -> (EncoderKind, DecoderKind) {
        match self {
            Self::Fcn8sVgg => (EncoderKind::VggStyle, DecoderKind::SkipAdd),
            Self::Fcn8sResnet => (EncoderKind::ResnetStyle, DecoderKind::SkipAdd),
            Self::Unet => (EncoderKind::UnetStyle, DecoderKind::Concat),
            Self::ResUnet => (EncoderKind::ResidualUnet, DecoderKind::Concat),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown architecture `{s}` (expected fcn8s-vgg|fcn8s-resnet|unet|res-unet)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    /// Number of 2x down-sampling stages.
    pub depth: usize,
    pub base_width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Square spatial extent the network is built for.
    pub input_size: usize,
    /// Skip-add fusion weights, deepest branch first.
    pub branch_weights: [f64; 3],
}

impl NetConfig {
    pub fn new(arch: Arch) -> Self {
        let (encoder, decoder) = arch.kinds();
        NetConfig {
            encoder,
            decoder,
            depth: 3,
            base_width: 8,
            in_channels: NUM_MODALITIES,
            num_classes: NUM_CLASSES,
            input_size: 64,
            branch_weights: [1.0, 2.0, 4.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return invalid(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.depth == 0 || self.base_width == 0 || self.in_channels == 0 {
            return invalid("depth, base_width and in_channels must be positive");
        }
        if self.depth > 12 {
            return invalid(format!("depth {} is too large", self.depth));
        }
        if self.input_size == 0 || self.input_size % (1 << self.depth) != 0 {
            return invalid(format!(
                "input size {} is not divisible by 2^depth = {}",
                self.input_size,
                1usize << self.depth
            ));
        }
        if self.branch_weights.iter().any(|w| !w.is_finite()) {
            return invalid("branch weights must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
    /// Channel-diagonal bilinear upsampling kernel.
    Bilinear { stride: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormInfo {
    pub name: String,
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
}

impl NormInfo {
    pub fn running_mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn running_var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }
}

/// One instruction. Operands are value indices; parameters and norms index
/// into the spec's registries.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv { src: usize, kernel: usize, bias: Option<usize>, stride: usize, pad: usize },
    ConvTranspose { src: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm { src: usize, norm: usize },
    Relu { src: usize },
    MaxPool { src: usize },
    Add { a: usize, b: usize },
    Scale { src: usize, factor: f64 },
    Concat { a: usize, b: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
    pub params: Vec<ParamInfo>,
    pub norms: Vec<NormInfo>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial extents must be divisible by this.
    pub spatial_multiple: usize,
}

impl NetworkSpec {
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter leaves, aligned with [`NetworkSpec::params`].
    pub params: Vec<Var>,
    /// Batch-norm outputs, aligned with [`NetworkSpec::norms`].
    pub norms: Vec<Var>,
}

/// Replays `spec` onto `g` with `input` of shape `(N, C, H, W)`.
///
/// In [`Mode::Eval`] batch norm uses the store's running statistics; in
/// [`Mode::Train`] it uses batch statistics, which [`ParamStore::update_running`]
/// can fold into the running buffers afterwards.
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    input: Var,
    mode: Mode,
) -> Result<ForwardPass> {
    let (_, c, h, w) = g.value(input).nchw()?;
    if c != spec.in_channels {
        return shape_err(format!("network expects {} input channels, got {c}", spec.in_channels));
    }
    if h % spec.spatial_multiple != 0 || w % spec.spatial_multiple != 0 {
        return shape_err(format!("input {h}x{w} is not divisible by {}", spec.spatial_multiple));
    }
    store.check(spec)?;
    let params: Vec<Var> = spec.params.iter().map(|p| g.param(store.param(&p.name).clone())).collect();
    let eps = T::from_f64(BN_EPS);
    let mut values = vec![input];
    let mut norms = vec![None; spec.norms.len()];
    for layer in &spec.layers {
        let v = match *layer {
            Layer::Conv { src, kernel, bias, stride, pad } => {
                let y = g.conv2d(values[src], params[kernel], stride, pad)?;
                match bias {
                    Some(b) => g.bias_add(y, params[b])?,
                    None => y,
                }
            }
            Layer::ConvTranspose { src, kernel, stride, pad } => {
                g.conv_transpose2d(values[src], params[kernel], stride, pad)?
            }
            Layer::BatchNorm { src, norm } => {
                let info = &spec.norms[norm];
                let running = match mode {
                    Mode::Eval => Some((
                        store.buffer(&info.running_mean_name()).data(),
                        store.buffer(&info.running_var_name()).data(),
                    )),
                    Mode::Train => None,
                };
                let y = g.batch_norm(values[src], params[info.gamma], params[info.beta], eps, mode, running)?;
                norms[norm] = Some(y);
                y
            }
            Layer::Relu { src } => g.relu(values[src]),
            Layer::MaxPool { src } => g.maxpool2d(values[src], 2, 2)?,
            Layer::Add { a, b } => g.add(values[a], values[b])?,
            Layer::Scale { src, factor } => g.scale(values[src], T::from_f64(factor)),
            Layer::Concat { a, b } => g.concat_channels(values[a], values[b])?,
        };
        values.push(v);
    }
    let norms = norms.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| Error::Invalid("unused batch-norm entry".into()))?;
    Ok(ForwardPass { logits: *values.last().expect("input value"), params, norms })
}
