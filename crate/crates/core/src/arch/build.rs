use super::{DecoderKind, EncoderKind, Init, Layer, NetConfig, NetworkSpec, NormInfo, ParamInfo, LOGIT_INIT_STD};
use crate::error::{invalid, Result};

struct Builder {
    layers: Vec<Layer>,
    params: Vec<ParamInfo>,
    norms: Vec<NormInfo>,
    /// Channel count of every value.
    channels: Vec<usize>,
}

/// An encoder output at `level` down-sampling steps below the input.
#[derive(Clone, Copy)]
struct Feature {
    value: usize,
    level: u32,
}

impl Builder {
    fn new(in_channels: usize) -> Self {
        Builder { layers: Vec::new(), params: Vec::new(), norms: Vec::new(), channels: vec![in_channels] }
    }

    fn push(&mut self, layer: Layer, channels: usize) -> usize {
        self.layers.push(layer);
        self.channels.push(channels);
        self.channels.len() - 1
    }

    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(ParamInfo { name, shape, init });
        self.params.len() - 1
    }

    /// Stride-1 convolution with same padding.
    fn conv(&mut self, src: usize, out: usize, k: usize, name: &str, bias: bool) -> usize {
        let cin = self.channels[src];
        self.conv_with(src, out, k, name, bias, Init::He { fan_in: cin * k * k })
    }

    /// 1x1 convolution producing class logits.
    fn classifier(&mut self, src: usize, classes: usize, name: &str) -> usize {
        self.conv_with(src, classes, 1, name, true, Init::Normal { std: LOGIT_INIT_STD })
    }

    fn conv_with(&mut self, src: usize, out: usize, k: usize, name: &str, bias: bool, init: Init) -> usize {
        let cin = self.channels[src];
        let kernel = self.param(format!("{name}.weight"), vec![out, cin, k, k], init);
        let bias = bias.then(|| self.param(format!("{name}.bias"), vec![out], Init::Zeros));
        self.push(Layer::Conv { src, kernel, bias, stride: 1, pad: k / 2 }, out)
    }

    fn batch_norm(&mut self, src: usize, name: &str) -> usize {
        let channels = self.channels[src];
        let gamma = self.param(format!("{name}.gamma"), vec![channels], Init::Ones);
        let beta = self.param(format!("{name}.beta"), vec![channels], Init::Zeros);
        self.norms.push(NormInfo { name: name.to_string(), channels, gamma, beta });
        let norm = self.norms.len() - 1;
        self.push(Layer::BatchNorm { src, norm }, channels)
    }

    fn relu(&mut self, src: usize) -> usize {
        let c = self.channels[src];
        self.push(Layer::Relu { src }, c)
    }

    fn conv_bn_relu(&mut self, src: usize, out: usize, k: usize, name: &str) -> usize {
        let x = self.conv(src, out, k, &format!("{name}.conv"), false);
        let x = self.batch_norm(x, &format!("{name}.bn"));
        self.relu(x)
    }

    fn maxpool(&mut self, src: usize) -> usize {
        let c = self.channels[src];
        self.push(Layer::MaxPool { src }, c)
    }

    /// Channel-preserving transposed convolution, initialized to bilinear
    /// interpolation, scaling the spatial extent by `factor`.
    fn upsample(&mut self, src: usize, factor: usize, name: &str) -> usize {
        let c = self.channels[src];
        let kernel = self.param(format!("{name}.weight"), vec![c, c, 2 * factor, 2 * factor], Init::Bilinear { stride: factor });
        self.push(Layer::ConvTranspose { src, kernel, stride: factor, pad: factor / 2 }, c)
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let c = self.channels[a];
        self.push(Layer::Add { a, b }, c)
    }

    fn scale(&mut self, src: usize, factor: f64) -> usize {
        let c = self.channels[src];
        self.push(Layer::Scale { src, factor }, c)
    }

    fn concat(&mut self, a: usize, b: usize) -> usize {
        let c = self.channels[a] + self.channels[b];
        self.push(Layer::Concat { a, b }, c)
    }

    fn double_conv(&mut self, src: usize, out: usize, name: &str) -> usize {
        let x = self.conv_bn_relu(src, out, 3, &format!("{name}.a"));
        self.conv_bn_relu(x, out, 3, &format!("{name}.b"))
    }

    /// `branch(x) + shortcut(x)`, no activation after the sum. The branch is
    /// conv-BN-ReLU-conv-BN, or 1x1/3x3/1x1 with a quarter-width middle when
    /// `bottleneck`. The shortcut is the identity or a 1x1 projection.
    fn residual_unit(&mut self, src: usize, out: usize, bottleneck: bool, name: &str) -> usize {
        let x = if bottleneck {
            let mid = (out / 4).max(1);
            let x = self.conv_bn_relu(src, mid, 1, &format!("{name}.reduce"));
            self.conv_bn_relu(x, mid, 3, &format!("{name}.mid"))
        } else {
            self.conv_bn_relu(src, out, 3, &format!("{name}.first"))
        };
        let last_k = if bottleneck { 1 } else { 3 };
        let x = self.conv(x, out, last_k, &format!("{name}.last.conv"), false);
        let branch = self.batch_norm(x, &format!("{name}.last.bn"));
        let shortcut = if self.channels[src] == out { src } else { self.conv(src, out, 1, &format!("{name}.proj"), false) };
        self.add(branch, shortcut)
    }

    fn finish(self, spatial_multiple: usize) -> NetworkSpec {
        NetworkSpec {
            in_channels: self.channels[0],
            out_channels: *self.channels.last().expect("input channel entry"),
            layers: self.layers,
            params: self.params,
            norms: self.norms,
            spatial_multiple,
        }
    }
}

/// A standalone residual unit mapping `(N, in_ch, H, W)` to `(N, out_ch, H, W)`.
pub fn build_residual_unit(in_ch: usize, out_ch: usize, bottleneck: bool) -> Result<NetworkSpec> {
    if in_ch == 0 || out_ch == 0 {
        return invalid("residual unit channel counts must be positive");
    }
    let mut b = Builder::new(in_ch);
    b.residual_unit(0, out_ch, bottleneck, "unit");
    Ok(b.finish(1))
}

fn encoder(b: &mut Builder, cfg: &NetConfig) -> Vec<Feature> {
    let width = |s: usize| cfg.base_width << s;
    let mut feats = Vec::new();
    let mut x = 0;
    match cfg.encoder {
        EncoderKind::VggStyle => {
            for s in 0..cfg.depth {
                x = b.double_conv(x, width(s), &format!("enc{s}"));
                x = b.maxpool(x);
                feats.push(Feature { value: x, level: s as u32 + 1 });
            }
        }
        EncoderKind::ResnetStyle => {
            x = b.conv_bn_relu(x, cfg.base_width, 3, "stem");
            for s in 0..cfg.depth {
                x = b.maxpool(x);
                x = b.residual_unit(x, 4 * width(s), true, &format!("enc{s}"));
                feats.push(Feature { value: x, level: s as u32 + 1 });
            }
        }
        EncoderKind::UnetStyle | EncoderKind::ResidualUnet => {
            let residual = cfg.encoder == EncoderKind::ResidualUnet;
            for s in 0..=cfg.depth {
                let name = if s == cfg.depth { "bottom".to_string() } else { format!("enc{s}") };
                x = if residual { b.residual_unit(x, width(s), false, &name) } else { b.double_conv(x, width(s), &name) };
                feats.push(Feature { value: x, level: s as u32 });
                if s < cfg.depth {
                    x = b.maxpool(x);
                }
            }
        }
    }
    feats
}

/// Compiles a network mapping `(N, in_channels, H, W)` to `(N, 5, H, W)` logits.
pub fn build_network(cfg: &NetConfig) -> Result<NetworkSpec> {
    cfg.validate()?;
    let mut b = Builder::new(cfg.in_channels);
    let feats = encoder(&mut b, cfg);
    let classes = cfg.num_classes;
    match cfg.decoder {
        DecoderKind::SkipAdd => {
            if feats.len() < 3 {
                return invalid(format!("skip-add decoder fuses 3 encoder stages; depth {} gives {}", cfg.depth, feats.len()));
            }
            let mut acc = None;
            for (feat, &weight) in feats.iter().rev().take(3).zip(&cfg.branch_weights) {
                let l = feat.level;
                let mut x = b.classifier(feat.value, classes, &format!("score{l}"));
                if l > 0 {
                    x = b.upsample(x, 1 << l, &format!("up{l}"));
                }
                let x = b.scale(x, weight);
                acc = Some(match acc {
                    Some(a) => b.add(a, x),
                    None => x,
                });
            }
        }
        DecoderKind::Concat => {
            let residual = matches!(cfg.encoder, EncoderKind::ResnetStyle | EncoderKind::ResidualUnet);
            let deepest = *feats.last().expect("encoder has stages");
            let (mut x, mut level) = (deepest.value, deepest.level);
            for feat in feats.iter().rev().skip(1) {
                let l = feat.level;
                x = b.upsample(x, 1 << (level - l), &format!("up{l}"));
                x = b.concat(x, feat.value);
                let out = b.channels[feat.value];
                let name = format!("dec{l}");
                x = if residual { b.residual_unit(x, out, false, &name) } else { b.double_conv(x, out, &name) };
                level = l;
            }
            if level > 0 {
                x = b.upsample(x, 1 << level, "up0");
            }
            b.classifier(x, classes, "head");
        }
    }
    Ok(b.finish(1 << cfg.depth))
}
