//! Declarative layer descriptions and network builders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Running-mean momentum used by mean-only batch normalization.
pub const BN_MOMENTUM: f64 = 0.999;

/// Negative-side slope of every leaky ReLU in the reference architecture.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that preserves spatial extent (odd kernels only).
    Same,
    Valid,
}

/// Normalization flags carried by the data layers (conv and dense).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Normalization {
    pub weight_norm: bool,
    pub mean_only_bn: bool,
    pub bn_momentum: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::NONE
    }
}

impl Normalization {
    pub const NONE: Normalization = Normalization {
        weight_norm: false,
        mean_only_bn: false,
        bn_momentum: BN_MOMENTUM,
    };

    /// Weight normalization plus mean-only batch normalization.
    pub const WN_BN: Normalization = Normalization {
        weight_norm: true,
        mean_only_bn: true,
        bn_momentum: BN_MOMENTUM,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Additive Gaussian noise, active in train mode only.
    GaussianNoise { sigma: f64 },
    Conv {
        kernel: usize,
        out_channels: usize,
        padding: Padding,
        #[serde(default)]
        norm: Normalization,
    },
    LeakyRelu { slope: f64 },
    MaxPool { kernel: usize, stride: usize },
    /// Inverted dropout: kept units are scaled by `1/(1-p)` at train time.
    Dropout { p: f64 },
    /// Fully connected layer; flattens its input.
    Dense {
        out: usize,
        #[serde(default)]
        norm: Normalization,
    },
    GlobalAvgPool,
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::GaussianNoise { .. } => "gaussian_noise",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn norm(&self) -> Option<Normalization> {
        match self {
            LayerSpec::Conv { norm, .. } | LayerSpec::Dense { norm, .. } => Some(*norm),
            _ => None,
        }
    }

    /// Item shape after this layer, given the item shape before it.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: String| Error::config(format!("{} layer: {why}", self.name()));
        match self {
            LayerSpec::GaussianNoise { sigma } => {
                if !(*sigma >= 0.0) {
                    return Err(bad(format!("sigma {sigma} must be >= 0")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::LeakyRelu { slope } => {
                if !slope.is_finite() {
                    return Err(bad("non-finite slope".into()));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(bad(format!("p {p} outside [0, 1]")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Conv {
                kernel,
                out_channels,
                padding,
                norm,
            } => {
                check_norm(norm).map_err(bad)?;
                let [_, h, w] = rank3(input).ok_or_else(|| {
                    bad(format!("expects a (channels, height, width) input, got {input:?}"))
                })?;
                if *kernel == 0 || *out_channels == 0 {
                    return Err(bad("kernel and out_channels must be positive".into()));
                }
                let pad = match padding {
                    Padding::Same => {
                        if kernel % 2 == 0 {
                            return Err(bad(format!("same padding needs an odd kernel, got {kernel}")));
                        }
                        (kernel - 1) / 2
                    }
                    Padding::Valid => 0,
                };
                if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(bad(format!("kernel {kernel} larger than input {h}x{w}")));
                }
                Ok(vec![
                    *out_channels,
                    h + 2 * pad - kernel + 1,
                    w + 2 * pad - kernel + 1,
                ])
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let [c, h, w] = rank3(input).ok_or_else(|| {
                    bad(format!("expects a (channels, height, width) input, got {input:?}"))
                })?;
                if *kernel == 0 || *stride == 0 {
                    return Err(bad("kernel and stride must be positive".into()));
                }
                if h < *kernel || w < *kernel {
                    return Err(bad(format!("window {kernel} larger than input {h}x{w}")));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Dense { out, norm } => {
                check_norm(norm).map_err(bad)?;
                if *out == 0 {
                    return Err(bad("zero output width".into()));
                }
                Ok(vec![*out])
            }
            LayerSpec::GlobalAvgPool => {
                let [c, _, _] = rank3(input).ok_or_else(|| {
                    bad(format!("expects a (channels, height, width) input, got {input:?}"))
                })?;
                Ok(vec![c])
            }
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(bad(format!("expects a flat input, got {input:?}")));
                }
                Ok(input.to_vec())
            }
        }
    }
}

fn check_norm(norm: &Normalization) -> std::result::Result<(), String> {
    if norm.mean_only_bn && !(norm.bn_momentum > 0.0 && norm.bn_momentum < 1.0) {
        return Err(format!(
            "batch-norm momentum {} outside (0, 1)",
            norm.bn_momentum
        ));
    }
    Ok(())
}

fn rank3(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        [c, h, w] => Some([*c, *h, *w]),
        _ => None,
    }
}

/// Ordered list of layers making up a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct LayerSpecList(pub Vec<LayerSpec>);

impl LayerSpecList {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Item shapes at every layer boundary; entry 0 is the input shape.
    pub fn shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in self.0.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Checks shape chaining and that the network ends in a `classes`-wide softmax.
    pub fn validate(&self, input_shape: &[usize], classes: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::config("empty layer list"));
        }
        let shapes = self.shapes(input_shape)?;
        let out = shapes.last().unwrap();
        if out.as_slice() != [classes] {
            return Err(Error::config(format!(
                "network output shape {out:?} does not match {classes} classes"
            )));
        }
        if !matches!(self.0.last(), Some(LayerSpec::Softmax)) {
            return Err(Error::config("network must end in a softmax layer"));
        }
        Ok(())
    }
}

/// The convolutional classifier used for the image benchmarks.
///
/// Input noise, three blocks of 3×3 convolutions with max pooling and
/// dropout, a 512-wide valid convolution, two 1×1 convolutions, global
/// average pooling and a dense classifier. Every data layer uses weight
/// normalization with mean-only batch normalization.
pub fn build_conv_large_network(input_shape: &[usize], classes: usize) -> Result<LayerSpecList> {
    if input_shape != [3, 32, 32] {
        return Err(Error::config(format!(
            "reference network expects a (3, 32, 32) input, got {input_shape:?}"
        )));
    }
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    let conv = |k, out, padding| LayerSpec::Conv {
        kernel: k,
        out_channels: out,
        padding,
        norm: Normalization::WN_BN,
    };
    let lrelu = || LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };
    let mut layers = vec![LayerSpec::GaussianNoise { sigma: 0.15 }];
    for _ in 0..3 {
        layers.push(conv(3, 128, Padding::Same));
        layers.push(lrelu());
    }
    layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
    layers.push(LayerSpec::Dropout { p: 0.5 });
    for _ in 0..3 {
        layers.push(conv(3, 256, Padding::Same));
        layers.push(lrelu());
    }
    layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
    layers.push(LayerSpec::Dropout { p: 0.5 });
    layers.push(conv(3, 512, Padding::Valid));
    layers.push(lrelu());
    layers.push(conv(1, 256, Padding::Same));
    layers.push(lrelu());
    layers.push(conv(1, 128, Padding::Same));
    layers.push(lrelu());
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Dense {
        out: classes,
        norm: Normalization::WN_BN,
    });
    layers.push(LayerSpec::Softmax);
    let list = LayerSpecList(layers);
    list.validate(input_shape, classes)?;
    Ok(list)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mlp,
    CnnSmall,
    ConvLarge,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Preset::Mlp),
            "cnn_small" => Ok(Preset::CnnSmall),
            "conv_large" => Ok(Preset::ConvLarge),
            other => Err(Error::config(format!(
                "unknown network preset '{other}' (expected mlp, cnn_small or conv_large)"
            ))),
        }
    }
}

/// Knobs for the small presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmallNetOptions {
    pub hidden: usize,
    pub input_noise: f64,
    pub dropout: f64,
}

impl Default for SmallNetOptions {
    fn default() -> Self {
        SmallNetOptions {
            hidden: 64,
            input_noise: 0.15,
            dropout: 0.5,
        }
    }
}

pub fn build_small_network(
    preset: Preset,
    input_shape: &[usize],
    classes: usize,
) -> Result<LayerSpecList> {
    build_network(preset, input_shape, classes, &SmallNetOptions::default())
}

pub fn build_network(
    preset: Preset,
    input_shape: &[usize],
    classes: usize,
    opts: &SmallNetOptions,
) -> Result<LayerSpecList> {
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    let lrelu = || LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };
    let list = match preset {
        Preset::ConvLarge => return build_conv_large_network(input_shape, classes),
        Preset::Mlp => {
            let h = opts.hidden;
            LayerSpecList(vec![
                LayerSpec::GaussianNoise {
                    sigma: opts.input_noise,
                },
                LayerSpec::Dense {
                    out: h,
                    norm: Normalization::NONE,
                },
                lrelu(),
                LayerSpec::Dropout { p: opts.dropout },
                LayerSpec::Dense {
                    out: h,
                    norm: Normalization::NONE,
                },
                lrelu(),
                LayerSpec::Dropout { p: opts.dropout },
                LayerSpec::Dense {
                    out: classes,
                    norm: Normalization::NONE,
                },
                LayerSpec::Softmax,
            ])
        }
        Preset::CnnSmall => {
            let c = opts.hidden.clamp(4, 32);
            let conv = |k, out, padding| LayerSpec::Conv {
                kernel: k,
                out_channels: out,
                padding,
                norm: Normalization::WN_BN,
            };
            LayerSpecList(vec![
                LayerSpec::GaussianNoise {
                    sigma: opts.input_noise,
                },
                conv(3, c, Padding::Same),
                lrelu(),
                conv(3, c, Padding::Same),
                lrelu(),
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Dropout { p: opts.dropout },
                conv(3, 2 * c, Padding::Valid),
                lrelu(),
                conv(1, c, Padding::Same),
                lrelu(),
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    out: classes,
                    norm: Normalization::WN_BN,
                },
                LayerSpec::Softmax,
            ])
        }
    };
    list.validate(input_shape, classes)?;
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_large_network_shapes() {
        let net = build_conv_large_network(&[3, 32, 32], 10).unwrap();
        let shapes = net.shapes(&[3, 32, 32]).unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        // 32 -> pool 16 -> pool 8 -> valid 3x3 gives 6x6 before global pooling
        let before_gap = net
            .layers()
            .iter()
            .position(|l| matches!(l, LayerSpec::GlobalAvgPool))
            .unwrap();
        assert_eq!(shapes[before_gap], vec![128, 6, 6]);
        for l in net.layers() {
            if let Some(n) = l.norm() {
                assert!(n.weight_norm && n.mean_only_bn);
                assert_eq!(n.bn_momentum, 0.999);
            }
            if let LayerSpec::LeakyRelu { slope } = l {
                assert_eq!(*slope, 0.1);
            }
        }
        assert!(net.layers().iter().any(|l| matches!(l, LayerSpec::MaxPool { .. })));
    }

    #[test]
    fn conv_large_network_rejects_other_inputs() {
        assert!(build_conv_large_network(&[1, 28, 28], 10).is_err());
        assert!(build_conv_large_network(&[3, 32, 32], 1).is_err());
    }

    #[test]
    fn cnn_small_has_every_layer_kind() {
        let small = build_small_network(Preset::CnnSmall, &[1, 8, 8], 3).unwrap();
        let large = build_conv_large_network(&[3, 32, 32], 10).unwrap();
        for l in large.layers() {
            assert!(
                small.layers().iter().any(|s| s.name() == l.name()),
                "missing {}",
                l.name()
            );
        }
    }

    #[test]
    fn mlp_contents() {
        let mlp = build_small_network(Preset::Mlp, &[2], 2).unwrap();
        for kind in ["gaussian_noise", "dense", "leaky_relu", "dropout", "softmax"] {
            assert!(mlp.layers().iter().any(|l| l.name() == kind));
        }
    }

    #[test]
    fn validation_catches_bad_chains() {
        let list = LayerSpecList(vec![LayerSpec::GlobalAvgPool, LayerSpec::Softmax]);
        assert!(list.validate(&[2], 2).is_err());
        let list = LayerSpecList(vec![
            LayerSpec::Dense {
                out: 3,
                norm: Normalization::NONE,
            },
            LayerSpec::Softmax,
        ]);
        assert!(list.validate(&[5], 2).is_err());
        assert!(list.validate(&[5], 3).is_ok());
        assert!("resnet".parse::<Preset>().is_err());
    }
}
