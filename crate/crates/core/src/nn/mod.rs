//! Layer-wise forward evaluation with a reverse-mode activation tape.
//!
//! `forward` is pure in the parameters: it never touches the running means
//! of mean-only batch normalization. The batch means it measured are kept on
//! the tape and folded in by [`NetworkParams::update_running_means`], which
//! lets a trainer decide which evaluations feed the statistics.

mod context;
pub mod gradcheck;
mod ops;
mod params;

use rand_distr::{Distribution, StandardNormal};
use rand::Rng;

pub use context::{MaskPolicy, MaskSet, Mode, StochasticEvalContext};
pub use gradcheck::{gradient_check, LossSpec};
pub use params::{Gradients, NetworkParams, ParamTensor, RunningMean};

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, LayerSpecList, Padding};
use crate::tensor::{Real, Tensor};
use ops::ConvGeom;
use params::LayerSlot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Train,
    Eval,
    /// Data-dependent initialization: batch statistics, no noise or dropout.
    Init,
}

#[derive(Debug, Clone)]
enum LinearKind {
    Conv { geom: ConvGeom },
    Dense { fan_in: usize },
}

#[derive(Debug, Clone)]
struct WeightNormCache<R> {
    v: Vec<R>,
    g: Vec<R>,
    norms: Vec<R>,
}

#[derive(Debug, Clone)]
enum Cache<R> {
    Empty,
    Identity,
    Dropout {
        mask: Vec<R>,
    },
    Data {
        kind: LinearKind,
        input: Tensor<R>,
        weight: Vec<R>,
        wn: Option<WeightNormCache<R>>,
        bn: bool,
        slot: LayerSlot,
        out_channels: usize,
    },
    LeakyRelu {
        input: Tensor<R>,
        slope: R,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    GlobalAvgPool {
        in_shape: Vec<usize>,
    },
    Softmax {
        output: Tensor<R>,
    },
}

/// Everything `backward` needs from a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTape<R> {
    mode: Mode,
    caches: Vec<Cache<R>>,
    masks: MaskSet<R>,
    bn_means: Vec<(usize, Vec<R>)>,
    param_shapes: Vec<Vec<usize>>,
    output_shape: Vec<usize>,
}

impl<R: Real> ActivationTape<R> {
    /// Noise samples and dropout masks drawn during the pass, for replay.
    pub fn masks(&self) -> &MaskSet<R> {
        &self.masks
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Per-channel batch means measured by each mean-only batch-norm layer.
    pub fn batch_means(&self) -> impl Iterator<Item = &[R]> {
        self.bn_means.iter().map(|(_, m)| m.as_slice())
    }
}

impl<R: Real> NetworkParams<R> {
    /// Folds the batch means recorded on a train-mode tape into the running means.
    pub fn update_running_means(&mut self, tape: &ActivationTape<R>) -> Result<()> {
        if tape.mode != Mode::Train {
            return Err(Error::config("running means can only absorb train-mode tapes"));
        }
        for (idx, mean) in &tape.bn_means {
            let rm = self
                .running
                .get_mut(*idx)
                .ok_or_else(|| Error::config("tape does not match these parameters"))?;
            if rm.value.len() != mean.len() {
                return Err(Error::config("tape does not match these parameters"));
            }
            rm.push(mean);
        }
        Ok(())
    }
}

/// Evaluates the network on a batch `(batch, item_shape...)`.
pub fn forward<R: Real>(
    params: &NetworkParams<R>,
    layers: &LayerSpecList,
    input: &Tensor<R>,
    ctx: &mut StochasticEvalContext<R>,
) -> Result<(Tensor<R>, ActivationTape<R>)> {
    params.check_layers(layers)?;
    let shapes = layers.shapes(input.item_shape())?;
    let phase = match ctx.mode {
        Mode::Train => Phase::Train,
        Mode::Eval => Phase::Eval,
    };
    ctx.begin();
    let mut tape = ActivationTape {
        mode: ctx.mode,
        caches: Vec::with_capacity(layers.len()),
        masks: MaskSet::default(),
        bn_means: Vec::new(),
        param_shapes: params
            .trainable
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect(),
        output_shape: Vec::new(),
    };
    let mut x = input.clone();
    for (idx, layer) in layers.layers().iter().enumerate() {
        let (y, cache) = forward_layer(params, idx, layer, x, phase, ctx, &mut tape)?;
        debug_assert_eq!(y.item_shape(), shapes[idx + 1].as_slice());
        if !y.all_finite() {
            return Err(Error::divergence(format!(
                "non-finite activation after layer {idx} ({})",
                layer.name()
            )));
        }
        tape.caches.push(if phase == Phase::Train { cache } else { Cache::Empty });
        x = y;
    }
    if let MaskPolicy::Replayed(set) = &ctx.policy {
        if set.entries.len() != tape.masks.entries.len() {
            return Err(Error::config(
                "replayed mask set has more entries than stochastic layers",
            ));
        }
    }
    tape.output_shape = x.shape().to_vec();
    Ok((x, tape))
}

/// Weight-normalization-aware data-dependent initialization.
///
/// Runs `batch` through the network without noise or dropout and, for every
/// weight-normalized layer, sets the per-unit scale so that its
/// pre-activation has unit variance on the batch. Layers without mean-only
/// batch norm also get a bias that centres the pre-activation.
pub fn init_from_batch<R: Real>(
    params: &mut NetworkParams<R>,
    layers: &LayerSpecList,
    batch: &Tensor<R>,
) -> Result<()> {
    params.check_layers(layers)?;
    layers.shapes(batch.item_shape())?;
    let mut ctx = StochasticEvalContext::eval();
    let mut scratch = ActivationTape {
        mode: Mode::Eval,
        caches: Vec::new(),
        masks: MaskSet::default(),
        bn_means: Vec::new(),
        param_shapes: Vec::new(),
        output_shape: Vec::new(),
    };
    let mut x = batch.clone();
    for (idx, layer) in layers.layers().iter().enumerate() {
        if let Some(norm) = layer.norm() {
            if norm.weight_norm {
                let slot = params.slot(idx)?;
                let scale = slot.scale.expect("weight-normalized layer has a scale");
                params.trainable[scale].value.data_mut().fill(R::one());
                let (pre, channels) = linear_pre(params, &slot, layer, &x, None)?;
                let (mean, var) = channel_moments(&pre, channels);
                for o in 0..channels {
                    let std = (var[o] + R::lit(1e-8)).sqrt();
                    params.trainable[scale].value.data_mut()[o] = R::one() / std;
                    params.trainable[slot.bias].value.data_mut()[o] = if norm.mean_only_bn {
                        R::zero()
                    } else {
                        -mean[o] / std
                    };
                }
            }
        }
        let (y, _) = forward_layer(params, idx, layer, x, Phase::Init, &mut ctx, &mut scratch)?;
        x = y;
    }
    Ok(())
}

fn channel_moments<R: Real>(pre: &Tensor<R>, channels: usize) -> (Vec<R>, Vec<R>) {
    let b = pre.batch_len();
    let per = pre.item_len() / channels;
    let count = R::lit((b * per) as f64);
    let mut mean = vec![R::zero(); channels];
    let mut sq = vec![R::zero(); channels];
    for i in 0..b {
        let item = pre.item(i);
        for o in 0..channels {
            for &v in &item[o * per..(o + 1) * per] {
                mean[o] += v;
                sq[o] += v * v;
            }
        }
    }
    let var = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, &s)| {
            *m /= count;
            (s / count - *m * *m).max(R::zero())
        })
        .collect();
    (mean, var)
}

/// Effective weight of a data layer, plus the weight-norm cache when used.
fn effective_weight<R: Real>(
    params: &NetworkParams<R>,
    slot: &LayerSlot,
) -> (Vec<R>, Option<WeightNormCache<R>>) {
    let v = params.value(slot.weight).data();
    match slot.scale {
        None => (v.to_vec(), None),
        Some(s) => {
            let g = params.value(s).data();
            let fan = slot.fan_in;
            let mut w = Vec::with_capacity(v.len());
            let mut norms = Vec::with_capacity(slot.fan_out);
            for (o, row) in v.chunks(fan).enumerate() {
                let n = row.iter().map(|&a| a * a).sum::<R>().sqrt().max(R::lit(1e-12));
                norms.push(n);
                let f = g[o] / n;
                w.extend(row.iter().map(|&a| a * f));
            }
            (
                w,
                Some(WeightNormCache {
                    v: v.to_vec(),
                    g: g.to_vec(),
                    norms,
                }),
            )
        }
    }
}

fn linear_kind(layer: &LayerSpec, item_shape: &[usize]) -> LinearKind {
    match layer {
        LayerSpec::Conv {
            kernel, padding, ..
        } => {
            let pad = match padding {
                Padding::Same => (kernel - 1) / 2,
                Padding::Valid => 0,
            };
            LinearKind::Conv {
                geom: ConvGeom::new(item_shape, *kernel, pad),
            }
        }
        _ => LinearKind::Dense {
            fan_in: item_shape.iter().product(),
        },
    }
}

/// Linear part of a data layer (no batch norm, no bias).
fn linear_pre<R: Real>(
    params: &NetworkParams<R>,
    slot: &LayerSlot,
    layer: &LayerSpec,
    x: &Tensor<R>,
    weight: Option<&[R]>,
) -> Result<(Tensor<R>, usize)> {
    let owned;
    let w = match weight {
        Some(w) => w,
        None => {
            owned = effective_weight(params, slot).0;
            &owned
        }
    };
    let b = x.batch_len();
    let out = slot.fan_out;
    match linear_kind(layer, x.item_shape()) {
        LinearKind::Conv { geom } => {
            let y = ops::conv_forward(&geom, out, x.data(), w, b);
            Ok((Tensor::new(vec![b, out, geom.out_h, geom.out_w], y)?, out))
        }
        LinearKind::Dense { fan_in } => {
            if fan_in != slot.fan_in {
                return Err(Error::shape(format!(
                    "dense layer expects {} inputs, got {fan_in}",
                    slot.fan_in
                )));
            }
            let y = ops::dense_forward(x.data(), w, b, fan_in, out);
            Ok((Tensor::new(vec![b, out], y)?, out))
        }
    }
}

fn forward_layer<R: Real>(
    params: &NetworkParams<R>,
    idx: usize,
    layer: &LayerSpec,
    x: Tensor<R>,
    phase: Phase,
    ctx: &mut StochasticEvalContext<R>,
    tape: &mut ActivationTape<R>,
) -> Result<(Tensor<R>, Cache<R>)> {
    match layer {
        LayerSpec::GaussianNoise { sigma } => {
            if phase != Phase::Train || *sigma == 0.0 {
                return Ok((x, Cache::Identity));
            }
            let noise = match ctx.next_replayed(x.shape())? {
                Some(n) => n,
                None => {
                    let s = *sigma;
                    let rng = ctx.rng_mut();
                    let data = (0..x.len())
                        .map(|_| R::lit(s * Distribution::<f64>::sample(&StandardNormal, rng)))
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
            };
            let mut y = x;
            y.add_assign(&noise)?;
            tape.masks.entries.push(noise);
            Ok((y, Cache::Identity))
        }
        LayerSpec::Dropout { p } => {
            if phase != Phase::Train || *p == 0.0 {
                return Ok((x, Cache::Identity));
            }
            let mask = match ctx.next_replayed(x.shape())? {
                Some(m) => m,
                None => {
                    let keep = 1.0 - p;
                    let scale = if keep > 0.0 { R::lit(1.0 / keep) } else { R::zero() };
                    let rng = ctx.rng_mut();
                    let data = (0..x.len())
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                scale
                            } else {
                                R::zero()
                            }
                        })
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
            };
            let mut y = x;
            y.data_mut()
                .iter_mut()
                .zip(mask.data())
                .for_each(|(v, &m)| *v *= m);
            let cache = Cache::Dropout {
                mask: mask.data().to_vec(),
            };
            tape.masks.entries.push(mask);
            Ok((y, cache))
        }
        LayerSpec::Conv {
            out_channels, norm, ..
        }
        | LayerSpec::Dense {
            out: out_channels,
            norm,
        } => {
            let slot = params.slot(idx)?;
            let (weight, wn) = effective_weight(params, &slot);
            let (mut y, channels) = linear_pre(params, &slot, layer, &x, Some(&weight))?;
            let per = y.item_len() / channels;
            let b = y.batch_len();
            if norm.mean_only_bn {
                let ridx = slot.running.expect("batch-normalized layer has a running mean");
                let mean = match phase {
                    Phase::Eval => params.running[ridx].corrected(),
                    Phase::Train | Phase::Init => {
                        let (m, _) = channel_moments(&y, channels);
                        if phase == Phase::Train {
                            tape.bn_means.push((ridx, m.clone()));
                        }
                        m
                    }
                };
                for i in 0..b {
                    let item = y.item_mut(i);
                    for o in 0..channels {
                        item[o * per..(o + 1) * per]
                            .iter_mut()
                            .for_each(|v| *v -= mean[o]);
                    }
                }
            }
            let bias = params.value(slot.bias).data();
            for i in 0..b {
                let item = y.item_mut(i);
                for o in 0..channels {
                    item[o * per..(o + 1) * per]
                        .iter_mut()
                        .for_each(|v| *v += bias[o]);
                }
            }
            let cache = Cache::Data {
                kind: linear_kind(layer, x.item_shape()),
                input: x,
                weight,
                wn,
                bn: norm.mean_only_bn,
                slot,
                out_channels: *out_channels,
            };
            Ok((y, cache))
        }
        LayerSpec::LeakyRelu { slope } => {
            let s = R::lit(*slope);
            let y = x.map(|v| if v > R::zero() { v } else { v * s });
            Ok((y, Cache::LeakyRelu { input: x, slope: s }))
        }
        LayerSpec::MaxPool { kernel, stride } => {
            let shape = x.shape().to_vec();
            let (y, argmax, [oh, ow]) = ops::max_pool_forward(x.data(), &shape, *kernel, *stride);
            let y = Tensor::new(vec![shape[0], shape[1], oh, ow], y)?;
            Ok((
                y,
                Cache::MaxPool {
                    argmax,
                    in_shape: shape,
                },
            ))
        }
        LayerSpec::GlobalAvgPool => {
            let shape = x.shape().to_vec();
            let (b, c) = (shape[0], shape[1]);
            let per = shape[2] * shape[3];
            let inv = R::lit(1.0 / per as f64);
            let mut out = Vec::with_capacity(b * c);
            for plane in x.data().chunks(per) {
                out.push(plane.iter().copied().sum::<R>() * inv);
            }
            Ok((
                Tensor::new(vec![b, c], out)?,
                Cache::GlobalAvgPool { in_shape: shape },
            ))
        }
        LayerSpec::Softmax => {
            let mut y = x;
            let c = y.item_len();
            for row in y.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(R::neg_infinity(), R::max);
                let mut sum = R::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            let cache = Cache::Softmax { output: y.clone() };
            Ok((y, cache))
        }
    }
}

/// Reverse pass: gradients of the loss with respect to every trainable
/// parameter, given `loss_grad = dLoss/dOutput`.
pub fn backward<R: Real>(tape: &ActivationTape<R>, loss_grad: &Tensor<R>) -> Result<Gradients<R>> {
    if tape.mode != Mode::Train {
        return Err(Error::config("backward needs a train-mode tape"));
    }
    if loss_grad.shape() != tape.output_shape.as_slice() {
        return Err(Error::config(format!(
            "loss gradient shape {:?} does not match network output {:?}",
            loss_grad.shape(),
            tape.output_shape
        )));
    }
    let mut grads: Vec<Option<Tensor<R>>> = vec![None; tape.param_shapes.len()];
    let mut dy = loss_grad.clone();
    for cache in tape.caches.iter().rev() {
        dy = match cache {
            Cache::Empty => return Err(Error::config("tape has no recorded activations")),
            Cache::Identity => dy,
            Cache::Dropout { mask } => {
                let mut d = dy;
                d.data_mut().iter_mut().zip(mask).for_each(|(g, &m)| *g *= m);
                d
            }
            Cache::LeakyRelu { input, slope } => {
                let mut d = dy;
                d.data_mut()
                    .iter_mut()
                    .zip(input.data())
                    .for_each(|(g, &x)| {
                        if x <= R::zero() {
                            *g *= *slope
                        }
                    });
                d
            }
            Cache::MaxPool { argmax, in_shape } => {
                let mut dx = Tensor::zeros(in_shape);
                let d = dx.data_mut();
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    d[src] += g;
                }
                dx
            }
            Cache::GlobalAvgPool { in_shape } => {
                let per = in_shape[2] * in_shape[3];
                let inv = R::lit(1.0 / per as f64);
                let mut data = Vec::with_capacity(dy.len() * per);
                for &g in dy.data() {
                    data.extend(std::iter::repeat_n(g * inv, per));
                }
                Tensor::new(in_shape.clone(), data)?
            }
            Cache::Softmax { output } => {
                let mut d = dy;
                let c = output.item_len();
                for (g, p) in d.data_mut().chunks_mut(c).zip(output.data().chunks(c)) {
                    let dot: R = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
                    g.iter_mut().zip(p).for_each(|(a, &b)| *a = b * (*a - dot));
                }
                d
            }
            Cache::Data {
                kind,
                input,
                weight,
                wn,
                bn,
                slot,
                out_channels,
            } => {
                let b = dy.batch_len();
                let channels = *out_channels;
                let per = dy.item_len() / channels;
                let mut db = vec![R::zero(); channels];
                for i in 0..b {
                    let item = dy.item(i);
                    for o in 0..channels {
                        db[o] += item[o * per..(o + 1) * per].iter().copied().sum::<R>();
                    }
                }
                let mut dpre = dy;
                if *bn {
                    let inv = R::lit(1.0 / (b * per) as f64);
                    for i in 0..b {
                        let item = dpre.item_mut(i);
                        for o in 0..channels {
                            let m = db[o] * inv;
                            item[o * per..(o + 1) * per]
                                .iter_mut()
                                .for_each(|v| *v -= m);
                        }
                    }
                }
                let (dx, dw) = match kind {
                    LinearKind::Conv { geom } => {
                        ops::conv_backward(geom, channels, input.data(), weight, dpre.data(), b)
                    }
                    LinearKind::Dense { fan_in } => {
                        ops::dense_backward(input.data(), weight, dpre.data(), b, *fan_in, channels)
                    }
                };
                store(&mut grads, tape, slot.bias, db)?;
                match (wn, slot.scale) {
                    (Some(wn), Some(scale_idx)) => {
                        let fan = slot.fan_in;
                        let mut dv = vec![R::zero(); dw.len()];
                        let mut dg = vec![R::zero(); channels];
                        for o in 0..channels {
                            let rows = o * fan..(o + 1) * fan;
                            let n = wn.norms[o];
                            let v = &wn.v[rows.clone()];
                            let dwo = &dw[rows.clone()];
                            let g_dot: R = dwo.iter().zip(v).map(|(&a, &b)| a * b).sum::<R>() / n;
                            dg[o] = g_dot;
                            let f = wn.g[o] / n;
                            let f2 = wn.g[o] * g_dot / (n * n);
                            for ((d, &a), &vv) in dv[rows].iter_mut().zip(dwo).zip(v) {
                                *d = f * a - f2 * vv;
                            }
                        }
                        store(&mut grads, tape, slot.weight, dv)?;
                        store(&mut grads, tape, scale_idx, dg)?;
                    }
                    _ => store(&mut grads, tape, slot.weight, dw)?,
                }
                Tensor::new(input.shape().to_vec(), dx)?
            }
        };
    }
    let grads = grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(&tape.param_shapes[i])))
        .collect();
    Ok(Gradients(grads))
}

fn store<R: Real>(
    grads: &mut [Option<Tensor<R>>],
    tape: &ActivationTape<R>,
    idx: usize,
    data: Vec<R>,
) -> Result<()> {
    let shape = tape
        .param_shapes
        .get(idx)
        .ok_or_else(|| Error::config("tape does not match parameter layout"))?;
    grads[idx] = Some(Tensor::new(shape.clone(), data)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_small_network, LayerSpec, Normalization, Preset};
    use crate::rng::{self, Stream};

    fn dense_only(out: usize) -> LayerSpecList {
        LayerSpecList(vec![LayerSpec::Dense {
            out,
            norm: Normalization::NONE,
        }])
    }

    fn set(params: &mut NetworkParams<f64>, name: &str, values: &[f64]) {
        let p = params
            .trainable_mut()
            .iter_mut()
            .find(|p| p.name == name)
            .unwrap();
        p.value.data_mut().copy_from_slice(values);
    }

    #[test]
    fn identity_dense_layer() {
        let layers = dense_only(3);
        let mut p = NetworkParams::<f64>::init(&layers, &[3], &mut rng::stream(0, Stream::Init)).unwrap();
        set(&mut p, "00_dense.w", &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = Tensor::from_f64(&[1, 3], &[1., 2., 3.]).unwrap();
        let (y, _) = forward(&p, &layers, &x, &mut StochasticEvalContext::eval()).unwrap();
        assert_eq!(y.data(), &[1., 2., 3.]);
    }

    #[test]
    fn softmax_of_equal_logits_and_extremes() {
        let layers = LayerSpecList(vec![LayerSpec::Softmax]);
        let p = NetworkParams::<f64>::init(&layers, &[2], &mut rng::stream(0, Stream::Init)).unwrap();
        let x = Tensor::from_f64(&[3, 2], &[0., 0., 50., -50., -50., 50.]).unwrap();
        let (y, _) = forward(&p, &layers, &x, &mut StochasticEvalContext::eval()).unwrap();
        assert_eq!(&y.data()[..2], &[0.5, 0.5]);
        for row in y.data().chunks(2) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn delta_kernel_convolution_is_identity() {
        let layers = LayerSpecList(vec![LayerSpec::Conv {
            kernel: 3,
            out_channels: 1,
            padding: Padding::Same,
            norm: Normalization::NONE,
        }]);
        let mut p = NetworkParams::<f64>::init(&layers, &[1, 4, 5], &mut rng::stream(0, Stream::Init)).unwrap();
        set(&mut p, "00_conv.w", &[0., 0., 0., 0., 1., 0., 0., 0., 0.]);
        let x = Tensor::from_f64(&[1, 1, 4, 5], &(0..20).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
        let (y, _) = forward(&p, &layers, &x, &mut StochasticEvalContext::eval()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let layers = dense_only(2);
        let p = NetworkParams::<f64>::init(&layers, &[3], &mut rng::stream(1, Stream::Init)).unwrap();
        let x = Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap();
        let mut ctx = StochasticEvalContext::train_seeded(0, Stream::NetworkA);
        let (_, tape) = forward(&p, &layers, &x, &mut ctx).unwrap();
        let g = backward(&tape, &Tensor::filled(&[1, 2], 1.0)).unwrap();
        assert_eq!(g.0[0].data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert_eq!(g.0[1].data(), &[1.0, 1.0]);
    }

    #[test]
    fn all_zero_dropout_blocks_gradients() {
        let layers = LayerSpecList(vec![
            LayerSpec::Dense {
                out: 3,
                norm: Normalization::NONE,
            },
            LayerSpec::Dropout { p: 1.0 },
            LayerSpec::Dense {
                out: 2,
                norm: Normalization::NONE,
            },
        ]);
        let p = NetworkParams::<f64>::init(&layers, &[4], &mut rng::stream(1, Stream::Init)).unwrap();
        let x = Tensor::from_f64(&[2, 4], &[1., 2., 3., 4., -1., 0.5, 0.2, 0.1]).unwrap();
        let mut ctx = StochasticEvalContext::train_seeded(0, Stream::NetworkA);
        let (_, tape) = forward(&p, &layers, &x, &mut ctx).unwrap();
        let g = backward(&tape, &Tensor::filled(&[2, 2], 1.0)).unwrap();
        assert!(g.0[0].data().iter().all(|&v| v == 0.0));
        assert!(g.0[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn leaky_relu_and_global_pool() {
        let layers = LayerSpecList(vec![
            LayerSpec::LeakyRelu { slope: 0.1 },
            LayerSpec::GlobalAvgPool,
        ]);
        let p = NetworkParams::<f64>::init(&layers, &[2, 2, 2], &mut rng::stream(1, Stream::Init)).unwrap();
        let x = Tensor::from_f64(&[1, 2, 2, 2], &[-1., -1., -1., -1., 3., 3., 3., 3.]).unwrap();
        let (y, _) = forward(&p, &layers, &x, &mut StochasticEvalContext::eval()).unwrap();
        assert!((y.data()[0] + 0.1).abs() < 1e-15);
        assert_eq!(y.data()[1], 3.0);
    }

    #[test]
    fn replay_is_bit_identical_and_fresh_masks_differ() {
        let layers = build_small_network(Preset::CnnSmall, &[1, 8, 8], 3).unwrap();
        let p = NetworkParams::<f64>::init(&layers, &[1, 8, 8], &mut rng::stream(3, Stream::Init)).unwrap();
        let x = Tensor::from_f64(&[2, 1, 8, 8], &(0..128).map(|v| (v as f64).sin()).collect::<Vec<_>>()).unwrap();
        let mut ctx = StochasticEvalContext::train_seeded(5, Stream::NetworkA);
        let (y1, tape) = forward(&p, &layers, &x, &mut ctx).unwrap();
        let (y2, _) = forward(&p, &layers, &x, &mut ctx).unwrap();
        assert_ne!(y1.data(), y2.data());
        let mut replay = StochasticEvalContext::replay(tape.masks().clone());
        let (y3, _) = forward(&p, &layers, &x, &mut replay).unwrap();
        assert_eq!(y1.data(), y3.data());
        let (e1, _) = forward(&p, &layers, &x, &mut StochasticEvalContext::eval()).unwrap();
        let (e2, _) = forward(&p, &layers, &x, &mut StochasticEvalContext::eval()).unwrap();
        assert_eq!(e1.data(), e2.data());
    }

    #[test]
    fn dropout_expectation_matches_eval() {
        let layers = LayerSpecList(vec![LayerSpec::Dropout { p: 0.5 }]);
        let p = NetworkParams::<f64>::init(&layers, &[1000], &mut rng::stream(1, Stream::Init)).unwrap();
        let x = Tensor::filled(&[20, 1000], 2.0);
        let mut ctx = StochasticEvalContext::train_seeded(9, Stream::NetworkA);
        let (y, _) = forward(&p, &layers, &x, &mut ctx).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn backward_rejects_eval_tape_and_bad_grad() {
        let layers = dense_only(2);
        let p = NetworkParams::<f64>::init(&layers, &[3], &mut rng::stream(1, Stream::Init)).unwrap();
        let x = Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap();
        let (_, tape) = forward(&p, &layers, &x, &mut StochasticEvalContext::eval()).unwrap();
        assert!(backward(&tape, &Tensor::filled(&[1, 2], 1.0)).is_err());
        let mut ctx = StochasticEvalContext::train_seeded(0, Stream::NetworkA);
        let (_, tape) = forward(&p, &layers, &x, &mut ctx).unwrap();
        assert!(backward(&tape, &Tensor::filled(&[1, 3], 1.0)).is_err());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let layers = dense_only(2);
        let p = NetworkParams::<f64>::init(&layers, &[3], &mut rng::stream(1, Stream::Init)).unwrap();
        let x = Tensor::from_f64(&[1, 4], &[0.5, -1.0, 2.0, 1.0]).unwrap();
        let err = forward(&p, &layers, &x, &mut StochasticEvalContext::eval()).unwrap_err();
        assert!(matches!(err, Error::Shape(_) | Error::Config(_)));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let layers = dense_only(2);
        let mut p = NetworkParams::<f64>::init(&layers, &[1], &mut rng::stream(1, Stream::Init)).unwrap();
        set(&mut p, "00_dense.w", &[f64::MAX, f64::MAX]);
        let x = Tensor::from_f64(&[1, 1], &[10.0]).unwrap();
        let err = forward(&p, &layers, &x, &mut StochasticEvalContext::eval()).unwrap_err();
        assert!(matches!(&err, Error::Divergence(m) if m.contains("layer 0")));
    }

    #[test]
    fn data_init_gives_unit_variance_preactivations() {
        let layers = build_small_network(Preset::CnnSmall, &[1, 8, 8], 3).unwrap();
        let mut p = NetworkParams::<f64>::init(&layers, &[1, 8, 8], &mut rng::stream(3, Stream::Init)).unwrap();
        let x = Tensor::from_f64(&[16, 1, 8, 8], &(0..1024).map(|v| ((v * 37) % 101) as f64 / 50.0).collect::<Vec<_>>()).unwrap();
        init_from_batch(&mut p, &layers, &x).unwrap();
        // first conv: pre-activation variance per channel is 1 after init
        let slot = p.slot(1).unwrap();
        let (pre, c) = linear_pre(&p, &slot, &layers.layers()[1], &x, None).unwrap();
        let (_, var) = channel_moments(&pre, c);
        for v in var {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
