use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, LayerSpecList};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<R> {
    pub name: String,
    pub value: Tensor<R>,
}

/// Non-trainable running mean of a mean-only batch-norm layer.
///
/// `value` is the raw exponential average started from zero; `updates`
/// counts how many batches went into it so readers can divide out the
/// startup bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMean<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub momentum: f64,
    pub updates: u64,
}

impl<R: Real> RunningMean<R> {
    pub fn push(&mut self, batch_mean: &[R]) {
        let m = R::lit(self.momentum);
        let one_minus = R::lit(1.0 - self.momentum);
        for (r, &b) in self.value.data_mut().iter_mut().zip(batch_mean) {
            *r = m * *r + one_minus * b;
        }
        self.updates += 1;
    }

    /// Startup-bias corrected mean; zero before the first update.
    pub fn corrected(&self) -> Vec<R> {
        if self.updates == 0 {
            return vec![R::zero(); self.value.len()];
        }
        let denom = R::lit(1.0 - self.momentum.powf(self.updates as f64));
        self.value.data().iter().map(|&v| v / denom).collect()
    }
}

/// Parameter indices belonging to one data layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSlot {
    /// Direction `v` under weight normalization, the plain weight otherwise.
    pub weight: usize,
    pub scale: Option<usize>,
    pub bias: usize,
    pub running: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<R> {
    pub(crate) trainable: Vec<ParamTensor<R>>,
    pub(crate) running: Vec<RunningMean<R>>,
    pub(crate) slots: Vec<Option<LayerSlot>>,
}

impl<R: Real> NetworkParams<R> {
    /// Fan-in scaled Gaussian initialization (`std = sqrt(2 / fan_in)`),
    /// unit weight-norm scales, zero biases and zero running means.
    pub fn init(layers: &LayerSpecList, input_shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let shapes = layers.shapes(input_shape)?;
        let mut trainable = Vec::new();
        let mut running = Vec::new();
        let mut slots = Vec::with_capacity(layers.len());
        for (idx, layer) in layers.layers().iter().enumerate() {
            let input = &shapes[idx];
            let (weight_shape, fan_in, fan_out) = match layer {
                LayerSpec::Conv {
                    kernel,
                    out_channels,
                    ..
                } => {
                    let fan_in = input[0] * kernel * kernel;
                    (vec![*out_channels, input[0], *kernel, *kernel], fan_in, *out_channels)
                }
                LayerSpec::Dense { out, .. } => {
                    let fan_in: usize = input.iter().product();
                    (vec![*out, fan_in], fan_in, *out)
                }
                _ => {
                    slots.push(None);
                    continue;
                }
            };
            let norm = layer.norm().unwrap_or_default();
            let prefix = format!("{idx:02}_{}", layer.name());
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = weight_shape.iter().product();
            let data: Vec<R> = (0..n)
                .map(|_| R::lit(std * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let weight = trainable.len();
            trainable.push(ParamTensor {
                name: format!("{prefix}.{}", if norm.weight_norm { "v" } else { "w" }),
                value: Tensor::new(weight_shape, data)?,
            });
            let scale = norm.weight_norm.then(|| {
                trainable.push(ParamTensor {
                    name: format!("{prefix}.g"),
                    value: Tensor::filled(&[fan_out], R::one()),
                });
                trainable.len() - 1
            });
            let bias = trainable.len();
            trainable.push(ParamTensor {
                name: format!("{prefix}.b"),
                value: Tensor::zeros(&[fan_out]),
            });
            let running_idx = norm.mean_only_bn.then(|| {
                running.push(RunningMean {
                    name: format!("{prefix}.bn_mean"),
                    value: Tensor::zeros(&[fan_out]),
                    momentum: norm.bn_momentum,
                    updates: 0,
                });
                running.len() - 1
            });
            slots.push(Some(LayerSlot {
                weight,
                scale,
                bias,
                running: running_idx,
                fan_in,
                fan_out,
            }));
        }
        Ok(NetworkParams {
            trainable,
            running,
            slots,
        })
    }

    pub fn trainable(&self) -> &[ParamTensor<R>] {
        &self.trainable
    }

    pub fn trainable_mut(&mut self) -> &mut [ParamTensor<R>] {
        &mut self.trainable
    }

    pub fn running_means(&self) -> &[RunningMean<R>] {
        &self.running
    }

    pub fn running_means_mut(&mut self) -> &mut [RunningMean<R>] {
        &mut self.running
    }

    pub fn num_scalars(&self) -> usize {
        self.trainable.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.trainable
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub(crate) fn value(&self, idx: usize) -> &Tensor<R> {
        &self.trainable[idx].value
    }

    pub(crate) fn slot(&self, layer: usize) -> Result<LayerSlot> {
        self.slots
            .get(layer)
            .copied()
            .flatten()
            .ok_or_else(|| Error::config(format!("no parameters registered for layer {layer}")))
    }

    /// Confirms these parameters were built for `layers`.
    pub fn check_layers(&self, layers: &LayerSpecList) -> Result<()> {
        if self.slots.len() != layers.len() {
            return Err(Error::config(format!(
                "parameters built for {} layers, network has {}",
                self.slots.len(),
                layers.len()
            )));
        }
        for (i, (slot, layer)) in self.slots.iter().zip(layers.layers()).enumerate() {
            if slot.is_some() != layer.has_params() {
                return Err(Error::config(format!(
                    "layer {i} ({}) does not match the parameter layout",
                    layer.name()
                )));
            }
            if let (Some(s), Some(norm)) = (slot, layer.norm()) {
                if s.scale.is_some() != norm.weight_norm || s.running.is_some() != norm.mean_only_bn {
                    return Err(Error::config(format!(
                        "layer {i} normalization flags do not match the parameter layout"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> NetworkParams<S> {
        NetworkParams {
            trainable: self
                .trainable
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningMean {
                    name: r.name.clone(),
                    value: r.value.cast(),
                    momentum: r.momentum,
                    updates: r.updates,
                })
                .collect(),
            slots: self.slots.clone(),
        }
    }
}

/// One gradient tensor per trainable parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<R>(pub Vec<Tensor<R>>);

impl<R: Real> Gradients<R> {
    pub fn zeros_like(params: &NetworkParams<R>) -> Self {
        Gradients(
            params
                .trainable
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        )
    }

    pub fn check_aligned(&self, params: &NetworkParams<R>) -> Result<()> {
        if self.0.len() != params.trainable.len() {
            return Err(Error::config(format!(
                "{} gradients for {} parameters",
                self.0.len(),
                params.trainable.len()
            )));
        }
        for (g, p) in self.0.iter().zip(&params.trainable) {
            if g.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "gradient shape {:?} does not match parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn accumulate(&mut self, other: &Gradients<R>) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::config("gradient sets of different length"));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(Tensor::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_small_network, Preset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_mean_after_identical_batches() {
        let mut rm = RunningMean::<f64> {
            name: "m".into(),
            value: Tensor::zeros(&[2]),
            momentum: 0.999,
            updates: 0,
        };
        let batch = [0.7, -1.3];
        for _ in 0..25 {
            rm.push(&batch);
        }
        let factor = 1.0 - 0.999f64.powi(25);
        for (v, b) in rm.value.data().iter().zip(batch) {
            assert!((v - b * factor).abs() < 1e-6 * factor);
        }
        for (v, b) in rm.corrected().iter().zip(batch) {
            assert!((v - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_layout_matches_layers() {
        let layers = build_small_network(Preset::CnnSmall, &[1, 8, 8], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = NetworkParams::<f64>::init(&layers, &[1, 8, 8], &mut rng).unwrap();
        p.check_layers(&layers).unwrap();
        assert!(p.running_means().iter().all(|r| r.momentum == 0.999));
        let mlp = build_small_network(Preset::Mlp, &[1, 8, 8], 3).unwrap();
        assert!(p.check_layers(&mlp).is_err());
    }
}
