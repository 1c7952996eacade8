//! Central finite-difference verification of `backward`.

use rand::seq::index;

use super::{backward, forward, NetworkParams, StochasticEvalContext};
use crate::consistency::{consistency_mse, cross_entropy_masked};
use crate::error::{Error, Result};
use crate::layers::LayerSpecList;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Loss used to drive a gradient check.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// Consistency-style mean squared error against fixed targets.
    SquaredError { targets: Tensor<f64> },
    /// Masked cross-entropy; `None` rows are unlabeled.
    CrossEntropy { labels: Vec<Option<usize>> },
    /// Both terms: `cross_entropy + weight * squared_error`.
    Combined {
        labels: Vec<Option<usize>>,
        targets: Tensor<f64>,
        weight: f64,
    },
}

impl LossSpec {
    /// Loss value and gradient with respect to the network output.
    pub fn evaluate(&self, output: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        match self {
            LossSpec::SquaredError { targets } => {
                let t = consistency_mse(output, targets)?;
                Ok((t.value, t.grad))
            }
            LossSpec::CrossEntropy { labels } => {
                let t = cross_entropy_masked(output, labels)?;
                Ok((t.value, t.grad))
            }
            LossSpec::Combined {
                labels,
                targets,
                weight,
            } => {
                let ce = cross_entropy_masked(output, labels)?;
                let mse = consistency_mse(output, targets)?;
                let mut grad = mse.grad;
                grad.scale(*weight);
                grad.add_assign(&ce.grad)?;
                Ok((ce.value + weight * mse.value, grad))
            }
        }
    }
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-8)` between analytic
/// and central-difference gradients over `samples` randomly chosen
/// parameter coordinates (all of them if there are fewer).
///
/// Noise and dropout draws of the reference pass are replayed for every
/// perturbed evaluation.
pub fn gradient_check(
    params: &NetworkParams<f64>,
    layers: &LayerSpecList,
    batch: &Tensor<f64>,
    loss: &LossSpec,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut ctx = StochasticEvalContext::train_seeded(seed, Stream::NetworkA);
    let (output, tape) = forward(params, layers, batch, &mut ctx)?;
    let (_, loss_grad) = loss.evaluate(&output)?;
    let analytic = backward(&tape, &loss_grad)?;
    let masks = tape.masks().clone();

    let coords: Vec<(usize, usize)> = params
        .trainable()
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.value.len()).map(move |i| (p, i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        let mut rng = rng::stream(seed, Stream::GradCheck);
        index::sample(&mut rng, coords.len(), samples).into_vec()
    };

    let mut probe = params.clone();
    let eval_at = |p: &NetworkParams<f64>| -> Result<f64> {
        let mut replay = StochasticEvalContext::replay(masks.clone());
        let (out, _) = forward(p, layers, batch, &mut replay)?;
        Ok(loss.evaluate(&out)?.0)
    };
    let mut worst = 0.0f64;
    for k in chosen {
        let (p, i) = coords[k];
        let orig = probe.trainable[p].value.data()[i];
        probe.trainable[p].value.data_mut()[i] = orig + eps;
        let plus = eval_at(&probe)?;
        probe.trainable[p].value.data_mut()[i] = orig - eps;
        let minus = eval_at(&probe)?;
        probe.trainable[p].value.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.0[p].data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
