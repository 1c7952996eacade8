use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything random a train-mode forward pass drew: additive noise samples
/// and scaled dropout masks, in layer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet<R> {
    pub entries: Vec<Tensor<R>>,
}

#[derive(Debug, Clone)]
pub enum MaskPolicy<R> {
    Fresh,
    Replayed(MaskSet<R>),
}

/// Randomness and mode for one forward evaluation.
#[derive(Debug, Clone)]
pub struct StochasticEvalContext<R> {
    pub mode: Mode,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) policy: MaskPolicy<R>,
    cursor: usize,
}

impl<R: Real> StochasticEvalContext<R> {
    pub fn train(rng: ChaCha8Rng) -> Self {
        StochasticEvalContext {
            mode: Mode::Train,
            rng,
            policy: MaskPolicy::Fresh,
            cursor: 0,
        }
    }

    pub fn train_seeded(seed: u64, stream: Stream) -> Self {
        Self::train(rng::stream(seed, stream))
    }

    /// Train mode that reuses a recorded mask set instead of drawing.
    pub fn replay(masks: MaskSet<R>) -> Self {
        StochasticEvalContext {
            mode: Mode::Train,
            rng: rng::stream(0, Stream::GradCheck),
            policy: MaskPolicy::Replayed(masks),
            cursor: 0,
        }
    }

    pub fn eval() -> Self {
        StochasticEvalContext {
            mode: Mode::Eval,
            rng: rng::stream(0, Stream::GradCheck),
            policy: MaskPolicy::Fresh,
            cursor: 0,
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub(crate) fn begin(&mut self) {
        self.cursor = 0;
    }

    /// Returns the next recorded entry when replaying, `None` when drawing fresh.
    pub(crate) fn next_replayed(&mut self, shape: &[usize]) -> Result<Option<Tensor<R>>> {
        match &self.policy {
            MaskPolicy::Fresh => Ok(None),
            MaskPolicy::Replayed(set) => {
                let entry = set.entries.get(self.cursor).ok_or_else(|| {
                    Error::config("replayed mask set has fewer entries than stochastic layers")
                })?;
                if entry.shape() != shape {
                    return Err(Error::config(format!(
                        "replayed mask shape {:?} does not match activation {shape:?}",
                        entry.shape()
                    )));
                }
                self.cursor += 1;
                Ok(Some(entry.clone()))
            }
        }
    }
}
