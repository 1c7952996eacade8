//! Adam with bias-corrected moments and per-step β₁ / learning rate.

use crate::error::{Error, Result};
use crate::nn::{Gradients, NetworkParams};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub(crate) first: Vec<Tensor<R>>,
    pub(crate) second: Vec<Tensor<R>>,
    pub(crate) step: u64,
    beta2: f64,
    epsilon: f64,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &NetworkParams<R>, beta2: f64) -> Result<Self> {
        check_beta2(beta2)?;
        let zeros = || {
            params
                .trainable()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Ok(AdamState {
            first: zeros(),
            second: zeros(),
            step: 0,
            beta2,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn first_moments(&self) -> &[Tensor<R>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<R>] {
        &self.second
    }

    /// Lower β₂ trades adaptivity for stability during aggressive ramp-ups.
    pub fn set_beta2(&mut self, beta2: f64) -> Result<()> {
        check_beta2(beta2)?;
        self.beta2 = beta2;
        Ok(())
    }

    pub(crate) fn restore(&mut self, first: Vec<Tensor<R>>, second: Vec<Tensor<R>>, step: u64) -> Result<()> {
        let shapes_match = |a: &[Tensor<R>], b: &[Tensor<R>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !shapes_match(&first, &self.first) || !shapes_match(&second, &self.second) {
            return Err(Error::config("optimizer state does not match the parameters"));
        }
        self.first = first;
        self.second = second;
        self.step = step;
        Ok(())
    }

    /// One Adam update:
    /// `m ← β₁m + (1-β₁)g`, `v ← β₂v + (1-β₂)g²`,
    /// `θ ← θ - λ · m̂ / (√v̂ + ε)` with `m̂ = m/(1-β₁ᵗ)`, `v̂ = v/(1-β₂ᵗ)`.
    pub fn step(
        &mut self,
        params: &mut NetworkParams<R>,
        grads: &Gradients<R>,
        learning_rate: f64,
        beta1: f64,
    ) -> Result<()> {
        grads.check_aligned(params)?;
        if self.first.len() != grads.0.len() {
            return Err(Error::config("optimizer state does not match the parameters"));
        }
        if !(learning_rate >= 0.0) {
            return Err(Error::config(format!("learning rate {learning_rate} must be >= 0")));
        }
        if !(0.0..1.0).contains(&beta1) {
            return Err(Error::config(format!("beta1 {beta1} outside [0, 1)")));
        }
        if !grads.all_finite() {
            return Err(Error::divergence(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = R::lit(beta1);
        let b1c = R::lit(1.0 - beta1);
        let b2 = R::lit(self.beta2);
        let b2c = R::lit(1.0 - self.beta2);
        let corr1 = R::lit(1.0 / (1.0 - beta1.powf(t)));
        let corr2 = R::lit(1.0 / (1.0 - self.beta2.powf(t)));
        let lr = R::lit(learning_rate);
        let eps = R::lit(self.epsilon);
        for (((p, g), m), v) in params
            .trainable_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + b1c * gi;
                *vi = b2 * *vi + b2c * gi * gi;
                let m_hat = *mi * corr1;
                let v_hat = *vi * corr2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn check_beta2(beta2: f64) -> Result<()> {
    if !(beta2 > 0.0 && beta2 < 1.0) {
        return Err(Error::config(format!("beta2 {beta2} outside (0, 1)")));
    }
    Ok(())
}
