//! Loss terms and the temporal-ensemble target accumulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// A scalar loss and its gradient with respect to the predictions.
#[derive(Debug, Clone)]
pub struct LossTerm<R> {
    pub value: R,
    pub grad: Tensor<R>,
}

/// Mean of `-ln p[y]` over the labeled rows; 0 (with zero gradient) when
/// the batch has no labeled rows.
pub fn cross_entropy_masked<R: Real>(predictions: &Tensor<R>, labels: &[Option<usize>]) -> Result<LossTerm<R>> {
    if predictions.rank() != 2 {
        return Err(Error::shape(format!(
            "predictions must be (batch, classes), got {:?}",
            predictions.shape()
        )));
    }
    let (batch, classes) = (predictions.shape()[0], predictions.shape()[1]);
    if labels.len() != batch {
        return Err(Error::shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut grad = Tensor::zeros(predictions.shape());
    let labeled = labels.iter().filter(|l| l.is_some()).count();
    if labeled == 0 {
        return Ok(LossTerm {
            value: R::zero(),
            grad,
        });
    }
    let inv = R::lit(1.0 / labeled as f64);
    let floor = R::lit(PROB_FLOOR);
    let mut total = R::zero();
    let mut clamped = 0;
    for (i, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        if y >= classes {
            return Err(Error::data(format!("label {y} outside 0..{classes}")));
        }
        let p = predictions.item(i)[y];
        if p > floor {
            total -= p.ln();
            grad.item_mut(i)[y] = -inv / p;
        } else {
            total -= floor.ln();
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::debug!("cross-entropy clamped {clamped} zero-probability labels");
    }
    Ok(LossTerm {
        value: total * inv,
        grad,
    })
}

/// `(1 / (C * batch)) * sum_i ||z_i - target_i||^2` over every row.
///
/// The gradient is with respect to `z`; the gradient with respect to the
/// target is its negation.
pub fn consistency_mse<R: Real>(z: &Tensor<R>, target: &Tensor<R>) -> Result<LossTerm<R>> {
    if z.shape() != target.shape() || z.rank() != 2 {
        return Err(Error::shape(format!(
            "consistency inputs must share a (batch, classes) shape, got {:?} and {:?}",
            z.shape(),
            target.shape()
        )));
    }
    let n = z.len();
    if n == 0 {
        return Ok(LossTerm {
            value: R::zero(),
            grad: Tensor::zeros(z.shape()),
        });
    }
    let inv = R::lit(1.0 / n as f64);
    let two_inv = R::lit(2.0 / n as f64);
    let mut total = R::zero();
    let grad_data = z
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a - b;
            total += d * d;
            two_inv * d
        })
        .collect();
    Ok(LossTerm {
        value: total * inv,
        grad: Tensor::new(z.shape().to_vec(), grad_data)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub unsupervised: f64,
    pub weighted_total: f64,
    pub w: f64,
}

impl LossBreakdown {
    pub fn new(supervised: f64, unsupervised: f64, w: f64) -> Self {
        LossBreakdown {
            supervised,
            unsupervised,
            weighted_total: supervised + w * unsupervised,
            w,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.supervised.is_finite() && self.unsupervised.is_finite() && self.weighted_total.is_finite()
    }
}

/// Exponential moving average of per-item predictions, `Z <- alpha Z + (1 - alpha) z`,
/// with a per-row update counter for startup-bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState<R> {
    z: Tensor<R>,
    alpha: f64,
    counters: Vec<u64>,
    epoch: u64,
}

impl<R: Real> EnsembleState<R> {
    pub fn new(rows: usize, classes: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if classes == 0 {
            return Err(Error::config("ensemble needs at least one class"));
        }
        Ok(EnsembleState {
            z: Tensor::zeros(&[rows, classes]),
            alpha,
            counters: vec![0; rows],
            epoch: 0,
        })
    }

    pub(crate) fn from_parts(z: Tensor<R>, alpha: f64, counters: Vec<u64>, epoch: u64) -> Result<Self> {
        check_alpha(alpha)?;
        if z.rank() != 2 || z.shape()[0] != counters.len() {
            return Err(Error::shape("ensemble matrix and counters disagree"));
        }
        Ok(EnsembleState {
            z,
            alpha,
            counters,
            epoch,
        })
    }

    pub fn rows(&self) -> usize {
        self.counters.len()
    }

    pub fn classes(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn counter(&self, row: usize) -> u64 {
        self.counters[row]
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn finish_epoch(&mut self) {
        self.epoch += 1;
    }

    /// Raw accumulator `Z` (not bias corrected).
    pub fn raw(&self) -> &Tensor<R> {
        &self.z
    }

    /// Applies the EMA update to the named rows only.
    pub fn update(&mut self, rows: &[usize], z_rows: &Tensor<R>) -> Result<()> {
        let c = self.classes();
        if z_rows.shape() != [rows.len(), c] {
            return Err(Error::shape(format!(
                "expected ({}, {c}) predictions, got {:?}",
                rows.len(),
                z_rows.shape()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.rows()) {
            return Err(Error::config(format!(
                "ensemble row {bad} out of range 0..{}",
                self.rows()
            )));
        }
        let a = R::lit(self.alpha);
        let b = R::lit(1.0 - self.alpha);
        for (k, &row) in rows.iter().enumerate() {
            let src = z_rows.item(k);
            for (dst, &v) in self.z.item_mut(row).iter_mut().zip(src) {
                *dst = a * *dst + b * v;
            }
            self.counters[row] += 1;
        }
        Ok(())
    }

    /// Bias-corrected targets `Z_i / (1 - alpha^t_i)` for the named rows.
    pub fn targets(&self, rows: &[usize]) -> Result<Tensor<R>> {
        let mut out = Tensor::zeros(&[rows.len(), self.classes()]);
        for (k, &row) in rows.iter().enumerate() {
            let target = self.target_row(row)?.ok_or_else(|| {
                Error::config(format!(
                    "ensemble row {row} has no accumulated predictions yet (startup)"
                ))
            })?;
            out.item_mut(k).copy_from_slice(&target);
        }
        Ok(out)
    }

    /// Bias-corrected target for one row, or `None` if it was never updated.
    pub fn target_row(&self, row: usize) -> Result<Option<Vec<R>>> {
        if row >= self.rows() {
            return Err(Error::config(format!(
                "ensemble row {row} out of range 0..{}",
                self.rows()
            )));
        }
        let t = self.counters[row];
        if t == 0 {
            return Ok(None);
        }
        let denom = R::lit(1.0 - self.alpha.powf(t as f64));
        Ok(Some(self.z.item(row).iter().map(|&v| v / denom).collect()))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "ensemble decay alpha {alpha} outside [0, 1)"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::<f64>::filled(&[2, 10], 0.1);
        let l = cross_entropy_masked(&uniform, &[Some(3), Some(9)]).unwrap();
        assert!((l.value - 10f64.ln()).abs() < 1e-12);

        let onehot = t(&[1, 3], &[0., 1., 0.]);
        assert_eq!(cross_entropy_masked(&onehot, &[Some(1)]).unwrap().value, 0.0);

        let none = cross_entropy_masked(&uniform, &[None, None]).unwrap();
        assert_eq!(none.value, 0.0);
        assert!(none.grad.data().iter().all(|&g| g == 0.0));

        let zero = t(&[1, 2], &[1., 0.]);
        let clamped = cross_entropy_masked(&zero, &[Some(1)]).unwrap();
        assert!((clamped.value - (-(PROB_FLOOR.ln()))).abs() < 1e-9);
        assert!(cross_entropy_masked(&zero, &[Some(2)]).is_err());
    }

    #[test]
    fn mse_cases() {
        let z = t(&[1, 2], &[1., 0.]);
        let zt = t(&[1, 2], &[0., 1.]);
        assert_eq!(consistency_mse(&z, &zt).unwrap().value, 1.0);
        assert_eq!(consistency_mse(&z, &z).unwrap().value, 0.0);
        let half = |x: &Tensor<f64>| x.map(|v| 0.5 * v);
        let v = consistency_mse(&half(&z), &half(&zt)).unwrap().value;
        assert_eq!(v, 0.25);
        assert!(consistency_mse(&z, &t(&[2, 1], &[0., 1.])).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let z = t(&[2, 3], &[0.2, 0.3, 0.5, 0.9, 0.05, 0.05]);
        let zt = t(&[2, 3], &[0.1, 0.6, 0.3, 0.4, 0.4, 0.2]);
        let g = consistency_mse(&z, &zt).unwrap().grad;
        for i in 0..z.len() {
            let mut p = z.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = z.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (consistency_mse(&p, &zt).unwrap().value - consistency_mse(&m, &zt).unwrap().value) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-8);
            assert!((g.data()[i] - 2.0 * (z.data()[i] - zt.data()[i]) / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_examples() {
        let mut s = EnsembleState::<f64>::new(8, 2, 0.6).unwrap();
        s.update(&[0], &t(&[1, 2], &[1., 0.])).unwrap();
        assert!((s.raw().item(0)[0] - 0.4).abs() < 1e-15);
        assert_eq!(s.targets(&[0]).unwrap().data(), &[1.0, 0.0]);
        s.update(&[0], &t(&[1, 2], &[0., 1.])).unwrap();
        let raw = s.raw().item(0);
        assert!((raw[0] - 0.24).abs() < 1e-15 && (raw[1] - 0.4).abs() < 1e-15);
        let z = s.targets(&[0]).unwrap();
        assert!((z.data()[0] - 0.375).abs() < 1e-12 && (z.data()[1] - 0.625).abs() < 1e-12);

        let mut nomem = EnsembleState::<f64>::new(1, 2, 0.0).unwrap();
        nomem.update(&[0], &t(&[1, 2], &[0.3, 0.7])).unwrap();
        nomem.update(&[0], &t(&[1, 2], &[0.9, 0.1])).unwrap();
        assert_eq!(nomem.raw().data(), &[0.9, 0.1]);
    }

    #[test]
    fn partial_update_and_errors() {
        let mut s = EnsembleState::<f32>::new(8, 2, 0.6).unwrap();
        s.update(&[5], &Tensor::from_f64(&[1, 2], &[0.25, 0.75]).unwrap()).unwrap();
        let before = s.raw().item(5).to_vec();
        s.update(&[3, 7], &Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap()).unwrap();
        assert_eq!(s.raw().item(5), before.as_slice());
        assert_eq!(s.counters(), &[0, 0, 0, 1, 0, 1, 0, 1]);
        assert!(s.targets(&[0]).is_err());
        assert!(s.update(&[8], &Tensor::zeros(&[1, 2])).is_err());
        assert!(EnsembleState::<f32>::new(1, 2, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn corrected_rows_of_probability_vectors_sum_to_one(
            alpha in 0.0f64..0.99,
            seq in prop::collection::vec(0.0f64..1.0, 1..30),
        ) {
            let mut s = EnsembleState::<f64>::new(1, 2, alpha).unwrap();
            for p in &seq {
                s.update(&[0], &Tensor::from_f64(&[1, 2], &[*p, 1.0 - p]).unwrap()).unwrap();
            }
            let z = s.targets(&[0]).unwrap();
            prop_assert!((z.data()[0] + z.data()[1] - 1.0).abs() < 1e-9);
        }
    }
}
