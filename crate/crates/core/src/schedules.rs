//! Per-epoch scalars: unsupervised weight, learning rate and Adam β₁.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Supervised,
    Pi,
    Temporal,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Supervised => "supervised",
            Algorithm::Pi => "pi",
            Algorithm::Temporal => "temporal",
        }
    }

    /// Default maximum unsupervised weight before the `M/N` scaling.
    pub fn default_w_max(self) -> f64 {
        match self {
            Algorithm::Supervised => 0.0,
            Algorithm::Pi => 100.0,
            Algorithm::Temporal => 30.0,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Algorithm::Supervised),
            "pi" => Ok(Algorithm::Pi),
            "temporal" => Ok(Algorithm::Temporal),
            other => Err(Error::config(format!(
                "unknown algorithm '{other}' (expected supervised, pi or temporal)"
            ))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_epochs: usize,
    pub rampup_epochs: usize,
    pub rampdown_epochs: usize,
    /// `None` picks the per-algorithm default.
    pub w_max: Option<f64>,
    pub lr_max: f64,
    pub beta1_start: f64,
    pub beta1_end: f64,
    pub beta2: f64,
    /// Force `w = 0` on the first epoch of temporal ensembling.
    pub temporal_first_epoch_zero: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_epochs: 300,
            rampup_epochs: 80,
            rampdown_epochs: 50,
            w_max: None,
            lr_max: 0.003,
            beta1_start: 0.9,
            beta1_end: 0.5,
            beta2: 0.999,
            temporal_first_epoch_zero: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::config("schedule.total_epochs must be >= 1"));
        }
        if self.rampup_epochs + self.rampdown_epochs > self.total_epochs {
            return Err(Error::config(format!(
                "schedule.rampup_epochs + schedule.rampdown_epochs ({} + {}) exceeds total_epochs {}",
                self.rampup_epochs, self.rampdown_epochs, self.total_epochs
            )));
        }
        if let Some(w) = self.w_max {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!(
                    "schedule.w_max = {w} must be a finite value >= 0"
                )));
            }
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config(format!(
                "schedule.lr_max = {} must be > 0",
                self.lr_max
            )));
        }
        for (key, v) in [("beta1_start", self.beta1_start), ("beta1_end", self.beta1_end)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("schedule.{key} = {v} outside [0, 1)")));
            }
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config(format!(
                "schedule.beta2 = {} outside (0, 1)",
                self.beta2
            )));
        }
        Ok(())
    }

    pub fn effective_w_max(&self, algo: Algorithm) -> f64 {
        match algo {
            Algorithm::Supervised => 0.0,
            _ => self.w_max.unwrap_or_else(|| algo.default_w_max()),
        }
    }

    /// Whether the ramp-up is short enough to risk a degenerate solution.
    pub fn rampup_too_fast(&self) -> bool {
        (self.rampup_epochs as f64) < 0.1 * self.total_epochs as f64
    }
}

/// Gaussian ramp-up `exp(-5 (1 - T)^2)` with `T = min(epoch / len, 1)`.
/// A zero-length ramp is fully ramped up from the start.
pub fn rampup(epoch: usize, rampup_epochs: usize) -> f64 {
    if rampup_epochs == 0 {
        return 1.0;
    }
    let t = (epoch as f64 / rampup_epochs as f64).min(1.0);
    let d = 1.0 - t;
    (-5.0 * d * d).exp()
}

/// Time-reversed ramp: 1 until the last `rampdown_epochs`, then
/// `exp(-12.5 T^2)` with `T` going from 0 to 1 at `total_epochs`.
pub fn rampdown(epoch: usize, total_epochs: usize, rampdown_epochs: usize) -> f64 {
    if rampdown_epochs == 0 {
        return 1.0;
    }
    let start = total_epochs.saturating_sub(rampdown_epochs);
    if epoch <= start {
        return 1.0;
    }
    let t = ((epoch - start) as f64 / rampdown_epochs as f64).min(1.0);
    (-12.5 * t * t).exp()
}

/// Unsupervised loss weight `w_max * (M / N) * rampup(epoch)`.
pub fn unsup_weight(
    epoch: usize,
    cfg: &ScheduleConfig,
    labeled: usize,
    total: usize,
    algo: Algorithm,
) -> Result<f64> {
    if total == 0 || labeled > total {
        return Err(Error::config(format!(
            "labeled count {labeled} must not exceed total count {total} (and total > 0)"
        )));
    }
    if algo == Algorithm::Temporal && epoch == 0 && cfg.temporal_first_epoch_zero {
        return Ok(0.0);
    }
    let w_max = cfg.effective_w_max(algo);
    Ok(w_max * (labeled as f64 / total as f64) * rampup(epoch, cfg.rampup_epochs))
}

pub fn learning_rate(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    cfg.lr_max
        * rampup(epoch, cfg.rampup_epochs)
        * rampdown(epoch, cfg.total_epochs, cfg.rampdown_epochs)
}

/// β₁ interpolated from `beta1_start` to `beta1_end` through the ramp-down curve.
pub fn adam_beta1(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    let r = rampdown(epoch, cfg.total_epochs, cfg.rampdown_epochs);
    cfg.beta1_end + (cfg.beta1_start - cfg.beta1_end) * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rampup_values() {
        assert_eq!(rampup(80, 80), 1.0);
        assert!((rampup(0, 80) - 0.006_737_946_999_085_467).abs() < 1e-15);
        assert!((rampup(40, 80) - 0.286_504_796_860_190_1).abs() < 1e-15);
        assert_eq!(rampup(7, 0), 1.0);
    }

    #[test]
    fn rampdown_values() {
        assert_eq!(rampdown(250, 300, 50), 1.0);
        assert!((rampdown(300, 300, 50) - 3.726_653_172_078_671e-6).abs() < 1e-18);
        assert!((rampdown(275, 300, 50) - 0.043_936_933_623_407_42).abs() < 1e-15);
    }

    #[test]
    fn weight_examples() {
        let cfg = ScheduleConfig {
            w_max: Some(30.0),
            ..Default::default()
        };
        let w = unsup_weight(100, &cfg, 4000, 50000, Algorithm::Temporal).unwrap();
        assert!((w - 2.4).abs() < 1e-12);
        assert_eq!(unsup_weight(0, &cfg, 4000, 50000, Algorithm::Temporal).unwrap(), 0.0);
        assert!(unsup_weight(0, &cfg, 4000, 50000, Algorithm::Pi).unwrap() > 0.0);
        let zero = ScheduleConfig {
            w_max: Some(0.0),
            ..Default::default()
        };
        for e in 0..300 {
            assert_eq!(unsup_weight(e, &zero, 10, 100, Algorithm::Pi).unwrap(), 0.0);
        }
        assert!(unsup_weight(0, &cfg, 11, 10, Algorithm::Pi).is_err());
    }

    #[test]
    fn lr_and_beta1() {
        let cfg = ScheduleConfig::default();
        assert_eq!(learning_rate(150, &cfg), 0.003);
        assert!((learning_rate(300, &cfg) - 0.003 * 3.726_653_172_078_671e-6).abs() < 1e-20);
        assert_eq!(adam_beta1(150, &cfg), 0.9);
        assert!((adam_beta1(300, &cfg) - (0.5 + 0.4 * 3.726_653_172_078_671e-6)).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(ScheduleConfig::default().validate().is_ok());
        let bad = ScheduleConfig {
            rampup_epochs: 280,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ScheduleConfig {
            beta2: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn ramps_are_monotone_and_bounded(len in 0usize..200, total in 1usize..400, e in 0usize..400) {
            let down_len = len.min(total);
            let u0 = rampup(e, len);
            let u1 = rampup(e + 1, len);
            prop_assert!((0.0..=1.0).contains(&u0));
            prop_assert!(u1 >= u0);
            let d0 = rampdown(e, total, down_len);
            let d1 = rampdown(e + 1, total, down_len);
            prop_assert!((0.0..=1.0).contains(&d0));
            prop_assert!(d1 <= d0);
        }

        #[test]
        fn weight_is_linear(w in 0.0f64..1000.0, m in 1usize..100, extra in 0usize..1000, e in 0usize..300) {
            let cfg = ScheduleConfig { w_max: Some(w), ..Default::default() };
            let cfg2 = ScheduleConfig { w_max: Some(2.0 * w), ..Default::default() };
            let n = m + extra;
            let a = unsup_weight(e, &cfg, m, n, Algorithm::Pi).unwrap();
            let b = unsup_weight(e, &cfg2, m, n, Algorithm::Pi).unwrap();
            prop_assert!((b - 2.0 * a).abs() <= 1e-9 * b.abs().max(1.0));
            let expect = w * m as f64 / n as f64 * rampup(e, cfg.rampup_epochs);
            prop_assert!((a - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }
}
