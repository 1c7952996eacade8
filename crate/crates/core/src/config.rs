//! Run configuration: TOML file with one section per concern.
//!
//! ```toml
//! algorithm = "temporal"
//! seed = 7
//!
//! [schedule]
//! total_epochs = 300
//! w_max = 30.0
//!
//! [network]
//! preset = "cnn_small"
//!
//! [data]
//! source = "cifar_binary"
//! path = "data/data_batch_1.bin"
//! labels_per_class = 400
//! preprocess = "zca"
//! ```
//!
//! Every key has a default, so an empty file is a complete configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::data::ImageFormat;
use crate::error::{Error, Result};
use crate::layers::{LayerSpecList, Preset, SmallNetOptions};
use crate::schedules::{Algorithm, ScheduleConfig};
use crate::tensor::Precision;

/// Where the ensemble update takes its predictions from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleSource {
    /// The stochastic predictions made while training on each minibatch.
    #[default]
    Training,
    /// A separate deterministic evaluation of the epoch's rows after its
    /// last weight update.
    Sweep,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    #[default]
    None,
    Zca,
    Standardize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    TwoMoons,
    CifarBinary,
    RawTensor,
    Csv,
}

impl DataSource {
    pub fn file_format(self) -> Option<ImageFormat> {
        match self {
            DataSource::TwoMoons => None,
            DataSource::CifarBinary => Some(ImageFormat::CifarBinary),
            DataSource::RawTensor => Some(ImageFormat::RawTensor),
            DataSource::Csv => Some(ImageFormat::Csv),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Two-moons training points.
    pub n: usize,
    /// Two-moons coordinate noise.
    pub noise: f64,
    /// Two-moons test points.
    pub test_n: usize,
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// `None` keeps every label.
    pub labels_per_class: Option<usize>,
    pub corrupt_fraction: f64,
    /// Extra unlabeled inputs, in the same format as `path`.
    pub pool_path: Option<PathBuf>,
    /// Extra unlabeled two-moons points.
    pub pool_n: usize,
    /// Extra-pool items drawn per epoch; `None` uses the whole pool.
    pub pool_cap: Option<usize>,
    pub preprocess: Preprocess,
    pub zca_epsilon: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::TwoMoons,
            n: 1000,
            noise: 0.1,
            test_n: 1000,
            path: None,
            test_path: None,
            labels_per_class: None,
            corrupt_fraction: 0.0,
            pool_path: None,
            pool_n: 0,
            pool_cap: None,
            preprocess: Preprocess::None,
            zca_epsilon: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: Preset,
    pub hidden: usize,
    pub input_noise: f64,
    pub dropout: f64,
    /// Explicit layer list; overrides the preset when present.
    pub layers: Option<LayerSpecList>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let o = SmallNetOptions::default();
        NetworkConfig {
            preset: Preset::Mlp,
            hidden: o.hidden,
            input_noise: o.input_noise,
            dropout: o.dropout,
            layers: None,
        }
    }
}

impl NetworkConfig {
    pub fn options(&self) -> SmallNetOptions {
        SmallNetOptions {
            hidden: self.hidden,
            input_noise: self.input_noise,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub history: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub ensemble: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub replicates: usize,
    pub batch_size: usize,
    /// Ensemble decay for temporal ensembling.
    pub alpha: f64,
    pub precision: Precision,
    pub ensemble_source: EnsembleSource,
    /// Evaluate the training and test error after every epoch.
    pub eval_every_epoch: bool,
    pub schedule: ScheduleConfig,
    pub network: NetworkConfig,
    pub augment: AugmentPolicy,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: Algorithm::Pi,
            seed: 0,
            replicates: 1,
            batch_size: 100,
            alpha: 0.6,
            precision: Precision::F32,
            ensemble_source: EnsembleSource::Training,
            eval_every_epoch: true,
            schedule: ScheduleConfig::default(),
            network: NetworkConfig::default(),
            augment: AugmentPolicy::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha = {} outside [0, 1)", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size = 0 must be >= 1"));
        }
        if self.replicates == 0 {
            return Err(Error::config("replicates = 0 must be >= 1"));
        }
        let n = &self.network;
        if n.hidden == 0 {
            return Err(Error::config("network.hidden = 0 must be >= 1"));
        }
        if !(n.input_noise >= 0.0 && n.input_noise.is_finite()) {
            return Err(Error::config(format!(
                "network.input_noise = {} must be >= 0",
                n.input_noise
            )));
        }
        if !(0.0..1.0).contains(&n.dropout) {
            return Err(Error::config(format!("network.dropout = {} outside [0, 1)", n.dropout)));
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.corrupt_fraction) {
            return Err(Error::config(format!(
                "data.corrupt_fraction = {} outside [0, 1]",
                d.corrupt_fraction
            )));
        }
        if !(d.zca_epsilon >= 0.0 && d.zca_epsilon.is_finite()) {
            return Err(Error::config(format!("data.zca_epsilon = {} must be >= 0", d.zca_epsilon)));
        }
        if d.labels_per_class == Some(0) {
            return Err(Error::config("data.labels_per_class = 0 must be >= 1"));
        }
        match d.source {
            DataSource::TwoMoons => {
                if d.n < 2 {
                    return Err(Error::config(format!("data.n = {} must be >= 2", d.n)));
                }
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    return Err(Error::config(format!("data.noise = {} must be >= 0", d.noise)));
                }
            }
            _ => {
                if d.path.is_none() {
                    return Err(Error::config("data.path is required for file-based sources"));
                }
            }
        }
        Ok(())
    }

    /// Warnings that do not prevent a run.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.schedule.rampup_too_fast() && self.algorithm != Algorithm::Supervised {
            w.push(format!(
                "schedule.rampup_epochs = {} is under 10% of total_epochs = {}; a fast ramp-up tends to collapse the consistency target",
                self.schedule.rampup_epochs, self.schedule.total_epochs
            ));
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.schedule.total_epochs, 300);
        assert_eq!(c.schedule.rampup_epochs, 80);
        assert_eq!(c.schedule.rampdown_epochs, 50);
        assert_eq!(c.schedule.lr_max, 0.003);
        assert_eq!((c.schedule.beta1_start, c.schedule.beta1_end, c.schedule.beta2), (0.9, 0.5, 0.999));
        assert_eq!(c.batch_size, 100);
        assert_eq!(c.alpha, 0.6);
    }

    #[test]
    fn alpha_one_rejected_with_key() {
        let e = RunConfig::parse("alpha = 1.0").unwrap_err();
        assert!(e.to_string().contains("alpha"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[schedule]\nramp = 3").is_err());
        assert!(RunConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.algorithm = Algorithm::Temporal;
        c.schedule.w_max = Some(30.0);
        c.data.labels_per_class = Some(3);
        c.data.pool_cap = Some(200);
        c.network.layers = Some(crate::layers::build_small_network(Preset::Mlp, &[2], 2).unwrap());
        c.output.history = Some("h.jsonl".into());
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn fast_rampup_warns() {
        let c = RunConfig::parse("[schedule]\nrampup_epochs = 5").unwrap();
        assert_eq!(c.warnings().len(), 1);
    }
}
