//! Training loops for supervised, Π-model and temporal-ensembling runs,
//! evaluation, replication over seeds and the label-corruption sweep.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, standardize_per_image, zca_apply, zca_fit, AugmentPolicy};
use crate::config::{DataSource, EnsembleSource, Preprocess, RunConfig};
use crate::consistency::{consistency_mse, cross_entropy_masked, EnsembleState, LossBreakdown};
use crate::data::{generate_two_moons, load_image_set, plan_epoch, EpochPlan, LabeledDataset};
use crate::error::{Error, Result};
use crate::history::{EpochRecord, RunHistory};
use crate::layers::{build_network, LayerSpecList};
use crate::nn::{backward, forward, init_from_batch, NetworkParams, StochasticEvalContext};
use crate::optimize::AdamState;
use crate::rng::{self, Stream};
use crate::schedules::{adam_beta1, learning_rate, unsup_weight, Algorithm, ScheduleConfig};
use crate::tensor::{Real, Tensor};

const EVAL_BATCH: usize = 500;

/// Training set, optional extra unlabeled pool and optional test set.
#[derive(Debug, Clone)]
pub struct TrainData<R> {
    pub train: LabeledDataset<R>,
    /// Inputs only; addressed as rows `N..N+P` of the ensemble.
    pub pool: Option<Tensor<R>>,
    pub test: Option<LabeledDataset<R>>,
}

impl<R: Real> TrainData<R> {
    pub fn new(train: LabeledDataset<R>) -> Self {
        TrainData {
            train,
            pool: None,
            test: None,
        }
    }

    pub fn pool_len(&self) -> usize {
        self.pool.as_ref().map_or(0, Tensor::batch_len)
    }

    /// Rows in the global index space.
    pub fn total_rows(&self) -> usize {
        self.train.len() + self.pool_len()
    }

    fn gather(&self, indices: &[usize]) -> Result<(Tensor<R>, Vec<Option<usize>>)> {
        let n = self.train.len();
        let item_shape = self.train.item_shape().to_vec();
        let item_len: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * item_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i < n {
                data.extend_from_slice(self.train.inputs().item(i));
                labels.push(self.train.labels()[i]);
            } else {
                let pool = self
                    .pool
                    .as_ref()
                    .filter(|p| i - n < p.batch_len())
                    .ok_or_else(|| Error::config(format!("row {i} outside dataset and pool")))?;
                data.extend_from_slice(pool.item(i - n));
                labels.push(None);
            }
        }
        let mut shape = vec![indices.len()];
        shape.extend(item_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub algorithm: Algorithm,
    pub layers: LayerSpecList,
    pub schedule: ScheduleConfig,
    pub augment: AugmentPolicy,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub pool_cap: Option<usize>,
    pub ensemble_source: EnsembleSource,
    pub eval_every_epoch: bool,
}

impl TrainSpec {
    pub fn from_config(cfg: &RunConfig, item_shape: &[usize], classes: usize) -> Result<Self> {
        cfg.validate()?;
        let layers = match &cfg.network.layers {
            Some(l) => {
                l.validate(item_shape, classes)?;
                l.clone()
            }
            None => build_network(cfg.network.preset, item_shape, classes, &cfg.network.options())?,
        };
        Ok(TrainSpec {
            algorithm: cfg.algorithm,
            layers,
            schedule: cfg.schedule.clone(),
            augment: cfg.augment.clone(),
            alpha: cfg.alpha,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            pool_cap: cfg.data.pool_cap,
            ensemble_source: cfg.ensemble_source,
            eval_every_epoch: cfg.eval_every_epoch,
        })
    }
}

/// One finished epoch: its history record, the plan it followed and the
/// unsupervised loss of every minibatch.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub record: EpochRecord,
    pub plan: EpochPlan,
    pub batch_unsup: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<R> {
    pub params: NetworkParams<R>,
    pub adam: AdamState<R>,
    pub history: RunHistory,
    /// Present for temporal ensembling.
    pub ensemble: Option<EnsembleState<R>>,
}

/// Epoch-at-a-time training driver.
pub struct Trainer<'a, R> {
    spec: TrainSpec,
    data: &'a TrainData<R>,
    params: NetworkParams<R>,
    adam: AdamState<R>,
    ensemble: Option<EnsembleState<R>>,
    history: RunHistory,
    shuffle: ChaCha8Rng,
    augment_a: ChaCha8Rng,
    augment_b: ChaCha8Rng,
    net_a: StochasticEvalContext<R>,
    net_b: StochasticEvalContext<R>,
    epoch: usize,
}

impl<'a, R: Real> Trainer<'a, R> {
    pub fn new(spec: TrainSpec, data: &'a TrainData<R>) -> Result<Self> {
        spec.schedule.validate()?;
        spec.augment.validate()?;
        if spec.batch_size == 0 {
            return Err(Error::config("batch_size = 0 must be >= 1"));
        }
        if data.train.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        if data.train.num_labeled() == 0 {
            return Err(Error::data("training set has no labeled items"));
        }
        if let Some(pool) = &data.pool {
            if pool.item_shape() != data.train.item_shape() {
                return Err(Error::data(format!(
                    "pool items have shape {:?}, training items {:?}",
                    pool.item_shape(),
                    data.train.item_shape()
                )));
            }
        }
        let item_shape = data.train.item_shape().to_vec();
        spec.layers.validate(&item_shape, data.train.classes())?;
        let seed = spec.seed;
        let mut params = NetworkParams::init(&spec.layers, &item_shape, &mut rng::stream(seed, Stream::Init))?;
        if spec
            .layers
            .layers()
            .iter()
            .any(|l| l.norm().is_some_and(|n| n.weight_norm))
        {
            let k = spec.batch_size.min(data.train.len());
            let first: Vec<usize> = (0..k).collect();
            init_from_batch(&mut params, &spec.layers, &data.train.inputs().select(&first)?)?;
        }
        let adam = AdamState::new(&params, spec.schedule.beta2)?;
        let ensemble = match spec.algorithm {
            Algorithm::Temporal => Some(EnsembleState::new(
                data.total_rows(),
                data.train.classes(),
                spec.alpha,
            )?),
            _ => None,
        };
        Ok(Trainer {
            history: RunHistory::new(spec.algorithm, seed),
            shuffle: rng::stream(seed, Stream::Shuffle),
            augment_a: rng::stream(seed, Stream::AugmentA),
            augment_b: rng::stream(seed, Stream::AugmentB),
            net_a: StochasticEvalContext::train_seeded(seed, Stream::NetworkA),
            net_b: StochasticEvalContext::train_seeded(seed, Stream::NetworkB),
            spec,
            data,
            params,
            adam,
            ensemble,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.spec.schedule.total_epochs
    }

    pub fn params(&self) -> &NetworkParams<R> {
        &self.params
    }

    pub fn ensemble(&self) -> Option<&EnsembleState<R>> {
        self.ensemble.as_ref()
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn spec(&self) -> &TrainSpec {
        &self.spec
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        if self.is_finished() {
            return Err(Error::config(format!(
                "run already finished its {} epochs",
                self.spec.schedule.total_epochs
            )));
        }
        let started = Instant::now();
        let e = self.epoch;
        let cfg = &self.spec.schedule;
        let n = self.data.train.len();
        let lr = learning_rate(e, cfg);
        let beta1 = adam_beta1(e, cfg);
        let w = unsup_weight(e, cfg, self.data.train.num_labeled(), n, self.spec.algorithm)?;
        let plan = plan_epoch(
            n,
            self.data.pool_len(),
            self.spec.pool_cap,
            self.spec.batch_size,
            &mut self.shuffle,
        )?;
        let mut sup_total = 0.0;
        let mut unsup_total = 0.0;
        let mut batch_unsup = Vec::with_capacity(plan.batches.len());
        let mut forward_passes = 0u64;
        let mut visited: Vec<usize> = Vec::new();
        let mut outputs: Vec<R> = Vec::new();
        for (b, indices) in plan.batches.iter().enumerate() {
            let step = self
                .train_batch(indices, w, lr, beta1, &mut visited, &mut outputs)
                .map_err(|err| with_context(err, e, b))?;
            forward_passes += step.forward_passes;
            sup_total += step.loss.supervised;
            unsup_total += step.loss.unsupervised;
            batch_unsup.push(step.loss.unsupervised);
        }
        if let Some(ens) = self.ensemble.as_mut() {
            let classes = ens.classes();
            let z = match self.spec.ensemble_source {
                EnsembleSource::Training => Tensor::new(vec![visited.len(), classes], outputs)?,
                EnsembleSource::Sweep => {
                    let mut parts = Vec::new();
                    for chunk in visited.chunks(EVAL_BATCH) {
                        let (x, _) = self.data.gather(chunk)?;
                        let (z, _) = forward(&self.params, &self.spec.layers, &x, &mut StochasticEvalContext::eval())?;
                        forward_passes += chunk.len() as u64;
                        parts.push(z);
                    }
                    Tensor::concat(&parts.iter().collect::<Vec<_>>())?
                }
            };
            ens.update(&visited, &z)?;
            ens.finish_epoch();
        }
        let batches = plan.batches.len().max(1) as f64;
        let last = e + 1 == self.spec.schedule.total_epochs;
        let (train_err, test_err) = if self.spec.eval_every_epoch || last {
            let train_err = evaluate(&self.params, &self.spec.layers, &self.data.train).ok();
            let test_err = match &self.data.test {
                Some(t) => Some(evaluate(&self.params, &self.spec.layers, t)?),
                None => None,
            };
            (train_err, test_err)
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch: e,
            lr,
            w,
            beta1,
            sup_loss: sup_total / batches,
            unsup_loss: unsup_total / batches,
            train_err,
            test_err,
            wall_time: started.elapsed().as_secs_f64(),
            forward_passes,
        };
        log::debug!(
            "epoch {e}: sup {:.4} unsup {:.5} w {w:.4} lr {lr:.2e} test_err {:?}",
            record.sup_loss,
            record.unsup_loss,
            record.test_err
        );
        self.history.records.push(record.clone());
        self.epoch += 1;
        Ok(EpochReport {
            record,
            plan,
            batch_unsup,
        })
    }

    fn train_batch(
        &mut self,
        indices: &[usize],
        w: f64,
        lr: f64,
        beta1: f64,
        visited: &mut Vec<usize>,
        outputs: &mut Vec<R>,
    ) -> Result<BatchStep> {
        let (x, labels) = self.data.gather(indices)?;
        let layers = &self.spec.layers;
        let policy = &self.spec.augment;
        let bs = indices.len() as u64;
        let (loss, grads, forward_passes) = match self.spec.algorithm {
            Algorithm::Supervised => {
                let xa = augment::apply(policy, &x, &mut self.augment_a)?;
                let (za, tape_a) = forward(&self.params, layers, &xa, &mut self.net_a)?;
                self.params.update_running_means(&tape_a)?;
                let ce = cross_entropy_masked(&za, &labels)?;
                let loss = LossBreakdown::new(ce.value.as_f64(), 0.0, 0.0);
                (loss, backward(&tape_a, &ce.grad)?, bs)
            }
            Algorithm::Pi => {
                let (xa, xb) = augment::apply_pair(policy, &x, &mut self.augment_a, &mut self.augment_b)?;
                let (za, tape_a) = forward(&self.params, layers, &xa, &mut self.net_a)?;
                let (zb, tape_b) = forward(&self.params, layers, &xb, &mut self.net_b)?;
                self.params.update_running_means(&tape_a)?;
                let ce = cross_entropy_masked(&za, &labels)?;
                let mse = consistency_mse(&za, &zb)?;
                let loss = LossBreakdown::new(ce.value.as_f64(), mse.value.as_f64(), w);
                let mut ga = ce.grad;
                let mut grads = if w != 0.0 {
                    let mut gu = mse.grad;
                    gu.scale(R::lit(w));
                    ga.add_assign(&gu)?;
                    gu.scale(-R::one());
                    Some(backward(&tape_b, &gu)?)
                } else {
                    None
                };
                let mut total = backward(&tape_a, &ga)?;
                if let Some(gb) = grads.take() {
                    total.accumulate(&gb)?;
                }
                (loss, total, 2 * bs)
            }
            Algorithm::Temporal => {
                let xa = augment::apply(policy, &x, &mut self.augment_a)?;
                let (za, tape_a) = forward(&self.params, layers, &xa, &mut self.net_a)?;
                self.params.update_running_means(&tape_a)?;
                let ce = cross_entropy_masked(&za, &labels)?;
                let mut g = ce.grad;
                let unsup = if w != 0.0 {
                    let ens = self.ensemble.as_ref().expect("temporal run owns an ensemble");
                    let mut target = za.clone();
                    for (k, &row) in indices.iter().enumerate() {
                        if let Some(t) = ens.target_row(row)? {
                            target.item_mut(k).copy_from_slice(&t);
                        }
                    }
                    let mse = consistency_mse(&za, &target)?;
                    let mut gu = mse.grad;
                    gu.scale(R::lit(w));
                    g.add_assign(&gu)?;
                    mse.value.as_f64()
                } else {
                    0.0
                };
                if self.spec.ensemble_source == EnsembleSource::Training {
                    visited.extend_from_slice(indices);
                    outputs.extend_from_slice(za.data());
                } else {
                    visited.extend_from_slice(indices);
                }
                let loss = LossBreakdown::new(ce.value.as_f64(), unsup, w);
                (loss, backward(&tape_a, &g)?, bs)
            }
        };
        if !loss.is_finite() {
            return Err(Error::divergence(format!(
                "non-finite loss (supervised {}, unsupervised {})",
                loss.supervised, loss.unsupervised
            )));
        }
        self.adam.step(&mut self.params, &grads, lr, beta1)?;
        Ok(BatchStep { loss, forward_passes })
    }

    pub fn finish(self) -> TrainOutcome<R> {
        TrainOutcome {
            params: self.params,
            adam: self.adam,
            history: self.history,
            ensemble: self.ensemble,
        }
    }
}

struct BatchStep {
    loss: LossBreakdown,
    forward_passes: u64,
}

fn with_context(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Divergence(m) => Error::divergence(format!(
            "epoch {epoch}, batch {batch}: {m}; consider a lower schedule.beta2 (e.g. 0.99) or a slower ramp-up"
        )),
        other => other,
    }
}

/// Trains for `spec.schedule.total_epochs` epochs.
pub fn train<R: Real>(spec: TrainSpec, data: &TrainData<R>) -> Result<TrainOutcome<R>> {
    let mut t = Trainer::new(spec, data)?;
    while !t.is_finished() {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

/// Fraction of labeled items whose argmax prediction is wrong, in eval mode.
pub fn evaluate<R: Real>(params: &NetworkParams<R>, layers: &LayerSpecList, set: &LabeledDataset<R>) -> Result<f64> {
    let labeled = set.labeled_indices();
    if labeled.is_empty() {
        return Err(Error::data("evaluation set has no labeled items"));
    }
    let mut wrong = 0usize;
    for chunk in labeled.chunks(EVAL_BATCH) {
        let x = set.inputs().select(chunk)?;
        let (z, _) = forward(params, layers, &x, &mut StochasticEvalContext::eval())?;
        for (pred, &i) in z.argmax_rows().into_iter().zip(chunk) {
            if Some(pred) != set.labels()[i] {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / labeled.len() as f64)
}

/// Builds training, pool and test data for a recipe. Randomness (synthetic
/// points, label split, corruption) is keyed by `seed`.
pub fn prepare_data<R: Real>(cfg: &RunConfig, seed: u64) -> Result<TrainData<R>> {
    let d = &cfg.data;
    let (train, pool, test) = match d.source {
        DataSource::TwoMoons => {
            let mut r = rng::stream(seed, Stream::Synthetic);
            let train = generate_two_moons::<R>(d.n, d.noise, &mut r)?;
            let pool = if d.pool_n > 0 {
                Some(generate_two_moons::<R>(d.pool_n.max(2), d.noise, &mut r)?.inputs().clone())
            } else {
                None
            };
            let pool = pool.map(|p| p.select(&(0..d.pool_n).collect::<Vec<_>>())).transpose()?;
            let test = if d.test_n > 0 {
                Some(generate_two_moons::<R>(
                    d.test_n.max(2),
                    d.noise,
                    &mut rng::stream(seed, Stream::TestSynthetic),
                )?)
            } else {
                None
            };
            (train, pool, test)
        }
        source => {
            let format = source.file_format().expect("file-based source");
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| Error::config("data.path is required for file-based sources"))?;
            let train = load_image_set::<R>(path, format)?;
            let pool = match &d.pool_path {
                Some(p) => Some(load_image_set::<R>(p, format)?.inputs().clone()),
                None => None,
            };
            let test = match &d.test_path {
                Some(p) => Some(load_image_set::<R>(p, format)?),
                None => None,
            };
            (train, pool, test)
        }
    };
    let mut train = train;
    if let Some(k) = d.labels_per_class {
        train = train.split_semi_supervised(k, seed)?;
    }
    if d.corrupt_fraction > 0.0 {
        train = train.corrupt_labels(d.corrupt_fraction, seed)?;
    }
    let mut data = TrainData { train, pool, test };
    match d.preprocess {
        Preprocess::None => {}
        Preprocess::Zca => {
            let t = zca_fit(data.train.inputs(), d.zca_epsilon)?;
            data.train = data.train.map_inputs(|x| zca_apply(&t, &x))?;
            data.pool = data.pool.map(|x| zca_apply(&t, &x)).transpose()?;
            data.test = data.test.map(|s| s.map_inputs(|x| zca_apply(&t, &x))).transpose()?;
        }
        Preprocess::Standardize => {
            data.train = data.train.map_inputs(|x| standardize_per_image(&x))?;
            data.pool = data.pool.map(|x| standardize_per_image(&x)).transpose()?;
            data.test = data.test.map(|s| s.map_inputs(|x| standardize_per_image(&x))).transpose()?;
        }
    }
    Ok(data)
}

/// Prepares data for `seed` and trains with the configured algorithm.
pub fn run_config<R: Real>(cfg: &RunConfig, seed: u64) -> Result<(TrainOutcome<R>, TrainData<R>)> {
    let data = prepare_data::<R>(cfg, seed)?;
    let mut spec = TrainSpec::from_config(cfg, data.train.item_shape(), data.train.classes())?;
    spec.seed = seed;
    let outcome = train(spec, &data)?;
    Ok((outcome, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub algorithm: Algorithm,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub per_seed: Vec<SeedResult>,
    #[serde(skip)]
    pub histories: Vec<RunHistory>,
}

impl ReplicateSummary {
    fn from_runs(algorithm: Algorithm, runs: Vec<(u64, RunHistory)>) -> Result<Self> {
        let per_seed = runs
            .iter()
            .map(|(seed, h)| {
                h.final_test_err()
                    .map(|test_err| SeedResult { seed: *seed, test_err })
                    .ok_or_else(|| Error::config("replicates need a test set"))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, std) = mean_std(&per_seed.iter().map(|s| s.test_err).collect::<Vec<_>>());
        Ok(ReplicateSummary {
            algorithm,
            mean,
            std,
            per_seed,
            histories: runs.into_iter().map(|(_, h)| h).collect(),
        })
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `n_seeds` independent replicates in parallel; replicate `k` uses
/// seed `replicate_seed(cfg.seed, k)`.
pub fn run_replicates<R: Real>(cfg: &RunConfig, n_seeds: usize) -> Result<ReplicateSummary> {
    if n_seeds == 0 {
        return Err(Error::config("replicates = 0 must be >= 1"));
    }
    let runs = (0..n_seeds)
        .into_par_iter()
        .map(|k| {
            let seed = rng::replicate_seed(cfg.seed, k);
            run_config::<R>(cfg, seed).map(|(o, _)| (seed, o.history))
        })
        .collect::<Result<Vec<_>>>()?;
    ReplicateSummary::from_runs(cfg.algorithm, runs)
}

/// `w_max` used for a corruption fraction: 300 below one half, 3000 from
/// one half up (before the usual `M/N` scaling).
pub fn corruption_w_max(fraction: f64) -> f64 {
    if fraction < 0.5 {
        300.0
    } else {
        3000.0
    }
}

#[derive(Debug, Clone)]
pub struct CorruptionRun {
    pub fraction: f64,
    pub supervised: RunHistory,
    pub temporal: RunHistory,
}

/// For every fraction, corrupts the training labels and trains a
/// supervised and a temporal-ensembling model from the same seed.
pub fn corruption_experiment<R: Real>(cfg: &RunConfig, fractions: &[f64]) -> Result<Vec<CorruptionRun>> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::config(format!("corruption fraction {f} outside [0, 1]")));
    }
    fractions
        .par_iter()
        .map(|&fraction| {
            let mut base = cfg.clone();
            base.data.corrupt_fraction = fraction;
            let mut sup = base.clone();
            sup.algorithm = Algorithm::Supervised;
            let mut temporal = base;
            temporal.algorithm = Algorithm::Temporal;
            temporal.schedule.w_max = Some(corruption_w_max(fraction));
            let (s, _) = run_config::<R>(&sup, cfg.seed)?;
            let (t, _) = run_config::<R>(&temporal, cfg.seed)?;
            Ok(CorruptionRun {
                fraction,
                supervised: s.history,
                temporal: t.history,
            })
        })
        .collect()
}
