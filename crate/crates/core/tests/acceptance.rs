//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use selfens::config::RunConfig;
use selfens::consistency::EnsembleState;
use selfens::data::{parse_cifar_binary, LabeledDataset, CIFAR_RECORD};
use selfens::formats::{
    checkpoint_archive, ensemble_from_bytes, ensemble_to_bytes, load_checkpoint, load_ensemble, save_checkpoint,
    save_ensemble, TensorArchive,
};
use selfens::layers::{build_small_network, Preset};
use selfens::nn::{gradient_check, init_from_batch, LossSpec, NetworkParams};
use selfens::optimize::AdamState;
use selfens::rng::{self, Stream};
use selfens::schedules::{adam_beta1, learning_rate, rampdown, rampup, Algorithm, ScheduleConfig};
use selfens::trainers::{corruption_w_max, prepare_data, run_config, TrainSpec, Trainer};
use selfens::{Real, Tensor};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn schedule_exactness() -> Result<String, String> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    ensure(close(rampup(0, 80), (-5.0f64).exp()), || format!("rampup(0) = {}", rampup(0, 80)))?;
    ensure(close(rampup(40, 80), (-1.25f64).exp()), || format!("rampup(40) = {}", rampup(40, 80)))?;
    for e in [80, 81, 150, 300] {
        ensure(rampup(e, 80) == 1.0, || format!("rampup({e}) = {}", rampup(e, 80)))?;
    }
    ensure(close(rampdown(300, 300, 50), (-12.5f64).exp()), || {
        format!("rampdown(300) = {}", rampdown(300, 300, 50))
    })?;
    ensure(close(rampdown(275, 300, 50), (-3.125f64).exp()), || "rampdown(275)".into())?;
    ensure(rampdown(250, 300, 50) == 1.0, || "rampdown(250)".into())?;
    let cfg = ScheduleConfig::default();
    ensure(close(learning_rate(150, &cfg), 0.003), || "lr(150)".into())?;
    ensure(close(adam_beta1(300, &cfg), 0.5 + 0.4 * (-12.5f64).exp()), || "beta1(300)".into())?;
    Ok("rampup/rampdown endpoints within 1e-12".into())
}

fn constant_exactness<R: Real>(tol: f64) -> Result<(), String> {
    let c = [0.3, 0.7];
    for alpha in [0.0, 0.3, 0.6, 0.9] {
        let mut s: EnsembleState<R> = EnsembleState::new(1, 2, alpha).map_err(|e| e.to_string())?;
        let z = Tensor::<R>::from_f64(&[1, 2], &c).unwrap();
        for t in 1..=50 {
            s.update(&[0], &z).map_err(|e| e.to_string())?;
            let got = s.targets(&[0]).map_err(|e| e.to_string())?;
            for (g, want) in got.data().iter().zip(c) {
                ensure((g.as_f64() - want).abs() <= tol, || {
                    format!("alpha {alpha}, t {t}: {} vs {want}", g.as_f64())
                })?;
            }
        }
    }
    Ok(())
}

fn ema_suite() -> Result<String, String> {
    constant_exactness::<f32>(1e-6)?;
    constant_exactness::<f64>(1e-12)?;
    let mut r = rng::stream(42, Stream::Synthetic);
    let mut worst = 0.0f64;
    for alpha in [0.0, 0.3, 0.6, 0.9] {
        let mut s: EnsembleState<f64> = EnsembleState::new(1, 3, alpha).unwrap();
        let mut seq: Vec<[f64; 3]> = Vec::new();
        for t in 1..=50usize {
            let mut z = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
            let sum: f64 = z.iter().sum();
            z.iter_mut().for_each(|v| *v /= sum);
            seq.push(z);
            s.update(&[0], &Tensor::new(vec![1, 3], z.to_vec()).unwrap()).unwrap();
            let got = s.targets(&[0]).unwrap();
            let norm = 1.0 - alpha.powi(t as i32);
            for j in 0..3 {
                let oracle: f64 = seq
                    .iter()
                    .enumerate()
                    .map(|(k, zk)| alpha.powi((t - 1 - k) as i32) * (1.0 - alpha) * zk[j])
                    .sum::<f64>()
                    / norm;
                worst = worst.max((got.data()[j] - oracle).abs());
            }
            let row_sum: f64 = got.data().iter().sum();
            ensure((row_sum - 1.0).abs() < 1e-6, || format!("row sum {row_sum}"))?;
        }
    }
    ensure(worst <= 1e-6, || format!("oracle deviation {worst:e}"))?;
    let mut s: EnsembleState<f32> = EnsembleState::new(10, 2, 0.6).unwrap();
    s.update(&(0..10).collect::<Vec<_>>(), &Tensor::filled(&[10, 2], 0.5)).unwrap();
    let before = s.raw().clone();
    s.update(&[3, 7], &Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    for row in (0..10).filter(|r| *r != 3 && *r != 7) {
        let same = s.raw().item(row).iter().zip(before.item(row)).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && s.counter(row) == 1, || format!("row {row} changed"))?;
    }
    Ok(format!("oracle deviation {worst:.1e}, untouched rows bit-identical"))
}

fn gradient_fidelity() -> Result<String, String> {
    let combined = |batch: usize, classes: usize| {
        let mut r = rng::stream(17, Stream::GradCheck);
        let mut t = Tensor::<f64>::zeros(&[batch, classes]);
        for row in t.data_mut().chunks_mut(classes) {
            row.iter_mut().for_each(|v| *v = r.random::<f64>() + 0.1);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        LossSpec::Combined {
            labels: (0..batch).map(|i| (i % 3 != 2).then_some(i % classes)).collect(),
            targets: t,
            weight: 3.0,
        }
    };
    let random = |shape: &[usize], seed| {
        let mut r = rng::stream(seed, Stream::Synthetic);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    };
    let mlp = build_small_network(Preset::Mlp, &[2], 2).unwrap();
    let p = NetworkParams::init(&mlp, &[2], &mut rng::stream(5, Stream::Init)).unwrap();
    let e_mlp = gradient_check(&p, &mlp, &random(&[6, 2], 6), &combined(6, 2), 1e-5, 300, 7).map_err(|e| e.to_string())?;
    let cnn = build_small_network(Preset::CnnSmall, &[1, 8, 8], 3).unwrap();
    let mut p = NetworkParams::init(&cnn, &[1, 8, 8], &mut rng::stream(8, Stream::Init)).unwrap();
    let x = random(&[4, 1, 8, 8], 9);
    init_from_batch(&mut p, &cnn, &x).map_err(|e| e.to_string())?;
    let e_cnn = gradient_check(&p, &cnn, &x, &combined(4, 3), 1e-5, 300, 10).map_err(|e| e.to_string())?;
    ensure(e_mlp < 1e-4 && e_cnn < 1e-4, || format!("mlp {e_mlp:e}, cnn {e_cnn:e}"))?;
    Ok(format!("max relative error mlp {e_mlp:.1e}, cnn_small {e_cnn:.1e} (300 coordinates each)"))
}

fn moons_config(algorithm: Algorithm, epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.algorithm = algorithm;
    c.seed = 11;
    c.data.labels_per_class = Some(3);
    c.schedule.total_epochs = epochs;
    c.schedule.rampup_epochs = epochs.min(80) * 4 / 5;
    c.schedule.rampdown_epochs = (epochs / 6).min(50);
    c.eval_every_epoch = false;
    c
}

fn trainer_for<'a>(cfg: &RunConfig, data: &'a selfens::trainers::TrainData<f32>) -> Trainer<'a, f32> {
    let spec = TrainSpec::from_config(cfg, data.train.item_shape(), data.train.classes()).unwrap();
    Trainer::new(spec, data).unwrap()
}

fn supervised_reduction() -> Result<String, String> {
    let sup = moons_config(Algorithm::Supervised, 5);
    let mut pi = moons_config(Algorithm::Pi, 5);
    pi.schedule.w_max = Some(0.0);
    let data = prepare_data::<f32>(&sup, sup.seed).map_err(|e| e.to_string())?;
    let mut a = trainer_for(&sup, &data);
    let mut b = trainer_for(&pi, &data);
    for e in 0..5 {
        a.run_epoch().map_err(|e| e.to_string())?;
        b.run_epoch().map_err(|e| e.to_string())?;
        let same = a
            .params()
            .trainable()
            .iter()
            .zip(b.params().trainable())
            .all(|(x, y)| x.value.data().iter().zip(y.value.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        ensure(same, || format!("parameters differ after epoch {e}"))?;
    }
    Ok("parameters bit-identical after each of 5 epochs".into())
}

fn degenerate_consistency() -> Result<String, String> {
    let mut cfg = moons_config(Algorithm::Pi, 3);
    cfg.network.input_noise = 0.0;
    cfg.network.dropout = 0.0;
    cfg.schedule.w_max = Some(100.0);
    let data = prepare_data::<f32>(&cfg, cfg.seed).map_err(|e| e.to_string())?;
    let mut t = trainer_for(&cfg, &data);
    let mut batches = 0;
    for _ in 0..3 {
        let rep = t.run_epoch().map_err(|e| e.to_string())?;
        ensure(rep.batch_unsup.iter().all(|&u| u == 0.0), || {
            format!("non-zero unsupervised loss in epoch {}", rep.record.epoch)
        })?;
        batches += rep.batch_unsup.len();
    }
    Ok(format!("unsupervised loss exactly 0 on all {batches} batches"))
}

fn structural_speedup() -> Result<String, String> {
    let pi = moons_config(Algorithm::Pi, 3);
    let te = moons_config(Algorithm::Temporal, 3);
    let data = prepare_data::<f32>(&pi, pi.seed).map_err(|e| e.to_string())?;
    let mut a = trainer_for(&pi, &data);
    let mut b = trainer_for(&te, &data);
    for _ in 0..3 {
        let ra = a.run_epoch().map_err(|e| e.to_string())?;
        let rb = b.run_epoch().map_err(|e| e.to_string())?;
        ensure(ra.plan == rb.plan, || "epoch plans differ".into())?;
        ensure(ra.record.forward_passes == 2 * rb.record.forward_passes, || {
            format!("pi {} vs temporal {}", ra.record.forward_passes, rb.record.forward_passes)
        })?;
    }
    Ok(format!(
        "per-epoch forward passes: pi {}, temporal {}",
        a.history().records[0].forward_passes,
        b.history().records[0].forward_passes
    ))
}

/// Two-moons protocol shared by the gain and corruption criteria.
fn protocol(algorithm: Algorithm) -> RunConfig {
    let mut c = RunConfig::default();
    c.algorithm = algorithm;
    c.seed = 1;
    c.eval_every_epoch = false;
    c.schedule.w_max = Some(3000.0);
    c.network.hidden = 64;
    c.network.input_noise = 0.1;
    c.network.dropout = 0.0;
    c.data.n = 1000;
    c.data.noise = 0.1;
    c.data.labels_per_class = Some(3);
    c
}

fn final_errors(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<f64>, String> {
    seeds
        .par_iter()
        .map(|&s| {
            let (o, _) = run_config::<f32>(cfg, s).map_err(|e| e.to_string())?;
            o.history.final_test_err().ok_or_else(|| "no test error".to_string())
        })
        .collect()
}

fn paired_wins(base: &[f64], other: &[f64]) -> usize {
    base.iter().zip(other).filter(|(b, o)| o < b).count()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn seeds() -> Vec<u64> {
    (0..10).map(|k| rng::replicate_seed(1, k)).collect()
}

fn semi_supervised_gain() -> Result<String, String> {
    let seeds = seeds();
    let sup = final_errors(&protocol(Algorithm::Supervised), &seeds)?;
    let pi = final_errors(&protocol(Algorithm::Pi), &seeds)?;
    let te = final_errors(&protocol(Algorithm::Temporal), &seeds)?;
    let (wp, wt) = (paired_wins(&sup, &pi), paired_wins(&sup, &te));
    let summary = format!(
        "mean test error supervised {:.3}, pi {:.3}, temporal {:.3}; paired wins pi {wp}/10, temporal {wt}/10",
        mean(&sup),
        mean(&pi),
        mean(&te)
    );
    ensure(wp >= 8 && wt >= 8, || summary.clone())?;
    Ok(summary)
}

fn corruption_tolerance() -> Result<String, String> {
    let seeds = seeds();
    let corrupt = |algorithm| {
        let mut c = protocol(algorithm);
        c.data.n = 5000;
        c.data.labels_per_class = Some(25);
        c.data.corrupt_fraction = 0.5;
        c.schedule.w_max = Some(corruption_w_max(0.5));
        c
    };
    let sup = final_errors(&corrupt(Algorithm::Supervised), &seeds)?;
    let te = final_errors(&corrupt(Algorithm::Temporal), &seeds)?;
    let wins = paired_wins(&sup, &te);
    let summary = format!(
        "50% corruption: mean test error supervised {:.3}, temporal {:.3}; paired wins {wins}/10",
        mean(&sup),
        mean(&te)
    );
    ensure(wins >= 8, || summary.clone())?;
    Ok(summary)
}

fn extra_pool_mechanics() -> Result<String, String> {
    let mut cfg = moons_config(Algorithm::Temporal, 6);
    cfg.data.pool_n = 500;
    cfg.data.pool_cap = Some(200);
    let data = prepare_data::<f32>(&cfg, cfg.seed).map_err(|e| e.to_string())?;
    let n = data.train.len();
    let mut t = trainer_for(&cfg, &data);
    let mut prev: Vec<u64> = vec![0; n + 500];
    for e in 0..6 {
        let rep = t.run_epoch().map_err(|e| e.to_string())?;
        let ens = t.ensemble().unwrap();
        let touched: Vec<usize> = (0..n + 500).filter(|&r| ens.counter(r) != prev[r]).collect();
        ensure(touched.len() == n + 200 && rep.plan.len() == n + 200, || {
            format!("epoch {e}: {} rows touched", touched.len())
        })?;
        for &r in &touched {
            let row = ens.target_row(r).unwrap().unwrap();
            let s: f64 = row.iter().map(|v| *v as f64).sum();
            ensure((s - 1.0).abs() <= 1e-5, || format!("row {r} target sums to {s}"))?;
        }
        prev = ens.counters().to_vec();
    }
    let pool_counts: Vec<u64> = prev[n..].to_vec();
    let (lo, hi) = (pool_counts.iter().min().unwrap(), pool_counts.iter().max().unwrap());
    ensure(lo != hi, || "pool counters never diverged".into())?;
    ensure(prev[..n].iter().all(|&c| c == 6), || "primary rows missed an epoch".into())?;
    Ok(format!("{} rows per epoch, pool counters range {lo}..={hi}", n + 200))
}

fn format_round_trips() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = moons_config(Algorithm::Temporal, 2);
    let (outcome, _) = run_config::<f32>(&cfg, cfg.seed).map_err(|e| e.to_string())?;
    let ck = dir.path().join("model.ckpt");
    save_checkpoint(&ck, &outcome.params, Some(&outcome.adam)).map_err(|e| e.to_string())?;
    let layers = build_small_network(Preset::Mlp, &[2], 2).unwrap();
    let mut params: NetworkParams<f32> =
        NetworkParams::init(&layers, &[2], &mut rng::stream(99, Stream::Init)).unwrap();
    let mut adam = AdamState::new(&params, 0.999).unwrap();
    load_checkpoint(&ck, &mut params, Some(&mut adam)).map_err(|e| e.to_string())?;
    ensure(params == outcome.params && adam == outcome.adam, || "checkpoint changed on reload".into())?;
    let bytes = std::fs::read(&ck).unwrap();
    ensure(checkpoint_archive(&params, Some(&adam)).to_bytes() == bytes, || "checkpoint bytes differ".into())?;
    ensure(TensorArchive::from_bytes(&bytes, "ck").is_ok(), || "archive reparse".into())?;

    let ens = outcome.ensemble.unwrap();
    let zf = dir.path().join("ensemble.z");
    save_ensemble(&zf, &ens).map_err(|e| e.to_string())?;
    let back: EnsembleState<f32> = load_ensemble(&zf).map_err(|e| e.to_string())?;
    ensure(back == ens, || "ensemble changed on reload".into())?;
    let zbytes = std::fs::read(&zf).unwrap();
    ensure(ensemble_to_bytes(&back) == zbytes, || "ensemble bytes differ".into())?;
    ensure(ensemble_from_bytes::<f32>(&zbytes[..zbytes.len() - 1], "z").is_err(), || "truncation accepted".into())?;

    let mut full = RunConfig::default();
    full.algorithm = Algorithm::Temporal;
    full.schedule.w_max = Some(30.0);
    full.data.pool_cap = Some(50);
    full.network.layers = Some(layers);
    let text = full.to_toml().map_err(|e| e.to_string())?;
    ensure(RunConfig::parse(&text).map_err(|e| e.to_string())? == full, || "config round trip".into())?;

    let records = 25;
    let mut fixture = Vec::with_capacity(records * CIFAR_RECORD);
    for i in 0..records {
        fixture.push((i % 10) as u8);
        fixture.extend((0..CIFAR_RECORD - 1).map(|j| ((i * 31 + j) % 256) as u8));
    }
    let ds: LabeledDataset<f32> = parse_cifar_binary(&fixture).map_err(|e| e.to_string())?;
    ensure(ds.len() == fixture.len() / CIFAR_RECORD && ds.classes() == 10, || "record count".into())?;
    ensure(ds.item_shape() == [3, 32, 32], || "item shape".into())?;
    ensure(parse_cifar_binary::<f32>(&fixture[..fixture.len() - 1]).is_err(), || "short file accepted".into())?;
    Ok("checkpoint, ensemble file and config round-trip exactly; cifar fixture parsed".into())
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("1 schedule exactness", schedule_exactness),
        ("2 ensemble bias correction", ema_suite),
        ("3 gradient fidelity", gradient_fidelity),
        ("4 supervised reduction at w_max = 0", supervised_reduction),
        ("5 degenerate consistency is zero", degenerate_consistency),
        ("6 pi evaluates twice as often as temporal", structural_speedup),
        ("7 semi-supervised gain on two moons", semi_supervised_gain),
        ("8 corruption tolerance on two moons", corruption_tolerance),
        ("9 extra unlabeled pool mechanics", extra_pool_mechanics),
        ("10 format round trips", format_round_trips),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
