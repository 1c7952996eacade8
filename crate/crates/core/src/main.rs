use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selfens::augment::Pairing;
use selfens::config::{DataSource, EnsembleSource, Preprocess, RunConfig};
use selfens::formats::{load_checkpoint, load_ensemble, save_checkpoint, save_ensemble};
use selfens::history::{export_curves, summarize_ensemble};
use selfens::layers::Preset;
use selfens::nn::NetworkParams;
use selfens::rng::{self, Stream};
use selfens::schedules::Algorithm;
use selfens::trainers::{corruption_experiment, evaluate, prepare_data, run_config, run_replicates, TrainSpec};
use selfens::{Error, Precision, Real, Result};

/// Self-ensembling semi-supervised training (Pi-model, temporal ensembling).
///
/// Exit codes: 0 success, 2 configuration error, 3 data or file error,
/// 4 numerical divergence.
#[derive(Parser)]
#[command(name = "selfens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its history, checkpoint and ensemble file.
    Train(RunArgs),
    /// Error rate of a checkpoint on the configured test set.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Train several seeds and report mean, standard deviation and per-seed errors.
    Replicate {
        #[command(flatten)]
        run: RunArgs,
        /// Directory for per-seed histories.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Label-corruption sweep: supervised vs temporal ensembling per fraction.
    Corrupt {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5,0.8")]
        fractions: Vec<f64>,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Convert JSONL histories into a CSV of curves.
    ExportCurves {
        #[arg(required = true)]
        histories: Vec<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Summarize an ensemble (Z) file.
    InspectEnsemble {
        path: PathBuf,
        /// Also write the summary as JSON.
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
}

/// Every flag overrides the key of the same name in the config file.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long, value_parser = parse_ensemble_source)]
    ensemble_source: Option<EnsembleSource>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rampup_epochs: Option<usize>,
    #[arg(long)]
    rampdown_epochs: Option<usize>,
    #[arg(long)]
    w_max: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    beta1_start: Option<f64>,
    #[arg(long)]
    beta1_end: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    input_noise: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    translate: Option<usize>,
    #[arg(long)]
    flip: Option<bool>,
    #[arg(long)]
    augment_noise: Option<f64>,
    #[arg(long, value_parser = parse_pairing)]
    pairing: Option<Pairing>,
    #[arg(long, value_parser = parse_source)]
    data_source: Option<DataSource>,
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    test_path: Option<PathBuf>,
    #[arg(long)]
    labels_per_class: Option<usize>,
    #[arg(long)]
    corrupt_fraction: Option<f64>,
    #[arg(long)]
    pool_path: Option<PathBuf>,
    #[arg(long)]
    pool_cap: Option<usize>,
    #[arg(long, value_parser = parse_preprocess)]
    preprocess: Option<Preprocess>,
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    ensemble: Option<PathBuf>,
}

fn from_str_value<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    from_str_value(s)
}

fn parse_ensemble_source(s: &str) -> std::result::Result<EnsembleSource, String> {
    from_str_value(s)
}

fn parse_pairing(s: &str) -> std::result::Result<Pairing, String> {
    from_str_value(s)
}

fn parse_source(s: &str) -> std::result::Result<DataSource, String> {
    from_str_value(s)
}

fn parse_preprocess(s: &str) -> std::result::Result<Preprocess, String> {
    from_str_value(s)
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($dst).+ = v.clone(); })*
            };
        }
        set! {
            algorithm => algorithm,
            seed => seed,
            replicates => replicates,
            batch_size => batch_size,
            alpha => alpha,
            precision => precision,
            ensemble_source => ensemble_source,
            epochs => schedule.total_epochs,
            rampup_epochs => schedule.rampup_epochs,
            rampdown_epochs => schedule.rampdown_epochs,
            lr_max => schedule.lr_max,
            beta1_start => schedule.beta1_start,
            beta1_end => schedule.beta1_end,
            beta2 => schedule.beta2,
            preset => network.preset,
            hidden => network.hidden,
            input_noise => network.input_noise,
            dropout => network.dropout,
            translate => augment.translate,
            flip => augment.flip,
            augment_noise => augment.noise_sigma,
            pairing => augment.pairing,
            data_source => data.source,
            corrupt_fraction => data.corrupt_fraction,
            preprocess => data.preprocess,
        }
        if let Some(v) = self.w_max {
            c.schedule.w_max = Some(v);
        }
        if let Some(v) = self.labels_per_class {
            c.data.labels_per_class = Some(v);
        }
        if let Some(v) = self.pool_cap {
            c.data.pool_cap = Some(v);
        }
        for (flag, dst) in [
            (&self.data_path, &mut c.data.path),
            (&self.test_path, &mut c.data.test_path),
            (&self.pool_path, &mut c.data.pool_path),
            (&self.history, &mut c.output.history),
            (&self.checkpoint, &mut c.output.checkpoint),
            (&self.ensemble, &mut c.output.ensemble),
        ] {
            if flag.is_some() {
                dst.clone_from(flag);
            }
        }
        c.validate()?;
        for w in c.warnings() {
            log::warn!("{w}");
        }
        Ok(c)
    }
}

fn train_cmd<R: Real>(cfg: &RunConfig) -> Result<()> {
    let (outcome, _) = run_config::<R>(cfg, cfg.seed)?;
    if let Some(p) = &cfg.output.history {
        outcome.history.write_jsonl(p)?;
    }
    if let Some(p) = &cfg.output.checkpoint {
        save_checkpoint(p, &outcome.params, Some(&outcome.adam))?;
    }
    if let (Some(p), Some(z)) = (&cfg.output.ensemble, &outcome.ensemble) {
        save_ensemble(p, z)?;
    }
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "{} seed {}: {} epochs, train error {}, test error {}",
        cfg.algorithm,
        cfg.seed,
        outcome.history.records.len(),
        fmt_opt(last.train_err),
        fmt_opt(last.test_err)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn evaluate_cmd<R: Real>(cfg: &RunConfig, model: &Path) -> Result<()> {
    let data = prepare_data::<R>(cfg, cfg.seed)?;
    let spec = TrainSpec::from_config(cfg, data.train.item_shape(), data.train.classes())?;
    let mut params = NetworkParams::<R>::init(&spec.layers, data.train.item_shape(), &mut rng::stream(0, Stream::Init))?;
    load_checkpoint::<R>(model, &mut params, None)?;
    let (name, set) = match &data.test {
        Some(t) => ("test", t),
        None => ("train", &data.train),
    };
    println!("{name} error {:.4}", evaluate(&params, &spec.layers, set)?);
    Ok(())
}

fn replicate_cmd<R: Real>(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<()> {
    let summary = run_replicates::<R>(cfg, cfg.replicates)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, h) in summary.per_seed.iter().zip(&summary.histories) {
            h.write_jsonl(&dir.join(format!("{}_seed{}.jsonl", cfg.algorithm, s.seed)))?;
        }
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn corrupt_cmd<R: Real>(cfg: &RunConfig, fractions: &[f64], out_dir: Option<&Path>) -> Result<()> {
    let runs = corruption_experiment::<R>(cfg, fractions)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    println!("fraction,supervised_test_err,temporal_test_err");
    for r in &runs {
        if let Some(dir) = out_dir {
            r.supervised.write_jsonl(&dir.join(format!("supervised_{}.jsonl", r.fraction)))?;
            r.temporal.write_jsonl(&dir.join(format!("temporal_{}.jsonl", r.fraction)))?;
        }
        println!(
            "{},{},{}",
            r.fraction,
            fmt_opt(r.supervised.final_test_err()),
            fmt_opt(r.temporal.final_test_err())
        );
    }
    Ok(())
}

fn with_precision(cfg: &RunConfig, f32_run: impl FnOnce() -> Result<()>, f64_run: impl FnOnce() -> Result<()>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => f32_run(),
        Precision::F64 => f64_run(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            with_precision(&cfg, || train_cmd::<f32>(&cfg), || train_cmd::<f64>(&cfg))
        }
        Command::Evaluate { run, model } => {
            let cfg = run.resolve()?;
            with_precision(&cfg, || evaluate_cmd::<f32>(&cfg, &model), || evaluate_cmd::<f64>(&cfg, &model))
        }
        Command::Replicate { run, out_dir } => {
            let cfg = run.resolve()?;
            let dir = out_dir.as_deref();
            with_precision(&cfg, || replicate_cmd::<f32>(&cfg, dir), || replicate_cmd::<f64>(&cfg, dir))
        }
        Command::Corrupt { run, fractions, out_dir } => {
            let cfg = run.resolve()?;
            let dir = out_dir.as_deref();
            with_precision(
                &cfg,
                || corrupt_cmd::<f32>(&cfg, &fractions, dir),
                || corrupt_cmd::<f64>(&cfg, &fractions, dir),
            )
        }
        Command::ExportCurves { histories, out } => {
            let export = export_curves(&histories)?;
            for w in &export.warnings {
                log::warn!("{w}");
            }
            match out {
                Some(p) => fs::write(&p, export.csv).map_err(|e| Error::io(p, e)),
                None => {
                    print!("{}", export.csv);
                    Ok(())
                }
            }
        }
        Command::InspectEnsemble { path, json } => {
            let state = load_ensemble::<f64>(&path)?;
            let summary = summarize_ensemble(&state)?;
            println!("{summary}");
            if let Some(p) = json {
                let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
                fs::write(&p, text).map_err(|e| Error::io(p, e))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
