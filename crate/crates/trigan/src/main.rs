//! Command-line driver: split preparation, experiment runs, checkpoint
//! sampling, oversample-only augmentation, consolidated reports, and a demo
//! dataset generator.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use trigan::baselines::{oversample_to_balance, BaselineError};
use trigan::config::{ConfigError, ExperimentConfig};
use trigan::data::{self, DataError, Sample};
use trigan::evaluation::MetricsRecord;
use trigan::manifest::{ManifestError, RunManifest, RunRecord};
use trigan::report::{self, ReportError};
use trigan::seeds::{self, tag};
use trigan::synth;
use trigan::training::{self, TrainError};

/// Failures grouped by exit code: 2 validation, 3 data and artifact
/// handling, 4 training.
#[derive(Debug)]
enum CliError {
    Validation(String),
    Data(String),
    Training(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Data(m) | CliError::Training(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::ProfileMismatch => {
                CliError::Validation(e.to_string())
            }
            TrainError::Data(inner) => CliError::Data(inner.to_string()),
            other => CliError::Training(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "trigan",
    version,
    about = "Augment imbalanced image datasets with a three-player GAN or interpolation oversampling, and compare the results"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Carve the imbalanced train/test split and write its manifests
    Prepare(ConfigArgs),
    /// Run the configured method over all repetitions and write a run manifest
    Train(ConfigArgs),
    /// Oversample the prepared training split only; write synthetic images and an augmented dataset
    Baseline(ConfigArgs),
    /// Sample images from a trained generator checkpoint
    Generate(GenerateArgs),
    /// Merge run manifests into plots, a consolidated CSV, and a text summary
    Report(ReportArgs),
    /// Write a procedural garment demo dataset (tee / pullover / dress)
    Synth(SynthArgs),
}

/// Mirrors every experiment configuration field; values given here override
/// the `--config` file.
#[derive(Args, Debug, Default, Clone)]
struct ConfigArgs {
    /// Configuration file (flat `key = value` lines); flags override it
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dataset root containing manifest.tsv
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    img_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    majority_class: Option<usize>,
    /// Comma-separated list, e.g. `1,2`
    #[arg(long)]
    minority_classes: Option<String>,
    #[arg(long)]
    balanced_ratio: Option<f64>,
    #[arg(long)]
    majority_count: Option<usize>,
    /// Absolute minority training count; `none` clears a config-file value
    #[arg(long)]
    minority_count: Option<String>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// baseline | smote | b-smote | adasyn | gan-v1 | gan-v2 | gan-v3
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Base seed; run r uses seed + r
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (joined under TRIGAN_OUTPUT_ROOT when relative)
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    k_neighbors: Option<usize>,
    /// Network size preset: full | desk | tiny
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    p_epochs: Option<usize>,
    #[arg(long)]
    a_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum1: Option<f64>,
    #[arg(long)]
    momentum2: Option<f64>,
    #[arg(long)]
    d_steps_per_g_step: Option<usize>,
    /// Alternating iterations per epoch; `none` restores one full pass
    #[arg(long)]
    iterations_per_epoch: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    fid_samples: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Checkpoint file written during training
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Class label to condition on
    #[arg(long)]
    class: usize,
    /// Number of images to sample
    #[arg(long)]
    count: usize,
    /// Directory for the sampled images
    #[arg(long, value_name = "DIR", default_value = "generated")]
    out: PathBuf,
    /// Noise seed; the same seed reproduces identical images
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report output directory
    #[arg(long, value_name = "DIR", default_value = "report")]
    out: PathBuf,
    /// Run manifest JSON files, at least one
    #[arg(required = true, value_name = "MANIFEST")]
    manifests: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Dataset directory to create
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Images per class
    #[arg(long, default_value_t = 400)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    img_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl ConfigArgs {
    /// Loads the config file (or defaults) and applies flag overrides
    /// through the same key mechanism the file format uses.
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let mut overrides: Vec<(&str, String)> = Vec::new();
        let mut push_opt = |key: &'static str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((key, v));
            }
        };
        push_opt("dataset.path", self.dataset.as_ref().map(|p| p.display().to_string()));
        push_opt("dataset.img_size", self.img_size.map(|v| v.to_string()));
        push_opt("dataset.channels", self.channels.map(|v| v.to_string()));
        push_opt("dataset.classes", self.classes.map(|v| v.to_string()));
        push_opt("split.majority_class", self.majority_class.map(|v| v.to_string()));
        push_opt("split.minority_classes", self.minority_classes.clone());
        push_opt("split.balanced_ratio", self.balanced_ratio.map(|v| v.to_string()));
        push_opt("split.majority_count", self.majority_count.map(|v| v.to_string()));
        push_opt("split.minority_count", self.minority_count.clone());
        push_opt("split.seed", self.split_seed.map(|v| v.to_string()));
        push_opt("run.method", self.method.clone());
        push_opt("run.repetitions", self.repetitions.map(|v| v.to_string()));
        push_opt("run.seed", self.seed.map(|v| v.to_string()));
        push_opt("run.output_dir", self.output_dir.as_ref().map(|p| p.display().to_string()));
        push_opt("run.k_neighbors", self.k_neighbors.map(|v| v.to_string()));
        push_opt("model.profile", self.profile.clone());
        push_opt("train.p_epochs", self.p_epochs.map(|v| v.to_string()));
        push_opt("train.a_epochs", self.a_epochs.map(|v| v.to_string()));
        push_opt("train.batch_size", self.batch_size.map(|v| v.to_string()));
        push_opt("train.lambda", self.lambda.map(|v| v.to_string()));
        push_opt("train.learning_rate", self.learning_rate.map(|v| v.to_string()));
        push_opt("train.momentum1", self.momentum1.map(|v| v.to_string()));
        push_opt("train.momentum2", self.momentum2.map(|v| v.to_string()));
        push_opt(
            "train.d_steps_per_g_step",
            self.d_steps_per_g_step.map(|v| v.to_string()),
        );
        push_opt("train.iterations_per_epoch", self.iterations_per_epoch.clone());
        push_opt("train.eval_every", self.eval_every.map(|v| v.to_string()));
        push_opt("train.fid_samples", self.fid_samples.map(|v| v.to_string()));
        for (key, value) in overrides {
            cfg.apply(key, &value)?;
        }
        if let Ok(root) = std::env::var("TRIGAN_OUTPUT_ROOT") {
            if !root.is_empty() && cfg.output_dir.is_relative() {
                cfg.output_dir = PathBuf::from(root).join(&cfg.output_dir);
            }
        }
        Ok(cfg)
    }
}

fn split_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("split")
}

/// Loads the train and test splits a `prepare` run left behind.
fn load_split(cfg: &ExperimentConfig) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let dir = split_dir(cfg);
    let train_manifest = dir.join("train.tsv");
    if !train_manifest.is_file() {
        return Err(CliError::Data(format!(
            "no prepared split at {}; run `trigan prepare` first",
            dir.display()
        )));
    }
    let train =
        data::load_manifest_file(&cfg.dataset_path, &train_manifest, cfg.img_size, cfg.channels)?;
    let test = data::load_manifest_file(
        &cfg.dataset_path,
        &dir.join("test.tsv"),
        cfg.img_size,
        cfg.channels,
    )?;
    Ok((train, test))
}

fn cmd_prepare(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    cfg.validate()?;
    let dataset = data::load_dataset(&cfg.dataset_path, cfg.img_size, cfg.channels)?;
    let spec = cfg.imbalance_spec();
    let (train, test) = data::build_imbalanced_split(&dataset, &spec)?;
    let dir = split_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    data::write_manifest(&dir.join("train.tsv"), &train)?;
    data::write_manifest(&dir.join("test.tsv"), &test)?;
    let summary = data::split_summary(&train, &test, &spec);
    std::fs::write(dir.join("summary.txt"), &summary)?;
    cfg.save(&cfg.output_dir.join("config.conf"))?;
    println!("{summary}");
    println!("split written to {}", dir.display());
    Ok(())
}

fn mean_class_fid(metrics: &MetricsRecord) -> Option<f64> {
    let dists: Vec<f64> = metrics.per_class.iter().filter_map(|c| c.fid).collect();
    if dists.is_empty() {
        None
    } else {
        Some(dists.iter().sum::<f64>() / dists.len() as f64)
    }
}

fn cmd_train(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    cfg.validate()?;
    let (train_set, test_set) = load_split(&cfg)?;
    let spec = cfg.imbalance_spec();
    cfg.save(&cfg.output_dir.join("config.conf"))?;

    let mut records = Vec::new();
    let mut per_run: Vec<(u64, MetricsRecord, f64)> = Vec::new();
    for r in 0..cfg.repetitions {
        let mut tc = cfg.train_config(r)?;
        let run_name = format!("{}-seed{}", cfg.method, tc.seed);
        let run_dir = cfg.output_dir.join("runs").join(&run_name);
        std::fs::create_dir_all(&run_dir)?;
        tc.output_dir = Some(run_dir.clone());

        let mut snapshot = cfg.clone();
        snapshot.seed = tc.seed;
        snapshot.repetitions = 1;
        snapshot.save(&run_dir.join("config.conf"))?;

        let train_data: Vec<Sample> = match cfg.method.sampling() {
            Some(method) => {
                log::info!("run {run_name}: oversampling with {}", method.name());
                oversample_to_balance(&train_set, method, cfg.k_neighbors, tc.seed)?
            }
            None => train_set.clone(),
        };

        log::info!("run {run_name}: training starts");
        let started = Instant::now();
        let (_, metrics) = training::train(&train_data, &test_set, &spec, &tc)?;
        let duration = started.elapsed().as_secs_f64();
        println!(
            "run {run_name}: macro precision {:.4}, macro recall {:.4}, macro f {:.4} ({duration:.1}s)",
            metrics.macro_precision, metrics.macro_recall, metrics.macro_f
        );

        let rel = PathBuf::from("runs").join(&run_name);
        records.push(RunRecord {
            seed: tc.seed,
            metrics_csv: rel.join("metrics.csv"),
            training_log_csv: rel.join("training_log.csv"),
            checkpoint: Some(rel.join("checkpoints").join("final.ckpt")),
            duration_secs: duration,
        });
        per_run.push((tc.seed, metrics, duration));
    }

    let aggregate_path = cfg.output_dir.join(format!("aggregate-{}.csv", cfg.method));
    let mut agg = String::from("label,seed,macro_precision,macro_recall,macro_f,mean_fid\n");
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (seed, metrics, _) in &per_run {
        let _ = writeln!(
            agg,
            "{},{},{},{},{},{}",
            cfg.method,
            seed,
            metrics.macro_precision,
            metrics.macro_recall,
            metrics.macro_f,
            fmt_opt(mean_class_fid(metrics)),
        );
    }
    let n = per_run.len() as f64;
    let mean_of = |f: &dyn Fn(&MetricsRecord) -> f64| {
        per_run.iter().map(|(_, m, _)| f(m)).sum::<f64>() / n
    };
    let mean_p = mean_of(&|m| m.macro_precision);
    let mean_r = mean_of(&|m| m.macro_recall);
    let mean_f = mean_of(&|m| m.macro_f);
    let fids: Vec<f64> = per_run.iter().filter_map(|(_, m, _)| mean_class_fid(m)).collect();
    let mean_fid = if fids.is_empty() {
        None
    } else {
        Some(fids.iter().sum::<f64>() / fids.len() as f64)
    };
    let _ = writeln!(
        agg,
        "{},mean,{},{},{},{}",
        cfg.method,
        mean_p,
        mean_r,
        mean_f,
        fmt_opt(mean_fid)
    );
    std::fs::write(&aggregate_path, agg)?;

    let manifest = RunManifest {
        config: cfg.serialize(),
        method: cfg.method.name().to_string(),
        balanced_ratio: cfg.balanced_ratio,
        seeds: per_run.iter().map(|(s, _, _)| *s).collect(),
        runs: records,
    };
    let manifest_path = cfg.output_dir.join(format!("manifest-{}.json", cfg.method));
    manifest.save(&manifest_path)?;

    println!(
        "{} over {} runs: mean macro precision {mean_p:.4}, mean macro recall {mean_r:.4}, mean macro f {mean_f:.4}",
        cfg.method, cfg.repetitions
    );
    println!("manifest written to {}", manifest_path.display());
    Ok(())
}

fn cmd_baseline(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    cfg.validate()?;
    let Some(method) = cfg.method.sampling() else {
        return Err(CliError::Validation(format!(
            "`trigan baseline` needs a sampling method (smote, b-smote, adasyn), got `{}`",
            cfg.method
        )));
    };
    let (train_set, _) = load_split(&cfg)?;
    let augmented = oversample_to_balance(&train_set, method, cfg.k_neighbors, cfg.seed)?;
    let out = cfg.output_dir.join(format!("augmented-{}", cfg.method));
    for s in &augmented {
        let path = out.join(&s.id);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        data::save_image(&path, &s.image)?;
    }
    data::write_manifest(&out.join("manifest.tsv"), &augmented)?;
    let synthetic = augmented.len() - train_set.len();
    println!(
        "augmented dataset written to {}: {} real + {} synthetic samples",
        out.display(),
        train_set.len(),
        synthetic
    );
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let generator = training::load_generator(&args.checkpoint)?;
    if args.class >= generator.profile.classes {
        return Err(CliError::Validation(format!(
            "class {} out of range; checkpoint was trained with {} classes",
            args.class, generator.profile.classes
        )));
    }
    if args.count == 0 {
        println!("nothing to generate");
        return Ok(());
    }
    let mut rng = seeds::stream(args.seed, tag::EVAL, args.class as u64);
    let images = training::generate_class_images(&generator, args.class, args.count, &mut rng);
    std::fs::create_dir_all(&args.out)?;
    let mut samples = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let image = images.index_axis(ndarray::Axis(0), i).to_owned();
        let id = format!("gen-c{}-{i:05}.png", args.class);
        data::save_image(&args.out.join(&id), &image)?;
        samples.push(Sample { image, label: args.class, id });
    }
    data::write_manifest(&args.out.join("manifest.tsv"), &samples)?;
    println!("{} images of class {} written to {}", args.count, args.class, args.out.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let paths = report::write_report(&args.out, &args.manifests)?;
    let summary = std::fs::read_to_string(&paths.summary_txt)?;
    print!("{summary}");
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.per_class == 0 {
        return Err(CliError::Validation("--per-class must be at least 1".into()));
    }
    let samples = synth::write_dataset(&args.out, args.per_class, args.img_size, args.seed)?;
    println!(
        "{} images ({} per class) written to {}",
        samples.len(),
        args.per_class,
        args.out.display()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Report(args) => cmd_report(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
