//! `csknet` — generate data, train both stages, evaluate, check gradients, ablate.
//!
//! Configuration layers, lowest to highest precedence: built-in defaults (or
//! `--preset`), the `--config` TOML file, `--set key=value` overrides, then
//! the dedicated flags of each subcommand. The effective configuration is
//! written as `config.toml` into every output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use csknet::checkpoint::{Checkpoint, ModelKind};
use csknet::config::RunConfig;
use csknet::data::{generate_dataset, Dataset, Manifest, Modalities, Split, MANIFEST};
use csknet::evaluate::{evaluate_model, EvalMode, EvalReport, Variant};
use csknet::gradcheck::{run_suite, MAX_REL_ERROR};
use csknet::layers::Modality;
use csknet::network::ForwardOptions;
use csknet::pipeline::{
    load_baseline, load_csknet, resume_stage1, resume_stage2, run_ablation, train_stage1, train_stage2, EpochRecord, RunLimits,
    RunOutput, METRICS_HEADER,
};
use csknet::Error;

const THREADS_ENV: &str = "CSKNET_THREADS";

#[derive(Parser)]
#[command(name = "csknet", version, about = "Multi-spectral EO/IR segmentation with cross-modal knowledge distillation")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Start from a named preset: desk (default) or paper
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// TOML file with any run-config keys; unknown keys are rejected
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set w_cl=0 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic paired EO/IR dataset with a manifest
    GenData {
        /// Output directory [default: data_dir from the config]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generator seed (config key data_seed)
        #[arg(long)]
        seed: Option<u64>,
        /// Number of scenes (config key count)
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a single-modality baseline (the EO one is the stage-2 teacher)
    TrainStage1 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "eo")]
        modality: ModalityArg,
    },
    /// Train CSK-Net distilled from a frozen EO baseline
    TrainStage2 {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint of the EO baseline from train-stage1
        #[arg(long, value_name = "CKPT")]
        pretrained: PathBuf,
    },
    /// Score a checkpoint on a split
    Eval {
        /// Dataset directory containing the manifest [default: data_dir]
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write report.tsv and the effective config here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op, loss and the full model
    Gradcheck {
        /// Random points per check
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Train and score the five ablation variants per seed
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory containing the manifest [default: data_dir]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for checkpoints, metrics.tsv and config.toml
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seeds model initialization and the training stream
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Eo,
    Ir,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fused,
    Optical,
    IrOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) | Error::LabelOutOfRange { .. } => 3,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn threads() -> Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
    }
}

fn base_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::preset(&args.preset)?;
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    for o in &args.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = threads()?;
    let mut cfg = base_config(&cli.config)?;
    match cli.command {
        Command::GenData { out, seed, count } => {
            if let Some(s) = seed {
                cfg.data_seed = s;
            }
            if let Some(c) = count {
                cfg.count = c;
            }
            cfg.validate()?;
            let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
            let manifest = generate_dataset(&cfg.scene(), cfg.count, &dir, threads)?;
            cfg.echo(&dir)?;
            let train = manifest.split(Split::Train).count();
            println!(
                "wrote {} scenes ({train} train, {} test) to {}",
                manifest.records.len(),
                manifest.records.len() - train,
                dir.display()
            );
        }
        Command::TrainStage1 { run, modality } => {
            apply_run_args(&mut cfg, &run)?;
            let modality = match modality {
                ModalityArg::Eo => Modality::Eo,
                ModalityArg::Ir => Modality::Ir,
            };
            let mods = if modality == Modality::Eo { Modalities::EoOnly } else { Modalities::IrOnly };
            let data = load_split(&data_dir(&cfg, &run.data), Split::Train, mods, cfg.num_classes)?;
            let out = prepare_out(&cfg, &run.out)?;
            let limits = RunLimits { threads, max_epochs: run.max_epochs };
            let trained = match &run.resume {
                Some(p) => resume_stage1(&Checkpoint::load(p)?, &cfg.train(), &data, &out, limits)?,
                None => train_stage1(&cfg.model(), modality, &cfg.train(), &data, &out, limits)?,
            };
            print_records(&trained.records);
            println!("{modality} baseline: {} parameters, checkpoints in {}", trained.model.param_count(), run.out.display());
        }
        Command::TrainStage2 { run, pretrained } => {
            apply_run_args(&mut cfg, &run)?;
            let teacher_ck = Checkpoint::load(&pretrained)?;
            if teacher_ck.kind != ModelKind::BaselineEo {
                return Err(usage(format!("--pretrained must be an EO baseline checkpoint, got {}", teacher_ck.kind.tag())));
            }
            let teacher = load_baseline(&teacher_ck)?;
            cfg.model().compatible_with(&teacher.config)?;
            let before = teacher.store.checksum();
            let data = load_split(&data_dir(&cfg, &run.data), Split::Train, Modalities::Both, cfg.num_classes)?;
            let out = prepare_out(&cfg, &run.out)?;
            let limits = RunLimits { threads, max_epochs: run.max_epochs };
            let trained = match &run.resume {
                Some(p) => resume_stage2(&Checkpoint::load(p)?, &cfg.train(), &teacher, &data, &out, limits)?,
                None => train_stage2(&cfg.model(), &cfg.train(), &teacher, &data, &out, limits)?,
            };
            if teacher.store.checksum() != before {
                return Err(Failure { code: 1, message: "teacher parameters changed during stage 2".into() });
            }
            print_records(&trained.records);
            println!("CSK-Net: checkpoints in {}", run.out.display());
        }
        Command::Eval { data, checkpoint, mode, split, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mode = match mode {
                ModeArg::Fused => EvalMode::Fused,
                ModeArg::Optical => EvalMode::Optical,
                ModeArg::IrOnly => EvalMode::IrOnly,
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let report = evaluate_checkpoint(&ck, &data_dir(&cfg, &data), split, mode, threads)?;
            println!("{report}");
            if let Some(dir) = out {
                cfg.echo(&dir)?;
                let path = dir.join("report.tsv");
                std::fs::write(&path, report.to_tsv()).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Gradcheck { seeds } => {
            let seeds: Vec<u64> = (0..seeds.max(1)).collect();
            let report = run_suite(&seeds, &[0, 1])?;
            for c in &report.checks {
                println!(
                    "{}\t{:<42} max rel err {:.2e} ({} entries)",
                    if c.passed() { "ok" } else { "FAIL" },
                    c.name,
                    c.max_rel_error,
                    c.entries
                );
            }
            println!(
                "{} checks in {:.1}s, worst {:.2e} (limit {MAX_REL_ERROR:.0e})",
                report.checks.len(),
                report.seconds,
                report.max_rel_error()
            );
            if !report.passed() {
                return Err(Failure { code: 1, message: "gradient check failed".into() });
            }
        }
        Command::Ablate { data, out, seeds, epochs } => {
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            let dir = data_dir(&cfg, &data);
            let train = load_split(&dir, Split::Train, Modalities::Both, cfg.num_classes)?;
            let test = load_split(&dir, Split::Test, Modalities::Both, cfg.num_classes)?;
            cfg.echo(&out)?;
            let table = run_ablation(&cfg.model(), &cfg.train(), &seeds, &train, &test, threads, |row| {
                eprintln!("seed {}\t{:<28} mIoU {:.4}", row.seed, row.variant.label(), row.miou);
            })?;
            let tsv = table.to_tsv();
            let path = out.join("ablation.tsv");
            std::fs::write(&path, &tsv).map_err(|e| Error::Io { path, source: e })?;
            print!("{tsv}");
        }
    }
    Ok(())
}

fn apply_run_args(cfg: &mut RunConfig, run: &RunArgs) -> Result<(), Failure> {
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if run.max_epochs == Some(0) {
        return Err(usage("--max-epochs must be at least 1"));
    }
    cfg.validate()?;
    Ok(())
}

fn data_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.data_dir.clone())
}

fn load_split(dir: &Path, split: Split, mods: Modalities, classes: usize) -> Result<Dataset, Failure> {
    let manifest = Manifest::load(&dir.join(MANIFEST))?;
    let data = Dataset::load(&manifest, split, mods, classes)?;
    if data.is_empty() {
        return Err(usage(format!("the {split} split of {} is empty", dir.display())));
    }
    Ok(data)
}

fn prepare_out(cfg: &RunConfig, dir: &Path) -> Result<RunOutput, Failure> {
    cfg.echo(dir)?;
    Ok(RunOutput::to_dir(dir, cfg.to_toml()))
}

fn print_records(records: &[EpochRecord]) {
    println!("{METRICS_HEADER}");
    for r in records {
        println!("{}", r.tsv());
    }
}

fn evaluate_checkpoint(ck: &Checkpoint, dir: &Path, split: Split, mode: EvalMode, threads: usize) -> Result<EvalReport, Failure> {
    let classes = ck.model.num_classes;
    match ck.kind {
        ModelKind::CskNet => {
            let model = load_csknet(ck)?;
            // score with the switches the model was trained with
            let options = if ck.run_config.is_empty() {
                ForwardOptions::default()
            } else {
                let rc = RunConfig::from_toml(&ck.run_config)?;
                ForwardOptions { exchange: rc.exchange, fusion: rc.fusion, embeddings: false }
            };
            let mods = if mode == EvalMode::IrOnly { Modalities::IrOnly } else { Modalities::Both };
            let data = load_split(dir, split, mods, classes)?;
            Ok(evaluate_model(&Variant { model: &model, options }, &data, mode, threads)?)
        }
        ModelKind::BaselineEo | ModelKind::BaselineIr => {
            let model = load_baseline(ck)?;
            let mods = match (ck.kind, mode) {
                (ModelKind::BaselineEo, EvalMode::Optical) => Modalities::EoOnly,
                (ModelKind::BaselineIr, EvalMode::IrOnly) => Modalities::IrOnly,
                _ => return Err(usage(format!("a {} checkpoint cannot be evaluated in {mode} mode", ck.kind.tag()))),
            };
            let data = load_split(dir, split, mods, classes)?;
            Ok(evaluate_model(&model, &data, mode, threads)?)
        }
    }
}
