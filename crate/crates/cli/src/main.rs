use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use zskd_cli::artifacts::Status;
use zskd_cli::config::DatasetId;
use zskd_cli::{CliResult, ExperimentConfig, Method, Pipeline};

#[derive(Parser)]
#[command(name = "zskd", version, about = "Zero-shot knowledge distillation experiments")]
struct Cli {
    /// Experiment config (TOML). Without it, the MNIST defaults apply.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rebuild artifacts even when they exist from other inputs.
    #[arg(long, global = true)]
    force: bool,
    /// Validate and print the plan without computing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImpressionArg {
    Di,
    Ci,
}

#[derive(Subcommand)]
enum Command {
    /// Train the LeNet-5 teacher with cross-entropy.
    TrainTeacher,
    /// Train the LeNet-5-Half student with cross-entropy on real data.
    TrainStudentCe,
    /// Distil the teacher into the student on real data.
    TrainStudentKd {
        /// Use this share of the training set instead of all of it.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Export the class-similarity matrix of the teacher as CSV.
    ExtractPrior,
    /// Craft a Data Impression transfer set.
    GenDi {
        #[arg(long)]
        fraction: f64,
    },
    /// Craft a Class Impression transfer set.
    GenCi {
        #[arg(long)]
        fraction: f64,
    },
    /// Describe the augmentation of a DI set and write previews.
    Augment {
        /// Defaults to the fine-tune fraction.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Distil a fresh student on a transfer set.
    Zskd {
        #[arg(long)]
        fraction: f64,
        #[arg(long, value_enum, default_value = "di")]
        method: ImpressionArg,
    },
    /// Fine-tune the DI student on impressions plus augmentations.
    Finetune,
    /// Test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy against transfer-set size for every configured method.
    Sweep,
    /// Assemble report.md and report.csv from finished stages.
    Report,
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::defaults(DatasetId::Mnist),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    if cli.dry_run {
        match cli.command {
            Command::GenDi { fraction } => {
                let p = Pipeline::planner(cfg, false);
                print!("{}", p.di_plan(fraction)?);
            }
            Command::GenCi { fraction } => println!(
                "{} class impressions, {} per class",
                cfg.count_for(fraction),
                cfg.count_for(fraction) / zskd_core::data::NUM_CLASSES
            ),
            _ => print!("{}", cfg.to_toml()),
        }
        return Ok(());
    }
    let p = Pipeline::new(cfg, cli.force)?;
    let status = match cli.command {
        Command::TrainTeacher => p.train_teacher()?,
        Command::TrainStudentCe => p.train_student_ce()?,
        Command::TrainStudentKd { fraction } => p.train_student_kd(fraction)?,
        Command::ExtractPrior => p.extract_prior()?,
        Command::GenDi { fraction } => p.gen_di(fraction)?,
        Command::GenCi { fraction } => p.gen_ci(fraction)?,
        Command::Augment { fraction } => p.augment(fraction.unwrap_or(p.cfg.finetune.fraction))?,
        Command::Zskd { fraction, method } => {
            let m = match method {
                ImpressionArg::Di => Method::Di,
                ImpressionArg::Ci => Method::Ci,
            };
            p.zskd(fraction, m)?
        }
        Command::Finetune => p.finetune()?,
        Command::Eval { checkpoint } => {
            println!("{:.2}", p.eval(&checkpoint)?);
            return Ok(());
        }
        Command::Sweep => {
            for r in p.sweep()? {
                println!("{},{},{:.2}", r.fraction, r.method.as_str(), r.accuracy);
            }
            return Ok(());
        }
        Command::Report => {
            p.report()?;
            print!("{}", std::fs::read_to_string(p.path("report.md")).unwrap_or_default());
            return Ok(());
        }
    };
    match status {
        Status::UpToDate => println!("up to date"),
        Status::Run => println!("done"),
    }
    Ok(())
}

fn main() -> ExitCode {
    zskd_cli::tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
