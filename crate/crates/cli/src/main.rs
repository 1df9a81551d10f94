use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alum_core::data::{read_dataset, write_dataset};
use alum_core::eval::evaluate;
use alum_core::experiment::{fit, load_datasets, run_ablation, write_ablation, write_metrics, write_report};
use alum_core::gradcheck::{run_suite, GradCheckConfig};
use alum_core::{AblationFlags, AlumError, Checkpoint, Result, ScoreKind, TrainConfig, REJECTION_RATES};
use clap::{Args, Parser, Subcommand};

/// Noisy-label training with latent uncertainty compensation and adversarial
/// uncertainty mixup.
#[derive(Parser)]
#[command(name = "alum", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured train/test datasets as CSV (features..., label).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train, then write model.ckpt, metrics.csv, config.csv and report.csv.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset and write the report CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "mean")]
        score: ScoreKind,
    },
    /// Print accuracy at each rejection rate for a checkpoint.
    RejectCurve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = REJECTION_RATES)]
        rates: Vec<f64>,
        #[arg(long, default_value = "mean")]
        score: ScoreKind,
    },
    /// Run the finite-difference gradient suite; exits 1 on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
    /// Run the component ablation table over several seeds.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` file, or a `config.csv` echo from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs, applied after the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) if path.extension().is_some_and(|e| e == "csv") => {
                TrainConfig::from_echo_csv(&fs::read_to_string(path)?)?
            }
            Some(path) => TrainConfig::from_text(&fs::read_to_string(path)?)?,
            None => TrainConfig::default(),
        };
        let mut rest = self.overrides.iter();
        while let Some(flag) = rest.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| AlumError::Config(format!("expected `--key`, found `{flag}`")))?;
            let value = rest
                .next()
                .ok_or_else(|| AlumError::Config(format!("missing value for `{flag}`")))?;
            cfg.set(&key.replace('-', "_"), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(BufReader::new(File::open(path)?))
}

fn load_data(path: &Path, ckpt: &Checkpoint) -> Result<alum_core::LabeledDataset> {
    read_dataset(BufReader::new(File::open(path)?), Some(ckpt.network.arch.num_classes))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, cfg } => {
            let cfg = cfg.resolve()?;
            let data = load_datasets(&cfg)?;
            fs::create_dir_all(&out)?;
            write_dataset(&data.train, create(&out.join("train.csv"))?)?;
            write_dataset(&data.test, create(&out.join("test.csv"))?)?;
            println!(
                "wrote {} train and {} test rows to {}",
                data.train.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::Train { out, cfg } => {
            let cfg = cfg.resolve()?;
            let data = load_datasets(&cfg)?;
            let result = fit(&cfg, &data)?;
            fs::create_dir_all(&out)?;
            result.checkpoint().write(create(&out.join("model.ckpt"))?)?;
            write_metrics(&result.history, create(&out.join("metrics.csv"))?)?;
            fs::write(out.join("config.csv"), cfg.to_echo_csv()?)?;
            write_report(&result.report, create(&out.join("report.csv"))?)?;
            println!(
                "test accuracy {:.4} after {} epochs",
                result.test_accuracy(),
                cfg.epochs
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            score,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load_data(&data, &ckpt)?;
            let report = evaluate(&ckpt.network, &ds, &REJECTION_RATES, score)?;
            match out {
                Some(path) => write_report(&report, create(&path)?)?,
                None => write_report(&report, io::stdout().lock())?,
            }
        }
        Command::RejectCurve {
            checkpoint,
            data,
            rates,
            score,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load_data(&data, &ckpt)?;
            let report = evaluate(&ckpt.network, &ds, &rates, score)?;
            let mut w = io::stdout().lock();
            writeln!(w, "{:>9} {:>9} {:>9}", "rejected", "retained", "accuracy")?;
            for ((r, n), a) in report
                .rejection_rates
                .iter()
                .zip(&report.retained)
                .zip(&report.accuracy)
            {
                writeln!(w, "{:>8.1}% {n:>9} {:>8.2}%", 100.0 * r, 100.0 * a)?;
            }
        }
        Command::Gradcheck { seeds, first_seed } => {
            let seeds: Vec<u64> = (first_seed..first_seed + seeds).collect();
            let results = run_suite(&seeds, GradCheckConfig::default())?;
            let failures: Vec<_> = results.iter().filter(|r| !r.report.passed).collect();
            for f in &failures {
                eprintln!(
                    "FAIL {} seed {}: rel err {:.3e} at {:?}",
                    f.name, f.seed, f.report.max_rel_err, f.report.worst
                );
            }
            let worst = results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
            println!(
                "{} checks over {} seeds, worst rel err {worst:.3e}",
                results.len(),
                seeds.len()
            );
            if !failures.is_empty() {
                return Err(AlumError::Contract(format!(
                    "{} gradient checks failed",
                    failures.len()
                )));
            }
        }
        Command::Ablate { out, seeds, cfg } => {
            let cfg = cfg.resolve()?;
            let rows = run_ablation(&cfg, &AblationFlags::TABLE, &seeds)?;
            write_ablation(&rows, create(&out)?)?;
            for row in &rows {
                let m = row.mean();
                println!("{:<9} {:>7.2}%", row.name, 100.0 * m[0]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
