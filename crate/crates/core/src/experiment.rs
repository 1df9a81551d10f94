//! End-to-end runs: data, training, per-epoch metrics and ablations.

use std::fs::File;
use std::io::{BufReader, Write};

use crate::checkpoint::Checkpoint;
use crate::config::{AblationFlags, TrainConfig};
use crate::data::{apply_noise, read_dataset, BlobSpec, LabeledDataset, NoiseSpec};
use crate::error::{AlumError, Result};
use crate::eval::{evaluate, EvalReport, REJECTION_RATES};
use crate::network::Network;
use crate::train::{train_epoch, OptimizerState};

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "step",
    "loss_total",
    "loss_ce",
    "loss_triplet",
    "train_acc",
    "test_acc",
    "rej10",
    "rej20",
    "rej30",
    "mean_sigma_correct",
    "mean_sigma_wrong",
];

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_triplet: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub rej10: f64,
    pub rej20: f64,
    pub rej30: f64,
    pub mean_sigma_correct: f64,
    pub mean_sigma_wrong: f64,
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Load the configured files, or synthesize the blob dataset and corrupt the
/// training half. Test labels stay clean.
pub fn load_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    if !cfg.train_file.is_empty() {
        let read = |path: &str| -> Result<LabeledDataset> {
            read_dataset(BufReader::new(File::open(path)?), Some(cfg.classes))
        };
        let train = read(&cfg.train_file)?;
        let test = read(&cfg.test_file)?;
        if train.dims != test.dims {
            return Err(AlumError::Format(format!(
                "train has {} features, test has {}",
                train.dims, test.dims
            )));
        }
        return Ok(Datasets { train, test });
    }
    // generators derive their own streams from the seed
    let data_seed = cfg.seed;
    let all = BlobSpec {
        classes: cfg.classes,
        dims: cfg.dims,
        size: cfg.n_train + cfg.n_test,
        spread: cfg.spread,
        center_radius: cfg.center_radius,
        seed: data_seed,
    }
    .generate()?;
    let (train, test) = all.split_at(cfg.n_train);
    let spec = NoiseSpec {
        kind: cfg.noise,
        ratio: cfg.noise_ratio,
        seed: data_seed,
    };
    let train = if cfg.noise_ratio > 0.0 {
        apply_noise(&train, &spec)?
    } else {
        train
    };
    Ok(Datasets { train, test })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub network: Network,
    pub history: Vec<EpochMetrics>,
    pub report: EvalReport,
    pub config: TrainConfig,
}

impl RunResult {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            seed: self.config.seed,
            epochs_done: self.config.epochs as u64,
        }
    }

    pub fn test_accuracy(&self) -> f64 {
        self.report.accuracy[0]
    }
}

/// Train on `data.train` for `cfg.epochs`, evaluating on `data.test` after
/// every epoch.
pub fn fit(cfg: &TrainConfig, data: &Datasets) -> Result<RunResult> {
    cfg.validate()?;
    data.train.validate()?;
    let arch = cfg.architecture(data.train.dims, data.train.num_classes.max(data.test.num_classes));
    let mut net = Network::init(arch, cfg.seed)?;
    let mut opt = OptimizerState::new(&net);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut report = evaluate(&net, &data.test, &REJECTION_RATES, cfg.score)?;
    for epoch in 0..cfg.epochs {
        let s = train_epoch(&mut net, &mut opt, &data.train, cfg, epoch)?;
        report = evaluate(&net, &data.test, &REJECTION_RATES, cfg.score)?;
        history.push(EpochMetrics {
            epoch: s.epoch,
            step: s.step,
            loss_total: s.loss_total,
            loss_ce: s.loss_ce,
            loss_triplet: s.loss_triplet,
            train_acc: s.train_acc,
            test_acc: report.accuracy[0],
            rej10: report.accuracy[1],
            rej20: report.accuracy[2],
            rej30: report.accuracy[3],
            mean_sigma_correct: report.mean_sigma_correct,
            mean_sigma_wrong: report.mean_sigma_wrong,
        });
    }
    Ok(RunResult {
        network: net,
        history,
        report,
        config: cfg.clone(),
    })
}

/// Full train and evaluation with the component toggles of `flags`.
pub fn run_experiment(cfg: &TrainConfig, flags: AblationFlags) -> Result<RunResult> {
    let cfg = cfg.clone().with_flags(flags);
    let data = load_datasets(&cfg)?;
    fit(&cfg, &data)
}

pub fn write_metrics<W: Write>(history: &[EpochMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_HEADER)?;
    for m in history {
        w.write_record([
            m.epoch.to_string(),
            m.step.to_string(),
            m.loss_total.to_string(),
            m.loss_ce.to_string(),
            m.loss_triplet.to_string(),
            m.train_acc.to_string(),
            m.test_acc.to_string(),
            m.rej10.to_string(),
            m.rej20.to_string(),
            m.rej30.to_string(),
            m.mean_sigma_correct.to_string(),
            m.mean_sigma_wrong.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per rejection rate: `rate,retained,accuracy`.
pub fn write_report<W: Write>(report: &EvalReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rejection_rate", "retained", "accuracy"])?;
    for ((r, n), a) in report
        .rejection_rates
        .iter()
        .zip(&report.retained)
        .zip(&report.accuracy)
    {
        w.write_record([r.to_string(), n.to_string(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean test accuracy at each rejection rate for one ablation row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub seeds: Vec<u64>,
    /// Per-seed accuracy at each default rejection rate.
    pub per_seed: Vec<Vec<f64>>,
}

impl AblationRow {
    pub fn mean(&self) -> Vec<f64> {
        let n = self.per_seed.len().max(1) as f64;
        (0..REJECTION_RATES.len())
            .map(|j| self.per_seed.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect()
    }
}

/// Run each named flag set over `seeds` (the seed replaces `cfg.seed`).
pub fn run_ablation(cfg: &TrainConfig, rows: &[(&str, AblationFlags)], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    rows.iter()
        .map(|&(name, flags)| {
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let c = TrainConfig { seed, ..cfg.clone() };
                    run_experiment(&c, flags).map(|r| r.report.accuracy)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow {
                name: name.to_string(),
                flags,
                seeds: seeds.to_vec(),
                per_seed,
            })
        })
        .collect()
}

pub fn write_ablation<W: Write>(rows: &[AblationRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variant", "lc", "ap", "an", "triplet", "acc", "rej10", "rej20", "rej30"])?;
    for row in rows {
        let f = row.flags;
        let mut rec = vec![
            row.name.clone(),
            f.lc.to_string(),
            f.ap.to_string(),
            f.an.to_string(),
            f.triplet.to_string(),
        ];
        rec.extend(row.mean().iter().map(|a| a.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
