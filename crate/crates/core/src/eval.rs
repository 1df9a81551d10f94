//! Test-set evaluation and accuracy-versus-rejection curves.

use crate::compensation::{forward_with_compensation, CompensationConfig, Mode};
use crate::data::LabeledDataset;
use crate::error::{AlumError, Result};
use crate::network::{head_forward, uncertainty_score, Network, ScoreKind};
use crate::rng::{RngKey, StepKey};
use crate::tensor::Tape;
use crate::train::predict;

/// Rejection rates reported by default.
pub const REJECTION_RATES: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rejection_rates: Vec<f64>,
    /// Accuracy on the retained samples at each rejection rate.
    pub accuracy: Vec<f64>,
    /// Number of retained samples at each rate, `ceil((1 − r)·N)`.
    pub retained: Vec<usize>,
    /// Accuracy per class with no rejection; `NaN` for an absent class.
    pub per_class: Vec<f64>,
    /// `NaN` when no prediction falls in the group.
    pub mean_sigma_correct: f64,
    pub mean_sigma_wrong: f64,
    pub predictions: Vec<usize>,
    pub scores: Vec<f64>,
}

impl EvalReport {
    pub fn accuracy_at(&self, rate: f64) -> Option<f64> {
        self.rejection_rates
            .iter()
            .position(|&r| (r - rate).abs() < 1e-12)
            .map(|i| self.accuracy[i])
    }
}

/// `ceil((1 − r)·n)`, tolerant of decimal representation error.
pub fn retained_count(rate: f64, n: usize) -> usize {
    ((1.0 - rate) * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Indices kept after rejecting the highest-scoring fraction `rate`.
/// Equal scores are rejected lowest index first.
pub fn retained_indices(scores: &[f64], rate: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(AlumError::contract(format!("rejection rate {rate} outside [0, 1]")));
    }
    let n = scores.len();
    let keep = retained_count(rate, n);
    if keep == 0 {
        return Err(AlumError::contract(format!(
            "rejection rate {rate} leaves no samples out of {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[n - keep..].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Accuracy on the retained set for each rate, from per-sample correctness.
pub fn rejection_curve(scores: &[f64], correct: &[bool], rates: &[f64]) -> Result<Vec<(f64, usize)>> {
    if scores.len() != correct.len() {
        return Err(AlumError::shape(format!(
            "{} scores for {} predictions",
            scores.len(),
            correct.len()
        )));
    }
    rates
        .iter()
        .map(|&r| {
            let kept = retained_indices(scores, r)?;
            let hits = kept.iter().filter(|&&i| correct[i]).count();
            Ok((hits as f64 / kept.len() as f64, kept.len()))
        })
        .collect()
}

/// Per-sample predictions and uncertainty scores in eval mode (no mining,
/// compensation only when `comp.apply_in_eval`).
pub fn predict_dataset(
    net: &Network,
    ds: &LabeledDataset,
    score: ScoreKind,
    comp: &CompensationConfig,
    key: RngKey,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if ds.dims != net.arch.input_len() {
        return Err(AlumError::shape(format!(
            "dataset has {} features, network expects {}",
            ds.dims,
            net.arch.input_len()
        )));
    }
    let classifier = &net.param("classifier.weight").expect("classifier").array;
    let mut preds = Vec::with_capacity(ds.len());
    let mut scores = Vec::with_capacity(ds.len());
    let index: Vec<usize> = (0..ds.len()).collect();
    for (c, chunk) in index.chunks(EVAL_CHUNK).enumerate() {
        let mut tape = Tape::new();
        let bound = net.bind_frozen(&mut tape);
        let x = tape.constant(ds.batch_features(chunk));
        let labels = ds.batch_labels(chunk);
        let feats =
            forward_with_compensation(&mut tape, &bound, x, comp, Mode::Eval, StepKey::new(key, usize::MAX, c))?;
        let u = head_forward(&mut tape, &bound, feats, &labels)?;
        preds.extend(predict(tape.value(u.mean), classifier));
        scores.extend(uncertainty_score(tape.value(u.variance), score));
    }
    Ok((preds, scores))
}

fn mean_or_nan(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Evaluate against `ds.labels` with a plain (uncompensated) forward pass.
pub fn evaluate(net: &Network, ds: &LabeledDataset, rates: &[f64], score: ScoreKind) -> Result<EvalReport> {
    evaluate_with(net, ds, rates, score, &CompensationConfig::default(), RngKey::root(0))
}

pub fn evaluate_with(
    net: &Network,
    ds: &LabeledDataset,
    rates: &[f64],
    score: ScoreKind,
    comp: &CompensationConfig,
    key: RngKey,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(AlumError::contract("empty evaluation set"));
    }
    let (predictions, scores) = predict_dataset(net, ds, score, comp, key)?;
    let correct: Vec<bool> = predictions.iter().zip(&ds.labels).map(|(p, l)| p == l).collect();
    let curve = rejection_curve(&scores, &correct, rates)?;

    let k = net.arch.num_classes;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&l, &c) in ds.labels.iter().zip(&correct) {
        if l < k {
            counts[l] += 1;
            hits[l] += usize::from(c);
        }
    }
    let per_class = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 })
        .collect();
    let group = |want: bool| mean_or_nan(scores.iter().zip(&correct).filter(|(_, &c)| c == want).map(|(s, _)| *s));

    Ok(EvalReport {
        rejection_rates: rates.to_vec(),
        accuracy: curve.iter().map(|c| c.0).collect(),
        retained: curve.iter().map(|c| c.1).collect(),
        per_class,
        mean_sigma_correct: group(true),
        mean_sigma_wrong: group(false),
        predictions,
        scores,
    })
}
