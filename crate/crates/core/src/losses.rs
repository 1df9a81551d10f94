//! Variance-weighted Hadamard mixup of triplet embeddings and the joint
//! cross-entropy + triplet objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{AlumError, Result};
use crate::mining::TripletPlan;
use crate::network::UncertainBatch;
use crate::tensor::{DiffArray, Tape, Var};

/// How mixup weights are derived from the predicted variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixWeighting {
    /// `w_i = σ_i ⊘ (σ_i + σ_i⁺ + σ_i⁻)`.
    #[default]
    Sigma,
    /// Same with every σ replaced by `1/σ`.
    InverseSigma,
}

impl FromStr for MixWeighting {
    type Err = AlumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(MixWeighting::Sigma),
            "inverse-sigma" => Ok(MixWeighting::InverseSigma),
            _ => Err(AlumError::Config(format!("unknown mixup weighting `{s}`"))),
        }
    }
}

impl fmt::Display for MixWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixWeighting::Sigma => "sigma",
            MixWeighting::InverseSigma => "inverse-sigma",
        })
    }
}

/// Which triplet partners take part in mixup and in the cross-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Members {
    pub positive: bool,
    pub negative: bool,
}

impl Members {
    pub const ALL: Members = Members {
        positive: true,
        negative: true,
    };
    pub const ANCHOR_ONLY: Members = Members {
        positive: false,
        negative: false,
    };
}

#[derive(Debug, Clone, Copy)]
pub struct MixedFeatures {
    /// `B×d`
    pub f: Var,
    pub w: Var,
    pub w_pos: Var,
    pub w_neg: Var,
}

fn row_mask(mask: &[bool], d: usize) -> DiffArray {
    let vals = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d))
        .collect();
    DiffArray::new(&[mask.len(), d], vals).expect("mask shape")
}

fn flags(mask: &[bool]) -> DiffArray {
    let vals = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    DiffArray::new(&[mask.len()], vals).expect("flag shape")
}

fn check_plan(tape: &Tape, u: &UncertainBatch, plan: &TripletPlan) -> Result<(usize, usize)> {
    let shape = tape.shape(u.mean);
    if shape.len() != 2 || tape.shape(u.variance) != shape {
        return Err(AlumError::shape(format!(
            "mean {shape:?} / variance {:?}",
            tape.shape(u.variance)
        )));
    }
    let (b, d) = (shape[0], shape[1]);
    if plan.len() != b || plan.neg_index.len() != b || plan.valid_mask.len() != b || u.labels.len() != b {
        return Err(AlumError::shape(format!(
            "triplet plan of {} for batch of {b}",
            plan.len()
        )));
    }
    Ok((b, d))
}

/// Mix each anchor's mean with its partners' means, weighted by normalized
/// variances. Invalid triplets degrade to `f_i = μ_i`, `w_i = 1`.
pub fn mixup(
    tape: &mut Tape,
    u: &UncertainBatch,
    plan: &TripletPlan,
    members: Members,
    weighting: MixWeighting,
) -> Result<MixedFeatures> {
    let (b, d) = check_plan(tape, u, plan)?;
    let zeros = tape.constant(DiffArray::zeros(&[b, d]));
    let ones = tape.constant(DiffArray::filled(&[b, d], 1.0));
    let s = match weighting {
        MixWeighting::Sigma => u.variance,
        MixWeighting::InverseSigma => tape.div(ones, u.variance)?,
    };

    let mut denom = s;
    let mut partner = |tape: &mut Tape, idx: &[usize], on: bool| -> Result<Option<(Var, Var)>> {
        if !on {
            return Ok(None);
        }
        let sp = tape.gather_rows(s, idx)?;
        let mp = tape.gather_rows(u.mean, idx)?;
        denom = tape.add(denom, sp)?;
        Ok(Some((sp, mp)))
    };
    let pos = partner(tape, &plan.pos_index, members.positive)?;
    let neg = partner(tape, &plan.neg_index, members.negative)?;

    let valid = tape.constant(row_mask(&plan.valid_mask, d));
    let invalid = tape.sub(ones, valid)?;

    let w_raw = tape.div(s, denom)?;
    let w_valid = tape.mul(w_raw, valid)?;
    let w = tape.add(w_valid, invalid)?;
    let mut f = tape.mul(w, u.mean)?;

    let mut weight_of = |tape: &mut Tape, side: Option<(Var, Var)>| -> Result<Var> {
        match side {
            None => Ok(zeros),
            Some((sp, mp)) => {
                let raw = tape.div(sp, denom)?;
                let wp = tape.mul(raw, valid)?;
                let term = tape.mul(wp, mp)?;
                f = tape.add(f, term)?;
                Ok(wp)
            }
        }
    };
    let w_pos = weight_of(tape, pos)?;
    let w_neg = weight_of(tape, neg)?;

    Ok(MixedFeatures { f, w, w_pos, w_neg })
}

/// Labels of each anchor's triplet members and which terms are active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletLabels {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub positive_active: Vec<bool>,
    pub negative_active: Vec<bool>,
}

impl TripletLabels {
    pub fn new(labels: &[usize], plan: &TripletPlan, members: Members) -> Self {
        let active = |on: bool| plan.valid_mask.iter().map(|&v| v && on).collect();
        TripletLabels {
            anchor: labels.to_vec(),
            positive: plan.pos_index.iter().map(|&j| labels[j]).collect(),
            negative: plan.neg_index.iter().map(|&j| labels[j]).collect(),
            positive_active: active(members.positive),
            negative_active: active(members.negative),
        }
    }
}

/// Mean over the batch of the summed negative log-likelihoods of the anchor,
/// positive and negative labels under `softmax(W f_i)`.
pub fn ce_loss(tape: &mut Tape, f: Var, classifier: Var, labels: &TripletLabels) -> Result<Var> {
    let b = tape.shape(f)[0];
    let classes = tape.shape(classifier)[0];
    if labels.anchor.len() != b {
        return Err(AlumError::shape(format!(
            "{} labels for batch of {b}",
            labels.anchor.len()
        )));
    }
    for &l in labels.anchor.iter().chain(&labels.positive).chain(&labels.negative) {
        if l >= classes {
            return Err(AlumError::Label { label: l, classes });
        }
    }
    let wt = tape.transpose(classifier)?;
    let logits = tape.matmul(f, wt)?;
    let lse = tape.logsumexp(logits)?;

    let picked = tape.pick(logits, &labels.anchor)?;
    let mut total = tape.sub(picked, lse)?;
    for (idx, active) in [
        (&labels.positive, &labels.positive_active),
        (&labels.negative, &labels.negative_active),
    ] {
        if !active.iter().any(|&a| a) {
            continue;
        }
        let picked = tape.pick(logits, idx)?;
        let term = tape.sub(picked, lse)?;
        let mask = tape.constant(flags(active));
        let term = tape.mul(term, mask)?;
        total = tape.add(total, term)?;
    }
    let s = tape.sum(total);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// `Σ_i max(‖μ_i − μ_i⁺‖² − ‖μ_i − μ_i⁻‖² + α, 0)` over valid triplets.
pub fn triplet_loss(tape: &mut Tape, mean: Var, plan: &TripletPlan, margin: f64) -> Result<Var> {
    if margin < 0.0 {
        return Err(AlumError::contract(format!("negative margin {margin}")));
    }
    let b = tape.shape(mean)[0];
    if plan.len() != b {
        return Err(AlumError::shape(format!(
            "triplet plan of {} for batch of {b}",
            plan.len()
        )));
    }
    let sq_dist = |tape: &mut Tape, idx: &[usize]| -> Result<Var> {
        let other = tape.gather_rows(mean, idx)?;
        let diff = tape.sub(mean, other)?;
        let sq = tape.mul(diff, diff)?;
        tape.row_sum(sq)
    };
    let dp = sq_dist(tape, &plan.pos_index)?;
    let dn = sq_dist(tape, &plan.neg_index)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    let mask = tape.constant(flags(&plan.valid_mask));
    let hinge = tape.mul(hinge, mask)?;
    Ok(tape.sum(hinge))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
    pub lambda: f64,
    pub margin: f64,
}

/// `L = L_C + λ·L_T`, returned both on the tape and as plain numbers.
pub fn total_loss(tape: &mut Tape, ce: Var, triplet: Var, lambda: f64, margin: f64) -> Result<(Var, LossBreakdown)> {
    if lambda < 0.0 {
        return Err(AlumError::contract(format!("negative loss weight {lambda}")));
    }
    let weighted = tape.scale(triplet, lambda);
    let total = tape.add(ce, weighted)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        ce: tape.value(ce).item(),
        triplet: tape.value(triplet).item(),
        lambda,
        margin,
    };
    Ok((total, breakdown))
}
