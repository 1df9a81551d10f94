//! In-batch adversarial triplet mining.
//!
//! A seeded subset of `floor(p·B)` anchors gets its hardest same-label
//! positive (largest cosine distance) and hardest different-label negative
//! (smallest cosine distance). The remaining anchors get uniformly drawn
//! label-respecting partners.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{AlumError, Result};
use crate::rng::RngKey;
use crate::tensor::{cosine_similarity, DiffArray};

/// `1 − cos(a, b)`, in `[0, 2]`; a zero vector is at distance 1 from anything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_similarity(a, b)
}

/// `floor(ratio·n)`, tolerant of the representation error of decimal ratios.
pub fn fraction_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletPlan {
    pub pos_index: Vec<usize>,
    pub neg_index: Vec<usize>,
    pub mined_mask: Vec<bool>,
    pub valid_mask: Vec<bool>,
}

impl TripletPlan {
    /// Every anchor is its own partner and no triplet is valid.
    pub fn degenerate(b: usize) -> Self {
        TripletPlan {
            pos_index: (0..b).collect(),
            neg_index: (0..b).collect(),
            mined_mask: vec![false; b],
            valid_mask: vec![false; b],
        }
    }

    pub fn len(&self) -> usize {
        self.pos_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos_index.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// How the mined fraction evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PSchedule {
    #[default]
    Constant,
    /// Linear ramp from 0 to `p` over the first half of training.
    Ramp,
}

impl PSchedule {
    pub fn at(&self, p: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            PSchedule::Constant => p,
            PSchedule::Ramp => {
                let half = (epochs as f64 / 2.0).max(1.0);
                p * (epoch as f64 / half).min(1.0)
            }
        }
    }
}

impl FromStr for PSchedule {
    type Err = AlumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(PSchedule::Constant),
            "ramp" => Ok(PSchedule::Ramp),
            _ => Err(AlumError::Config(format!("unknown p schedule `{s}`"))),
        }
    }
}

impl fmt::Display for PSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PSchedule::Constant => "constant",
            PSchedule::Ramp => "ramp",
        })
    }
}

/// Mine triplets from embedding means `means: B×d` with labels.
pub fn mine_triplets(means: &DiffArray, labels: &[usize], p: f64, key: RngKey) -> Result<TripletPlan> {
    let shape = means.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(AlumError::shape(format!(
            "mining: means {shape:?} with {} labels",
            labels.len()
        )));
    }
    let b = shape[0];
    if b < 2 {
        return Err(AlumError::DegenerateBatch(b));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(AlumError::contract(format!("mined fraction {p} outside [0, 1]")));
    }

    let mut rng = key.rng();
    let mut order: Vec<usize> = (0..b).collect();
    order.shuffle(&mut rng);
    let mut mined_mask = vec![false; b];
    for &i in &order[..fraction_count(p, b)] {
        mined_mask[i] = true;
    }

    let mut plan = TripletPlan {
        pos_index: vec![0; b],
        neg_index: vec![0; b],
        mined_mask,
        valid_mask: vec![true; b],
    };
    let mut same = Vec::with_capacity(b);
    let mut diff = Vec::with_capacity(b);
    for i in 0..b {
        same.clear();
        diff.clear();
        for j in 0..b {
            if labels[j] == labels[i] {
                if j != i {
                    same.push(j);
                }
            } else {
                diff.push(j);
            }
        }
        let anchor = means.row(i);
        let dist = |j: &usize| cosine_distance(anchor, means.row(*j));

        plan.pos_index[i] = if same.is_empty() {
            plan.valid_mask[i] = false;
            i
        } else if plan.mined_mask[i] {
            // strict comparison keeps the lowest index on ties
            let mut best = same[0];
            let mut best_d = dist(&best);
            for j in &same[1..] {
                let d = dist(j);
                if d > best_d {
                    best = *j;
                    best_d = d;
                }
            }
            best
        } else {
            same[rng.random_range(0..same.len())]
        };

        plan.neg_index[i] = if diff.is_empty() {
            plan.valid_mask[i] = false;
            i
        } else if plan.mined_mask[i] {
            let mut best = diff[0];
            let mut best_d = dist(&best);
            for j in &diff[1..] {
                let d = dist(j);
                if d < best_d {
                    best = *j;
                    best_d = d;
                }
            }
            best
        } else {
            diff[rng.random_range(0..diff.len())]
        };
    }
    Ok(plan)
}
