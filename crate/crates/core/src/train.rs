//! Adam optimizer, batch samplers and the training step.

use rand::seq::SliceRandom;

use crate::compensation::{forward_with_compensation, Mode};
use crate::config::{DecayMode, SamplerKind, TrainConfig};
use crate::data::LabeledDataset;
use crate::error::{AlumError, Result};
use crate::losses::{ce_loss, mixup, total_loss, triplet_loss, LossBreakdown, TripletLabels};
use crate::mining::{mine_triplets, TripletPlan};
use crate::network::{head_forward, Network, ParamGroup};
use crate::rng::{tag, RngKey, StepKey};
use crate::tensor::{DiffArray, Tape};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment buffers, one pair per parameter in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        let zeros = || net.params.iter().map(|p| vec![0.0; p.array.len()]).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Learning-rate and decay settings of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub lr: f64,
    pub head_lr_mult: f64,
    pub weight_decay: f64,
    pub decay: DecayMode,
}

impl AdamSettings {
    pub fn plain(lr: f64, weight_decay: f64) -> Self {
        AdamSettings {
            lr,
            head_lr_mult: 1.0,
            weight_decay,
            decay: DecayMode::Decoupled,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamSettings {
            lr: cfg.lr,
            head_lr_mult: cfg.head_lr_mult,
            weight_decay: cfg.weight_decay,
            decay: cfg.decay,
        }
    }
}

/// One bias-corrected Adam step over every parameter, followed by decoupled
/// decay `p ← p·(1 − lr·wd)` (or L2 decay folded into the gradient).
pub fn adam_update(net: &mut Network, grads: &[Vec<f64>], opt: &mut OptimizerState, s: AdamSettings) -> Result<()> {
    if grads.len() != net.params.len() || opt.m.len() != net.params.len() {
        return Err(AlumError::shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            net.params.len(),
            grads.len(),
            opt.m.len()
        )));
    }
    for (i, p) in net.params.iter().enumerate() {
        if grads[i].len() != p.array.len() || opt.m[i].len() != p.array.len() {
            return Err(AlumError::shape(format!(
                "adam: gradient of `{}` has wrong length",
                p.name
            )));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (i, p) in net.params.iter_mut().enumerate() {
        let lr = match p.group {
            ParamGroup::Backbone => s.lr,
            ParamGroup::Head => s.lr * s.head_lr_mult,
        };
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        let values = p.array.values_mut();
        for j in 0..values.len() {
            let mut g = grads[i][j];
            if s.decay == DecayMode::L2 {
                g += s.weight_decay * values[j];
            }
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g;
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            values[j] -= lr * mhat / (vhat.sqrt() + opt.eps);
            if s.decay == DecayMode::Decoupled {
                values[j] *= 1.0 - lr * s.weight_decay;
            }
        }
    }
    Ok(())
}

fn distinct_labels(ds: &LabeledDataset, batch: &[usize]) -> usize {
    let mut seen = vec![false; ds.num_classes];
    batch
        .iter()
        .filter(|&&i| !std::mem::replace(&mut seen[ds.labels[i]], true))
        .count()
}

/// Partition the training set into batches for one epoch.
///
/// Batches smaller than 2 samples are dropped.
pub fn epoch_batches(
    ds: &LabeledDataset,
    batch_size: usize,
    kind: SamplerKind,
    run: RngKey,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let key = run.path(&[tag::SAMPLER, epoch as u64]);
    let mut rng = key.rng();
    let order: Vec<usize> = match kind {
        SamplerKind::Balanced => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
            for (i, &l) in ds.labels.iter().enumerate() {
                by_class[l].push(i);
            }
            for c in &mut by_class {
                c.shuffle(&mut rng);
            }
            let longest = by_class.iter().map(Vec::len).max().unwrap_or(0);
            (0..longest)
                .flat_map(|r| by_class.iter().filter_map(move |c| c.get(r).copied()))
                .collect()
        }
        SamplerKind::Random => {
            let mut o: Vec<usize> = (0..ds.len()).collect();
            o.shuffle(&mut rng);
            o
        }
    };
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect();
    if kind == SamplerKind::Random {
        // a single-class batch cannot be mined; re-draw it from the whole set
        for (b, batch) in batches.iter_mut().enumerate() {
            let mut attempt = 0;
            while distinct_labels(ds, batch) < 2 && attempt < 10 {
                let mut r = key.path(&[b as u64, attempt]).rng();
                let mut o: Vec<usize> = (0..ds.len()).collect();
                o.shuffle(&mut r);
                o.truncate(batch.len());
                *batch = o;
                attempt += 1;
            }
        }
    }
    batches
}

/// What one step produced, besides the parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// Samples whose `argmax(W μ_i)` matched their (possibly noisy) label.
    pub correct: usize,
    pub batch: usize,
    pub valid_triplets: usize,
}

/// Forward, loss and backward for one batch; returns gradients in network
/// parameter order. `plan` overrides mining when given.
pub fn step_gradients(
    net: &Network,
    x: &DiffArray,
    labels: &[usize],
    cfg: &TrainConfig,
    key: StepKey,
    plan: Option<&TripletPlan>,
) -> Result<(Vec<Vec<f64>>, StepOutcome)> {
    let b = labels.len();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let comp = cfg.compensation_config();
    let feats = forward_with_compensation(&mut tape, &bound, xv, &comp, Mode::Train, key)?;
    let u = head_forward(&mut tape, &bound, feats, labels)?;

    let p = cfg.p_schedule.at(cfg.p, key.epoch, cfg.epochs);
    let plan = match plan {
        Some(plan) => plan.clone(),
        None if cfg.needs_plan() => mine_triplets(tape.value(u.mean), labels, p, key.mining())?,
        None => TripletPlan::degenerate(b),
    };
    let mixed = mixup(&mut tape, &u, &plan, cfg.members(), cfg.mix_weighting)?;
    let classifier = bound.var("classifier.weight");
    let tl = TripletLabels::new(labels, &plan, cfg.members());
    let ce = ce_loss(&mut tape, mixed.f, classifier, &tl)?;
    let trip = if cfg.use_triplet {
        triplet_loss(&mut tape, u.mean, &plan, cfg.alpha)?
    } else {
        tape.constant(DiffArray::scalar(0.0))
    };
    let lambda = if cfg.use_triplet { cfg.lambda } else { 0.0 };
    let (loss, breakdown) = total_loss(&mut tape, ce, trip, lambda, cfg.alpha)?;
    if !breakdown.total.is_finite() {
        return Err(AlumError::NumericalDivergence {
            epoch: key.epoch,
            step: key.batch,
            detail: format!(
                "loss {} (ce {}, triplet {})",
                breakdown.total, breakdown.ce, breakdown.triplet
            ),
        });
    }
    tape.backward(loss)?;

    let correct = count_correct(
        tape.value(u.mean),
        &net.param("classifier.weight").expect("classifier").array,
        labels,
    );
    let grads: Vec<Vec<f64>> = bound
        .vars
        .iter()
        .zip(&net.params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.array.len()], <[f64]>::to_vec))
        .collect();
    if let Some((name, _)) = net
        .params
        .iter()
        .zip(&grads)
        .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
    {
        return Err(AlumError::NumericalDivergence {
            epoch: key.epoch,
            step: key.batch,
            detail: format!("non-finite gradient in `{}`", name.name),
        });
    }
    Ok((
        grads,
        StepOutcome {
            loss: breakdown,
            correct,
            batch: b,
            valid_triplets: plan.valid_count(),
        },
    ))
}

/// Argmax of `W μ_i`, ties to the lowest class.
pub fn predict(mean: &DiffArray, classifier: &DiffArray) -> Vec<usize> {
    let d = mean.shape()[1];
    let k = classifier.shape()[0];
    (0..mean.shape()[0])
        .map(|i| {
            let mu = &mean.values()[i * d..(i + 1) * d];
            let mut best = 0;
            let mut best_z = f64::NEG_INFINITY;
            for c in 0..k {
                let w = &classifier.values()[c * d..(c + 1) * d];
                let z: f64 = mu.iter().zip(w).map(|(a, b)| a * b).sum();
                if z > best_z {
                    best = c;
                    best_z = z;
                }
            }
            best
        })
        .collect()
}

fn count_correct(mean: &DiffArray, classifier: &DiffArray, labels: &[usize]) -> usize {
    predict(mean, classifier)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// One training step on `batch`: gradients then an Adam update.
pub fn train_step(
    net: &mut Network,
    opt: &mut OptimizerState,
    ds: &LabeledDataset,
    batch: &[usize],
    cfg: &TrainConfig,
    key: StepKey,
) -> Result<StepOutcome> {
    let x = ds.batch_features(batch);
    let labels = ds.batch_labels(batch);
    let (grads, outcome) = step_gradients(net, &x, &labels, cfg, key, None)?;
    adam_update(net, &grads, opt, AdamSettings::from_config(cfg))?;
    Ok(outcome)
}

/// Loss terms and training accuracy averaged over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Optimizer steps taken so far in the run.
    pub step: u64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_triplet: f64,
    pub train_acc: f64,
}

/// Run one epoch over `ds`.
pub fn train_epoch(
    net: &mut Network,
    opt: &mut OptimizerState,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochSummary> {
    let run = RngKey::root(cfg.seed);
    let batches = epoch_batches(ds, cfg.batch_size, cfg.sampler, run, epoch);
    let (mut total, mut ce, mut trip) = (0.0, 0.0, 0.0);
    let (mut correct, mut seen) = (0, 0);
    for (b, batch) in batches.iter().enumerate() {
        let out = train_step(net, opt, ds, batch, cfg, StepKey::new(run, epoch, b))?;
        total += out.loss.total;
        ce += out.loss.ce;
        trip += out.loss.triplet;
        correct += out.correct;
        seen += out.batch;
    }
    let n = batches.len().max(1) as f64;
    Ok(EpochSummary {
        epoch,
        step: opt.step,
        loss_total: total / n,
        loss_ce: ce / n,
        loss_triplet: trip / n,
        train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
    })
}
