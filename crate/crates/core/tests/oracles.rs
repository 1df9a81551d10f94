mod common;

use alum_core::compensation::{
    compensate, forward_with_compensation, CompensationConfig, EpsMode, Mode, PerturbationDraw,
};
use alum_core::config::TrainConfig;
use alum_core::data::{make_blobs, shift_domain, LabeledDataset, NoiseSpec};
use alum_core::eval::evaluate;
use alum_core::experiment::{fit, Datasets};
use alum_core::losses::{ce_loss, mixup, triplet_loss, Members, MixWeighting, TripletLabels};
use alum_core::mining::{mine_triplets, TripletPlan};
use alum_core::network::{head_forward, uncertainty_score, Architecture, Grid, Network, ScoreKind};
use alum_core::rng::{RngKey, StepKey};
use alum_core::stats::layer_stats;
use alum_core::tensor::{logsumexp_row, DiffArray, Tape};
use alum_core::train::{step_gradients, OptimizerState};
use alum_core::{corrupt_labels, REJECTION_RATES};
use common::*;
use rand::Rng;

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = rng(1);
    for pad in [0usize, 1] {
        let x = uniform(&mut r, &[1, 2, 5, 5], -2.0, 2.0);
        let k = uniform(&mut r, &[3, 2, 3, 3], -2.0, 2.0);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
        let out = t.conv2d(xv, kv, pad).unwrap();
        let ho = 5 + 2 * pad - 2;
        assert_eq!(t.shape(out), &[1, 3, ho, ho]);
        let mut want = vec![0.0; 3 * ho * ho];
        for co in 0..3 {
            for oh in 0..ho {
                for ow in 0..ho {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for kh in 0..3 {
                            for kw in 0..3 {
                                let ih = (oh + kh) as isize - pad as isize;
                                let iw = (ow + kw) as isize - pad as isize;
                                if (0..5).contains(&ih) && (0..5).contains(&iw) {
                                    acc += x.values()[(ci * 5 + ih as usize) * 5 + iw as usize]
                                        * k.values()[((co * 2 + ci) * 3 + kh) * 3 + kw];
                                }
                            }
                        }
                    }
                    want[(co * ho + oh) * ho + ow] = acc;
                }
            }
        }
        assert!(max_abs_diff(t.value(out).values(), &want) < 1e-12);
    }
}

#[test]
fn stats_match_loop_oracles() {
    let mut r = rng(2);
    let f = uniform(&mut r, &[4, 3, 2, 2], -2.0, 2.0);
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let s = layer_stats(&mut t, fv).unwrap();
    let n = naive_stats(&f);
    assert!(max_abs_diff(t.value(s.instance_mean).values(), &n.u) < 1e-12);
    assert!(max_abs_diff(t.value(s.instance_std).values(), &n.s) < 1e-12);

    let u = uniform(&mut r, &[8, 5], -2.0, 2.0);
    let sd = uniform(&mut r, &[8, 5], 0.0, 2.0);
    let mut t = Tape::new();
    let (uv, sv) = (t.constant(u.clone()), t.constant(sd.clone()));
    let b = alum_core::batch_stats(&mut t, uv, sv).unwrap();
    for c in 0..5 {
        let (m, s) = mean_std(&(0..8).map(|i| u.values()[i * 5 + c]).collect::<Vec<_>>());
        assert!((t.value(b.mean_of_means).values()[c] - m).abs() < 1e-12);
        assert!((t.value(b.std_of_means).values()[c] - s).abs() < 1e-12);
        let (m, s) = mean_std(&(0..8).map(|i| sd.values()[i * 5 + c]).collect::<Vec<_>>());
        assert!((t.value(b.mean_of_stds).values()[c] - m).abs() < 1e-12);
        assert!((t.value(b.std_of_stds).values()[c] - s).abs() < 1e-12);
    }
}

fn eq7_scalar(f: &DiffArray, n: &NaiveStats, draw: &PerturbationDraw, eps_div: f64) -> Vec<f64> {
    let sh = f.shape();
    let (c, hw) = (sh[1], sh[2] * sh[3]);
    f.values()
        .iter()
        .enumerate()
        .map(|(idx, &x)| {
            let bc = idx / hw;
            let ci = bc % c;
            let (u, s) = (n.u[bc], n.s[bc]);
            let (em, es) = (draw.eps_mean.values()[bc], draw.eps_std.values()[bc]);
            (s + es * n.sigma_sigma[ci]) * (x - u) / (s + eps_div) + (u + em * n.sigma_mu[ci])
        })
        .collect()
}

#[test]
fn compensate_matches_formula() {
    let mut r = rng(3);
    for mode in [EpsMode::PerElement, EpsMode::SharedScalar] {
        let f = uniform(&mut r, &[4, 3, 4, 4], -2.0, 2.0);
        let draw = PerturbationDraw::sample(RngKey::root(r.random()), 4, 3, mode);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let st = layer_stats(&mut t, fv).unwrap();
        let out = compensate(&mut t, fv, &st, &draw, &CompensationConfig::default()).unwrap();
        let want = eq7_scalar(&f, &naive_stats(&f), &draw, 1e-6);
        assert!(max_abs_diff(t.value(out).values(), &want) < 1e-12);
    }
}

#[test]
fn literal_reading_uses_batch_statistics() {
    let mut r = rng(4);
    let f = uniform(&mut r, &[3, 2, 2, 2], -2.0, 2.0);
    let draw = PerturbationDraw::sample(RngKey::root(8), 3, 2, EpsMode::PerElement);
    let cfg = CompensationConfig {
        eq7_literal: true,
        ..CompensationConfig::default()
    };
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let st = layer_stats(&mut t, fv).unwrap();
    let out = compensate(&mut t, fv, &st, &draw, &cfg).unwrap();
    let n = naive_stats(&f);
    let want: Vec<f64> = f
        .values()
        .iter()
        .enumerate()
        .map(|(idx, &x)| {
            let bc = idx / 4;
            let c = bc % 2;
            let (m, s) = (n.mu[c], n.sigma[c]);
            let (em, es) = (draw.eps_mean.values()[bc], draw.eps_std.values()[bc]);
            (s + es * n.sigma_sigma[c]) * (x - m) / (s + 1e-6) + (m + em * n.sigma_mu[c])
        })
        .collect();
    assert!(max_abs_diff(t.value(out).values(), &want) < 1e-12);
}

fn tiny_net(seed: u64) -> Network {
    Network::init(Architecture::dense(5, Grid::new(4, 2, 2), 2, 6, 3), seed).unwrap()
}

#[test]
fn forward_with_compensation_equals_manual_composition() {
    let net = tiny_net(5);
    let x = uniform(&mut rng(5), &[6, 5], -2.0, 2.0);
    let step = StepKey::new(RngKey::root(11), 2, 3);
    let cfg = CompensationConfig::layers(&[2]);

    let mut t = Tape::new();
    let bound = net.bind_frozen(&mut t);
    let xv = t.constant(x.clone());
    let got = forward_with_compensation(&mut t, &bound, xv, &cfg, Mode::Train, step).unwrap();
    let got = t.value(got).clone();

    // layer by layer, by hand
    let w1 = &net.param("layer1.weight").unwrap().array;
    let b1 = &net.param("layer1.bias").unwrap().array;
    let w2 = &net.param("layer2.weight").unwrap().array;
    let b2 = &net.param("layer2.bias").unwrap().array;
    let affine = |inp: &[f64], rows: usize, w: &DiffArray, b: &DiffArray| -> Vec<f64> {
        let (i, o) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; rows * o];
        for r in 0..rows {
            for j in 0..o {
                out[r * o + j] = b.values()[j] + (0..i).map(|k| inp[r * i + k] * w.values()[k * o + j]).sum::<f64>();
            }
        }
        out
    };
    let h1: Vec<f64> = affine(x.values(), 6, w1, b1).into_iter().map(|v| v.max(0.0)).collect();
    let z2 = DiffArray::new(&[6, 4, 2, 2], affine(&h1, 6, w2, b2)).unwrap();
    let draw = PerturbationDraw::sample(step.compensation(2), 6, 4, EpsMode::PerElement);
    let want: Vec<f64> = eq7_scalar(&z2, &naive_stats(&z2), &draw, 1e-6)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    assert!(max_abs_diff(got.values(), &want) < 1e-12);
}

#[test]
fn eval_mode_and_disabled_config_are_plain_bitwise() {
    let net = tiny_net(6);
    let x = uniform(&mut rng(6), &[6, 5], -2.0, 2.0);
    let run = |cfg: &CompensationConfig, mode: Mode| {
        let mut t = Tape::new();
        let bound = net.bind_frozen(&mut t);
        let xv = t.constant(x.clone());
        let out =
            forward_with_compensation(&mut t, &bound, xv, cfg, mode, StepKey::new(RngKey::root(1), 0, 0)).unwrap();
        t.value(out).values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let plain = {
        let mut t = Tape::new();
        let bound = net.bind_frozen(&mut t);
        let xv = t.constant(x.clone());
        let out = bound.plain_backbone(&mut t, xv).unwrap();
        t.value(out).values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(&CompensationConfig::layers(&[1, 2]), Mode::Eval), plain);
    assert_eq!(run(&CompensationConfig::default(), Mode::Train), plain);
    assert_ne!(run(&CompensationConfig::layers(&[1, 2]), Mode::Train), plain);
}

fn random_batch(seed: u64, b: usize, d: usize, classes: usize) -> (DiffArray, DiffArray, Vec<usize>) {
    let mut r = rng(seed);
    let mean = uniform(&mut r, &[b, d], -2.0, 2.0);
    let var = uniform(&mut r, &[b, d], 0.05, 2.0);
    let labels = (0..b)
        .map(|i| if i < classes { i } else { r.random_range(0..classes) })
        .collect();
    (mean, var, labels)
}

#[test]
fn mixup_matches_scalar_evaluation() {
    for seed in 0..20 {
        let (mean, var, labels) = random_batch(seed, 10, 4, 3);
        let plan = mine_triplets(&mean, &labels, 0.5, RngKey::root(seed)).unwrap();
        let mut t = Tape::new();
        let (m, v) = (t.constant(mean.clone()), t.constant(var.clone()));
        let u = alum_core::UncertainBatch {
            mean: m,
            variance: v,
            labels: labels.clone(),
        };
        let mixed = mixup(&mut t, &u, &plan, Members::ALL, MixWeighting::Sigma).unwrap();
        for i in 0..10 {
            for k in 0..4 {
                let at = |row: usize, a: &DiffArray| a.values()[row * 4 + k];
                let (p, n) = (plan.pos_index[i], plan.neg_index[i]);
                let (want_f, want_w) = if plan.valid_mask[i] {
                    let z = at(i, &var) + at(p, &var) + at(n, &var);
                    let (w, wp, wn) = (at(i, &var) / z, at(p, &var) / z, at(n, &var) / z);
                    (w * at(i, &mean) + wp * at(p, &mean) + wn * at(n, &mean), w)
                } else {
                    (at(i, &mean), 1.0)
                };
                assert!((t.value(mixed.f).values()[i * 4 + k] - want_f).abs() < 1e-12);
                assert!((t.value(mixed.w).values()[i * 4 + k] - want_w).abs() < 1e-12);
                let sum = t.value(mixed.w).values()[i * 4 + k]
                    + t.value(mixed.w_pos).values()[i * 4 + k]
                    + t.value(mixed.w_neg).values()[i * 4 + k];
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn ce_matches_naive_and_reduced_forms() {
    for seed in 0..20 {
        let (f, w, labels) = {
            let mut r = rng(100 + seed);
            let f = uniform(&mut r, &[7, 4], -2.0, 2.0);
            let w = uniform(&mut r, &[5, 4], -2.0, 2.0);
            let labels: Vec<usize> = (0..7).map(|i| if i < 5 { i } else { r.random_range(0..5) }).collect();
            (f, w, labels)
        };
        let plan = mine_triplets(&f, &labels, 0.3, RngKey::root(seed)).unwrap();
        let tl = TripletLabels::new(&labels, &plan, Members::ALL);
        let mut t = Tape::new();
        let (fv, wv) = (t.constant(f.clone()), t.constant(w.clone()));
        let loss = ce_loss(&mut t, fv, wv, &tl).unwrap();
        let got = t.value(loss).item();

        let logp = |i: usize, c: usize| {
            let z: Vec<f64> = (0..5)
                .map(|k| (0..4).map(|j| f.values()[i * 4 + j] * w.values()[k * 4 + j]).sum())
                .collect();
            z[c] - logsumexp_row(&z)
        };
        let mut naive = 0.0;
        let mut reduced = 0.0;
        for i in 0..7 {
            naive += logp(i, labels[i]);
            reduced += logp(i, labels[i]);
            if plan.valid_mask[i] {
                naive += logp(i, labels[plan.pos_index[i]]) + logp(i, labels[plan.neg_index[i]]);
                reduced += logp(i, labels[i]) + logp(i, labels[plan.neg_index[i]]);
            }
        }
        assert!((got + naive / 7.0).abs() < 1e-10);
        assert!((got + reduced / 7.0).abs() < 1e-12);
    }
}

#[test]
fn triplet_matches_scalar_evaluation() {
    for seed in 0..20 {
        let (mean, _, labels) = random_batch(200 + seed, 9, 3, 3);
        let plan = mine_triplets(&mean, &labels, 0.4, RngKey::root(seed)).unwrap();
        let mut t = Tape::new();
        let m = t.constant(mean.clone());
        let loss = triplet_loss(&mut t, m, &plan, 1.0).unwrap();
        let got = t.value(loss).item();
        let sq = |i: usize, j: usize| {
            mean.row(i)
                .iter()
                .zip(mean.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        let want: f64 = (0..9)
            .filter(|&i| plan.valid_mask[i])
            .map(|i| (sq(i, plan.pos_index[i]) - sq(i, plan.neg_index[i]) + 1.0).max(0.0))
            .sum();
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn mining_matches_brute_force() {
    for seed in 0..50 {
        let (mean, _, labels) = random_batch(300 + seed, 12, 3, 4);
        let plan = mine_triplets(&mean, &labels, 1.0, RngKey::root(seed)).unwrap();
        let (pos, neg, valid) = brute_force_mining(&mean, &labels);
        assert_eq!((plan.pos_index, plan.neg_index, plan.valid_mask), (pos, neg, valid));
    }
}

#[test]
fn score_ranking_matches_sort_oracle() {
    let var = uniform(&mut rng(9), &[30, 5], 0.01, 2.0);
    let scores = uncertainty_score(&var, ScoreKind::Mean);
    let means: Vec<f64> = (0..30).map(|i| var.row(i).iter().sum::<f64>() / 5.0).collect();
    let rank = |v: &[f64]| {
        let mut o: Vec<usize> = (0..v.len()).collect();
        o.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        o
    };
    assert_eq!(rank(&scores), rank(&means));
    assert_eq!(
        uncertainty_score(&DiffArray::new(&[1, 2], vec![1.0, 3.0]).unwrap(), ScoreKind::Mean),
        vec![2.0]
    );
}

#[test]
fn head_gradients_pass_finite_differences() {
    let net = tiny_net(12);
    let feats = uniform(&mut rng(12), &[3, 4, 2, 2], -2.0, 2.0);
    let names = ["head.mean.weight", "head.mean.bias", "head.var.weight", "head.var.bias"];
    let inputs: Vec<DiffArray> = names.iter().map(|n| net.param(n).unwrap().array.clone()).collect();
    let report = alum_core::check_gradients(
        &inputs,
        |t, v| {
            let mut vars = vec![v[0]; net.params.len()];
            for (k, n) in names.iter().enumerate() {
                vars[net.params.iter().position(|p| p.name == *n).unwrap()] = v[k];
            }
            let bound = alum_core::network::BoundNetwork { net: &net, vars };
            let f = t.constant(feats.clone());
            let u = head_forward(t, &bound, f, &[0, 1, 2])?;
            let a = t.sum(u.mean);
            let b = t.sum(u.variance);
            t.add(a, b)
        },
        Default::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

/// One Adam step written out independently of the library optimizer.
fn hand_adam(params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64, wd: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &gi) in p.iter_mut().zip(g) {
            let m = 0.1 * gi / (1.0 - 0.9);
            let v = 0.001 * gi * gi / (1.0 - 0.999);
            *x -= lr * m / (v.sqrt() + 1e-8);
            *x *= 1.0 - lr * wd;
        }
    }
}

#[test]
fn degenerate_step_equals_plain_ce_step() {
    let ds = make_blobs(3, 5, 30, 1.0, 4).unwrap();
    let cfg = TrainConfig {
        lambda: 0.0,
        p: 0.0,
        compensation: false,
        hidden: Grid::new(4, 2, 2),
        embed_dim: 6,
        lr: 0.01,
        ..TrainConfig::default()
    };
    let net = Network::init(cfg.architecture(5, 3), 7).unwrap();
    let batch: Vec<usize> = (0..12).collect();
    let x = ds.batch_features(&batch);
    let labels = ds.batch_labels(&batch);

    // library path, with the plan forced to all-invalid
    let mut lib = net.clone();
    let (grads, _) = step_gradients(
        &lib,
        &x,
        &labels,
        &cfg,
        StepKey::new(RngKey::root(0), 0, 0),
        Some(&TripletPlan::degenerate(12)),
    )
    .unwrap();
    let mut opt = OptimizerState::new(&lib);
    alum_core::adam_update(&mut lib, &grads, &mut opt, alum_core::AdamSettings::from_config(&cfg)).unwrap();

    // hand-built plain CE on μ
    let mut t = Tape::new();
    let bound = net.bind(&mut t);
    let xv = t.constant(x);
    let feats = bound.plain_backbone(&mut t, xv).unwrap();
    let u = head_forward(&mut t, &bound, feats, &labels).unwrap();
    let logits = bound.logits(&mut t, u.mean).unwrap();
    let lse = t.logsumexp(logits).unwrap();
    let picked = t.pick(logits, &labels).unwrap();
    let nll = t.sub(lse, picked).unwrap();
    let s = t.sum(nll);
    let loss = t.scale(s, 1.0 / 12.0);
    t.backward(loss).unwrap();
    let hand_grads: Vec<Vec<f64>> = bound
        .vars
        .iter()
        .zip(&net.params)
        .map(|(&v, p)| t.grad(v).map_or(vec![0.0; p.array.len()], <[f64]>::to_vec))
        .collect();
    let mut hand: Vec<Vec<f64>> = net.params.iter().map(|p| p.array.values().to_vec()).collect();
    hand_adam(&mut hand, &hand_grads, cfg.lr, cfg.weight_decay);

    for (p, h) in lib.params.iter().zip(&hand) {
        assert!(max_abs_diff(p.array.values(), h) < 1e-10, "{}", p.name);
    }
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 3,
        batch_size: 32,
        n_train: 160,
        n_test: 80,
        embed_dim: 8,
        noise_ratio: 0.3,
        ..TrainConfig::default()
    }
}

#[test]
fn three_epoch_replay_is_bitwise() {
    let cfg = small_cfg(21);
    let a = alum_core::run_experiment(&cfg, alum_core::AblationFlags::FULL).unwrap();
    let b = alum_core::run_experiment(&cfg, alum_core::AblationFlags::FULL).unwrap();
    let bits = |n: &Network| {
        n.params
            .iter()
            .flat_map(|p| p.array.values().iter().map(|v| v.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.network), bits(&b.network));
    let c = alum_core::run_experiment(&small_cfg(22), alum_core::AblationFlags::FULL).unwrap();
    assert_ne!(bits(&a.network), bits(&c.network));
}

#[test]
fn config_echo_replays_the_run() {
    let cfg = small_cfg(5);
    let echo = cfg.to_echo_csv().unwrap();
    let replayed = TrainConfig::from_echo_csv(&echo).unwrap();
    let a = alum_core::run_experiment(&cfg, cfg.flags()).unwrap();
    let b = alum_core::run_experiment(&replayed, replayed.flags()).unwrap();
    assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());
}

#[test]
fn plain_ce_separates_clean_blobs() {
    let ds = make_blobs(4, 10, 3000, 1.0, 0).unwrap();
    let (train, test) = ds.split_at(2000);
    let cfg = TrainConfig::default().with_flags(alum_core::AblationFlags::BASELINE);
    let run = fit(&TrainConfig { epochs: 15, ..cfg }, &Datasets { train, test }).unwrap();
    assert!(run.test_accuracy() > 0.95, "{}", run.test_accuracy());
}

#[test]
fn held_out_domain_is_harder() {
    // four domains; train on three, test on the fourth
    // blob labels are `i % K`, so shuffle rows before the round-robin domain split
    let ds = make_blobs(4, 10, 4000, 1.0, 3).unwrap();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng(3));
    let shifted = shift_domain(&ds.subset(&order), 4, 17).unwrap();
    let domain = shifted.domain_id.clone().unwrap();
    let pick = |keep: &dyn Fn(usize) -> bool| -> LabeledDataset {
        let idx: Vec<usize> = (0..shifted.len()).filter(|&i| keep(domain[i])).collect();
        shifted.subset(&idx)
    };
    let train_all = pick(&|d| d < 3);
    let (train, in_domain) = train_all.split_at(2400);
    let held_out = pick(&|d| d == 3);
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    }
    .with_flags(alum_core::AblationFlags::BASELINE);
    let run = fit(
        &cfg,
        &Datasets {
            train,
            test: in_domain.clone(),
        },
    )
    .unwrap();
    let acc_in = evaluate(&run.network, &in_domain, &REJECTION_RATES, ScoreKind::Mean)
        .unwrap()
        .accuracy[0];
    let acc_out = evaluate(&run.network, &held_out, &REJECTION_RATES, ScoreKind::Mean)
        .unwrap()
        .accuracy[0];
    assert!(acc_in - acc_out > 0.0, "in {acc_in} out {acc_out}");
}

#[test]
fn exact_flip_count() {
    let ds = make_blobs(4, 3, 1000, 1.0, 1).unwrap();
    let noisy = corrupt_labels(&ds, &NoiseSpec::flip(0.3, 2)).unwrap();
    let clean = noisy.clean_labels.as_ref().unwrap();
    assert_eq!(noisy.labels.iter().zip(clean).filter(|(a, b)| a != b).count(), 300);
}
