#![allow(dead_code)]

use alum_core::{DiffArray, RngKey};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    RngKey::root(seed).child(0x7465_7374).rng()
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DiffArray {
    let n = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Population mean and std of a slice, textbook two-pass form with the same
/// variance smoothing as the engine.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, (var + 1e-12).sqrt())
}

/// All six layer statistics computed directly from `F: B×C×H×W`.
pub struct NaiveStats {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_sigma: Vec<f64>,
}

pub fn naive_stats(f: &DiffArray) -> NaiveStats {
    let sh = f.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let mut u = vec![0.0; b * c];
    let mut s = vec![0.0; b * c];
    for bi in 0..b {
        for ci in 0..c {
            let mut cell = Vec::with_capacity(h * w);
            for hi in 0..h {
                for wi in 0..w {
                    cell.push(f.values()[((bi * c + ci) * h + hi) * w + wi]);
                }
            }
            let (m, sd) = mean_std(&cell);
            u[bi * c + ci] = m;
            s[bi * c + ci] = sd;
        }
    }
    let col = |x: &[f64], ci: usize| (0..b).map(|bi| x[bi * c + ci]).collect::<Vec<_>>();
    let (mut mu, mut sigma_mu, mut sigma, mut sigma_sigma) = (vec![], vec![], vec![], vec![]);
    for ci in 0..c {
        let (m, sd) = mean_std(&col(&u, ci));
        mu.push(m);
        sigma_mu.push(sd);
        let (m, sd) = mean_std(&col(&s, ci));
        sigma.push(m);
        sigma_sigma.push(sd);
    }
    NaiveStats {
        u,
        s,
        mu,
        sigma_mu,
        sigma,
        sigma_sigma,
    }
}

/// Exhaustive hardest-positive / hardest-negative search, lowest index on ties.
pub fn brute_force_mining(means: &DiffArray, labels: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let b = labels.len();
    let dist = |i: usize, j: usize| alum_core::cosine_distance(means.row(i), means.row(j));
    let mut pos = vec![0; b];
    let mut neg = vec![0; b];
    let mut valid = vec![true; b];
    for i in 0..b {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..b {
            if j != i && labels[j] == labels[i] {
                let d = dist(i, j);
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((j, d));
                }
            }
        }
        pos[i] = best.map_or(i, |x| x.0);
        valid[i] &= best.is_some();
        let mut best: Option<(usize, f64)> = None;
        for j in 0..b {
            if labels[j] != labels[i] {
                let d = dist(i, j);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        neg[i] = best.map_or(i, |x| x.0);
        valid[i] &= best.is_some();
    }
    (pos, neg, valid)
}
