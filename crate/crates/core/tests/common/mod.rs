//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's numerics: the loss oracle enumerates
//! terms with plain `exp`, the metric references count pairs and thresholds
//! directly.

#![allow(dead_code)]

use histocon::math::{EmbeddingBatch, Role};
use histocon::sampling::SampleSelection;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps the oracle free of distribution crates
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Random contrastive instance: query, key rows and a disjoint selection
/// excluding the matched index.
#[derive(Debug, Clone)]
pub struct Instance {
    pub q: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub matched: usize,
    pub positives: Vec<usize>,
    pub boosted: Vec<usize>,
    pub tau: f64,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng, with_pos: bool, with_neg: bool) -> Self {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=16);
        let q = gaussian_vec(rng, d);
        let keys: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, d)).collect();
        let matched = rng.random_range(0..n);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != matched).collect();
        others.shuffle(rng);
        let s = if with_pos {
            rng.random_range(0..=others.len())
        } else {
            0
        };
        let positives: Vec<usize> = others[..s].to_vec();
        let rest = others.len() - s;
        let t = if with_neg { rng.random_range(0..=rest) } else { 0 };
        let boosted: Vec<usize> = others[s..s + t].to_vec();
        let tau = rng.random_range(0.05..1.0);
        Self {
            q,
            keys,
            matched,
            positives,
            boosted,
            tau,
        }
    }

    pub fn key_batch(&self) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(&self.keys, Role::Key).unwrap()
    }

    pub fn selection(&self) -> SampleSelection {
        SampleSelection {
            positives: self.positives.clone(),
            negatives_boosted: self.boosted.clone(),
            epoch: 0,
        }
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `-ln(Σ_A ψ / (Σ_A ψ + Σ_{j∉A} ψ + Σ_B ψ))` by direct enumeration.
pub fn naive_loss(q: &[f64], keys: &[Vec<f64>], matched: usize, pos: &[usize], boosted: &[usize], tau: f64) -> f64 {
    let psi = |j: usize| (cos(q, &keys[j]) / tau).exp();
    let mut numerator = psi(matched);
    for &j in pos {
        numerator += psi(j);
    }
    let mut rest = 0.0;
    for j in 0..keys.len() {
        if j != matched && !pos.contains(&j) {
            rest += psi(j);
        }
    }
    for &j in boosted {
        rest += psi(j);
    }
    // -ln(num / (num + rest)), written to avoid cancellation for tiny losses
    (rest / numerator).ln_1p()
}

pub fn naive_instance_loss(inst: &Instance) -> f64 {
    naive_loss(
        &inst.q,
        &inst.keys,
        inst.matched,
        &inst.positives,
        &inst.boosted,
        inst.tau,
    )
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub fn rel_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Pairwise AUROC: each (positive, negative) pair scores 1, 1/2 or 0.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            total += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    total / pairs
}

/// AP from a full rescan at every distinct threshold.
pub fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|l| **l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let (mut tp, mut called) = (0.0, 0.0);
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                called += 1.0;
                if *l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / p;
        ap += (recall - prev_recall) * (tp / called);
        prev_recall = recall;
    }
    ap
}
