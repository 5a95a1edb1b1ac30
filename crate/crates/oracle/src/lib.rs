//! Brute-force reference computations.
//!
//! Everything here is written for clarity over speed and deliberately shares
//! no code with `dibs-core`: tests compare the production paths against these
//! functions, so they must not be built on top of each other.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A diagonal Gaussian given by its mean and standard deviation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), std.len(), "mean/std length mismatch");
        Self { mean, std }
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.std)
            .zip(z)
            .map(|((m, s), x)| {
                let u = (x - m) / s;
                -0.5 * u * u - s.ln() - 0.5 * ln_2pi
            })
            .sum()
    }
}

/// Mutual information (nats) of a discrete joint probability table.
///
/// Returns `None` when an entry is negative or the table does not sum to one
/// within `1e-9`.
pub fn discrete_mi(joint: &[Vec<f64>]) -> Option<f64> {
    let rows = joint.len();
    if rows == 0 {
        return None;
    }
    let cols = joint[0].len();
    if joint.iter().any(|r| r.len() != cols) {
        return None;
    }
    let mut total = 0.0;
    for row in joint {
        for &p in row {
            if !(p >= 0.0) {
                return None;
            }
            total += p;
        }
    }
    if (total - 1.0).abs() > 1e-9 {
        return None;
    }
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (px[i] * py[j])).ln();
            }
        }
    }
    // Independent tables land on tiny negative values from rounding.
    Some(mi.max(0.0))
}

/// Monte-Carlo estimate of KL(q || N(0, I)) and its standard error.
pub fn mc_kl(q: &DiagGaussian, n_samples: usize, seed: u64) -> (f64, f64) {
    assert!(n_samples >= 1);
    let prior = DiagGaussian::new(vec![0.0; q.mean.len()], vec![1.0; q.mean.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; q.mean.len()];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        for (d, zd) in z.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *zd = q.mean[d] + q.std[d] * e;
        }
        let term = q.log_density(&z) - prior.log_density(&z);
        sum += term;
        sum_sq += term * term;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Central finite-difference gradient of `loss` at `params`.
///
/// Returns `None` if the loss is non-finite at any perturbed point.
pub fn fd_gradient<F>(mut loss: F, params: &[f64], step: f64) -> Option<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return None;
        }
        grad.push((up - down) / (2.0 * step));
    }
    Some(grad)
}

/// Squared 2-Wasserstein distance between two diagonal Gaussians.
pub fn gaussian_w2(a: &DiagGaussian, b: &DiagGaussian) -> Option<f64> {
    if a.mean.len() != b.mean.len() {
        return None;
    }
    let mut acc = 0.0;
    for d in 0..a.mean.len() {
        acc += (a.mean[d] - b.mean[d]).powi(2) + (a.std[d] - b.std[d]).powi(2);
    }
    Some(acc)
}

/// AUROC by enumerating every (positive, negative) pair; ties count one half.
pub fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Average precision by sweeping every distinct score as a threshold.
///
/// For each threshold t (descending), all items with score >= t are
/// predicted positive; the recall gained at t is weighted by the precision
/// at t.
pub fn brute_aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = pos.len() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / n_pos;
        if tp + fp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    ap
}

/// Majority vote over binary detections by explicit counting.
pub fn brute_majority(votes: &[u8]) -> u8 {
    let ones = votes.iter().filter(|&&v| v == 1).count();
    let zeros = votes.len() - ones;
    u8::from(ones >= zeros)
}

/// Most frequent vote; ties go to the smallest class index.
pub fn brute_mode(votes: &[usize], num_classes: usize) -> usize {
    let mut best = 0;
    let mut best_count = 0;
    for c in 0..num_classes {
        let count = votes.iter().filter(|&&v| v == c).count();
        if count > best_count {
            best = c;
            best_count = count;
        }
    }
    best
}

/// Linear-interpolated quantile of a sample (type 7, as in numpy's default).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
