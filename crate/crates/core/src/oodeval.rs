//! Out-of-distribution detection from per-member softmax scores:
//! thresholded detectors, ensemble aggregation and ranking metrics.
//! In-distribution inputs are the positive class throughout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{DibsError, Result};
use crate::uncertainty::csv_err;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Flag when at least half of the members flag.
    #[default]
    Majority,
    /// Flag when any member flags.
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub delta: Vec<f64>,
    pub aggregation: Aggregation,
}

impl DetectorConfig {
    pub fn uniform(k: usize, delta: f64, aggregation: Aggregation) -> Self {
        Self { delta: vec![delta; k], aggregation }
    }
}

/// 1 (out-of-distribution) iff `score <= delta`.
pub fn detect_member(score: f64, delta: f64) -> u8 {
    u8::from(score <= delta)
}

pub fn detect_ensemble(member_scores: &[f64], cfg: &DetectorConfig) -> Result<u8> {
    let k = member_scores.len();
    if k == 0 {
        return Err(DibsError::invalid("no member scores"));
    }
    if cfg.delta.len() != k {
        return Err(DibsError::shape(format!("{} thresholds for {k} members", cfg.delta.len())));
    }
    let flags: usize = member_scores.iter().zip(&cfg.delta).map(|(&s, &d)| detect_member(s, d) as usize).sum();
    Ok(match cfg.aggregation {
        Aggregation::Majority => u8::from(2 * flags >= k),
        Aggregation::Any => u8::from(flags >= 1),
    })
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(DibsError::invalid("scores contain NaN"));
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(s)
}

/// Mann-Whitney statistic: the fraction of (positive, negative) pairs where
/// the positive scores higher, ties counting one half.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(DibsError::invalid("auroc needs positive and negative scores"));
    }
    let neg = sorted(neg)?;
    let mut wins = 0.0;
    for &p in pos {
        if p.is_nan() {
            return Err(DibsError::invalid("scores contain NaN"));
        }
        let below = neg.partition_point(|&n| n < p);
        let upto = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (upto - below) as f64;
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Average precision with tied scores forming a single threshold.
pub fn aupr(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(DibsError::invalid("aupr needs positive scores"));
    }
    let mut items: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    if items.iter().any(|(s, _)| s.is_nan()) {
        return Err(DibsError::invalid("scores contain NaN"));
    }
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n_pos = pos.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    let mut i = 0;
    while i < items.len() {
        let t = items[i].0;
        while i < items.len() && items[i].0 == t {
            if items[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpf, fpf) = (tp as f64, fp as f64);
        let recall = tpf / n_pos;
        ap += (recall - prev_recall) * tpf / (tpf + fpf);
        prev_recall = recall;
    }
    Ok(ap)
}

/// The `1 - tpr_target` quantile (linear interpolation between order
/// statistics) of in-distribution scores.
pub fn select_delta(in_scores: &[f64], tpr_target: f64) -> Result<f64> {
    if in_scores.is_empty() {
        return Err(DibsError::invalid("no validation scores"));
    }
    if !(tpr_target > 0.0 && tpr_target < 1.0) {
        return Err(DibsError::invalid(format!("tpr target {tpr_target} not in (0, 1)")));
    }
    let v = sorted(in_scores)?;
    let pos = (1.0 - tpr_target) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Per-input per-member scores for in- and out-of-distribution inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OodScoreSet {
    pub in_scores: Vec<Vec<f64>>,
    pub out_scores: Vec<Vec<f64>>,
    k: usize,
}

impl OodScoreSet {
    pub fn new(in_scores: Vec<Vec<f64>>, out_scores: Vec<Vec<f64>>) -> Result<Self> {
        let k = in_scores.first().map(Vec::len).unwrap_or(0);
        if k == 0 || out_scores.is_empty() {
            return Err(DibsError::invalid("score sets must be nonempty"));
        }
        for row in in_scores.iter().chain(&out_scores) {
            if row.len() != k {
                return Err(DibsError::shape("member count differs between inputs"));
            }
            if row.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
                return Err(DibsError::invalid("scores must lie in (0, 1]"));
            }
        }
        Ok(Self { in_scores, out_scores, k })
    }

    pub fn members(&self) -> usize {
        self.k
    }

    fn column(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
        rows.iter().map(|r| r[k]).collect()
    }

    fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodReport {
    pub per_member_auroc: Vec<f64>,
    pub per_member_aupr: Vec<f64>,
    /// Metrics on the mean member score.
    pub aggregated_auroc: f64,
    pub aggregated_aupr: f64,
    pub delta: f64,
    /// Fraction of all inputs classified correctly by the thresholded detector.
    pub detection_accuracy_majority: f64,
    pub detection_accuracy_any: f64,
}

/// Ranking metrics per member and on the aggregated score, plus detector
/// accuracy at a shared threshold chosen from `val_in_scores` (pooled over
/// members) at `tpr_target`.
pub fn evaluate(set: &OodScoreSet, val_in_scores: &[Vec<f64>], tpr_target: f64) -> Result<OodReport> {
    let k = set.k;
    let mut per_member_auroc = Vec::with_capacity(k);
    let mut per_member_aupr = Vec::with_capacity(k);
    for m in 0..k {
        let (p, n) = (OodScoreSet::column(&set.in_scores, m), OodScoreSet::column(&set.out_scores, m));
        per_member_auroc.push(auroc(&p, &n)?);
        per_member_aupr.push(aupr(&p, &n)?);
    }
    let (p, n) = (OodScoreSet::mean(&set.in_scores), OodScoreSet::mean(&set.out_scores));
    let pooled: Vec<f64> = val_in_scores.iter().flatten().copied().collect();
    let delta = select_delta(&pooled, tpr_target)?;
    let accuracy = |aggregation| -> Result<f64> {
        let cfg = DetectorConfig::uniform(k, delta, aggregation);
        let mut correct = 0usize;
        for r in &set.in_scores {
            correct += usize::from(detect_ensemble(r, &cfg)? == 0);
        }
        for r in &set.out_scores {
            correct += usize::from(detect_ensemble(r, &cfg)? == 1);
        }
        Ok(correct as f64 / (set.in_scores.len() + set.out_scores.len()) as f64)
    };
    Ok(OodReport {
        per_member_auroc,
        per_member_aupr,
        aggregated_auroc: auroc(&p, &n)?,
        aggregated_aupr: aupr(&p, &n)?,
        delta,
        detection_accuracy_majority: accuracy(Aggregation::Majority)?,
        detection_accuracy_any: accuracy(Aggregation::Any)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset_pair: String,
    pub metric: String,
    pub value: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
}

impl OodReport {
    pub fn rows(&self, dataset_pair: &str, k: usize, seed: u64) -> Vec<ResultRow> {
        let row =
            |metric: String, value: f64| ResultRow { dataset_pair: dataset_pair.to_string(), metric, value, k, seed };
        let mut out = vec![
            row("auroc_aggregated".into(), self.aggregated_auroc),
            row("aupr_aggregated".into(), self.aggregated_aupr),
            row("auroc_member_mean".into(), mean(&self.per_member_auroc)),
            row("aupr_member_mean".into(), mean(&self.per_member_aupr)),
            row("delta".into(), self.delta),
            row("detection_accuracy_majority".into(), self.detection_accuracy_majority),
            row("detection_accuracy_any".into(), self.detection_accuracy_any),
        ];
        for (i, (a, p)) in self.per_member_auroc.iter().zip(&self.per_member_aupr).enumerate() {
            out.push(row(format!("auroc_member_{i}"), *a));
            out.push(row(format!("aupr_member_{i}"), *p));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Results CSV with a leading config digest comment line.
pub fn write_results<W: Write>(out: W, config_digest: &str, rows: &[ResultRow]) -> Result<()> {
    let mut out = out;
    writeln!(out, "# config_digest={config_digest}").map_err(|e| DibsError::io("results", e))?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DibsError::io("results", e))?;
    Ok(())
}
