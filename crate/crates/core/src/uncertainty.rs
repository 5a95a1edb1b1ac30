//! Predictive distributions from a trained ensemble: sampled prediction
//! sets, posterior predictive, aleatoric variance, voting and softmax
//! scores.

use std::io::Write;

use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{DibsError, Result};
use crate::nets::{reparam_sample, EnsembleModel, ForwardCtx, GaussianLatent};
use crate::objectives::kl_gaussian_to_standard;
use crate::rng::standard_normal;
use crate::tensor::{Scalar, Tensor};

const EVAL_BATCH: usize = 256;

/// Class distributions for one input: `K` members times `M` draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    k: usize,
    m: usize,
    c: usize,
    probs: Vec<f64>,
}

impl PredictionSet {
    /// `probs` is laid out member-major, then draw, then class.
    pub fn new(k: usize, m: usize, c: usize, probs: Vec<f64>) -> Result<Self> {
        if k == 0 || m == 0 || c == 0 {
            return Err(DibsError::invalid("prediction set dimensions must be positive"));
        }
        if probs.len() != k * m * c {
            return Err(DibsError::shape(format!("{} values for a {k}x{m}x{c} set", probs.len())));
        }
        for row in probs.chunks(c) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(DibsError::invalid("prediction rows must be probability vectors"));
            }
        }
        Ok(Self { k, m, c, probs })
    }

    pub fn members(&self) -> usize {
        self.k
    }

    pub fn draws(&self) -> usize {
        self.m
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn row(&self, member: usize, draw: usize) -> &[f64] {
        let at = (member * self.m + draw) * self.c;
        &self.probs[at..at + self.c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.c)
    }

    /// Mean over the member's draws.
    pub fn member_mean(&self, member: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.c];
        for d in 0..self.m {
            for (o, &p) in out.iter_mut().zip(self.row(member, d)) {
                *o += p;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.m as f64);
        out
    }
}

/// Samples `m` latent draws per head for every row of `x`. Dropout layers,
/// if configured, draw a fresh mask per draw from the same stream.
pub fn predict_set<T: Scalar>(
    model: &EnsembleModel<T>,
    x: &Tensor<T>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PredictionSet>> {
    if model.config.dropout.is_none() {
        return predict_set_from_latents(model, &model.latents(x)?, m, rng);
    }
    if m < 1 {
        return Err(DibsError::invalid("need at least one draw per head"));
    }
    let mut sets: Vec<Vec<f64>> = vec![Vec::new(); x.rows()];
    let mut draws = Vec::with_capacity(m);
    for _ in 0..m {
        let latents = model.trace_latents(x, &mut ForwardCtx::with_dropout(rng))?.latents;
        let mut per_head = Vec::with_capacity(latents.len());
        for (head, lat) in latents.iter().enumerate() {
            let eps = standard_normal(rng, lat.mean.shape());
            let zt = reparam_sample(lat, &eps)?;
            per_head.push(model.trace_decode(head, &zt, &mut ForwardCtx::with_dropout(rng)).log_probs);
        }
        draws.push(per_head);
    }
    let (k, c) = (model.num_heads(), model.config.num_classes);
    for (r, set) in sets.iter_mut().enumerate() {
        for head in 0..k {
            for d in &draws {
                set.extend(d[head].row(r).iter().map(|lp| lp.to_f64().unwrap().exp()));
            }
        }
    }
    sets.into_iter().map(|v| PredictionSet::new(k, m, c, renormalize(v, c))).collect()
}

/// [`predict_set`] for given head latents (one per member, all `[B, d_h]`).
pub fn predict_set_from_latents<T: Scalar>(
    model: &EnsembleModel<T>,
    latents: &[GaussianLatent<T>],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PredictionSet>> {
    if m < 1 {
        return Err(DibsError::invalid("need at least one draw per head"));
    }
    if latents.len() != model.num_heads() {
        return Err(DibsError::shape("one latent per member required"));
    }
    let (k, c) = (model.num_heads(), model.config.num_classes);
    let b = latents[0].rows();
    let mut flat = vec![0.0; b * k * m * c];
    for draw in 0..m {
        for (head, lat) in latents.iter().enumerate() {
            let eps = standard_normal(rng, lat.mean.shape());
            let log_probs = model.decode(head, &reparam_sample(lat, &eps)?)?;
            for r in 0..b {
                let at = ((r * k + head) * m + draw) * c;
                for (o, &lp) in flat[at..at + c].iter_mut().zip(log_probs.row(r)) {
                    *o = lp.to_f64().unwrap().exp();
                }
            }
        }
    }
    flat.chunks(k * m * c).map(|chunk| PredictionSet::new(k, m, c, renormalize(chunk.to_vec(), c))).collect()
}

/// Removes float rounding in each row so that sums are 1 to machine precision.
fn renormalize(mut v: Vec<f64>, c: usize) -> Vec<f64> {
    for row in v.chunks_mut(c) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    v
}

/// Elementwise mean over all `K * M` rows.
pub fn posterior_predictive(ps: &PredictionSet) -> Vec<f64> {
    let mut out = vec![0.0; ps.c];
    for row in ps.rows() {
        for (o, &p) in out.iter_mut().zip(row) {
            *o += p;
        }
    }
    let n = (ps.k * ps.m) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Per-class population variance over all `K * M` rows.
pub fn aleatoric_variance(ps: &PredictionSet) -> Result<Vec<f64>> {
    let n = ps.k * ps.m;
    if n < 2 {
        return Err(DibsError::invalid("variance needs at least two rows"));
    }
    let mean = posterior_predictive(ps);
    let mut out = vec![0.0; ps.c];
    for row in ps.rows() {
        for ((o, &p), &mu) in out.iter_mut().zip(row).zip(&mean) {
            *o += (p - mu) * (p - mu);
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Most frequent class among `votes`; ties go to the lowest class.
pub fn mode(votes: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// One vote per member: the argmax of its draw-averaged distribution.
pub fn member_votes(ps: &PredictionSet) -> Vec<usize> {
    (0..ps.k).map(|k| argmax(&ps.member_mean(k))).collect()
}

pub fn modal_prediction(ps: &PredictionSet) -> usize {
    mode(&member_votes(ps), ps.c)
}

/// `1 - (share of the most common vote)`; zero when all members agree.
pub fn disagreement(ps: &PredictionSet) -> f64 {
    let votes = member_votes(ps);
    let top = mode(&votes, ps.c);
    let share = votes.iter().filter(|&&v| v == top).count() as f64 / votes.len() as f64;
    1.0 - share
}

/// Class probabilities of every member at the latent mean, `[K][B, C]`.
pub fn mean_latent_probs<T: Scalar>(model: &EnsembleModel<T>, x: &Tensor<T>) -> Result<Vec<Tensor<f64>>> {
    let latents = model.latents(x)?;
    latents.iter().enumerate().map(|(i, lat)| Ok(model.decode(i, &lat.mean)?.cast::<f64>().map(f64::exp))).collect()
}

/// Maximum class probability of member `k` at the latent mean, per row.
pub fn softmax_score<T: Scalar>(model: &EnsembleModel<T>, x: &Tensor<T>, k: usize) -> Result<Vec<f64>> {
    if k >= model.num_heads() {
        return Err(DibsError::OutOfRange { what: "members", index: k, len: model.num_heads() });
    }
    let lat = &model.latents(x)?[k];
    let probs = model.decode(k, &lat.mean)?.cast::<f64>().map(f64::exp);
    Ok((0..probs.rows()).map(|r| probs.row(r).iter().cloned().fold(0.0, f64::max)).collect())
}

/// Softmax scores `[input][member]` over a whole dataset.
pub fn member_scores<T: Scalar>(model: &EnsembleModel<T>, ds: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ds.len());
    for idx in batches(ds.len()) {
        let probs = mean_latent_probs(model, &ds.batch::<T>(&idx))?;
        for r in 0..idx.len() {
            out.push(probs.iter().map(|p| p.row(r).iter().cloned().fold(0.0, f64::max)).collect());
        }
    }
    Ok(out)
}

fn batches(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_BATCH).map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

/// Deterministic ensemble prediction: each member votes at its latent mean.
pub fn predict_classes<T: Scalar>(model: &EnsembleModel<T>, ds: &LabeledDataset) -> Result<Vec<usize>> {
    let c = model.config.num_classes;
    let mut out = Vec::with_capacity(ds.len());
    for idx in batches(ds.len()) {
        let probs = mean_latent_probs(model, &ds.batch::<T>(&idx))?;
        for r in 0..idx.len() {
            let votes: Vec<usize> = probs.iter().map(|p| argmax(p.row(r))).collect();
            out.push(mode(&votes, c));
        }
    }
    Ok(out)
}

pub fn accuracy<T: Scalar>(model: &EnsembleModel<T>, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(DibsError::invalid("accuracy of an empty dataset"));
    }
    if ds.num_classes() > model.config.num_classes {
        return Err(DibsError::invalid(format!(
            "dataset has {} classes, model predicts {}",
            ds.num_classes(),
            model.config.num_classes
        )));
    }
    let pred = predict_classes(model, ds)?;
    let hits = pred.iter().zip(ds.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Sampled posterior predictive over a dataset, one distribution per input.
pub fn posterior_predictive_dataset<T: Scalar>(
    model: &EnsembleModel<T>,
    ds: &LabeledDataset,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ds.len());
    for idx in batches(ds.len()) {
        for ps in predict_set(model, &ds.batch::<T>(&idx), m, rng)? {
            out.push(posterior_predictive(&ps));
        }
    }
    Ok(out)
}

/// Largest posterior predictive probability per input, from `m` draws per member.
pub fn predictive_scores<T: Scalar>(
    model: &EnsembleModel<T>,
    ds: &LabeledDataset,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    Ok(posterior_predictive_dataset(model, ds, m, rng)?.iter().map(|p| p.iter().cloned().fold(0.0, f64::max)).collect())
}

/// Mean over inputs and unordered head pairs of the closed-form squared
/// 2-Wasserstein distance `|mu_i - mu_j|^2 + |sigma_i - sigma_j|^2`.
pub fn mean_pairwise_w2<T: Scalar>(model: &EnsembleModel<T>, ds: &LabeledDataset) -> Result<f64> {
    let k = model.num_heads();
    if k < 2 || ds.is_empty() {
        return Err(DibsError::invalid("pairwise distance needs two heads and a nonempty dataset"));
    }
    let mut total = 0.0;
    for idx in batches(ds.len()) {
        let lat = model.latents(&ds.batch::<T>(&idx))?;
        for i in 0..k {
            for j in i + 1..k {
                for (a, b) in [(&lat[i].mean, &lat[j].mean), (&lat[i].std, &lat[j].std)] {
                    total +=
                        a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).to_f64().unwrap().powi(2)).sum::<f64>();
                }
            }
        }
    }
    Ok(total / (ds.len() * k * (k - 1) / 2) as f64)
}

/// Mean over inputs and heads of the KL divergence from each head's
/// latent to the standard normal.
pub fn mean_kl<T: Scalar>(model: &EnsembleModel<T>, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(DibsError::invalid("mean KL of an empty dataset"));
    }
    let mut total = 0.0;
    for idx in batches(ds.len()) {
        for lat in model.latents(&ds.batch::<T>(&idx))? {
            total += kl_gaussian_to_standard(&lat)?.iter().sum::<f64>();
        }
    }
    Ok(total / (ds.len() * model.num_heads()) as f64)
}

/// Writes per-input per-member scores as `input_id,member_id,score` rows
/// preceded by comment lines naming the model digest and dataset.
pub fn write_prediction_dump<W: Write>(out: W, model_digest: &str, dataset: &str, scores: &[Vec<f64>]) -> Result<()> {
    let mut out = out;
    let io = |e: std::io::Error| DibsError::io("prediction dump", e);
    writeln!(out, "# model_digest={model_digest}").map_err(io)?;
    writeln!(out, "# dataset={dataset}").map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["input_id", "member_id", "score"]).map_err(csv_err)?;
    for (i, row) in scores.iter().enumerate() {
        for (k, s) in row.iter().enumerate() {
            w.write_record([i.to_string(), k.to_string(), format!("{s:e}")]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> DibsError {
    DibsError::InvalidArgument(format!("csv: {e}"))
}

/// Inverse of [`write_prediction_dump`]: `(model_digest, dataset, scores)`.
pub fn read_prediction_dump(text: &str) -> Result<(String, String, Vec<Vec<f64>>)> {
    let mut digest = String::new();
    let mut dataset = String::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(v) = line.strip_prefix("# model_digest=") {
            digest = v.to_string();
        } else if let Some(v) = line.strip_prefix("# dataset=") {
            dataset = v.to_string();
        }
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut scores: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let parse = |i: usize| rec.get(i).ok_or_else(|| DibsError::invalid("short prediction dump row"));
        let input: usize = parse(0)?.parse().map_err(|_| DibsError::invalid("bad input_id"))?;
        let member: usize = parse(1)?.parse().map_err(|_| DibsError::invalid("bad member_id"))?;
        let score: f64 = parse(2)?.parse().map_err(|_| DibsError::invalid("bad score"))?;
        if input > scores.len() || (input == scores.len()) != (member == 0) {
            return Err(DibsError::invalid("prediction dump rows out of order"));
        }
        if input == scores.len() {
            scores.push(Vec::new());
        }
        if member != scores[input].len() {
            return Err(DibsError::invalid("prediction dump members out of order"));
        }
        scores[input].push(score);
    }
    Ok((digest, dataset, scores))
}
