//! Loss functions: the variational bottleneck objective, the pairwise
//! adversarial game and the output-diversity baseline.

mod pairs;

pub use pairs::{
    build_pairs, build_pairs_from_latents, discriminator_loss, discriminator_loss_grad, generator_backward,
    generator_loss, generator_loss_grad, Member, PairBatch, PairOptions, PairSource,
};

use serde::{Deserialize, Serialize};

use crate::error::{DibsError, Result};
use crate::nets::{reparam_sample, EnsembleModel, ForwardCtx, GaussianLatent, ParamGrad};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// KL term carried in the loss and its gradient.
    Explicit,
    /// KL term reported but left to the adversarial prior-matching terms.
    #[default]
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub adv_weight: f64,
}

impl LossWeights {
    /// `beta_i = beta`, `alpha_i = 1 - beta` for all `k` heads.
    pub fn uniform(k: usize, beta: f64, adv_weight: f64) -> Self {
        Self { alpha: vec![1.0 - beta; k], beta: vec![beta; k], adv_weight }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.alpha.len() != k || self.beta.len() != k {
            return Err(DibsError::invalid(format!(
                "loss weights sized {}/{} for {k} heads",
                self.alpha.len(),
                self.beta.len()
            )));
        }
        if !self.alpha.iter().chain(&self.beta).all(|v| v.is_finite()) || !self.adv_weight.is_finite() {
            return Err(DibsError::invalid("loss weights must be finite"));
        }
        Ok(())
    }
}

/// `0.5 * sum_d (mu^2 + sigma^2 - 1 - 2 ln sigma)` per row.
pub fn kl_gaussian_to_standard<T: Scalar>(lat: &GaussianLatent<T>) -> Result<Vec<f64>> {
    let d = lat.dim();
    let mut out = Vec::with_capacity(lat.rows());
    for r in 0..lat.rows() {
        let mut kl = 0.0;
        for j in 0..d {
            let mu = lat.mean.row(r)[j].to_f64().unwrap();
            let sd = lat.std.row(r)[j].to_f64().unwrap();
            if !(sd > 0.0) {
                return Err(DibsError::invalid(format!("non-positive std {sd} at row {r}")));
            }
            kl += (mu * mu + sd * sd - 1.0 - 2.0 * sd.ln()).max(0.0);
        }
        out.push(0.5 * kl);
    }
    Ok(out)
}

/// Mean negative log-likelihood of `labels` under row log-probabilities.
pub fn nll<T: Scalar>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (b, c) = (log_probs.rows(), log_probs.row_len());
    if labels.len() != b {
        return Err(DibsError::shape(format!("{} labels for {b} rows", labels.len())));
    }
    if b == 0 {
        return Err(DibsError::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(DibsError::OutOfRange { what: "label", index: y, len: c });
        }
        total -= log_probs.row(r)[y].to_f64().unwrap();
    }
    Ok(total / b as f64)
}

fn pair_count(k: usize) -> Result<usize> {
    if k < 2 {
        return Err(DibsError::invalid(format!("diversity loss needs at least two heads, got {k}")));
    }
    Ok(k * (k - 1) / 2)
}

/// Negative mean, over unordered head pairs and batch rows, of the squared
/// distance between the heads' outputs for the same input.
pub fn abe_diversity_loss<T: Scalar>(outputs: &[Tensor<T>]) -> Result<f64> {
    Ok(abe_diversity_grad(outputs)?.0)
}

/// [`abe_diversity_loss`] with its gradient w.r.t. each head's outputs.
pub fn abe_diversity_grad<T: Scalar>(outputs: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    let pairs = pair_count(outputs.len())?;
    let shape = outputs[0].shape();
    if outputs.iter().any(|o| o.shape() != shape) {
        return Err(DibsError::shape("head outputs differ in shape"));
    }
    let b = outputs[0].rows().max(1);
    let norm = 1.0 / (pairs * b) as f64;
    let mut grads: Vec<Tensor<T>> = outputs.iter().map(|o| Tensor::zeros(o.shape())).collect();
    let mut total = 0.0;
    let g = T::lit(-2.0 * norm);
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            for (p, (&a, &c)) in outputs[i].data().iter().zip(outputs[j].data()).enumerate() {
                let diff = a - c;
                total += (diff * diff).to_f64().unwrap();
                grads[i].data_mut()[p] += g * diff;
                grads[j].data_mut()[p] -= g * diff;
            }
        }
    }
    Ok((-total * norm, grads))
}

/// Loss terms of one bottleneck evaluation, in minimization sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VibBreakdown {
    /// Mean NLL per head.
    pub nll: Vec<f64>,
    /// Mean KL to the standard normal per head (reported in both modes).
    pub kl: Vec<f64>,
    /// `alpha_i * nll_i`.
    pub alpha_terms: Vec<f64>,
    /// `beta_i * kl_i` in explicit mode, zero otherwise.
    pub beta_terms: Vec<f64>,
    /// `adv_weight * abe_diversity_loss` when the output-diversity term is on.
    pub abe_term: Option<f64>,
    pub total: f64,
}

impl VibBreakdown {
    fn assemble(nll: Vec<f64>, kl: Vec<f64>, w: &LossWeights, mode: KlMode, abe_term: Option<f64>) -> Self {
        let alpha_terms: Vec<f64> = nll.iter().zip(&w.alpha).map(|(n, a)| a * n).collect();
        let beta_terms: Vec<f64> = match mode {
            KlMode::Explicit => kl.iter().zip(&w.beta).map(|(k, b)| b * k).collect(),
            KlMode::Adversarial => vec![0.0; kl.len()],
        };
        let total = alpha_terms.iter().sum::<f64>() + beta_terms.iter().sum::<f64>() + abe_term.unwrap_or(0.0);
        Self { nll, kl, alpha_terms, beta_terms, abe_term, total }
    }
}

fn check_vib_inputs<T: Scalar>(
    model: &EnsembleModel<T>,
    labels: &[usize],
    weights: &LossWeights,
    eps: &[Tensor<T>],
    x: &Tensor<T>,
) -> Result<()> {
    let k = model.num_heads();
    weights.validate(k)?;
    if x.rows() == 0 {
        return Err(DibsError::invalid("empty batch"));
    }
    if labels.len() != x.rows() {
        return Err(DibsError::shape(format!("{} labels for {} inputs", labels.len(), x.rows())));
    }
    if eps.len() != k {
        return Err(DibsError::invalid(format!("{} noise draws for {k} heads", eps.len())));
    }
    Ok(())
}

/// Bottleneck loss with one noise draw per head, evaluated without dropout.
pub fn vib_loss<T: Scalar>(
    model: &EnsembleModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    weights: &LossWeights,
    eps: &[Tensor<T>],
    kl_mode: KlMode,
) -> Result<VibBreakdown> {
    check_vib_inputs(model, labels, weights, eps, x)?;
    let latents = model.latents(x)?;
    let mut nlls = Vec::with_capacity(latents.len());
    let mut kls = Vec::with_capacity(latents.len());
    for (i, lat) in latents.iter().enumerate() {
        let zt = reparam_sample(lat, &eps[i])?;
        nlls.push(nll(&model.decode(i, &zt)?, labels)?);
        kls.push(mean(&kl_gaussian_to_standard(lat)?));
    }
    Ok(VibBreakdown::assemble(nlls, kls, weights, kl_mode, None))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Bottleneck loss and its gradient w.r.t. all model parameters. With
/// `abe` set, `adv_weight * abe_diversity_loss` over the heads' predicted
/// class probabilities is added.
#[allow(clippy::too_many_arguments)]
pub fn vib_loss_grad<T: Scalar>(
    model: &EnsembleModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    weights: &LossWeights,
    eps: &[Tensor<T>],
    kl_mode: KlMode,
    abe: bool,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(VibBreakdown, ParamGrad<T>)> {
    check_vib_inputs(model, labels, weights, eps, x)?;
    let k = model.num_heads();
    let b = x.rows();
    let inv_b = T::lit(1.0 / b as f64);
    let trace = model.trace_latents(x, ctx)?;
    let mut decodes = Vec::with_capacity(k);
    let mut probs = Vec::with_capacity(k);
    let mut nlls = Vec::with_capacity(k);
    let mut kls = Vec::with_capacity(k);
    for (i, lat) in trace.latents.iter().enumerate() {
        let zt = reparam_sample(lat, &eps[i])?;
        let dt = model.trace_decode(i, &zt, ctx);
        nlls.push(nll(&dt.log_probs, labels)?);
        kls.push(mean(&kl_gaussian_to_standard(lat)?));
        probs.push(dt.log_probs.map(|v| v.exp()));
        decodes.push(dt);
    }
    let mut d_logits: Vec<Tensor<T>> = Vec::with_capacity(k);
    for (i, p) in probs.iter().enumerate() {
        let mut g = p.clone();
        let a = T::lit(weights.alpha[i]) * inv_b;
        for (r, &y) in labels.iter().enumerate() {
            let row = g.row_mut(r);
            row[y] -= T::one();
            row.iter_mut().for_each(|v| *v *= a);
        }
        d_logits.push(g);
    }
    let abe_term = if abe {
        let (loss, dp) = abe_diversity_grad(&probs)?;
        let w = T::lit(weights.adv_weight);
        for i in 0..k {
            // softmax Jacobian: dl = p * (dp - <dp, p>)
            for r in 0..b {
                let (p, g) = (probs[i].row(r), dp[i].row(r));
                let dot = p.iter().zip(g).fold(T::zero(), |s, (&a, &c)| s + a * c);
                let out = d_logits[i].row_mut(r);
                for c in 0..p.len() {
                    out[c] += w * p[c] * (g[c] - dot);
                }
            }
        }
        Some(weights.adv_weight * loss)
    } else {
        None
    };
    let mut grads = ParamGrad::zeros_for(model);
    let mut d_mean = Vec::with_capacity(k);
    let mut d_std = Vec::with_capacity(k);
    for (i, dl) in d_logits.into_iter().enumerate() {
        let dzt = model.decode_backward(i, &decodes[i], dl, &mut grads);
        let lat = &trace.latents[i];
        let mut dm = dzt.clone();
        let mut ds = dzt;
        for (v, &e) in ds.data_mut().iter_mut().zip(eps[i].data()) {
            *v *= e;
        }
        if kl_mode == KlMode::Explicit {
            let s = T::lit(weights.beta[i]) * inv_b;
            for (v, &mu) in dm.data_mut().iter_mut().zip(lat.mean.data()) {
                *v += s * mu;
            }
            for (v, &sd) in ds.data_mut().iter_mut().zip(lat.std.data()) {
                *v += s * (sd - T::one() / sd);
            }
        }
        d_mean.push(Some(dm));
        d_std.push(Some(ds));
    }
    model.latent_backward(&trace, &d_mean, &d_std, &mut grads);
    Ok((VibBreakdown::assemble(nlls, kls, weights, kl_mode, abe_term), grads))
}
