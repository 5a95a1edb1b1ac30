use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DibsError, Result};
use crate::nets::{Discriminator, EnsembleModel, GaussianLatent, ParamGrad};
use crate::rng::standard_normal;
use crate::tensor::{Scalar, Tensor};

/// Where a latent pair was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSource {
    PriorPrior,
    PriorHead(usize),
    SameHead(usize),
    /// Always `i != j`.
    CrossHead(usize, usize),
}

impl PairSource {
    fn kind(&self) -> usize {
        match self {
            PairSource::PriorPrior => 0,
            PairSource::PriorHead(_) => 1,
            PairSource::SameHead(_) => 2,
            PairSource::CrossHead(..) => 3,
        }
    }
}

/// One pair member: a prior draw, or a reparameterized draw of head `head`
/// at input row `row` with noise row `row` of the batch's noise tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Member {
    Prior,
    Head { head: usize, row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairOptions {
    /// Emit every ordered cross-head pair per row instead of one random pair.
    #[serde(default)]
    pub enumerate_cross: bool,
    /// Draw the second member of head-head pairs at a random other input row.
    #[serde(default)]
    pub cross_input: bool,
}

#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    pub z1: Tensor<T>,
    pub z2: Tensor<T>,
    pub sources: Vec<PairSource>,
    members: Vec<(Member, Member)>,
    /// Noise behind each member's draw (the draw itself for prior members).
    eps1: Tensor<T>,
    eps2: Tensor<T>,
    num_heads: usize,
    batch: usize,
}

impl<T: Scalar> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn count(&self, kind: fn(&PairSource) -> bool) -> usize {
        self.sources.iter().filter(|s| kind(s)).count()
    }

    /// The same pairs with members swapped.
    pub fn swapped(&self) -> Self {
        Self {
            z1: self.z2.clone(),
            z2: self.z1.clone(),
            sources: self.sources.clone(),
            members: self.members.iter().map(|&(a, b)| (b, a)).collect(),
            eps1: self.eps2.clone(),
            eps2: self.eps1.clone(),
            num_heads: self.num_heads,
            batch: self.batch,
        }
    }

    /// Maps gradients w.r.t. the pair members onto per-head gradients
    /// w.r.t. latent mean and std. Prior members absorb nothing.
    #[allow(clippy::type_complexity)]
    pub fn route(
        &self,
        dz1: &Tensor<T>,
        dz2: &Tensor<T>,
        head_dim: usize,
    ) -> (Vec<Option<Tensor<T>>>, Vec<Option<Tensor<T>>>) {
        let mut d_mean: Vec<Option<Tensor<T>>> = vec![None; self.num_heads];
        let mut d_std: Vec<Option<Tensor<T>>> = vec![None; self.num_heads];
        for (p, (m1, m2)) in self.members.iter().enumerate() {
            for (member, dz, eps) in [(m1, dz1, &self.eps1), (m2, dz2, &self.eps2)] {
                if let Member::Head { head, row } = *member {
                    let dm = d_mean[head].get_or_insert_with(|| Tensor::zeros(&[self.batch, head_dim]));
                    for (a, &g) in dm.row_mut(row).iter_mut().zip(dz.row(p)) {
                        *a += g;
                    }
                    let ds = d_std[head].get_or_insert_with(|| Tensor::zeros(&[self.batch, head_dim]));
                    for ((a, &g), &e) in ds.row_mut(row).iter_mut().zip(dz.row(p)).zip(eps.row(p)) {
                        *a += g * e;
                    }
                }
            }
        }
        (d_mean, d_std)
    }
}

/// Builds one pair of every source kind per batch row from head latents
/// evaluated on the same input batch. The prior is the standard normal.
pub fn build_pairs_from_latents<T: Scalar>(
    latents: &[GaussianLatent<T>],
    opts: PairOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch<T>> {
    let k = latents.len();
    if k < 2 {
        return Err(DibsError::invalid(format!("cross-head pairs need at least two heads, got {k}")));
    }
    let (b, d) = (latents[0].rows(), latents[0].dim());
    if b == 0 {
        return Err(DibsError::invalid("empty batch"));
    }
    if latents.iter().any(|l| l.rows() != b || l.dim() != d) {
        return Err(DibsError::shape("head latents differ in shape"));
    }
    let cross_per_row = if opts.enumerate_cross { k * (k - 1) } else { 1 };
    let n = b * (3 + cross_per_row);
    let mut sources = Vec::with_capacity(n);
    let mut members = Vec::with_capacity(n);
    let pick_row = |rng: &mut ChaCha8Rng, r: usize| if opts.cross_input { rng.random_range(0..b) } else { r };
    for _ in 0..b {
        sources.push(PairSource::PriorPrior);
        members.push((Member::Prior, Member::Prior));
    }
    for r in 0..b {
        let i = rng.random_range(0..k);
        sources.push(PairSource::PriorHead(i));
        members.push((Member::Prior, Member::Head { head: i, row: r }));
    }
    for r in 0..b {
        let i = rng.random_range(0..k);
        let r2 = pick_row(rng, r);
        sources.push(PairSource::SameHead(i));
        members.push((Member::Head { head: i, row: r }, Member::Head { head: i, row: r2 }));
    }
    for r in 0..b {
        let mut emit = |i: usize, j: usize, r2: usize| {
            sources.push(PairSource::CrossHead(i, j));
            members.push((Member::Head { head: i, row: r }, Member::Head { head: j, row: r2 }));
        };
        if opts.enumerate_cross {
            for i in 0..k {
                for j in (0..k).filter(|&j| j != i) {
                    let r2 = pick_row(rng, r);
                    emit(i, j, r2);
                }
            }
        } else {
            let i = rng.random_range(0..k);
            let j = (i + 1 + rng.random_range(0..k - 1)) % k;
            let r2 = pick_row(rng, r);
            emit(i, j, r2);
        }
    }
    let eps1: Tensor<T> = standard_normal(rng, &[n, d]);
    let eps2: Tensor<T> = standard_normal(rng, &[n, d]);
    let draw = |m: Member, eps: &[T], out: &mut [T]| match m {
        Member::Prior => out.copy_from_slice(eps),
        Member::Head { head, row } => {
            let (mu, sd) = (latents[head].mean.row(row), latents[head].std.row(row));
            for j in 0..d {
                out[j] = mu[j] + sd[j] * eps[j];
            }
        }
    };
    let mut z1 = Tensor::zeros(&[n, d]);
    let mut z2 = Tensor::zeros(&[n, d]);
    for (p, &(m1, m2)) in members.iter().enumerate() {
        draw(m1, eps1.row(p), z1.row_mut(p));
        draw(m2, eps2.row(p), z2.row_mut(p));
    }
    Ok(PairBatch { z1, z2, sources, members, eps1, eps2, num_heads: k, batch: b })
}

/// [`build_pairs_from_latents`] on the model's head latents for `x`.
pub fn build_pairs<T: Scalar>(
    model: &EnsembleModel<T>,
    x: &Tensor<T>,
    opts: PairOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch<T>> {
    build_pairs_from_latents(&model.latents(x)?, opts, rng)
}

/// Per-kind row counts, erroring if any of the `needed` kinds is absent.
pub(super) fn kind_counts<T>(pairs: &PairBatch<T>, needed: &[usize]) -> Result<[usize; 4]> {
    let mut counts = [0usize; 4];
    for s in &pairs.sources {
        counts[s.kind()] += 1;
    }
    const NAMES: [&str; 4] = ["prior_prior", "prior_head", "same_head", "cross_head"];
    for &k in needed {
        if counts[k] == 0 {
            return Err(DibsError::invalid(format!("pair batch has no {} pairs", NAMES[k])));
        }
    }
    Ok(counts)
}

/// Per-pair coefficients on `ln D` and `ln(1 - D)` making up a loss.
pub(super) fn coefficients<T: Scalar>(pairs: &PairBatch<T>, counts: &[usize; 4], generator: bool) -> (Vec<T>, Vec<T>) {
    let inv = |k: usize| T::lit(1.0 / counts[k] as f64);
    let mut pos = vec![T::zero(); pairs.len()];
    let mut neg = vec![T::zero(); pairs.len()];
    for (p, s) in pairs.sources.iter().enumerate() {
        let k = s.kind();
        match (generator, k) {
            (true, 3) | (false, 0) | (false, 3) => pos[p] = inv(k),
            (true, 1) | (true, 2) | (false, 1) => neg[p] = inv(k),
            _ => {}
        }
    }
    (pos, neg)
}

pub(super) fn weighted_log_terms<T: Scalar>(logs: &[(T, T)], pos: &[T], neg: &[T]) -> f64 {
    logs.iter()
        .zip(pos.iter().zip(neg))
        .map(|(&(lp, ln), (&cp, &cn))| {
            let mut v = 0.0;
            if cp != T::zero() {
                v += (cp * lp).to_f64().unwrap();
            }
            if cn != T::zero() {
                v += (cn * ln).to_f64().unwrap();
            }
            v
        })
        .sum()
}

/// Mean `ln D` over cross-head pairs plus mean `ln(1 - D)` over prior-head
/// and same-head pairs.
pub fn generator_loss<T: Scalar>(d: &Discriminator<T>, pairs: &PairBatch<T>) -> Result<f64> {
    let counts = kind_counts(pairs, &[1, 2, 3])?;
    let t = d.trace(&pairs.z1, &pairs.z2)?;
    let (pos, neg) = coefficients(pairs, &counts, true);
    Ok(weighted_log_terms(&t.log_probs(), &pos, &neg))
}

/// Mean `ln D` over prior-prior and cross-head pairs plus mean `ln(1 - D)`
/// over prior-head pairs. The discriminator ascends this.
pub fn discriminator_loss<T: Scalar>(d: &Discriminator<T>, pairs: &PairBatch<T>) -> Result<f64> {
    let counts = kind_counts(pairs, &[0, 1, 3])?;
    let t = d.trace(&pairs.z1, &pairs.z2)?;
    let (pos, neg) = coefficients(pairs, &counts, false);
    Ok(weighted_log_terms(&t.log_probs(), &pos, &neg))
}

/// Generator loss and its gradients w.r.t. the pair members.
pub fn generator_loss_grad<T: Scalar>(
    d: &Discriminator<T>,
    pairs: &PairBatch<T>,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let counts = kind_counts(pairs, &[1, 2, 3])?;
    let t = d.trace(&pairs.z1, &pairs.z2)?;
    let (pos, neg) = coefficients(pairs, &counts, true);
    let loss = weighted_log_terms(&t.log_probs(), &pos, &neg);
    let dl = t.logit_grads(&pos, &neg);
    let (dz1, dz2) = d.backward(&t, dl, None, true).expect("input gradient requested");
    Ok((loss, dz1, dz2))
}

/// Generator loss backpropagated into encoder and head parameters,
/// scaled by `weight`.
pub fn generator_backward<T: Scalar>(
    model: &EnsembleModel<T>,
    trace: &crate::nets::LatentTrace<T>,
    d: &Discriminator<T>,
    pairs: &PairBatch<T>,
    weight: f64,
    grads: &mut ParamGrad<T>,
) -> Result<f64> {
    let (loss, mut dz1, mut dz2) = generator_loss_grad(d, pairs)?;
    dz1.scale(T::lit(weight));
    dz2.scale(T::lit(weight));
    let (dm, ds) = pairs.route(&dz1, &dz2, model.config.head_dim);
    model.latent_backward(trace, &dm, &ds, grads);
    Ok(loss)
}

/// Discriminator loss and the gradient of the minimization objective
/// `-L_D` w.r.t. discriminator parameters. Pair members are constants.
pub fn discriminator_loss_grad<T: Scalar>(d: &Discriminator<T>, pairs: &PairBatch<T>) -> Result<(f64, ParamGrad<T>)> {
    let counts = kind_counts(pairs, &[0, 1, 3])?;
    let t = d.trace(&pairs.z1, &pairs.z2)?;
    let (pos, neg) = coefficients(pairs, &counts, false);
    let loss = weighted_log_terms(&t.log_probs(), &pos, &neg);
    let dl: Vec<T> = t.logit_grads(&pos, &neg).into_iter().map(|g| -g).collect();
    let mut grads = ParamGrad::zeros_for(d);
    d.backward(&t, dl, Some(&mut grads), false);
    Ok((loss, grads))
}
