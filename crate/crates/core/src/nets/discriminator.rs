use rand_chacha::ChaCha8Rng;

use super::layers::{Cache, ForwardCtx, Layer, Linear, Sequential};
use super::params::{join, ParamGrad, ParamSet};
use crate::error::{DibsError, Result};
use crate::tensor::{Scalar, Tensor};

/// Four fully connected layers scoring a concatenated latent pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub net: Sequential<T>,
    head_dim: usize,
}

/// Forward state of one symmetrized pair evaluation. Rows `0..b` hold
/// `z1‖z2`, rows `b..2b` hold `z2‖z1`.
pub struct PairTrace<T> {
    caches: Vec<Cache<T>>,
    /// Raw logits `[2b]`.
    pub logits: Vec<T>,
}

impl<T: Scalar> PairTrace<T> {
    pub fn rows(&self) -> usize {
        self.logits.len() / 2
    }

    /// Symmetrized probabilities, one per pair.
    pub fn probs(&self) -> Vec<T> {
        let b = self.rows();
        let half = T::lit(0.5);
        (0..b).map(|r| half * (sigmoid(self.logits[r]) + sigmoid(self.logits[b + r]))).collect()
    }

    /// `(ln D, ln(1 - D))` per pair, computed without forming `D`.
    pub fn log_probs(&self) -> Vec<(T, T)> {
        let b = self.rows();
        let ln_half = T::lit(0.5f64.ln());
        (0..b)
            .map(|r| {
                let (a, c) = (self.logits[r], self.logits[b + r]);
                let pos = ln_half + log_add_exp(log_sigmoid(a), log_sigmoid(c));
                let neg = ln_half + log_add_exp(log_sigmoid(-a), log_sigmoid(-c));
                (pos, neg)
            })
            .collect()
    }

    /// Converts per-pair gradients w.r.t. `ln D` and `ln(1 - D)` into
    /// gradients w.r.t. the two raw logits of that pair.
    pub fn logit_grads(&self, d_log_pos: &[T], d_log_neg: &[T]) -> Vec<T> {
        let b = self.rows();
        let mut out = vec![T::zero(); 2 * b];
        for r in 0..b {
            let (a, c) = (self.logits[r], self.logits[b + r]);
            let (sa, sc) = (sigmoid(a), sigmoid(c));
            let (na, nc) = (sigmoid(-a), sigmoid(-c));
            // weights of each ordering inside the log-sum-exp
            let wa = softmax2(log_sigmoid(a), log_sigmoid(c));
            let wna = softmax2(log_sigmoid(-a), log_sigmoid(-c));
            let (gp, gn) = (d_log_pos[r], d_log_neg[r]);
            out[r] = gp * wa * na - gn * wna * sa;
            out[b + r] = gp * (T::one() - wa) * nc - gn * (T::one() - wna) * sc;
        }
        out
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    // ln σ(x) = -softplus(-x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `e^a / (e^a + e^b)`.
fn softmax2<T: Scalar>(a: T, b: T) -> T {
    sigmoid(a - b)
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(head_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = vec![
            Layer::Linear(Linear::new(2 * head_dim, hidden, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(hidden, hidden, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(hidden, hidden, rng)),
            Layer::Relu,
            Layer::Linear(Linear::output(hidden, 1, rng)),
        ];
        Self { net: Sequential::new(layers), head_dim }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn stack(&self, z1: &Tensor<T>, z2: &Tensor<T>) -> Result<Tensor<T>> {
        if z1.shape() != z2.shape() || z1.shape().len() != 2 || z1.row_len() != self.head_dim {
            return Err(DibsError::shape(format!(
                "pair members must both be [batch, {}], got {:?} and {:?}",
                self.head_dim,
                z1.shape(),
                z2.shape()
            )));
        }
        let b = z1.rows();
        let d = self.head_dim;
        let mut data = Vec::with_capacity(4 * b * d);
        for r in 0..b {
            data.extend_from_slice(z1.row(r));
            data.extend_from_slice(z2.row(r));
        }
        for r in 0..b {
            data.extend_from_slice(z2.row(r));
            data.extend_from_slice(z1.row(r));
        }
        Tensor::from_vec(&[2 * b, 2 * d], data)
    }

    pub fn trace(&self, z1: &Tensor<T>, z2: &Tensor<T>) -> Result<PairTrace<T>> {
        let x = self.stack(z1, z2)?;
        let (y, caches) = self.net.forward(&x, &mut ForwardCtx::eval());
        Ok(PairTrace { caches, logits: y.into_data() })
    }

    /// Per-pair score in (0, 1): the sigmoid of the network on both member
    /// orderings, averaged.
    pub fn discriminate_pair(&self, z1: &Tensor<T>, z2: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.trace(z1, z2)?.probs())
    }

    /// Backpropagates logit gradients (as from [`PairTrace::logit_grads`]).
    /// Parameter gradients accumulate into `grads` when given; input
    /// gradients for `(z1, z2)` are returned when requested.
    pub fn backward(
        &self,
        trace: &PairTrace<T>,
        d_logits: Vec<T>,
        grads: Option<&mut ParamGrad<T>>,
        need_input_grad: bool,
    ) -> Option<(Tensor<T>, Tensor<T>)> {
        let b = trace.rows();
        let dy = Tensor::from_vec(&[2 * b, 1], d_logits).expect("one logit per row");
        let mut scratch;
        let grads = match grads {
            Some(g) => g,
            None => {
                scratch = ParamGrad::zeros_for(self);
                &mut scratch
            }
        };
        let dx = self.net.backward(&trace.caches, dy, "disc", grads, need_input_grad)?;
        let d = self.head_dim;
        let mut dz1 = Tensor::zeros(&[b, d]);
        let mut dz2 = Tensor::zeros(&[b, d]);
        for r in 0..b {
            let (fwd, rev) = (dx.row(r), dx.row(b + r));
            for j in 0..d {
                dz1.row_mut(r)[j] = fwd[j] + rev[d + j];
                dz2.row_mut(r)[j] = fwd[d + j] + rev[j];
            }
        }
        Some((dz1, dz2))
    }
}

impl<T: Scalar> ParamSet<T> for Discriminator<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.net.visit_params(&join(prefix, "disc"), f)
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.net.visit_params_mut(&join(prefix, "disc"), f)
    }
}
