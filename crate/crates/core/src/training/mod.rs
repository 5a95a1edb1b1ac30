//! Optimizers, the alternating three-phase training loop, baseline modes,
//! checkpointing and encoder-frozen finetuning.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_NAME, PARAMS_NAME};
pub use config::{AdvSteps, ArchConfig, Mode, TrainConfig, DEFAULT_DISC_HIDDEN, DEFAULT_DROPOUT};
pub use optim::{adaptive_step, sgd_momentum_step, sgd_momentum_update, AdamConfig, AdamState, LrDecay, SgdConfig};

use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureShape, LabeledDataset};
use crate::error::{DibsError, Result};
use crate::nets::{groups, Discriminator, EnsembleModel, ForwardCtx, ModelConfig, ParamGrad, ParamSet};
use crate::objectives::{
    build_pairs_from_latents, discriminator_loss_grad, generator_backward, vib_loss_grad, LossWeights, PairBatch,
    VibBreakdown,
};
use crate::rng::{standard_normal, stream, Stream};
use crate::tensor::Tensor;
use crate::uncertainty::accuracy;

type F = f32;

/// One minibatch of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub nll: Vec<f64>,
    pub kl: Vec<f64>,
    /// Generator loss after the generator step's forward pass.
    pub l_g: Option<f64>,
    /// Discriminator objective (ascended) on the same pairs.
    pub l_d: Option<f64>,
    pub abe: Option<f64>,
    /// Main-phase loss plus `adv_weight * l_g`.
    pub total: f64,
    /// Deterministic ensemble accuracy, filled on the last step of an epoch.
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics CSV: a config digest comment line, a header, one row per step.
pub fn write_metrics<W: Write>(mut out: W, config_digest: &str, rows: &[MetricsRow]) -> Result<()> {
    let io = |e| DibsError::io("metrics", e);
    writeln!(out, "# config_digest={config_digest}").map_err(io)?;
    let k = rows.first().map(|r| r.nll.len()).unwrap_or(0);
    let mut header = vec!["epoch".to_string(), "step".into(), "lr".into()];
    header.extend((0..k).map(|i| format!("nll_{i}")));
    header.extend((0..k).map(|i| format!("kl_{i}")));
    header.extend(["l_g", "l_d", "abe", "total", "train_acc", "val_acc"].map(String::from));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for r in rows {
        let mut f = vec![r.epoch.to_string(), r.step.to_string(), r.lr.to_string()];
        f.extend(r.nll.iter().chain(&r.kl).map(|v| v.to_string()));
        f.extend([opt(r.l_g), opt(r.l_d), opt(r.abe), r.total.to_string(), opt(r.train_acc), opt(r.val_acc)]);
        writeln!(out, "{}", f.join(",")).map_err(io)?;
    }
    Ok(())
}

pub(crate) struct Adversary {
    pub disc: Discriminator<F>,
    pub adam_g: AdamState<F>,
    pub adam_d: AdamState<F>,
    pub pairs_rng: ChaCha8Rng,
}

/// Complete mutable training state; checkpoints serialize exactly this.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: EnsembleModel<F>,
    pub(crate) member_config: ModelConfig,
    pub(crate) velocity: ParamGrad<F>,
    pub(crate) adversary: Option<Adversary>,
    pub(crate) data_rng: ChaCha8Rng,
    pub(crate) eps_rng: ChaCha8Rng,
    pub(crate) dropout_rng: ChaCha8Rng,
    pub(crate) epoch: usize,
    pub(crate) step: usize,
}

/// Per-step results of the generator and discriminator phases.
pub struct AdversarialOutcome {
    pub pairs: PairBatch<F>,
    pub l_g: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig, input: FeatureShape, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let member_config = config.model_config(input, num_classes);
        let mut init = stream(config.seed, Stream::Init);
        let model = if config.mode == Mode::RandomEnsemble {
            let members = (0..config.heads as u64)
                .map(|k| {
                    EnsembleModel::new(member_config.clone(), &mut stream(config.seed.wrapping_add(k), Stream::Init))
                })
                .collect::<Result<Vec<_>>>()?;
            EnsembleModel::from_members(members)?
        } else {
            EnsembleModel::new(member_config.clone(), &mut init)?
        };
        let adversary = config.has_adversary().then(|| {
            let disc = Discriminator::new(model.config.head_dim, config.disc_hidden(), &mut init);
            Adversary {
                adam_g: AdamState::zeros_for(&model),
                adam_d: AdamState::zeros_for(&disc),
                disc,
                pairs_rng: stream(config.seed, Stream::Pairs),
            }
        });
        Ok(Self {
            velocity: ParamGrad::zeros_for(&model),
            data_rng: stream(config.seed, Stream::Data),
            eps_rng: stream(config.seed, Stream::Eps),
            dropout_rng: stream(config.seed, Stream::Dropout),
            member_config,
            model,
            adversary,
            config,
            epoch: 0,
            step: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn discriminator(&self) -> Option<&Discriminator<F>> {
        self.adversary.as_ref().map(|a| &a.disc)
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_decay.rate(self.config.main_optimizer.lr, self.epoch)
    }

    fn non_finite(&self, detail: impl Into<String>) -> DibsError {
        DibsError::NonFinite { epoch: self.epoch, step: self.step, detail: detail.into() }
    }

    fn check_params(&self, phase: &str) -> Result<()> {
        let mut finite = true;
        self.model.visit_params("", &mut |_, t| finite &= t.all_finite());
        if finite {
            Ok(())
        } else {
            Err(self.non_finite(format!("model parameters after the {phase} step")))
        }
    }

    fn check_dataset(&self, ds: &LabeledDataset) -> Result<()> {
        if ds.shape() != self.model.config.input {
            return Err(DibsError::shape(format!(
                "dataset shape {:?}, model expects {:?}",
                ds.shape(),
                self.model.config.input
            )));
        }
        if ds.num_classes() != self.model.config.num_classes {
            return Err(DibsError::invalid(format!(
                "dataset has {} classes, model predicts {}",
                ds.num_classes(),
                self.model.config.num_classes
            )));
        }
        Ok(())
    }

    /// Phase one: a main-optimizer step on the bottleneck loss (plus the
    /// output-diversity term in `abe` mode) over all model parameters.
    pub fn main_phase(&mut self, x: &Tensor<F>, labels: &[usize]) -> Result<VibBreakdown> {
        let k = self.model.num_heads();
        let b = x.rows();
        let d = self.model.config.head_dim;
        let eps: Vec<_> = (0..k).map(|_| standard_normal::<F>(&mut self.eps_rng, &[b, d])).collect();
        let weights = self.config.loss_weights();
        let abe = self.config.mode == Mode::Abe;
        let mut ctx = if self.model.config.dropout.is_some() {
            ForwardCtx::with_dropout(&mut self.dropout_rng)
        } else {
            ForwardCtx::eval()
        };
        let (bd, grads) =
            match vib_loss_grad(&self.model, x, labels, &weights, &eps, self.config.kl_mode, abe, &mut ctx) {
                Ok(v) => v,
                Err(e) => {
                    let finite = self.model.latents(x)?.iter().all(|l| l.mean.all_finite() && l.std.all_finite());
                    return Err(if finite { e } else { self.non_finite("head latents") });
                }
            };
        if !bd.total.is_finite() || !grads.all_finite() {
            return Err(self.non_finite(format!("main loss {} (nll {:?})", bd.total, bd.nll)));
        }
        let lr = self.lr();
        sgd_momentum_step(&mut self.model, &grads, &mut self.velocity, &self.config.main_optimizer, lr, groups::all)?;
        self.check_params("main")?;
        Ok(bd)
    }

    /// Phase two: an adversarial-optimizer step on encoder and heads
    /// minimizing `adv_weight * L_G` on freshly built pairs.
    pub fn generator_phase(&mut self, x: &Tensor<F>) -> Result<AdversarialOutcome> {
        let adv = self.adversary.as_mut().ok_or_else(|| DibsError::invalid("mode has no adversarial game"))?;
        let trace = self.model.trace_latents(x, &mut ForwardCtx::eval())?;
        let pairs = build_pairs_from_latents(&trace.latents, self.config.pairs, &mut adv.pairs_rng)?;
        let mut grads = ParamGrad::zeros_for(&self.model);
        let l_g = generator_backward(&self.model, &trace, &adv.disc, &pairs, self.config.adv_weight, &mut grads)?;
        if !l_g.is_finite() || !grads.all_finite() {
            return Err(DibsError::NonFinite {
                epoch: self.epoch,
                step: self.step,
                detail: format!("generator loss {l_g}"),
            });
        }
        adaptive_step(&mut self.model, &grads, &mut adv.adam_g, &self.config.adv_optimizer, groups::generator)?;
        self.check_params("generator")?;
        Ok(AdversarialOutcome { pairs, l_g })
    }

    /// Phase three: an adversarial-optimizer step on the discriminator
    /// ascending `L_D` on the given pairs. Returns `L_D` before the step.
    pub fn discriminator_phase(&mut self, pairs: &PairBatch<F>) -> Result<f64> {
        let adv = self.adversary.as_mut().ok_or_else(|| DibsError::invalid("mode has no adversarial game"))?;
        let (l_d, grads) = discriminator_loss_grad(&adv.disc, pairs)?;
        if !l_d.is_finite() || !grads.all_finite() {
            return Err(DibsError::NonFinite {
                epoch: self.epoch,
                step: self.step,
                detail: format!("discriminator objective {l_d}"),
            });
        }
        adaptive_step(&mut adv.disc, &grads, &mut adv.adam_d, &self.config.adv_optimizer, groups::all)?;
        Ok(l_d)
    }

    /// All phases for one minibatch.
    pub fn train_step(&mut self, x: &Tensor<F>, labels: &[usize]) -> Result<MetricsRow> {
        let lr = self.lr();
        let bd = self.main_phase(x, labels)?;
        let (mut l_g, mut l_d) = (None, None);
        if self.adversary.is_some() {
            let mut pairs = None;
            for _ in 0..self.config.adv_steps.generator {
                let out = self.generator_phase(x)?;
                l_g = Some(out.l_g);
                pairs = Some(out.pairs);
            }
            if self.config.adv_steps.discriminator > 0 {
                let pairs = match pairs {
                    Some(p) => p,
                    None => {
                        let adv = self.adversary.as_mut().expect("checked");
                        build_pairs_from_latents(&self.model.latents(x)?, self.config.pairs, &mut adv.pairs_rng)?
                    }
                };
                for _ in 0..self.config.adv_steps.discriminator {
                    l_d = Some(self.discriminator_phase(&pairs)?);
                }
            }
        }
        let row = MetricsRow {
            epoch: self.epoch,
            step: self.step,
            lr,
            total: bd.total + l_g.map_or(0.0, |g| self.config.adv_weight * g),
            nll: bd.nll,
            kl: bd.kl,
            l_g,
            l_d,
            abe: bd.abe_term,
            train_acc: None,
            val_acc: None,
        };
        self.step += 1;
        Ok(row)
    }

    /// One pass over `train` in a freshly shuffled order, then deterministic
    /// accuracy on `train` and `val`.
    pub fn run_epoch(&mut self, train: &LabeledDataset, val: Option<&LabeledDataset>) -> Result<Vec<MetricsRow>> {
        self.check_dataset(train)?;
        if let Some(v) = val {
            self.check_dataset(v)?;
        }
        if train.is_empty() {
            return Err(DibsError::invalid("empty training set"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.data_rng);
        let mut rows = Vec::with_capacity(order.len().div_ceil(self.config.batch_size));
        for idx in order.chunks(self.config.batch_size) {
            let x = train.batch::<F>(idx);
            rows.push(self.train_step(&x, &train.batch_labels(idx))?);
        }
        let last = rows.last_mut().expect("nonempty");
        last.train_acc = Some(accuracy(&self.model, train)?);
        last.val_acc = val.map(|v| accuracy(&self.model, v)).transpose()?;
        self.epoch += 1;
        Ok(rows)
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn run(&mut self, train: &LabeledDataset, val: Option<&LabeledDataset>) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.epoch < self.config.epochs {
            rows.extend(self.run_epoch(train, val)?);
        }
        Ok(rows)
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<MetricsRow>,
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, train_ds: &LabeledDataset, val_ds: Option<&LabeledDataset>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), train_ds.shape(), train_ds.num_classes())?;
    let history = trainer.run(train_ds, val_ds)?;
    Ok(TrainOutcome { trainer, history })
}

/// Finetunes heads and decoders on `target` with the encoder(s) frozen,
/// using the main optimizer and bottleneck loss of `cfg`. Decoders are
/// reinitialized when the class count differs.
pub fn transfer_finetune(
    model: &mut EnsembleModel<F>,
    target: &LabeledDataset,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>> {
    if target.shape() != model.config.input {
        return Err(DibsError::shape(format!(
            "target shape {:?}, model expects {:?}",
            target.shape(),
            model.config.input
        )));
    }
    if epochs > 0 && target.is_empty() {
        return Err(DibsError::invalid("empty target set"));
    }
    if target.num_classes() != model.config.num_classes {
        model.reset_decoders(target.num_classes(), &mut stream(cfg.seed, Stream::Init));
    }
    let k = model.num_heads();
    let weights = LossWeights::uniform(k, cfg.beta, cfg.adv_weight);
    let keep = |n: &str| groups::head(n) || groups::decoder(n);
    let mut velocity = ParamGrad::zeros_for(model);
    let mut data_rng = stream(cfg.seed, Stream::Data);
    let mut eps_rng = stream(cfg.seed, Stream::Eps);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let d = model.config.head_dim;
    let mut rows = Vec::new();
    let mut step = 0;
    for epoch in 0..epochs {
        let lr = cfg.lr_decay.rate(cfg.main_optimizer.lr, epoch);
        let mut order: Vec<usize> = (0..target.len()).collect();
        order.shuffle(&mut data_rng);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let x = target.batch::<F>(idx);
            let labels = target.batch_labels(idx);
            let eps: Vec<_> = (0..k).map(|_| standard_normal::<F>(&mut eps_rng, &[idx.len(), d])).collect();
            let mut ctx = if model.config.dropout.is_some() {
                ForwardCtx::with_dropout(&mut dropout_rng)
            } else {
                ForwardCtx::eval()
            }
            .frozen();
            let (bd, grads) = vib_loss_grad(model, &x, &labels, &weights, &eps, cfg.kl_mode, false, &mut ctx)?;
            if !bd.total.is_finite() || !grads.all_finite() {
                return Err(DibsError::NonFinite { epoch, step, detail: format!("finetune loss {}", bd.total) });
            }
            sgd_momentum_step(model, &grads, &mut velocity, &cfg.main_optimizer, lr, keep)?;
            rows.push(MetricsRow {
                epoch,
                step,
                lr,
                total: bd.total,
                nll: bd.nll,
                kl: bd.kl,
                l_g: None,
                l_d: None,
                abe: None,
                train_acc: None,
                val_acc: None,
            });
            step += 1;
        }
        rows.last_mut().expect("nonempty").train_acc = Some(accuracy(model, target)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
