use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Conv2d, ForwardCtx, Layer, Linear, Sequential};
use super::params::{join, ParamGrad, ParamSet};
use crate::data::FeatureShape;
use crate::error::{DibsError, Result};
use crate::tensor::{log_softmax_rows, Scalar, Tensor};

/// Added to `softplus(raw)` so head standard deviations stay positive.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSpec {
    /// Two fully connected layers with a rectifier in between.
    Mlp { hidden: usize },
    /// Four 3x3 conv + rectifier + 2x2 max-pool blocks, then a linear map.
    Cnn { channels: [usize; 4] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: FeatureShape,
    pub encoder: EncoderSpec,
    /// Shared latent width d_z.
    pub latent_dim: usize,
    /// Per-head stochastic latent width d_h.
    pub head_dim: usize,
    pub decoder_hidden: usize,
    pub num_classes: usize,
    pub num_heads: usize,
    /// Drop probability for dropout after hidden rectifiers; `None` disables.
    #[serde(default)]
    pub dropout: Option<f64>,
    /// One encoder per head instead of a single shared encoder.
    #[serde(default)]
    pub independent_encoders: bool,
}

impl ModelConfig {
    pub fn for_input(input: FeatureShape, num_classes: usize, num_heads: usize) -> Self {
        let encoder = if input.is_image() {
            EncoderSpec::Cnn { channels: [16, 32, 32, 64] }
        } else {
            EncoderSpec::Mlp { hidden: 128 }
        };
        Self {
            input,
            encoder,
            latent_dim: 64,
            head_dim: 32,
            decoder_hidden: 128,
            num_classes,
            num_heads,
            dropout: None,
            independent_encoders: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.latent_dim == 0 || self.head_dim == 0 || self.decoder_hidden == 0 {
            return Err(DibsError::invalid("model widths and head count must be positive"));
        }
        if self.num_classes < 2 {
            return Err(DibsError::invalid("need at least two classes"));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(DibsError::invalid("dropout probability must be in [0, 1)"));
            }
        }
        match (&self.encoder, self.input) {
            (EncoderSpec::Cnn { channels }, FeatureShape::Image { height, width, .. }) => {
                if channels.contains(&0) {
                    return Err(DibsError::invalid("conv channels must be positive"));
                }
                if height < 16 || width < 16 {
                    return Err(DibsError::invalid("cnn encoder needs images of at least 16x16"));
                }
            }
            (EncoderSpec::Cnn { .. }, FeatureShape::Vector { .. }) => {
                return Err(DibsError::invalid("cnn encoder needs image input"));
            }
            (EncoderSpec::Mlp { hidden }, _) if *hidden == 0 => {
                return Err(DibsError::invalid("mlp hidden width must be positive"));
            }
            _ => {}
        }
        Ok(())
    }

    fn num_encoders(&self) -> usize {
        if self.independent_encoders {
            self.num_heads
        } else {
            1
        }
    }
}

/// Diagonal Gaussian per batch row; `mean` and `std` are `[batch, d_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent<T> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

impl<T: Scalar> GaussianLatent<T> {
    pub fn new(mean: Tensor<T>, std: Tensor<T>) -> Result<Self> {
        if mean.shape() != std.shape() {
            return Err(DibsError::shape("latent mean and std differ in shape"));
        }
        Ok(Self { mean, std })
    }

    pub fn rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.row_len()
    }
}

/// `mean + std * eps`, elementwise.
pub fn reparam_sample<T: Scalar>(lat: &GaussianLatent<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if eps.shape() != lat.mean.shape() {
        return Err(DibsError::shape(format!(
            "noise shape {:?} does not match latent {:?}",
            eps.shape(),
            lat.mean.shape()
        )));
    }
    let data = lat.mean.data().iter().zip(lat.std.data()).zip(eps.data()).map(|((&m, &s), &e)| m + s * e).collect();
    Tensor::from_vec(lat.mean.shape(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<T> {
    pub config: ModelConfig,
    pub encoders: Vec<Sequential<T>>,
    /// Each maps d_z to `[mean | raw std]` of width 2 d_h, with
    /// `std = softplus(raw) + STD_FLOOR`.
    pub heads: Vec<Linear<T>>,
    pub decoders: Vec<Sequential<T>>,
}

fn build_encoder<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let mut layers = Vec::new();
    match (&cfg.encoder, cfg.input) {
        (EncoderSpec::Mlp { hidden }, input) => {
            layers.push(Layer::Linear(Linear::new(input.numel(), *hidden, rng)));
            layers.push(Layer::Relu);
            if let Some(p) = cfg.dropout {
                layers.push(Layer::Dropout(p));
            }
            layers.push(Layer::Linear(Linear::output(*hidden, cfg.latent_dim, rng)));
        }
        (EncoderSpec::Cnn { channels }, FeatureShape::Image { height, width, channels: in_c }) => {
            let (mut c, mut h, mut w) = (in_c, height, width);
            for &out in channels {
                layers.push(Layer::Conv2d(Conv2d::new(c, out, 3, 1, rng)));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool2d(2));
                c = out;
                h /= 2;
                w /= 2;
            }
            layers.push(Layer::Flatten);
            if let Some(p) = cfg.dropout {
                layers.push(Layer::Dropout(p));
            }
            layers.push(Layer::Linear(Linear::output(c * h * w, cfg.latent_dim, rng)));
        }
        (EncoderSpec::Cnn { .. }, FeatureShape::Vector { .. }) => unreachable!("validated"),
    }
    Sequential::new(layers)
}

/// Head whose std half starts constant at (almost exactly) one.
fn build_head<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Linear<T> {
    let mut head = Linear::output(cfg.latent_dim, 2 * cfg.head_dim, rng);
    let unit = T::lit((1.0f64 - STD_FLOOR).exp_m1().ln());
    for r in cfg.head_dim..2 * cfg.head_dim {
        head.weight.row_mut(r).fill(T::zero());
        head.bias.data_mut()[r] = unit;
    }
    head
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

fn build_decoder<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let mut layers = vec![Layer::Linear(Linear::new(cfg.head_dim, cfg.decoder_hidden, rng)), Layer::Relu];
    if let Some(p) = cfg.dropout {
        layers.push(Layer::Dropout(p));
    }
    layers.push(Layer::Linear(Linear::output(cfg.decoder_hidden, cfg.num_classes, rng)));
    Sequential::new(layers)
}

/// Cached intermediate values of an encoder + heads forward pass.
pub struct LatentTrace<T> {
    pub x: Tensor<T>,
    encoder_caches: Vec<Vec<Cache<T>>>,
    pub shared: Vec<Tensor<T>>,
    raw: Vec<Tensor<T>>,
    pub latents: Vec<GaussianLatent<T>>,
    frozen: bool,
}

/// Cached decoder forward pass for one head.
pub struct DecodeTrace<T> {
    caches: Vec<Cache<T>>,
    pub log_probs: Tensor<T>,
}

impl<T: Scalar> EnsembleModel<T> {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let encoders = (0..config.num_encoders()).map(|_| build_encoder(&config, rng)).collect();
        let heads = (0..config.num_heads).map(|_| build_head(&config, rng)).collect();
        let decoders = (0..config.num_heads).map(|_| build_decoder(&config, rng)).collect();
        Ok(Self { config, encoders, heads, decoders })
    }

    /// Joins single-member models (each with its own encoder) into one
    /// ensemble whose member `k` is `members[k]`.
    pub fn from_members(members: Vec<EnsembleModel<T>>) -> Result<Self> {
        let first = members.first().ok_or_else(|| DibsError::invalid("no members"))?;
        let mut config = first.config.clone();
        config.num_heads = members.len();
        config.independent_encoders = true;
        let mut out = Self { config, encoders: Vec::new(), heads: Vec::new(), decoders: Vec::new() };
        for m in members {
            if m.config.num_heads != 1 {
                return Err(DibsError::invalid("members must be single-head models"));
            }
            out.encoders.extend(m.encoders);
            out.heads.extend(m.heads);
            out.decoders.extend(m.decoders);
        }
        Ok(out)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn encoder_of(&self, head: usize) -> usize {
        if self.config.independent_encoders {
            head
        } else {
            0
        }
    }

    fn check_head(&self, i: usize) -> Result<()> {
        if i >= self.num_heads() {
            return Err(DibsError::OutOfRange { what: "heads", index: i, len: self.num_heads() });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.config.input.input_dims();
        if x.shape().len() != want.len() + 1 || x.shape()[1..] != want[..] {
            return Err(DibsError::shape(format!(
                "input {:?} does not match configured per-example shape {want:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Shared latent Z for encoder `e`, no sampling.
    pub fn encode_with(&self, e: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.encoders[e].forward_eval(x))
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.encode_with(0, x)
    }

    pub fn head_forward(&self, i: usize, z: &Tensor<T>) -> Result<GaussianLatent<T>> {
        self.check_head(i)?;
        if z.row_len() != self.config.latent_dim {
            return Err(DibsError::shape("shared latent width mismatch"));
        }
        Ok(self.split_head(&self.heads[i].forward(z)))
    }

    fn split_head(&self, raw: &Tensor<T>) -> GaussianLatent<T> {
        let d = self.config.head_dim;
        let mean = raw.columns(0, d);
        let floor = T::lit(STD_FLOOR);
        let std = raw.columns(d, d).map(|v| softplus(v) + floor);
        GaussianLatent { mean, std }
    }

    /// Log class probabilities for head `i`.
    pub fn decode(&self, i: usize, z_tilde: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_head(i)?;
        if z_tilde.row_len() != self.config.head_dim {
            return Err(DibsError::shape("head latent width mismatch"));
        }
        Ok(log_softmax_rows(&self.decoders[i].forward_eval(z_tilde)))
    }

    /// Head latents for every member, evaluated without dropout.
    pub fn latents(&self, x: &Tensor<T>) -> Result<Vec<GaussianLatent<T>>> {
        Ok(self.trace_latents(x, &mut ForwardCtx::eval())?.latents)
    }

    pub fn trace_latents(&self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<LatentTrace<T>> {
        self.check_input(x)?;
        let mut encoder_caches = Vec::with_capacity(self.encoders.len());
        let mut shared = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let (z, c) = enc.forward(x, ctx);
            shared.push(z);
            encoder_caches.push(c);
        }
        let mut raw = Vec::with_capacity(self.num_heads());
        let mut latents = Vec::with_capacity(self.num_heads());
        for (i, head) in self.heads.iter().enumerate() {
            let r = head.forward(&shared[self.encoder_of(i)]);
            latents.push(self.split_head(&r));
            raw.push(r);
        }
        Ok(LatentTrace { x: x.clone(), encoder_caches, shared, raw, latents, frozen: ctx.freeze_encoders })
    }

    pub fn trace_decode(&self, i: usize, z_tilde: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> DecodeTrace<T> {
        let (logits, caches) = self.decoders[i].forward(z_tilde, ctx);
        DecodeTrace { caches, log_probs: log_softmax_rows(&logits) }
    }

    /// Backpropagates dL/dlogits of head `i`'s decoder; returns dL/dz̃.
    pub fn decode_backward(
        &self,
        i: usize,
        trace: &DecodeTrace<T>,
        d_logits: Tensor<T>,
        grads: &mut ParamGrad<T>,
    ) -> Tensor<T> {
        self.decoders[i]
            .backward(&trace.caches, d_logits, &format!("decoder.{i}"), grads, true)
            .expect("input gradient requested")
    }

    /// Backpropagates per-head gradients w.r.t. latent means and standard
    /// deviations into head and encoder parameters. Heads whose entries are
    /// `None` receive no gradient; frozen traces stop at the heads.
    pub fn latent_backward(
        &self,
        trace: &LatentTrace<T>,
        d_mean: &[Option<Tensor<T>>],
        d_std: &[Option<Tensor<T>>],
        grads: &mut ParamGrad<T>,
    ) {
        let d = self.config.head_dim;
        let mut d_shared: Vec<Option<Tensor<T>>> = vec![None; self.encoders.len()];
        for i in 0..self.num_heads() {
            if d_mean[i].is_none() && d_std[i].is_none() {
                continue;
            }
            let b = trace.raw[i].rows();
            let mut d_raw = Tensor::zeros(&[b, 2 * d]);
            for r in 0..b {
                let row = d_raw.row_mut(r);
                if let Some(dm) = &d_mean[i] {
                    row[..d].copy_from_slice(dm.row(r));
                }
                if let Some(ds) = &d_std[i] {
                    let raw = trace.raw[i].row(r);
                    for j in 0..d {
                        row[d + j] = ds.row(r)[j] * sigmoid(raw[d + j]);
                    }
                }
            }
            let e = self.encoder_of(i);
            let dz = self.heads[i].backward(&trace.shared[e], &d_raw, &format!("head.{i}"), grads);
            match &mut d_shared[e] {
                Some(acc) => acc.add_assign(&dz),
                slot => *slot = Some(dz),
            }
        }
        if trace.frozen {
            return;
        }
        for (e, dz) in d_shared.into_iter().enumerate() {
            if let Some(dz) = dz {
                self.encoders[e].backward(&trace.encoder_caches[e], dz, &format!("encoder.{e}"), grads, false);
            }
        }
    }

    /// Replaces every decoder with a freshly initialized one for `num_classes`.
    pub fn reset_decoders(&mut self, num_classes: usize, rng: &mut ChaCha8Rng) {
        self.config.num_classes = num_classes;
        let cfg = self.config.clone();
        self.decoders = (0..self.num_heads()).map(|_| build_decoder(&cfg, rng)).collect();
    }
}

impl<T: Scalar> ParamSet<T> for EnsembleModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit_params(&join(prefix, &format!("encoder.{i}")), f);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.visit_params(&join(prefix, &format!("head.{i}")), f);
        }
        for (i, d) in self.decoders.iter().enumerate() {
            d.visit_params(&join(prefix, &format!("decoder.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_params_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_params_mut(&join(prefix, &format!("head.{i}")), f);
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.visit_params_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
    }
}

/// Parameter-name filters for the alternating optimization phases.
pub mod groups {
    pub fn encoder(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    pub fn head(name: &str) -> bool {
        name.starts_with("head.")
    }

    pub fn decoder(name: &str) -> bool {
        name.starts_with("decoder.")
    }

    /// Encoder and heads: the generators of the adversarial game.
    pub fn generator(name: &str) -> bool {
        encoder(name) || head(name)
    }

    pub fn all(_: &str) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream, Stream};

    fn mlp_model(k: usize) -> EnsembleModel<f64> {
        let mut cfg = ModelConfig::for_input(FeatureShape::Vector { dim: 3 }, 4, k);
        cfg.encoder = EncoderSpec::Mlp { hidden: 8 };
        cfg.latent_dim = 5;
        cfg.head_dim = 2;
        cfg.decoder_hidden = 6;
        EnsembleModel::new(cfg, &mut stream(1, Stream::Init)).unwrap()
    }

    #[test]
    fn zero_final_layer_encodes_to_bias() {
        let mut m = mlp_model(2);
        let last = m.encoders[0].last_linear_mut().unwrap();
        last.weight.fill(0.0);
        last.bias = Tensor::from_vec(&[5], vec![1., 2., 3., 4., 5.]).unwrap();
        let x = standard_normal(&mut stream(2, Stream::Eval), &[3, 3]);
        let z = m.encode(&x).unwrap();
        for r in 0..3 {
            assert_eq!(z.row(r), &[1., 2., 3., 4., 5.]);
        }
    }

    #[test]
    fn encoding_is_batch_independent() {
        let m = mlp_model(2);
        let x = standard_normal::<f64>(&mut stream(3, Stream::Eval), &[8, 3]);
        let z = m.encode(&x).unwrap();
        let one = m.encode(&x.select_rows(&[5])).unwrap();
        for (a, b) in one.row(0).iter().zip(z.row(5)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = mlp_model(2);
        assert!(m.encode(&Tensor::zeros(&[2, 4])).is_err());
        let mut cfg = ModelConfig::for_input(FeatureShape::Image { height: 16, width: 16, channels: 1 }, 3, 1);
        cfg.encoder = EncoderSpec::Cnn { channels: [2, 2, 2, 2] };
        let cnn = EnsembleModel::<f32>::new(cfg, &mut stream(1, Stream::Init)).unwrap();
        assert!(cnn.encode(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
        assert_eq!(cnn.encode(&Tensor::zeros(&[2, 1, 16, 16])).unwrap().shape(), &[2, 64]);
    }

    #[test]
    fn zero_log_std_gives_unit_std() {
        let mut m = mlp_model(2);
        let d = m.config.head_dim;
        for r in d..2 * d {
            m.heads[0].weight.row_mut(r).fill(0.0);
        }
        let z = standard_normal(&mut stream(4, Stream::Eval), &[3, 5]);
        let lat = m.head_forward(0, &z).unwrap();
        assert!(lat.std.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn equal_heads_give_equal_latents() {
        let mut m = mlp_model(2);
        m.heads[1] = m.heads[0].clone();
        let z = standard_normal(&mut stream(5, Stream::Eval), &[3, 5]);
        assert_eq!(m.head_forward(0, &z).unwrap(), m.head_forward(1, &z).unwrap());
        assert!(matches!(m.head_forward(2, &z), Err(DibsError::OutOfRange { .. })));
    }

    #[test]
    fn reparam_points() {
        let lat = GaussianLatent::new(
            Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap(),
            Tensor::from_vec(&[1, 2], vec![0.5, 2.0]).unwrap(),
        )
        .unwrap();
        let z = reparam_sample(&lat, &Tensor::from_vec(&[1, 2], vec![2.0, -1.0]).unwrap()).unwrap();
        assert_eq!(z.data(), &[2.0, 0.0]);
        assert_eq!(reparam_sample(&lat, &Tensor::zeros(&[1, 2])).unwrap(), lat.mean);
        let unit = GaussianLatent::new(Tensor::zeros(&[1, 2]), Tensor::full(&[1, 2], 1.0)).unwrap();
        let e = Tensor::from_vec(&[1, 2], vec![0.3, -0.7]).unwrap();
        assert_eq!(reparam_sample(&unit, &e).unwrap(), e);
        assert!(reparam_sample(&lat, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn decode_rows_normalize_and_ignore_shift() {
        let mut m = mlp_model(2);
        let zt = standard_normal(&mut stream(6, Stream::Eval), &[4, 2]);
        let lp = m.decode(1, &zt).unwrap();
        for r in 0..4 {
            let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        m.decoders[1].last_linear_mut().unwrap().bias.data_mut().iter_mut().for_each(|b| *b += 3.0);
        let shifted = m.decode(1, &zt).unwrap();
        for (a, b) in lp.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let last = m.decoders[0].last_linear_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let uniform = m.decode(0, &zt).unwrap();
        assert!(uniform.data().iter().all(|&v| (v - 0.25f64.ln()).abs() < 1e-12));
        assert!(m.decode(2, &zt).is_err());
    }

    #[test]
    fn members_join_into_independent_ensemble() {
        let a = mlp_model(1);
        let b = EnsembleModel::new(a.config.clone(), &mut stream(9, Stream::Init)).unwrap();
        let x = standard_normal::<f64>(&mut stream(7, Stream::Eval), &[2, 3]);
        let la = a.latents(&x).unwrap();
        let lb = b.latents(&x).unwrap();
        let joined = EnsembleModel::from_members(vec![a, b]).unwrap();
        let lj = joined.latents(&x).unwrap();
        assert_eq!(lj[0], la[0]);
        assert_eq!(lj[1], lb[0]);
    }
}
