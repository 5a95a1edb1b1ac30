//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Activations are row-major with the batch as the leading dimension;
//! images are `[batch, channels, height, width]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{join, ParamGrad, ParamSet};
use crate::tensor::{matmul, Scalar, Tensor};

/// Uniform fan-in scaled draw: U(-sqrt(3 gain / fan_in), sqrt(3 gain / fan_in)).
fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (3.0 * gain / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("sized")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Initialization for layers feeding a rectifier (variance 2 / fan_in).
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { weight: fan_in_uniform(&[output, input], input, 2.0, rng), bias: Tensor::zeros(&[output]) }
    }

    /// Initialization for output layers (variance 1 / fan_in).
    pub fn output(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { weight: fan_in_uniform(&[output, input], input, 1.0, rng), bias: Tensor::zeros(&[output]) }
    }

    pub fn in_features(&self) -> usize {
        self.weight.row_len()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = matmul(x, false, &self.weight, true);
        let b = self.bias.data();
        for i in 0..y.rows() {
            for (v, &bj) in y.row_mut(i).iter_mut().zip(b) {
                *v += bj;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, prefix: &str, grads: &mut ParamGrad<T>) -> Tensor<T> {
        self.accumulate(x, dy, prefix, grads);
        matmul(dy, false, &self.weight, false)
    }

    pub fn accumulate(&self, x: &Tensor<T>, dy: &Tensor<T>, prefix: &str, grads: &mut ParamGrad<T>) {
        let (out, inp) = (self.out_features(), self.in_features());
        let gw = grads.slot(&join(prefix, "weight"));
        T::gemm(true, false, out, inp, x.rows(), T::one(), dy.data(), x.data(), T::one(), gw.data_mut());
        let gb = grads.slot(&join(prefix, "bias"));
        for i in 0..dy.rows() {
            for (g, &d) in gb.data_mut().iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Stride-1 square convolution with symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[out_channels, in_channels * k * k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub in_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, padding: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: fan_in_uniform(&[out_channels, fan_in], fan_in, 2.0, rng),
            bias: Tensor::zeros(&[out_channels]),
            in_channels,
            kernel,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.padding + 1 - self.kernel, w + 2 * self.padding + 1 - self.kernel)
    }

    /// `[c*k*k, batch*oh*ow]`
    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let [b, c, h, w] = dims4(x);
        let (k, p) = (self.kernel, self.padding);
        let (oh, ow) = self.out_hw(h, w);
        let cols_w = b * oh * ow;
        let mut cols = vec![T::zero(); c * k * k * cols_w];
        let xd = x.data();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * cols_w;
                    for bi in 0..b {
                        let img = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        let base = row + bi * oh * ow;
                        for oy in 0..oh {
                            let iy = oy as isize + ki as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &img[iy as usize * w..(iy as usize + 1) * w];
                            let dst = &mut cols[base + oy * ow..base + (oy + 1) * ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = ox as isize + kj as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], in_shape: &[usize]) -> Tensor<T> {
        let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (k, p) = (self.kernel, self.padding);
        let (oh, ow) = self.out_hw(h, w);
        let cols_w = b * oh * ow;
        let mut dx = Tensor::zeros(in_shape);
        let xd = dx.data_mut();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * cols_w;
                    for bi in 0..b {
                        let off = (bi * c + ci) * h * w;
                        let base = row + bi * oh * ow;
                        for oy in 0..oh {
                            let iy = oy as isize + ki as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = ox as isize + kj as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    xd[off + iy as usize * w + ix as usize] += cols[base + oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let [b, _, h, w] = dims4(x);
        let (oh, ow) = self.out_hw(h, w);
        let o = self.out_channels();
        let ckk = self.weight.row_len();
        let cols = self.im2col(x);
        let n = b * oh * ow;
        let mut y = vec![T::zero(); o * n];
        T::gemm(false, false, o, n, ckk, T::one(), self.weight.data(), &cols, T::zero(), &mut y);
        // [o, b, hw] -> [b, o, hw] with bias
        let hw = oh * ow;
        let mut out = Tensor::zeros(&[b, o, oh, ow]);
        let od = out.data_mut();
        for oc in 0..o {
            let bias = self.bias.data()[oc];
            for bi in 0..b {
                let src = &y[oc * n + bi * hw..oc * n + (bi + 1) * hw];
                let dst = &mut od[(bi * o + oc) * hw..(bi * o + oc + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        (out, cols)
    }

    pub fn backward(
        &self,
        cols: &[T],
        in_shape: &[usize],
        dy: &Tensor<T>,
        prefix: &str,
        grads: &mut ParamGrad<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [b, o, oh, ow] = dims4(dy);
        let hw = oh * ow;
        let n = b * hw;
        let ckk = self.weight.row_len();
        let mut dyp = vec![T::zero(); o * n];
        let dd = dy.data();
        let gb = grads.slot(&join(prefix, "bias"));
        for bi in 0..b {
            for oc in 0..o {
                let src = &dd[(bi * o + oc) * hw..(bi * o + oc + 1) * hw];
                dyp[oc * n + bi * hw..oc * n + (bi + 1) * hw].copy_from_slice(src);
                gb.data_mut()[oc] += src.iter().copied().sum::<T>();
            }
        }
        let gw = grads.slot(&join(prefix, "weight"));
        T::gemm(false, true, o, ckk, n, T::one(), &dyp, cols, T::one(), gw.data_mut());
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); ckk * n];
        T::gemm(true, false, ckk, n, o, T::one(), self.weight.data(), &dyp, T::zero(), &mut dcols);
        Some(self.col2im(&dcols, in_shape))
    }
}

impl<T: Scalar> ParamSet<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a 4-d activation, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped.
fn max_pool<T: Scalar>(x: &Tensor<T>, size: usize) -> (Tensor<T>, Vec<usize>) {
    let [b, c, h, w] = dims4(x);
    let (oh, ow) = (h / size, w / size);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let xd = x.data();
    let od = out.data_mut();
    let mut at = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                od[at] = xd[best];
                argmax.push(best);
                at += 1;
            }
        }
    }
    (out, argmax)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Linear(Linear<T>),
    Conv2d(Conv2d<T>),
    MaxPool2d(usize),
    Relu,
    /// Inverted dropout with the given drop probability.
    Dropout(f64),
    Flatten,
}

/// What backward needs from the forward pass of one layer.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Input(Tensor<T>),
    Conv { cols: Vec<T>, in_shape: Vec<usize> },
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Relu(Tensor<T>),
    Dropout(Option<Vec<T>>),
    Flatten(Vec<usize>),
}

/// Per-call forward options. With a dropout RNG present, dropout layers
/// sample masks; without one they are the identity. With `freeze_encoders`
/// set, traces record that backward passes stop at the encoder output.
#[derive(Default)]
pub struct ForwardCtx<'a> {
    pub dropout: Option<&'a mut ChaCha8Rng>,
    pub freeze_encoders: bool,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn with_dropout(rng: &'a mut ChaCha8Rng) -> Self {
        Self { dropout: Some(rng), freeze_encoders: false }
    }

    pub fn frozen(mut self) -> Self {
        self.freeze_encoders = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> (Tensor<T>, Vec<Cache<T>>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Linear(l) => (l.forward(&h), Cache::Input(h)),
                Layer::Conv2d(c) => {
                    let shape = h.shape().to_vec();
                    let (y, cols) = c.forward(&h);
                    (y, Cache::Conv { cols, in_shape: shape })
                }
                Layer::MaxPool2d(s) => {
                    let shape = h.shape().to_vec();
                    let (y, argmax) = max_pool(&h, *s);
                    (y, Cache::Pool { argmax, in_shape: shape })
                }
                Layer::Relu => {
                    let y = h.map(|v| v.max(T::zero()));
                    (y.clone(), Cache::Relu(y))
                }
                Layer::Dropout(p) => match ctx.dropout.as_deref_mut() {
                    Some(rng) => {
                        let keep = T::lit(1.0 / (1.0 - p));
                        let mask: Vec<T> =
                            (0..h.len()).map(|_| if rng.random::<f64>() < *p { T::zero() } else { keep }).collect();
                        let mut y = h;
                        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
                            *v *= m;
                        }
                        (y, Cache::Dropout(Some(mask)))
                    }
                    None => (h, Cache::Dropout(None)),
                },
                Layer::Flatten => {
                    let shape = h.shape().to_vec();
                    let (b, rest) = (h.rows(), h.row_len());
                    (h.reshape(&[b, rest]).expect("flatten"), Cache::Flatten(shape))
                }
            };
            caches.push(cache);
            h = next;
        }
        (h, caches)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward(x, &mut ForwardCtx::eval()).0
    }

    /// Backpropagates `dy` through the layers. Returns dL/dinput when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        caches: &[Cache<T>],
        dy: Tensor<T>,
        prefix: &str,
        grads: &mut ParamGrad<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut g = dy;
        for (idx, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let first = idx == 0;
            let name = join(prefix, &idx.to_string());
            g = match (layer, cache) {
                (Layer::Linear(l), Cache::Input(x)) => {
                    if first && !need_input_grad {
                        l.accumulate(x, &g, &name, grads);
                        return None;
                    }
                    l.backward(x, &g, &name, grads)
                }
                (Layer::Conv2d(c), Cache::Conv { cols, in_shape }) => {
                    let want = !first || need_input_grad;
                    c.backward(cols, in_shape, &g, &name, grads, want)?
                }
                (Layer::MaxPool2d(_), Cache::Pool { argmax, in_shape }) => {
                    let mut dx = Tensor::zeros(in_shape);
                    let d = dx.data_mut();
                    for (&src, &v) in argmax.iter().zip(g.data()) {
                        d[src] += v;
                    }
                    dx
                }
                (Layer::Relu, Cache::Relu(y)) => {
                    let mut dx = g;
                    for (v, &o) in dx.data_mut().iter_mut().zip(y.data()) {
                        if o <= T::zero() {
                            *v = T::zero();
                        }
                    }
                    dx
                }
                (Layer::Dropout(_), Cache::Dropout(mask)) => {
                    let mut dx = g;
                    if let Some(mask) = mask {
                        for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
                            *v *= m;
                        }
                    }
                    dx
                }
                (Layer::Flatten, Cache::Flatten(shape)) => g.reshape(shape).expect("unflatten"),
                _ => panic!("cache does not belong to layer {idx}"),
            };
        }
        need_input_grad.then_some(g)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear(l) => Some(l.out_features()),
            _ => None,
        })
    }

    pub fn last_linear_mut(&mut self) -> Option<&mut Linear<T>> {
        self.layers.iter_mut().rev().find_map(|l| match l {
            Layer::Linear(l) => Some(l),
            _ => None,
        })
    }
}

impl<T: Scalar> ParamSet<T> for Sequential<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            match layer {
                Layer::Linear(l) => l.visit_params(&p, f),
                Layer::Conv2d(c) => c.visit_params(&p, f),
                _ => {}
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &i.to_string());
            match layer {
                Layer::Linear(l) => l.visit_params_mut(&p, f),
                Layer::Conv2d(c) => c.visit_params_mut(&p, f),
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::{assign_params, flatten_params};
    use crate::rng::{standard_normal, stream, Stream};
    use dibs_oracle::fd_gradient;

    fn check_grads(net: &Sequential<f64>, x: &Tensor<f64>) {
        // loss = <r, net(x)> for a fixed random direction r
        let y = net.forward_eval(x);
        let r: Tensor<f64> = standard_normal(&mut stream(3, Stream::Eval), y.shape());
        let (_, caches) = net.forward(x, &mut ForwardCtx::eval());
        let mut grads = ParamGrad::zeros_for(net);
        let dx = net.backward(&caches, r.clone(), "", &mut grads, true).unwrap();

        let base = flatten_params(net, |_| true);
        let mut probe = net.clone();
        let fd = fd_gradient(
            |p| {
                assign_params(&mut probe, |_| true, p);
                let y = probe.forward_eval(x);
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            },
            &base,
            1e-5,
        )
        .unwrap();
        for (a, f) in grads.flatten().iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-6 + 1e-5 * f.abs(), "param grad {a} vs {f}");
        }
        let fdx = fd_gradient(
            |p| {
                let xi = Tensor::from_vec(x.shape(), p.to_vec()).unwrap();
                let y = net.forward_eval(&xi);
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            },
            x.data(),
            1e-5,
        )
        .unwrap();
        for (a, f) in dx.data().iter().zip(&fdx) {
            assert!((a - f).abs() <= 1e-6 + 1e-5 * f.abs(), "input grad {a} vs {f}");
        }
    }

    #[test]
    fn conv_pool_stack_matches_finite_differences() {
        let mut rng = stream(1, Stream::Init);
        let net = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(2, 3, 3, 1, &mut rng)),
            Layer::Relu,
            Layer::MaxPool2d(2),
            Layer::Conv2d(Conv2d::new(3, 2, 3, 0, &mut rng)),
            Layer::Flatten,
            Layer::Linear(Linear::new(2, 4, &mut rng)),
        ]);
        let x = standard_normal(&mut stream(2, Stream::Eval), &[2, 2, 6, 6]);
        check_grads(&net, &x);
    }

    #[test]
    fn mlp_matches_finite_differences() {
        let mut rng = stream(4, Stream::Init);
        let net = Sequential::new(vec![
            Layer::Linear(Linear::new(3, 5, &mut rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(5, 2, &mut rng)),
        ]);
        let x = standard_normal(&mut stream(5, Stream::Eval), &[4, 3]);
        check_grads(&net, &x);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = stream(6, Stream::Init);
        let conv = Conv2d::<f64>::new(2, 3, 3, 1, &mut rng);
        let x = standard_normal(&mut stream(7, Stream::Eval), &[2, 2, 4, 5]);
        let (y, _) = conv.forward(&x);
        let w = conv.weight.data();
        for b in 0..2 {
            for o in 0..3 {
                for oy in 0..4 {
                    for ox in 0..5 {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let (iy, ix) = (oy as isize + ki as isize - 1, ox as isize + kj as isize - 1);
                                    if iy < 0 || ix < 0 || iy >= 4 || ix >= 5 {
                                        continue;
                                    }
                                    acc += w[o * 18 + c * 9 + ki * 3 + kj]
                                        * x.data()[((b * 2 + c) * 4 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + o) * 4 + oy) * 5 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dropout_is_identity_without_rng() {
        let net = Sequential::<f32>::new(vec![Layer::Dropout(0.5)]);
        let x = Tensor::full(&[3, 4], 2.0);
        assert_eq!(net.forward_eval(&x), x);
        let mut rng = stream(1, Stream::Dropout);
        let (y, _) = net.forward(&x, &mut ForwardCtx::with_dropout(&mut rng));
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 4.0));
    }
}
