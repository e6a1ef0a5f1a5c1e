//! The convolutional + time-delay feature net and its classifier head.
//!
//! Data flow for one window of raw frames `[time, input_dim]`:
//!
//! 1. splice: the `left + right + 1` context frames become input channels,
//!    giving `[ctx, time - ctx + 1, input_dim]`;
//! 2. conv blocks: valid conv2d, ReLU, non-overlapping max-pool along frequency;
//! 3. flatten channels x frequency per time step;
//! 4. time-delay blocks: spliced affine, ReLU;
//! 5. feature layer: affine to `feature_dim`, then length normalization;
//! 6. classifier: `cosine_scale * W_cls f + b_cls`.
//!
//! Every stage is valid-only, so a window of exactly
//! [`NetConfig::receptive_field`] frames yields one feature.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{checksum, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel_time: usize,
    pub kernel_freq: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdnnSpec {
    pub offsets: Vec<i32>,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub splice_left: usize,
    pub splice_right: usize,
    pub conv: Vec<ConvSpec>,
    pub tdnn: Vec<TdnnSpec>,
    pub feature_dim: usize,
    pub num_speakers: usize,
    pub cosine_scale: f64,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 40,
            splice_left: 4,
            splice_right: 4,
            conv: vec![
                ConvSpec {
                    filters: 32,
                    kernel_time: 3,
                    kernel_freq: 9,
                    pool: 2,
                },
                ConvSpec {
                    filters: 64,
                    kernel_time: 2,
                    kernel_freq: 5,
                    pool: 2,
                },
            ],
            tdnn: vec![
                TdnnSpec {
                    offsets: vec![-2, 0, 2],
                    width: 128,
                },
                TdnnSpec {
                    offsets: vec![-2, 0, 2],
                    width: 128,
                },
            ],
            feature_dim: 64,
            num_speakers: 50,
            cosine_scale: 1.0,
            activation: Activation::Relu,
        }
    }
}

impl NetConfig {
    /// A narrow variant of the default geometry with the same 20-frame
    /// receptive field; cheap enough for the synthetic experiments.
    pub fn small(num_speakers: usize) -> Self {
        NetConfig {
            conv: vec![
                ConvSpec {
                    filters: 8,
                    kernel_time: 3,
                    kernel_freq: 5,
                    pool: 2,
                },
                ConvSpec {
                    filters: 16,
                    kernel_time: 2,
                    kernel_freq: 3,
                    pool: 2,
                },
            ],
            tdnn: vec![
                TdnnSpec {
                    offsets: vec![-2, 0, 2],
                    width: 64,
                },
                TdnnSpec {
                    offsets: vec![-2, 0, 2],
                    width: 64,
                },
            ],
            feature_dim: 32,
            num_speakers,
            ..NetConfig::default()
        }
    }

    pub fn context(&self) -> usize {
        self.splice_left + self.splice_right + 1
    }

    /// Raw frames consumed per emitted feature.
    pub fn receptive_field(&self) -> usize {
        self.context()
            + self.conv.iter().map(|c| c.kernel_time - 1).sum::<usize>()
            + self.tdnn.iter().map(|t| ops::offsets_span(&t.offsets)).sum::<usize>()
    }

    /// Width of the flattened conv output feeding the first time-delay layer.
    pub fn flat_dim(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.flat_dim_unchecked())
    }

    fn flat_dim_unchecked(&self) -> usize {
        let mut freq = self.input_dim;
        let mut ch = self.context();
        for c in &self.conv {
            freq = (freq + 1 - c.kernel_freq) / c.pool;
            ch = c.filters;
        }
        ch * freq
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.feature_dim == 0 {
            return bad("input_dim and feature_dim must be positive".into());
        }
        if self.num_speakers < 2 {
            return bad(format!("need at least 2 speakers, got {}", self.num_speakers));
        }
        if !(self.cosine_scale > 0.0 && self.cosine_scale.is_finite()) {
            return bad(format!("cosine_scale must be positive, got {}", self.cosine_scale));
        }
        let mut freq = self.input_dim;
        for (i, c) in self.conv.iter().enumerate() {
            if c.filters == 0 || c.kernel_time == 0 || c.kernel_freq == 0 || c.pool == 0 {
                return bad(format!("conv{i}: all extents must be positive"));
            }
            if c.kernel_freq > freq {
                return bad(format!("conv{i}: kernel_freq {} exceeds {freq} bins", c.kernel_freq));
            }
            let out = freq + 1 - c.kernel_freq;
            if out % c.pool != 0 {
                return bad(format!("conv{i}: {out} frequency bins not divisible by pool {}", c.pool));
            }
            freq = out / c.pool;
        }
        for (i, t) in self.tdnn.iter().enumerate() {
            if t.offsets.is_empty() || t.width == 0 {
                return bad(format!("tdnn{i}: needs offsets and a positive width"));
            }
        }
        Ok(())
    }

    /// Parameter tensor names and shapes, classifier last.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.context();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((
                format!("conv{i}.weight"),
                vec![c.filters, cin, c.kernel_time, c.kernel_freq],
            ));
            out.push((format!("conv{i}.bias"), vec![c.filters]));
            cin = c.filters;
        }
        let mut din = self.flat_dim_unchecked();
        for (i, t) in self.tdnn.iter().enumerate() {
            out.push((format!("tdnn{i}.weight"), vec![t.width, t.offsets.len() * din]));
            out.push((format!("tdnn{i}.bias"), vec![t.width]));
            din = t.width;
        }
        out.push(("feature.weight".into(), vec![self.feature_dim, din]));
        out.push(("feature.bias".into(), vec![self.feature_dim]));
        out.push(("classifier.weight".into(), vec![self.num_speakers, self.feature_dim]));
        out.push(("classifier.bias".into(), vec![self.num_speakers]));
        out
    }
}

/// Weight and bias of one layer; conv weights are `[filters, channels, kt, kf]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Layer<T> {
    fn zeros_like(&self) -> Self {
        Layer {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// Everything below the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub conv: Vec<Layer<T>>,
    pub tdnn: Vec<Layer<T>>,
    pub feature: Layer<T>,
}

impl<T: Real> NetParams<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for l in self.conv.iter().chain(&self.tdnn).chain(std::iter::once(&self.feature)) {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for l in self
            .conv
            .iter_mut()
            .chain(self.tdnn.iter_mut())
            .chain(std::iter::once(&mut self.feature))
        {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    fn zeros_like(&self) -> Self {
        NetParams {
            conv: self.conv.iter().map(Layer::zeros_like).collect(),
            tdnn: self.tdnn.iter().map(Layer::zeros_like).collect(),
            feature: self.feature.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub net: NetParams<T>,
    /// `weight: [S, D]`, `bias: [S]`.
    pub classifier: Layer<T>,
}

impl<T: Real> ModelParams<T> {
    /// Tensors in [`NetConfig::param_shapes`] order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.net.tensors();
        v.push(&self.classifier.weight);
        v.push(&self.classifier.bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.net.tensors_mut();
        v.push(&mut self.classifier.weight);
        v.push(&mut self.classifier.bias);
        v
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.tensors())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let layer = |l: &Layer<T>| Layer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        ModelParams {
            net: NetParams {
                conv: self.net.conv.iter().map(layer).collect(),
                tdnn: self.net.tdnn.iter().map(layer).collect(),
                feature: layer(&self.net.feature),
            },
            classifier: layer(&self.classifier),
        }
    }

    fn from_tensors(cfg: &NetConfig, mut tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = cfg.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: config implies {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.drain(..);
        let mut next = || Layer {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let conv = (0..cfg.conv.len()).map(|_| next()).collect();
        let tdnn = (0..cfg.tdnn.len()).map(|_| next()).collect();
        let feature = next();
        let classifier = next();
        Ok(ModelParams {
            net: NetParams {
                conv,
                tdnn,
                feature,
            },
            classifier,
        })
    }
}

/// Gradients of the loss; the classifier entry is absent when it is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub net: NetParams<T>,
    pub classifier: Option<Layer<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn add_assign(&mut self, other: &Gradients<T>) -> Result<()> {
        for (a, b) in self.net.tensors_mut().into_iter().zip(other.net.tensors()) {
            a.axpy(T::one(), b)?;
        }
        match (&mut self.classifier, &other.classifier) {
            (Some(a), Some(b)) => {
                a.weight.axpy(T::one(), &b.weight)?;
                a.bias.axpy(T::one(), &b.bias)?;
            }
            (None, None) => {}
            _ => return Err(Error::Config("mixing frozen and trainable classifier gradients".into())),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.net.tensors().iter().all(|t| t.is_finite())
            && self
                .classifier
                .as_ref()
                .is_none_or(|c| c.weight.is_finite() && c.bias.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeature<T> {
    pub vector: Tensor<T>,
    pub normalized: bool,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    conv_in: Vec<Tensor<T>>,
    conv_pre: Vec<Tensor<T>>,
    conv_act: Vec<Tensor<T>>,
    /// Shape of the last pooled conv output before flattening.
    pooled_shape: Vec<usize>,
    td_in: Vec<Tensor<T>>,
    td_pre: Vec<Tensor<T>>,
    feat_in: Tensor<T>,
    /// Feature layer output before length normalization.
    pub hidden: Tensor<T>,
    /// Length-normalized features `[n, D]`.
    pub features: Tensor<T>,
    /// Classifier logits `[n, S]`.
    pub logits: Tensor<T>,
}

impl<T: Real> Trace<T> {
    /// Distance of the pass from the nearest non-differentiable point: the
    /// smallest ReLU pre-activation magnitude, or the smallest gap between the
    /// two largest values of a pooling window whose maximum is positive.
    pub fn kink_margin(&self, pools: &[usize]) -> f64 {
        let mut m = f64::INFINITY;
        for z in self.conv_pre.iter().chain(&self.td_pre) {
            for v in z.data() {
                m = m.min(v.as_f64().abs());
            }
        }
        for (a, &pool) in self.conv_act.iter().zip(pools) {
            for w in a.data().chunks_exact(pool.max(1)) {
                let mut top = [f64::NEG_INFINITY; 2];
                for v in w {
                    let v = v.as_f64();
                    if v > top[0] {
                        top = [v, top[0]];
                    } else if v > top[1] {
                        top[1] = v;
                    }
                }
                if pool > 1 && top[0] > 0.0 {
                    m = m.min(top[0] - top[1]);
                }
            }
        }
        m
    }
}

/// He-scaled uniform: `U(-a, a)` with `a = sqrt(6 / fan_in)`, i.e. variance `2 / fan_in`.
fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-a..a)))
}

pub fn init_params<T: Real>(cfg: &NetConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[1..].iter().product();
                he_uniform(&shape, fan_in, &mut rng)
            }
        })
        .collect();
    ModelParams::from_tensors(cfg, tensors)
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub cfg: NetConfig,
    pub params: ModelParams<T>,
}

fn splice_channels<T: Real>(window: &Tensor<T>, ctx: usize) -> Result<Tensor<T>> {
    let (time, dim) = (window.shape()[0], window.shape()[1]);
    let out_t = time + 1 - ctx;
    let mut data = Vec::with_capacity(ctx * out_t * dim);
    for c in 0..ctx {
        data.extend_from_slice(&window.data()[c * dim..(c + out_t) * dim]);
    }
    Tensor::new(&[ctx, out_t, dim], data)
}

/// `[channels, time, freq]` -> `[time, channels * freq]`.
fn flatten_time_major<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for ti in 0..t {
            let src = &x.data()[(ci * t + ti) * f..(ci * t + ti + 1) * f];
            out[ti * c * f + ci * f..ti * c * f + (ci + 1) * f].copy_from_slice(src);
        }
    }
    Tensor::new(&[t, c * f], out)
}

fn unflatten_time_major<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let (c, t, f) = (shape[0], shape[1], shape[2]);
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for ti in 0..t {
            let src = &x.data()[ti * c * f + ci * f..ti * c * f + (ci + 1) * f];
            out[(ci * t + ti) * f..(ci * t + ti + 1) * f].copy_from_slice(src);
        }
    }
    Tensor::new(shape, out)
}

impl<T: Real> Model<T> {
    pub fn new(cfg: NetConfig, params: ModelParams<T>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        for ((name, shape), t) in shapes.iter().zip(params.tensors()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: config implies {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    pub fn receptive_field(&self) -> usize {
        self.cfg.receptive_field()
    }

    /// Number of features a window of `frames` raw frames yields.
    pub fn num_features(&self, frames: usize) -> Result<usize> {
        let rf = self.receptive_field();
        if frames < rf {
            return Err(Error::SegmentTooShort {
                needed: rf,
                got: frames,
            });
        }
        Ok(frames + 1 - rf)
    }

    fn check_window(&self, window: &Tensor<T>) -> Result<()> {
        if window.rank() != 2 || window.shape()[1] != self.cfg.input_dim {
            return Err(Error::dim("feature net input", window.shape(), &[0, self.cfg.input_dim]));
        }
        self.num_features(window.shape()[0]).map(|_| ())
    }

    /// Full forward pass over a `[time, input_dim]` window.
    pub fn forward(&self, window: &Tensor<T>) -> Result<Trace<T>> {
        self.check_window(window)?;
        let p = &self.params;
        let mut x = splice_channels(window, self.cfg.context())?;
        let mut conv_in = Vec::new();
        let mut conv_pre = Vec::new();
        let mut conv_act = Vec::new();
        for (spec, layer) in self.cfg.conv.iter().zip(&p.net.conv) {
            let z = ops::conv2d_forward(&x, &layer.weight, &layer.bias)?;
            let a = ops::relu_forward(&z);
            let pooled = ops::maxpool_freq_forward(&a, spec.pool)?;
            conv_in.push(std::mem::replace(&mut x, pooled));
            conv_pre.push(z);
            conv_act.push(a);
        }
        let pooled_shape = x.shape().to_vec();
        let mut h = flatten_time_major(&x)?;
        let mut td_in = Vec::new();
        let mut td_pre = Vec::new();
        for (spec, layer) in self.cfg.tdnn.iter().zip(&p.net.tdnn) {
            let z = ops::tdnn_forward(&h, &spec.offsets, &layer.weight, &layer.bias)?;
            let a = ops::relu_forward(&z);
            td_in.push(std::mem::replace(&mut h, a));
            td_pre.push(z);
        }
        let hidden = ops::affine_forward(&h, &p.net.feature.weight, &p.net.feature.bias)?;
        let features = ops::length_normalize_rows(&hidden);
        let logits = self.classify(&features)?;
        Ok(Trace {
            conv_in,
            conv_pre,
            conv_act,
            pooled_shape,
            td_in,
            td_pre,
            feat_in: h,
            hidden,
            features,
            logits,
        })
    }

    /// `cosine_scale * features W^T + b` for `[n, D]` features.
    pub fn classify(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.params.classifier;
        let mut logits = ops::affine_forward(features, &c.weight, &Tensor::zeros(c.bias.shape()))?;
        let scale = T::from_f64(self.cfg.cosine_scale);
        let s = c.bias.len();
        for row in logits.data_mut().chunks_exact_mut(s) {
            for (l, &b) in row.iter_mut().zip(c.bias.data()) {
                *l = *l * scale + b;
            }
        }
        Ok(logits)
    }

    /// Length-normalized features `[n, D]`, one per valid position.
    pub fn forward_features(&self, window: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(window)?.features)
    }

    pub fn forward_logits(&self, window: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(window)?.logits)
    }

    /// Frame features of a stored utterance.
    pub fn frame_features(&self, utt: &FeatureMatrix) -> Result<Vec<FrameFeature<T>>> {
        let f = self.features_of(utt)?;
        Ok((0..f.rows())
            .map(|i| FrameFeature {
                vector: Tensor::vector(f.row(i).to_vec()),
                normalized: true,
            })
            .collect())
    }

    pub fn features_of(&self, utt: &FeatureMatrix) -> Result<Tensor<T>> {
        self.forward_features(&utt.frames.cast())
    }

    /// Backpropagates `dlogits` (gradient of the loss w.r.t. the logits)
    /// through the whole net. With `classifier_grads = false` the classifier
    /// entry is `None`; the feature-net gradients are unaffected.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        dlogits: &Tensor<T>,
        classifier_grads: bool,
    ) -> Result<Gradients<T>> {
        let p = &self.params;
        if dlogits.shape() != trace.logits.shape() {
            return Err(Error::dim("backward", trace.logits.shape(), dlogits.shape()));
        }
        let scale = T::from_f64(self.cfg.cosine_scale);
        let mut scaled = dlogits.clone();
        scaled.scale(scale);
        let cls = ops::affine_backward(&trace.features, &p.classifier.weight, &scaled)?;
        let classifier = classifier_grads.then(|| Layer {
            weight: cls.param_grads["weight"].clone(),
            bias: {
                // the bias enters unscaled
                let mut b = cls.param_grads["bias"].clone();
                b.scale(T::one() / scale);
                b
            },
        });

        let mut grads = p.net.zeros_like();
        let dh = ops::length_normalize_rows_backward(&trace.hidden, &cls.input_grad)?.input_grad;
        let fg = ops::affine_backward(&trace.feat_in, &p.net.feature.weight, &dh)?;
        grads.feature = Layer {
            weight: fg.param_grads["weight"].clone(),
            bias: fg.param_grads["bias"].clone(),
        };
        let mut d = fg.input_grad;
        for i in (0..self.cfg.tdnn.len()).rev() {
            let dz = ops::relu_backward(&trace.td_pre[i], &d)?.input_grad;
            let g = ops::tdnn_backward(
                &trace.td_in[i],
                &self.cfg.tdnn[i].offsets,
                &p.net.tdnn[i].weight,
                &dz,
            )?;
            grads.tdnn[i] = Layer {
                weight: g.param_grads["weight"].clone(),
                bias: g.param_grads["bias"].clone(),
            };
            d = g.input_grad;
        }
        let mut d = unflatten_time_major(&d, &trace.pooled_shape)?;
        for i in (0..self.cfg.conv.len()).rev() {
            let da = ops::maxpool_freq_backward(&trace.conv_act[i], self.cfg.conv[i].pool, &d)?
                .input_grad;
            let dz = ops::relu_backward(&trace.conv_pre[i], &da)?.input_grad;
            let g = ops::conv2d_backward_impl(&trace.conv_in[i], &p.net.conv[i].weight, &dz, i > 0)?;
            grads.conv[i] = Layer {
                weight: g.param_grads["weight"].clone(),
                bias: g.param_grads["bias"].clone(),
            };
            d = g.input_grad;
        }
        Ok(Gradients {
            net: grads,
            classifier,
        })
    }

    /// Softmax cross-entropy of `labels` (one per emitted feature) and its
    /// gradient. Returns `(loss, correct, grads)`; `weight` rescales the
    /// loss and gradient, e.g. for a share of a larger mini-batch.
    pub fn loss_and_grad(
        &self,
        window: &Tensor<T>,
        labels: &[usize],
        classifier_grads: bool,
        weight: f64,
    ) -> Result<(f64, usize, Gradients<T>)> {
        let trace = self.forward(window)?;
        let (loss, mut dlogits) = ops::softmax_cross_entropy(&trace.logits, labels)?;
        dlogits.scale(T::from_f64(weight));
        let correct = argmax_rows(&trace.logits)
            .iter()
            .zip(labels)
            .filter(|(a, b)| a == b)
            .count();
        let grads = self.backward(&trace, &dlogits, classifier_grads)?;
        Ok((loss * weight, correct, grads))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(&self.params, &self.cfg, path)
    }
}

pub fn argmax_rows<T: Real>(x: &Tensor<T>) -> Vec<usize> {
    (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub const MODEL_MAGIC: &[u8; 4] = b"CTDN";
pub const MODEL_VERSION: u32 = 1;

/// Serializes to the `CTDN` container:
///
/// ```text
/// b"CTDN" | u32 version | u32 len | JSON config
/// | u32 count | count x (u32 name_len | name | u32 rank | rank x u32 | f32 data)
/// | u32 CRC32 of all preceding bytes
/// ```
pub fn encode_model<T: Real>(params: &ModelParams<T>, cfg: &NetConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let shapes = cfg.param_shapes();
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for ((name, _), t) in shapes.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or(Error::Format {
            offset: self.pos as u64,
            msg: "unexpected end of model".into(),
        })?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 8 || &bytes[0..4] != MODEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad model magic".into(),
        });
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != MODEL_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Checksum {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let len = r.u32()? as usize;
    let cfg: NetConfig = serde_json::from_slice(r.take(len)?)?;
    cfg.validate()?;
    let count = r.u32()? as usize;
    let shapes = cfg.param_shapes();
    if count != shapes.len() {
        return Err(Error::ConfigMismatch(format!(
            "config implies {} tensors, container holds {count}",
            shapes.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, _) in &shapes {
        let nlen = r.u32()? as usize;
        let got = String::from_utf8_lossy(r.take(nlen)?).into_owned();
        if &got != name {
            return Err(Error::ConfigMismatch(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(&shape, data)?);
    }
    let params = ModelParams::from_tensors(&cfg, tensors)?;
    Ok(Model { cfg, params })
}

pub fn save_model<T: Real>(params: &ModelParams<T>, cfg: &NetConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(params, cfg)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a model and checks it against the configuration the caller expects.
pub fn load_model_for(path: impl AsRef<Path>, expected: &NetConfig) -> Result<Model<f32>> {
    let m = load_model(path)?;
    if m.cfg.num_speakers != expected.num_speakers {
        return Err(Error::ConfigMismatch(format!(
            "model has {} speakers, expected {}",
            m.cfg.num_speakers, expected.num_speakers
        )));
    }
    if m.cfg != *expected {
        return Err(Error::ConfigMismatch("network geometry differs".into()));
    }
    Ok(m)
}
