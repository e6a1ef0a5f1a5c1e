//! Central finite-difference checks of every backward pass, in f64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::net::{Activation, ConvSpec, Model, NetConfig, TdnnSpec};
use crate::ops;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this in both estimates are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Minimum distance from a ReLU or max-pool kink for end-to-end cases.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub layer: &'static str,
    pub cases: usize,
    /// Scalar partial derivatives compared.
    pub checked: usize,
    pub max_rel_err: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic[i]` against central differences of `f` with respect to
/// `inputs[i]`. Returns `(max relative error, partials checked)`.
pub fn compare(
    inputs: &[Tensor<f64>],
    analytic: &[&Tensor<f64>],
    f: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut n = 0;
    let mut probe = inputs.to_vec();
    for (i, g) in analytic.iter().enumerate() {
        for k in 0..probe[i].len() {
            let x0 = probe[i].data()[k];
            probe[i].data_mut()[k] = x0 + FD_STEP;
            let up = f(&probe)?;
            probe[i].data_mut()[k] = x0 - FD_STEP;
            let down = f(&probe)?;
            probe[i].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[k], numeric));
            n += 1;
        }
    }
    Ok((worst, n))
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Values bounded away from zero so no ReLU kink lies within one step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn param<'a>(g: &'a ops::LayerGrad<f64>, name: &str) -> Result<&'a Tensor<f64>> {
    g.param(name)
        .ok_or_else(|| Error::Numerical(format!("missing {name} gradient")))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

struct Acc {
    report: GradReport,
}

impl Acc {
    fn new(layer: &'static str) -> Self {
        Acc {
            report: GradReport {
                layer,
                cases: 0,
                checked: 0,
                max_rel_err: 0.0,
            },
        }
    }

    fn add(&mut self, (err, n): (f64, usize)) {
        self.report.cases += 1;
        self.report.checked += n;
        self.report.max_rel_err = self.report.max_rel_err.max(err);
    }
}

pub fn check_affine(cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("affine");
    for _ in 0..cases {
        let (b, din, dout) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..6));
        let x = normal(&mut rng, &[b, din]);
        let w = normal(&mut rng, &[dout, din]);
        let bias = normal(&mut rng, &[dout]);
        let r = normal(&mut rng, &[b, dout]);
        let g = ops::affine_backward(&x, &w, &r)?;
        let f = |p: &[Tensor<f64>]| Ok(dot(&ops::affine_forward(&p[0], &p[1], &p[2])?, &r));
        acc.add(compare(
            &[x, w, bias],
            &[&g.input_grad, param(&g, "weight")?, param(&g, "bias")?],
            &f,
        )?);
    }
    Ok(acc.report)
}

pub fn check_relu(cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("relu");
    for _ in 0..cases {
        let shape = [rng.gen_range(1..5), rng.gen_range(1..8)];
        let x = off_kink(&mut rng, &shape);
        let r = normal(&mut rng, &shape);
        let g = ops::relu_backward(&x, &r)?;
        let f = |p: &[Tensor<f64>]| Ok(dot(&ops::relu_forward(&p[0]), &r));
        acc.add(compare(&[x], &[&g.input_grad], &f)?);
    }
    Ok(acc.report)
}

pub fn check_conv2d(cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("conv2d");
    for case in 0..cases {
        let (kt, kf) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (t, fr) = (kt + rng.gen_range(0..4), kf + rng.gen_range(0..4));
        let n = rng.gen_range(1..4);
        let (x, k) = if case % 2 == 0 {
            (normal(&mut rng, &[t, fr]), normal(&mut rng, &[n, kt, kf]))
        } else {
            let c = rng.gen_range(1..4);
            (normal(&mut rng, &[c, t, fr]), normal(&mut rng, &[n, c, kt, kf]))
        };
        let b = normal(&mut rng, &[n]);
        let r = normal(&mut rng, &[n, t - kt + 1, fr - kf + 1]);
        let g = ops::conv2d_backward(&x, &k, &r)?;
        let f = |p: &[Tensor<f64>]| Ok(dot(&ops::conv2d_forward(&p[0], &p[1], &p[2])?, &r));
        acc.add(compare(
            &[x, k, b],
            &[&g.input_grad, param(&g, "weight")?, param(&g, "bias")?],
            &f,
        )?);
    }
    Ok(acc.report)
}

pub fn check_maxpool(cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("maxpool_freq");
    for _ in 0..cases {
        let pool = rng.gen_range(1..4);
        let shape = [rng.gen_range(1..3), rng.gen_range(1..4), pool * rng.gen_range(1..4)];
        let len: usize = shape.iter().product();
        // distinct values 0.01 apart keep every max unique under perturbation
        let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.01 - 0.3).collect();
        vals.shuffle(&mut rng);
        let x = Tensor::new(&shape, vals)?;
        let r = normal(&mut rng, &[shape[0], shape[1], shape[2] / pool]);
        let g = ops::maxpool_freq_backward(&x, pool, &r)?;
        let f = |p: &[Tensor<f64>]| Ok(dot(&ops::maxpool_freq_forward(&p[0], pool)?, &r));
        acc.add(compare(&[x], &[&g.input_grad], &f)?);
    }
    Ok(acc.report)
}

pub fn check_tdnn(cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("tdnn");
    for _ in 0..cases {
        let mut offsets: Vec<i32> = (-3..=3).collect();
        offsets.shuffle(&mut rng);
        offsets.truncate(rng.gen_range(1..4));
        offsets.sort();
        let span = ops::offsets_span(&offsets);
        let (din, dout) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let t = span + 1 + rng.gen_range(0..4);
        let x = normal(&mut rng, &[t, din]);
        let w = normal(&mut rng, &[dout, offsets.len() * din]);
        let b = normal(&mut rng, &[dout]);
        let r = normal(&mut rng, &[t - span, dout]);
        let g = ops::tdnn_backward(&x, &offsets, &w, &r)?;
        let f = |p: &[Tensor<f64>]| Ok(dot(&ops::tdnn_forward(&p[0], &offsets, &p[1], &p[2])?, &r));
        acc.add(compare(
            &[x, w, b],
            &[&g.input_grad, param(&g, "weight")?, param(&g, "bias")?],
            &f,
        )?);
    }
    Ok(acc.report)
}

pub fn check_length_norm(cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("length_normalize");
    for case in 0..cases {
        let d = rng.gen_range(1..8);
        if case % 2 == 0 {
            let v = normal(&mut rng, &[d]);
            let r = normal(&mut rng, &[d]);
            let g = ops::length_normalize_backward(&v, &r)?;
            let f = |p: &[Tensor<f64>]| Ok(dot(&ops::length_normalize(&p[0]), &r));
            acc.add(compare(&[v], &[&g.input_grad], &f)?);
        } else {
            let shape = [rng.gen_range(1..5), d];
            let x = normal(&mut rng, &shape);
            let r = normal(&mut rng, &shape);
            let g = ops::length_normalize_rows_backward(&x, &r)?;
            let f = |p: &[Tensor<f64>]| Ok(dot(&ops::length_normalize_rows(&p[0]), &r));
            acc.add(compare(&[x], &[&g.input_grad], &f)?);
        }
    }
    Ok(acc.report)
}

pub fn check_cross_entropy(cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("softmax_cross_entropy");
    for _ in 0..cases {
        let (b, s) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let z = normal(&mut rng, &[b, s]);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..s)).collect();
        let (_, g) = ops::softmax_cross_entropy(&z, &labels)?;
        let f = |p: &[Tensor<f64>]| Ok(ops::softmax_cross_entropy(&p[0], &labels)?.0);
        acc.add(compare(&[z], &[&g], &f)?);
    }
    Ok(acc.report)
}

/// Configuration used by the end-to-end check: feature dimension 4, three
/// speakers.
pub fn e2e_config(cosine_scale: f64) -> NetConfig {
    NetConfig {
        input_dim: 8,
        splice_left: 1,
        splice_right: 1,
        conv: vec![ConvSpec {
            filters: 2,
            kernel_time: 2,
            kernel_freq: 3,
            pool: 2,
        }],
        tdnn: vec![TdnnSpec {
            offsets: vec![-1, 0, 1],
            width: 5,
        }],
        feature_dim: 4,
        num_speakers: 3,
        cosine_scale,
        activation: Activation::Relu,
    }
}

/// Loss gradient of the whole net, classifier included, against central
/// differences over every parameter.
pub fn check_end_to_end(cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("end_to_end");
    for case in 0..cases {
        let scale = if case % 2 == 0 { 1.0 } else { 2.5 };
        let cfg = e2e_config(scale);
        let mut model = Model::<f64>::init(cfg.clone(), seed.wrapping_add(case as u64))?;
        for b in model.params.tensors_mut() {
            if b.rank() == 1 {
                b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
            }
        }
        let t = cfg.receptive_field() + rng.gen_range(0..4);
        let pools: Vec<usize> = cfg.conv.iter().map(|c| c.pool).collect();
        // central differences straddling a kink are meaningless; redraw
        let window = loop {
            let w = normal(&mut rng, &[t, cfg.input_dim]);
            if model.forward(&w)?.kink_margin(&pools) > KINK_MARGIN {
                break w;
            }
        };
        let n = model.num_features(t)?;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let (_, _, grads) = model.loss_and_grad(&window, &labels, true, 1.0)?;
        let cls = grads.classifier.as_ref().expect("classifier grads requested");
        let mut analytic = grads.net.tensors();
        analytic.push(&cls.weight);
        analytic.push(&cls.bias);
        let params: Vec<Tensor<f64>> = model.params.tensors().into_iter().cloned().collect();
        let f = |p: &[Tensor<f64>]| {
            let mut m = model.clone();
            for (dst, src) in m.params.tensors_mut().into_iter().zip(p) {
                *dst = src.clone();
            }
            let logits = m.forward_logits(&window)?;
            Ok(ops::softmax_cross_entropy(&logits, &labels)?.0)
        };
        acc.add(compare(&params, &analytic, &f)?);
    }
    Ok(acc.report)
}

/// Every per-layer check followed by the end-to-end one.
pub fn run_all(cases: usize, seed: u64) -> Result<Vec<GradReport>> {
    Ok(vec![
        check_affine(cases, seed)?,
        check_relu(cases, seed + 1)?,
        check_conv2d(cases, seed + 2)?,
        check_maxpool(cases, seed + 3)?,
        check_tdnn(cases, seed + 4)?,
        check_length_norm(cases, seed + 5)?,
        check_cross_entropy(cases, seed + 6)?,
        check_end_to_end(cases, seed + 7)?,
    ])
}
