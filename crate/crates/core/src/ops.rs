//! Forward and gradient kernels for every layer of the feature net.
//!
//! Each `*_backward` takes the forward inputs plus the upstream gradient and
//! returns a [`LayerGrad`]; nothing is cached between calls, so the kernels
//! are pure and may run concurrently.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Guard added to the squared norm before the square root.
pub const LENGTH_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LayerGrad<T> {
    pub input_grad: Tensor<T>,
    pub param_grads: BTreeMap<&'static str, Tensor<T>>,
}

impl<T: Real> LayerGrad<T> {
    fn input_only(input_grad: Tensor<T>) -> Self {
        LayerGrad {
            input_grad,
            param_grads: BTreeMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_grads.get(name)
    }
}

fn check_affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::dim("affine", x.shape(), w.shape()));
    }
    Ok((x.shape()[0], x.shape()[1], w.shape()[0]))
}

/// `out[i, j] = sum_k w[j, k] * x[i, k] + b[j]`.
pub fn affine_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, din, dout) = check_affine(x, w)?;
    if b.shape() != [dout] {
        return Err(Error::dim("affine bias", w.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(batch * dout);
    for _ in 0..batch {
        out.extend_from_slice(b.data());
    }
    gemm(
        T::one(),
        Mat::rm(x.data(), batch, din),
        Mat::rm_t(w.data(), din, dout),
        T::one(),
        &mut out,
    );
    Tensor::new(&[batch, dout], out)
}

pub fn affine_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let (batch, din, dout) = check_affine(x, w)?;
    if upstream.shape() != [batch, dout] {
        return Err(Error::dim("affine upstream", &[batch, dout], upstream.shape()));
    }
    let mut dx = vec![T::zero(); batch * din];
    gemm(
        T::one(),
        Mat::rm(upstream.data(), batch, dout),
        Mat::rm(w.data(), dout, din),
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); dout * din];
    gemm(
        T::one(),
        Mat::rm_t(upstream.data(), dout, batch),
        Mat::rm(x.data(), batch, din),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); dout];
    for row in upstream.data().chunks_exact(dout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let mut param_grads = BTreeMap::new();
    param_grads.insert("weight", Tensor::new(&[dout, din], dw)?);
    param_grads.insert("bias", Tensor::new(&[dout], db)?);
    Ok(LayerGrad {
        input_grad: Tensor::new(&[batch, din], dx)?,
        param_grads,
    })
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
    out
}

/// Gradient is zero wherever `x <= 0`.
pub fn relu_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<LayerGrad<T>> {
    if x.shape() != upstream.shape() {
        return Err(Error::dim("relu", x.shape(), upstream.shape()));
    }
    let mut g = upstream.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(LayerGrad::input_only(g))
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    time: usize,
    freq: usize,
    nfilt: usize,
    kt: usize,
    kf: usize,
}

impl ConvGeom {
    fn out_time(&self) -> usize {
        self.time - self.kt + 1
    }
    fn out_freq(&self) -> usize {
        self.freq - self.kf + 1
    }
    fn patch(&self) -> usize {
        self.cin * self.kt * self.kf
    }
    fn positions(&self) -> usize {
        self.out_time() * self.out_freq()
    }
}

fn conv_geom<T: Real>(x: &Tensor<T>, k: &Tensor<T>) -> Result<ConvGeom> {
    let (cin, time, freq) = match *x.shape() {
        [t, f] => (1, t, f),
        [c, t, f] => (c, t, f),
        _ => return Err(Error::dim("conv2d input", x.shape(), k.shape())),
    };
    let (nfilt, kc, kt, kf) = match *k.shape() {
        [n, kt, kf] => (n, 1, kt, kf),
        [n, c, kt, kf] => (n, c, kt, kf),
        _ => return Err(Error::dim("conv2d kernel", x.shape(), k.shape())),
    };
    if kc != cin || kt > time || kf > freq {
        return Err(Error::dim("conv2d", x.shape(), k.shape()));
    }
    Ok(ConvGeom {
        cin,
        time,
        freq,
        nfilt,
        kt,
        kf,
    })
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Unfolds `x` into a `[patch, positions]` matrix; row `(c, i, j)` holds
/// `x[c, t + i, q + j]` for every output position `(t, q)`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ot, of) = (g.out_time(), g.out_freq());
    let npos = g.positions();
    let mut cols = vec![T::zero(); g.patch() * npos];
    let mut rows = cols.chunks_exact_mut(npos);
    for c in 0..g.cin {
        for i in 0..g.kt {
            for j in 0..g.kf {
                let row = rows.next().expect("patch rows");
                for t in 0..ot {
                    let src = (c * g.time + t + i) * g.freq + j;
                    row[t * of..(t + 1) * of].copy_from_slice(&x[src..src + of]);
                }
            }
        }
    }
    cols
}

/// Valid 2-D cross-correlation. `x` is `[time, freq]` or `[channels, time, freq]`;
/// `k` is `[filters, kt, kf]` or `[filters, channels, kt, kf]`.
/// Output is `[filters, time - kt + 1, freq - kf + 1]`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let g = conv_geom(x, k)?;
    if b.shape() != [g.nfilt] {
        return Err(Error::dim("conv2d bias", k.shape(), b.shape()));
    }
    let cols = im2col(x.data(), &g);
    let npos = g.positions();
    let mut out = Vec::with_capacity(g.nfilt * npos);
    for &bf in b.data() {
        out.extend(std::iter::repeat(bf).take(npos));
    }
    gemm(
        T::one(),
        Mat::rm(k.data(), g.nfilt, g.patch()),
        Mat::rm(&cols, g.patch(), npos),
        T::one(),
        &mut out,
    );
    Tensor::new(&[g.nfilt, g.out_time(), g.out_freq()], out)
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    conv2d_backward_impl(x, k, upstream, true)
}

/// Same as [`conv2d_backward`]; with `want_input = false` the returned input
/// gradient is all zeros and the col2im pass is skipped.
pub(crate) fn conv2d_backward_impl<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    upstream: &Tensor<T>,
    want_input: bool,
) -> Result<LayerGrad<T>> {
    let g = conv_geom(x, k)?;
    let npos = g.positions();
    if upstream.shape() != [g.nfilt, g.out_time(), g.out_freq()] {
        return Err(Error::dim(
            "conv2d upstream",
            &[g.nfilt, g.out_time(), g.out_freq()],
            upstream.shape(),
        ));
    }
    let patch = g.patch();
    let cols = im2col(x.data(), &g);
    let mut dk = vec![T::zero(); g.nfilt * patch];
    for (f, u) in upstream.data().chunks_exact(npos).enumerate() {
        for (p, c) in cols.chunks_exact(npos).enumerate() {
            dk[f * patch + p] = dot(u, c);
        }
    }
    let db: Vec<T> = upstream
        .data()
        .chunks_exact(npos)
        .map(|r| r.iter().copied().sum())
        .collect();

    let mut dx = vec![T::zero(); x.len()];
    if want_input {
        let mut dcols = vec![T::zero(); patch * npos];
        gemm(
            T::one(),
            Mat::rm_t(k.data(), patch, g.nfilt),
            Mat::rm(upstream.data(), g.nfilt, npos),
            T::zero(),
            &mut dcols,
        );
        let of = g.out_freq();
        let mut rows = dcols.chunks_exact(npos);
        for c in 0..g.cin {
            for i in 0..g.kt {
                for j in 0..g.kf {
                    let row = rows.next().expect("patch rows");
                    for t in 0..g.out_time() {
                        let dst = (c * g.time + t + i) * g.freq + j;
                        for (d, &s) in dx[dst..dst + of].iter_mut().zip(&row[t * of..(t + 1) * of]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    let mut param_grads = BTreeMap::new();
    param_grads.insert("weight", Tensor::new(k.shape(), dk)?);
    param_grads.insert("bias", Tensor::new(&[g.nfilt], db)?);
    Ok(LayerGrad {
        input_grad: Tensor::new(x.shape(), dx)?,
        param_grads,
    })
}

fn pool_geom<T: Real>(x: &Tensor<T>, pool: usize) -> Result<(usize, usize)> {
    if x.rank() != 3 || pool == 0 || x.shape()[2] % pool != 0 {
        return Err(Error::dim("maxpool_freq", x.shape(), &[pool]));
    }
    let freq = x.shape()[2];
    Ok((x.len() / freq, freq))
}

/// Max over non-overlapping windows of `pool` bins along the last axis of
/// `[channels, time, freq]`.
pub fn maxpool_freq_forward<T: Real>(x: &Tensor<T>, pool: usize) -> Result<Tensor<T>> {
    let (_, freq) = pool_geom(x, pool)?;
    let out: Vec<T> = x
        .data()
        .chunks_exact(pool)
        .map(|w| w.iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    let s = x.shape();
    Tensor::new(&[s[0], s[1], freq / pool], out)
}

/// Routes each upstream value to the first maximum of its window.
pub fn maxpool_freq_backward<T: Real>(
    x: &Tensor<T>,
    pool: usize,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let (_, freq) = pool_geom(x, pool)?;
    let s = x.shape();
    if upstream.shape() != [s[0], s[1], freq / pool] {
        return Err(Error::dim("maxpool_freq upstream", s, upstream.shape()));
    }
    let mut dx = vec![T::zero(); x.len()];
    for (w, (win, &g)) in x.data().chunks_exact(pool).zip(upstream.data()).enumerate() {
        let mut best = 0;
        for (i, &v) in win.iter().enumerate() {
            if v > win[best] {
                best = i;
            }
        }
        dx[w * pool + best] += g;
    }
    Ok(LayerGrad::input_only(Tensor::new(s, dx)?))
}

/// Frames consumed by a time-delay layer beyond the first (`max - min` offset).
pub fn offsets_span(offsets: &[i32]) -> usize {
    let lo = offsets.iter().copied().min().unwrap_or(0);
    let hi = offsets.iter().copied().max().unwrap_or(0);
    (hi - lo) as usize
}

fn tdnn_splice<T: Real>(x: &Tensor<T>, offsets: &[i32]) -> Result<Tensor<T>> {
    if x.rank() != 2 || offsets.is_empty() {
        return Err(Error::dim("tdnn input", x.shape(), &[offsets.len()]));
    }
    let (time, din) = (x.shape()[0], x.shape()[1]);
    let span = offsets_span(offsets);
    if time < span + 1 {
        return Err(Error::SegmentTooShort {
            needed: span + 1,
            got: time,
        });
    }
    let lo = *offsets.iter().min().unwrap();
    let out_t = time - span;
    let k = offsets.len();
    let mut out = Vec::with_capacity(out_t * k * din);
    for i in 0..out_t {
        for &o in offsets {
            let src = i + (o - lo) as usize;
            out.extend_from_slice(x.row(src));
        }
    }
    Tensor::new(&[out_t, k * din], out)
}

/// Time-delay layer: output frame `i` is the affine map of the concatenated
/// input frames at `center + offset` for each offset, where the first valid
/// center is `-min(offsets)`.
pub fn tdnn_forward<T: Real>(
    x: &Tensor<T>,
    offsets: &[i32],
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let spliced = tdnn_splice(x, offsets)?;
    affine_forward(&spliced, w, b)
}

pub fn tdnn_backward<T: Real>(
    x: &Tensor<T>,
    offsets: &[i32],
    w: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let spliced = tdnn_splice(x, offsets)?;
    let inner = affine_backward(&spliced, w, upstream)?;
    let din = x.shape()[1];
    let lo = *offsets.iter().min().unwrap();
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..spliced.shape()[0] {
        let row = inner.input_grad.row(i);
        for (j, &o) in offsets.iter().enumerate() {
            let dst = dx.row_mut(i + (o - lo) as usize);
            for (d, &s) in dst.iter_mut().zip(&row[j * din..(j + 1) * din]) {
                *d += s;
            }
        }
    }
    Ok(LayerGrad {
        input_grad: dx,
        param_grads: inner.param_grads,
    })
}

fn normalize_slice<T: Real>(v: &[T], out: &mut [T]) {
    let eps = T::from_f64(LENGTH_NORM_EPS);
    let s: T = v.iter().map(|&a| a * a).sum();
    let inv = T::one() / (s + eps).sqrt();
    for (o, &a) in out.iter_mut().zip(v) {
        *o = a * inv;
    }
}

fn normalize_slice_backward<T: Real>(v: &[T], up: &[T], out: &mut [T]) {
    let eps = T::from_f64(LENGTH_NORM_EPS);
    let s: T = v.iter().map(|&a| a * a).sum();
    let n = (s + eps).sqrt();
    let dot: T = v.iter().zip(up).map(|(&a, &g)| a * g).sum();
    let c = dot / (n * n * n);
    for ((o, &a), &g) in out.iter_mut().zip(v).zip(up) {
        *o = g / n - a * c;
    }
}

/// `v / sqrt(|v|^2 + eps)` for a single vector.
pub fn length_normalize<T: Real>(v: &Tensor<T>) -> Tensor<T> {
    let mut out = v.clone();
    normalize_slice(v.data(), out.data_mut());
    out
}

pub fn length_normalize_backward<T: Real>(
    v: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    if v.shape() != upstream.shape() {
        return Err(Error::dim("length_normalize", v.shape(), upstream.shape()));
    }
    let mut g = Tensor::zeros(v.shape());
    normalize_slice_backward(v.data(), upstream.data(), g.data_mut());
    Ok(LayerGrad::input_only(g))
}

/// Row-wise [`length_normalize`] for a `[rows, dim]` matrix.
pub fn length_normalize_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    for (src, dst) in x.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
        normalize_slice(src, dst);
    }
    out
}

pub fn length_normalize_rows_backward<T: Real>(
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    if x.shape() != upstream.shape() {
        return Err(Error::dim("length_normalize_rows", x.shape(), upstream.shape()));
    }
    let c = x.cols();
    let mut g = Tensor::zeros(x.shape());
    for ((v, up), out) in x
        .data()
        .chunks_exact(c)
        .zip(upstream.data().chunks_exact(c))
        .zip(g.data_mut().chunks_exact_mut(c))
    {
        normalize_slice_backward(v, up, out);
    }
    Ok(LayerGrad::input_only(g))
}

/// Row-wise softmax, max-subtracted.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let c = logits.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Mean negative log-likelihood of `labels` under row-wise softmax, and its
/// gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index {
            op: "softmax_cross_entropy",
            index: bad,
            bound: classes,
        });
    }
    let mut grad = softmax_rows(logits);
    let inv_b = T::from_f64(1.0 / batch as f64);
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        loss += lse - row[l].as_f64();
        let g = grad.row_mut(i);
        g[l] -= T::one();
        g.iter_mut().for_each(|v| *v *= inv_b);
    }
    Ok((loss / batch as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn affine_identity_and_zero_input() {
        let x = t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 0.0, -1.0]);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let out = affine_forward(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out, x);

        let w = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2], &[0.5, -0.5]);
        let out = affine_forward(&Tensor::zeros(&[4, 3]), &w, &b).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), b.data());
        }
    }

    #[test]
    fn affine_shape_error_names_shapes() {
        let err = affine_forward(
            &Tensor::<f64>::zeros(&[2, 3]),
            &Tensor::zeros(&[4, 5]),
            &Tensor::zeros(&[4]),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn affine_backward_trivial_cases() {
        let x = t(&[1, 3], &[1.0, 2.0, -1.0]);
        let w = t(&[1, 3], &[0.3, 0.1, 0.2]);
        let g = affine_backward(&x, &w, &t(&[1, 1], &[0.0])).unwrap();
        assert!(g.input_grad.data().iter().all(|&v| v == 0.0));
        assert!(g.param("weight").unwrap().data().iter().all(|&v| v == 0.0));

        let g = affine_backward(&x, &w, &t(&[1, 1], &[2.5])).unwrap();
        assert_eq!(g.param("weight").unwrap().data(), &[2.5, 5.0, -2.5]);
        assert_eq!(g.param("bias").unwrap().data(), &[2.5]);
    }

    #[test]
    fn relu_examples() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.input_grad.data(), &[0.0, 0.0, 1.0]);

        let pos = t(&[2], &[0.5, 3.0]);
        assert_eq!(relu_forward(&pos), pos);
        let up = t(&[2], &[-0.7, 0.2]);
        assert_eq!(relu_backward(&pos, &up).unwrap().input_grad, up);
    }

    #[test]
    fn conv_identity_and_constant() {
        let x = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.37).sin());
        let k = t(&[1, 1, 1], &[1.0]);
        let out = conv2d_forward(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.shape(), &[1, 4, 5]);
        assert_eq!(out.data(), x.data());

        let c = 0.75;
        let x = Tensor::from_fn(&[5, 6], |_| c);
        let k = Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.1 - 0.4);
        let b = t(&[2], &[0.3, -1.0]);
        let out = conv2d_forward(&x, &k, &b).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4]);
        for f in 0..2 {
            let ksum: f64 = k.data()[f * 6..(f + 1) * 6].iter().sum();
            let want = b.data()[f] + ksum * c;
            for v in &out.data()[f * 16..(f + 1) * 16] {
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_kernel_larger_than_input() {
        let x = Tensor::<f64>::zeros(&[3, 3]);
        let k = Tensor::zeros(&[1, 4, 1]);
        assert!(matches!(
            conv2d_forward(&x, &k, &Tensor::zeros(&[1])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| ((i * 7) % 5) as f64);
        assert_eq!(maxpool_freq_forward(&x, 1).unwrap(), x);
        let inc = Tensor::from_fn(&[1, 2, 6], |i| i as f64);
        let out = maxpool_freq_forward(&inc, 3).unwrap();
        assert_eq!(out.data(), &[2.0, 5.0, 8.0, 11.0]);
        assert!(maxpool_freq_forward(&inc, 4).is_err());
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = t(&[1, 1, 4], &[2.0, 2.0, 1.0, 1.0]);
        let g = maxpool_freq_backward(&x, 2, &t(&[1, 1, 2], &[1.0, 3.0])).unwrap();
        assert_eq!(g.input_grad.data(), &[1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn tdnn_framing() {
        let x = Tensor::from_fn(&[4, 3], |i| i as f64);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(tdnn_forward(&x, &[0], &eye, &Tensor::zeros(&[3])).unwrap(), x);

        let x = Tensor::<f64>::zeros(&[3, 2]);
        let out = tdnn_forward(&x, &[-1, 1], &Tensor::zeros(&[5, 4]), &Tensor::zeros(&[5])).unwrap();
        assert_eq!(out.shape(), &[1, 5]);

        let err = tdnn_forward(&x, &[-2, 1], &Tensor::zeros(&[5, 4]), &Tensor::zeros(&[5]));
        assert!(matches!(err, Err(Error::SegmentTooShort { needed: 4, got: 3 })));
    }

    #[test]
    fn length_normalize_examples() {
        let v = length_normalize(&t(&[2], &[3.0, 4.0]));
        assert!((v.data()[0] - 0.6).abs() < 1e-12 && (v.data()[1] - 0.8).abs() < 1e-12);
        let e = t(&[3], &[0.0, 1.0, 0.0]);
        assert!(length_normalize(&e).max_abs_diff(&e) < 1e-12);
        let z = length_normalize(&Tensor::<f64>::zeros(&[4]));
        assert!(z.is_finite() && z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let s = 7;
        let (loss, _) = softmax_cross_entropy(&Tensor::<f64>::zeros(&[2, s]), &[0, 3]).unwrap();
        assert!((loss - (s as f64).ln()).abs() < 1e-12);

        let mut l = Tensor::<f64>::zeros(&[1, 4]);
        l.set(&[0, 2], 50.0);
        let (loss, _) = softmax_cross_entropy(&l, &[2]).unwrap();
        assert!(loss < 1e-6);

        assert!(matches!(
            softmax_cross_entropy(&l, &[4]),
            Err(Error::Index { index: 4, .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let l = Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.3).cos() * 4.0);
        let (_, g) = softmax_cross_entropy(&l, &[0, 4, 2]).unwrap();
        for i in 0..3 {
            assert!(g.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
