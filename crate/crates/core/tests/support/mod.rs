//! Brute-force recomputations shared by the oracle and acceptance tests.
#![allow(dead_code)]

use fullinfo::net::Model;
use fullinfo::ops;
use fullinfo::train::FrameStream;
use fullinfo::Tensor;

/// Feature of every frame, each computed from its own receptive-field window.
pub fn framewise(model: &Model<f64>, frames: &Tensor<f64>) -> Vec<Vec<f64>> {
    let rf = model.receptive_field();
    let d = frames.shape()[1];
    (0..=frames.shape()[0] - rf)
        .map(|t| {
            let w = Tensor::new(&[rf, d], frames.data()[t * d..(t + rf) * d].to_vec()).unwrap();
            let f = model.forward_features(&w).unwrap();
            assert_eq!(f.shape(), [1, model.cfg.feature_dim]);
            f.data().to_vec()
        })
        .collect()
}

pub fn brute_centroids(model: &Model<f64>, stream: &FrameStream<f64>) -> Vec<Vec<f64>> {
    let d = model.cfg.feature_dim;
    let mut sums = vec![vec![0.0; d]; stream.num_speakers];
    let mut counts = vec![0usize; stream.num_speakers];
    for u in &stream.utterances {
        for f in framewise(model, &u.frames) {
            for (a, b) in sums[u.label].iter_mut().zip(&f) {
                *a += b;
            }
            counts[u.label] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect()
}

/// A dead frame has a zero feature; the norm guard makes every cosine 0.
pub fn cosine_posterior(f: &[f64], centroids: &[Vec<f64>]) -> Vec<f64> {
    let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() + ops::LENGTH_NORM_EPS).sqrt();
    let e: Vec<f64> = centroids
        .iter()
        .map(|c| (f.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (norm(f) * norm(c))).exp())
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Operating points from counting acceptances at every threshold of a fine
/// grid, then the linear crossing of FRR and FAR.
pub fn grid_eer(targets: &[f64], nontargets: &[f64], lo: f64, hi: f64, step: f64) -> f64 {
    let rate = |xs: &[f64], th: f64, accept: bool| {
        xs.iter().filter(|&&s| (s >= th) == accept).count() as f64 / xs.len() as f64
    };
    let mut prev = (0.0, 1.0);
    let mut th = lo;
    while th <= hi + step {
        let frr = rate(targets, th, false);
        let far = rate(nontargets, th, true);
        if frr >= far {
            let (pf, pa) = prev;
            if pa - pf <= 0.0 {
                return 100.0 * frr;
            }
            // crossing of the segment from (pf, pa) to (frr, far) with FRR = FAR
            let a = (pa - pf) / ((pa - pf) + (frr - far));
            return 100.0 * (pf + a * (frr - pf));
        }
        prev = (frr, far);
        th += step;
    }
    100.0
}

