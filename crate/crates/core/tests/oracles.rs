//! Library results against independent brute-force recomputations.

mod support;

use fullinfo::data::{SpeakerMap, Utterance};
use fullinfo::dsp::FeatureMatrix;
use fullinfo::eval::{self, Condition};
use support::{brute_centroids, cosine_posterior, framewise, grid_eer};
use fullinfo::gradcheck::e2e_config;
use fullinfo::net::Model;
use fullinfo::ops;
use fullinfo::train::{self, FrameStream, SpeakerVectorTable, Streams, TrainConfig};
use fullinfo::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn utt(rng: &mut ChaCha8Rng, spk: usize, u: usize, frames: usize, dim: usize) -> Utterance {
    let data = (0..frames * dim)
        .map(|i| (0.7 * (i % dim) as f32 + 1.9 * spk as f32).sin() + rng.gen_range(-0.4..0.4))
        .collect();
    Utterance {
        utt_id: format!("s{spk}u{u}"),
        speaker_id: format!("s{spk}"),
        feats: FeatureMatrix::from_rows(frames, dim, data).unwrap(),
    }
}

fn corpus(seed: u64, speakers: usize, per: usize, dim: usize) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in 0..speakers {
        for u in 0..per {
            let frames = rng.gen_range(8..20);
            out.push(utt(&mut rng, s, u, frames, dim));
        }
    }
    out
}

#[test]
fn centroids_match_framewise_means() {
    for seed in 0..3 {
        let utts = corpus(seed, 3, 4, 8);
        let model = Model::<f64>::init(e2e_config(1.0), seed).unwrap();
        let speakers = SpeakerMap::from_utterances(&utts);
        let stream = FrameStream::<f64>::new(&utts, &speakers, model.receptive_field()).unwrap();
        let table = train::estimate_speaker_vectors(&model, &stream).unwrap();
        let want = brute_centroids(&model, &stream);
        for (s, w) in want.iter().enumerate() {
            for (a, b) in table.vectors.row(s).iter().zip(w) {
                assert!((a - b).abs() < 1e-6, "speaker {s}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn installed_classifier_reproduces_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::<f64>::init(e2e_config(1.0), 3).unwrap();
    for _ in 0..100 {
        let table = SpeakerVectorTable {
            vectors: Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0)),
            frame_counts: vec![1; 3],
        };
        let f: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        train::install_classifier(&mut model, &table).unwrap();
        let unit = ops::length_normalize(&Tensor::vector(f.clone()));
        let logits = model.classify(&unit.reshape(&[1, 4]).unwrap()).unwrap();
        let p = ops::softmax_rows(&logits);
        let centroids: Vec<Vec<f64>> = (0..3).map(|s| table.vectors.row(s).to_vec()).collect();
        let want = cosine_posterior(&f, &centroids);
        let lib = train::cosine_softmax_posterior(&f, &table);
        for s in 0..3 {
            assert!((p.data()[s] - want[s]).abs() < 1e-6);
            assert!((lib[s] - want[s]).abs() < 1e-6);
        }
    }
}

#[test]
fn epoch_start_loss_is_posterior_nll() {
    let utts = corpus(5, 3, 6, 8);
    let cfg = TrainConfig {
        epochs: 1,
        validation_fraction: 0.2,
        ..TrainConfig::default()
    };
    let model = Model::<f64>::init(e2e_config(1.0), 3).unwrap();
    let streams = Streams::<f64>::build(&utts, model.receptive_field(), cfg.validation_fraction).unwrap();
    assert!(!streams.val.is_empty());
    let centroids = brute_centroids(&model, &streams.train);
    let (mut nll, mut correct, mut n) = (0.0, 0, 0);
    for u in &streams.val.utterances {
        for f in framewise(&model, &u.frames) {
            let p = cosine_posterior(&f, &centroids);
            nll -= p[u.label].ln();
            // ties go to the lowest index
            let best = (0..p.len()).fold(0, |b, s| if p[s] > p[b] { s } else { b });
            correct += (best == u.label) as usize;
            n += 1;
        }
    }
    let (_, metrics) = train::run_fullinfo(model, &streams, &cfg).unwrap();
    let e = &metrics.epochs[0];
    assert!((e.start_val_loss - nll / n as f64).abs() < 1e-6, "{} vs {}", e.start_val_loss, nll / n as f64);
    assert!((e.start_val_acc - correct as f64 / n as f64).abs() < 1e-12);
}

#[test]
fn eer_matches_grid_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..1000 {
        let nt = rng.gen_range(1..40);
        let nn = rng.gen_range(1..80);
        let shift = rng.gen_range(0..20) as f64;
        // scores on a 0.1 lattice in [0, 5]; the grid probes between points
        let q = |rng: &mut ChaCha8Rng, bias: f64| ((rng.gen_range(0.0..30.0) + bias).min(50.0) as i64) as f64 * 0.1;
        let t: Vec<f64> = (0..nt).map(|_| q(&mut rng, shift)).collect();
        let n: Vec<f64> = (0..nn).map(|_| q(&mut rng, 0.0)).collect();
        let got = eval::eer(&t, &n).unwrap();
        let want = grid_eer(&t, &n, -0.005, 5.105, 0.01);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
    assert_eq!(eval::eer(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(eval::eer(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 100.0);
    assert_eq!(grid_eer(&[2.0, 3.0], &[0.0, 1.0], -0.5, 3.5, 0.01), 0.0);
}

#[test]
fn lda_solves_generalized_eigenproblem() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (d, k, per) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(3..8));
        let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for (c, m) in means.iter().enumerate() {
            for _ in 0..per {
                xs.push(m.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
                labels.push(c);
            }
        }
        let d_out = (k - 1).min(d);
        let t = eval::lda_fit(&xs, &labels, d_out).unwrap();

        let n = xs.len() as f64;
        let col = |v: &[f64]| DMatrix::from_column_slice(d, 1, v);
        let mu = xs.iter().fold(DMatrix::zeros(d, 1), |a, x| a + col(x)) / n;
        let mut sw = DMatrix::<f64>::zeros(d, d);
        let mut sb = DMatrix::<f64>::zeros(d, d);
        for c in 0..k {
            let members: Vec<&Vec<f64>> = xs.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(x, _)| x).collect();
            let mc = members.iter().fold(DMatrix::zeros(d, 1), |a, x| a + col(x)) / members.len() as f64;
            for x in &members {
                let r = col(x) - &mc;
                sw += &r * r.transpose() / n;
            }
            let dm = &mc - &mu;
            sb += &dm * dm.transpose() * (members.len() as f64 / n);
        }
        sw += DMatrix::identity(d, d) * (1e-4 * sw.trace() / d as f64);
        let dense = sw.clone().try_inverse().unwrap() * &sb;
        let mut lambdas: Vec<f64> = dense.complex_eigenvalues().iter().map(|z| z.re).collect();
        lambdas.sort_by(|a, b| b.total_cmp(a));

        for (i, row) in t.projection.iter().enumerate() {
            let w = col(row);
            let lam = t.eigenvalues[i];
            assert!((lam - lambdas[i]).abs() < 1e-8 * (1.0 + lambdas[0]), "{lam} vs {}", lambdas[i]);
            let resid = (&sb * &w - &sw * &w * lam).norm();
            assert!(resid < 1e-8 * (1.0 + lam) * w.norm(), "residual {resid}");
            assert!(((w.transpose() * &sw * &w)[(0, 0)] - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn conditions_count_trials_and_crop_in_place() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tests = Vec::new();
    for s in 0..4 {
        for u in 0..3 {
            let frames = rng.gen_range(150..1000);
            tests.push(utt(&mut rng, s, u, frames, 2));
        }
    }
    let enrolled: Vec<String> = vec!["s0".into(), "s2".into(), "s9".into()];
    let mut previous: Option<eval::ConditionSet> = None;
    for c in [Condition::S20f, Condition::S50f, Condition::S100f, Condition::L3s, Condition::L9s] {
        let len = c.frames(10.0);
        let set = eval::make_conditions(&tests, &enrolled, c, 77).unwrap();
        let kept: Vec<&Utterance> = tests.iter().filter(|u| u.feats.time() >= len).collect();
        assert_eq!(set.skipped, tests.len() - kept.len());
        assert_eq!(set.tests.len(), kept.len());
        assert_eq!(set.trials.len(), enrolled.len() * kept.len());
        let targets = kept.iter().filter(|u| u.speaker_id == "s0" || u.speaker_id == "s2").count();
        assert_eq!(set.trials.n_targets(), targets);
        for cropped in &set.tests {
            assert_eq!(cropped.feats.time(), len);
            let src = tests.iter().find(|u| u.utt_id == cropped.utt_id).unwrap();
            let d = src.feats.dim();
            let hits = (0..=src.feats.time() - len)
                .filter(|&s| src.feats.frames.data()[s * d..(s + len) * d] == *cropped.feats.frames.data())
                .count();
            assert!(hits >= 1, "crop of {} is not a window of its source", cropped.utt_id);
        }
        // shorter crops sit inside the longer ones
        if let Some(prev) = &previous {
            for short in &prev.tests {
                if let Some(long) = set.tests.iter().find(|u| u.utt_id == short.utt_id) {
                    let (a, b) = (short.feats.frames.data(), long.feats.frames.data());
                    assert!(b.windows(a.len()).any(|w| w == a));
                }
            }
        }
        previous = Some(set);
    }
}
