//! Baseline and full-info training.
//!
//! Baseline training fits the feature net jointly with a free affine
//! classifier. Full-info training removes the free classifier: before every
//! epoch the per-speaker mean feature (the speaker vector) is recomputed with
//! the current net, length-normalized and written into the classifier, so
//! that the logits are cosines between a frame feature and each speaker
//! vector. A full-info run starts from a freshly initialized net that is
//! first warmed up against speaker vectors taken from a trained baseline.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SpeakerMap, Utterance};
use crate::error::{Error, Result};
use crate::net::{argmax_rows, Gradients, Model, NetConfig};
use crate::ops;
use crate::optim::Sgd;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierPolicy {
    /// Classifier rows keep training between re-installations.
    #[default]
    WithinEpoch,
    /// Classifier rows stay equal to the installed speaker vectors.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Chunks per mini-batch.
    pub batch_chunks: usize,
    /// Features per chunk; a chunk is `chunk_frames + receptive_field - 1`
    /// consecutive raw frames of one utterance.
    pub chunk_frames: usize,
    /// Halve the learning rate after two consecutive epochs without a
    /// `plateau_tolerance` gain in validation accuracy.
    pub halve_lr_on_plateau: bool,
    /// Baseline only: stop before `epochs` once validation accuracy has
    /// plateaued, using the same rule as warm-up.
    pub stop_on_plateau: bool,
    /// Minimum absolute accuracy gain (fraction, 0.001 = 0.1 points) that
    /// counts as an improvement.
    pub plateau_tolerance: f64,
    pub classifier_update_policy: ClassifierPolicy,
    pub warmup_source: Option<PathBuf>,
    pub warmup_max_epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_chunks: 8,
            chunk_frames: 32,
            halve_lr_on_plateau: true,
            stop_on_plateau: false,
            plateau_tolerance: 0.001,
            classifier_update_policy: ClassifierPolicy::WithinEpoch,
            warmup_source: None,
            warmup_max_epochs: 20,
            validation_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_chunks == 0 || self.chunk_frames == 0 {
            return Err(Error::Config("batch_chunks and chunk_frames must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Sgd::<f64>::new(self.lr, self.momentum).map(|_| ())
    }
}

/// One utterance with its speaker label.
#[derive(Debug, Clone)]
pub struct LabeledUtterance<T> {
    pub utt_id: String,
    pub frames: Tensor<T>,
    pub label: usize,
}

/// Labeled frames grouped by utterance; every frame position with a full
/// receptive field is one training example.
#[derive(Debug, Clone)]
pub struct FrameStream<T> {
    pub utterances: Vec<LabeledUtterance<T>>,
    pub num_speakers: usize,
}

impl<T: Real> FrameStream<T> {
    pub fn new(utts: &[Utterance], speakers: &SpeakerMap, receptive_field: usize) -> Result<Self> {
        let utterances = utts
            .iter()
            .map(|u| {
                if u.feats.time() < receptive_field {
                    return Err(Error::SegmentTooShort {
                        needed: receptive_field,
                        got: u.feats.time(),
                    });
                }
                Ok(LabeledUtterance {
                    utt_id: u.utt_id.clone(),
                    frames: u.feats.frames.cast(),
                    label: speakers.index_of(&u.speaker_id)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameStream {
            utterances,
            num_speakers: speakers.len(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn num_frames(&self, receptive_field: usize) -> usize {
        self.utterances
            .iter()
            .map(|u| u.frames.shape()[0] + 1 - receptive_field)
            .sum()
    }

    fn chunks(&self, receptive_field: usize, chunk_frames: usize) -> Vec<Chunk> {
        let mut out = Vec::new();
        for (i, u) in self.utterances.iter().enumerate() {
            let n = u.frames.shape()[0] + 1 - receptive_field;
            let mut start = 0;
            while start < n {
                let len = chunk_frames.min(n - start);
                out.push(Chunk {
                    utt: i,
                    start,
                    features: len,
                });
                start += len;
            }
        }
        out
    }

    fn window(&self, c: &Chunk, receptive_field: usize) -> Tensor<T> {
        let f = &self.utterances[c.utt].frames;
        let d = f.shape()[1];
        let rows = c.features + receptive_field - 1;
        Tensor::new(&[rows, d], f.data()[c.start * d..(c.start + rows) * d].to_vec())
            .expect("chunk inside utterance")
    }
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    utt: usize,
    start: usize,
    features: usize,
}

/// Splits utterances into training and validation sets: the last
/// `ceil(fraction * n)` utterances of every speaker with at least two
/// utterances are held out.
pub fn split_validation(utts: &[Utterance], fraction: f64) -> (Vec<Utterance>, Vec<Utterance>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, group) in crate::data::by_speaker(utts) {
        let n = group.len();
        let held = if fraction > 0.0 && n >= 2 {
            ((fraction * n as f64).ceil() as usize).min(n - 1)
        } else {
            0
        };
        for (i, u) in group.into_iter().enumerate() {
            if i < n - held {
                train.push(u.clone());
            } else {
                val.push(u.clone());
            }
        }
    }
    (train, val)
}

/// Per-speaker mean features `v(s)` and the number of frames behind each.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVectorTable<T> {
    /// `[S, D]`, un-normalized.
    pub vectors: Tensor<T>,
    pub frame_counts: Vec<usize>,
}

/// Mean feature of every speaker over the stream, using the model's current
/// parameters.
pub fn estimate_speaker_vectors<T: Real>(
    model: &Model<T>,
    stream: &FrameStream<T>,
) -> Result<SpeakerVectorTable<T>> {
    let s = stream.num_speakers;
    let d = model.cfg.feature_dim;
    let per_utt = stream
        .utterances
        .par_iter()
        .map(|u| {
            let f = model.forward_features(&u.frames)?;
            let mut sum = vec![0.0f64; d];
            for row in f.data().chunks_exact(d) {
                for (a, &v) in sum.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            Ok((u.label, f.rows(), sum))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![0.0f64; s * d];
    let mut counts = vec![0usize; s];
    for (label, n, sum) in per_utt {
        if label >= s {
            return Err(Error::Index {
                op: "estimate_speaker_vectors",
                index: label,
                bound: s,
            });
        }
        counts[label] += n;
        for (a, v) in sums[label * d..(label + 1) * d].iter_mut().zip(sum) {
            *a += v;
        }
    }
    let empty: Vec<usize> = (0..s).filter(|&i| counts[i] == 0).collect();
    if !empty.is_empty() {
        return Err(Error::EmptySpeakers(empty));
    }
    let vectors = Tensor::from_fn(&[s, d], |i| T::from_f64(sums[i] / counts[i / d] as f64));
    Ok(SpeakerVectorTable {
        vectors,
        frame_counts: counts,
    })
}

fn norm_eps(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() + ops::LENGTH_NORM_EPS).sqrt()
}

/// `p(s | f) = exp(cos(f, v_s)) / sum_s' exp(cos(f, v_s'))`, evaluated in f64.
pub fn cosine_softmax_posterior<T: Real>(feature: &[T], table: &SpeakerVectorTable<T>) -> Vec<f64> {
    let f: Vec<f64> = feature.iter().map(|v| v.as_f64()).collect();
    let nf = norm_eps(&f);
    let cos: Vec<f64> = (0..table.vectors.rows())
        .map(|s| {
            let v: Vec<f64> = table.vectors.row(s).iter().map(|x| x.as_f64()).collect();
            f.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (nf * norm_eps(&v))
        })
        .collect();
    let m = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = cos.iter().map(|c| (c - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Replaces the classifier with the length-normalized speaker vectors and
/// zeroes its bias. The feature net is untouched.
pub fn install_classifier<T: Real>(model: &mut Model<T>, table: &SpeakerVectorTable<T>) -> Result<()> {
    let w = &mut model.params.classifier.weight;
    if w.shape() != table.vectors.shape() {
        return Err(Error::dim("install_classifier", w.shape(), table.vectors.shape()));
    }
    for s in 0..table.vectors.rows() {
        let v = table.vectors.row(s);
        let norm = v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::DegenerateSpeaker { speaker: s, norm });
        }
    }
    let normalized = ops::length_normalize_rows(&table.vectors);
    w.data_mut().copy_from_slice(normalized.data());
    model.params.classifier.bias.fill(T::zero());
    Ok(())
}

/// Which parameters an epoch trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Everything, including a free classifier and its bias.
    Baseline,
    /// Feature net, plus classifier rows under `WithinEpoch`; the bias stays 0.
    FullInfo(ClassifierPolicy),
}

impl Objective {
    fn classifier_grads(self) -> bool {
        !matches!(self, Objective::FullInfo(ClassifierPolicy::Frozen))
    }

    fn frozen(self) -> (bool, bool) {
        match self {
            Objective::Baseline => (false, false),
            Objective::FullInfo(ClassifierPolicy::WithinEpoch) => (false, true),
            Objective::FullInfo(ClassifierPolicy::Frozen) => (true, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub acc: f64,
    pub epoch_start_val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub start_val_acc: f64,
    pub start_val_loss: f64,
    pub end_val_acc: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub batches: Vec<BatchRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainMetrics {
    /// Validation accuracy at the start of each recorded epoch.
    pub fn epoch_start_accuracies(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.start_val_acc).collect()
    }

    pub fn extend(&mut self, other: TrainMetrics) {
        self.batches.extend(other.batches);
        self.epochs.extend(other.epochs);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,batch,loss,acc,epoch_start_val_acc,seconds\n");
        for b in &self.batches {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.3}",
                b.epoch, b.batch, b.loss, b.acc, b.epoch_start_val_acc, b.seconds
            );
        }
        s
    }
}

/// Frame accuracy and mean cross-entropy of the model's logits.
pub fn evaluate<T: Real>(model: &Model<T>, stream: &FrameStream<T>) -> Result<(f64, f64)> {
    if stream.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let parts = stream
        .utterances
        .par_iter()
        .map(|u| {
            let logits = model.forward_logits(&u.frames)?;
            let labels = vec![u.label; logits.rows()];
            let (loss, _) = ops::softmax_cross_entropy(&logits, &labels)?;
            let correct = argmax_rows(&logits).iter().filter(|&&a| a == u.label).count();
            Ok((correct, logits.rows(), loss * logits.rows() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let (c, n, l) = parts
        .into_iter()
        .fold((0, 0, 0.0), |(c, n, l), (a, b, x)| (c + a, n + b, l + x));
    Ok((c as f64 / n as f64, l / n as f64))
}

/// Mini-batch SGD state that can be advanced one epoch at a time.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    pub metrics: TrainMetrics,
    sgd: Sgd<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    best_val: f64,
    /// Epochs since the last improvement or halving.
    stale: usize,
    phase: String,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig, phase: &str) -> Result<Self> {
        cfg.validate()?;
        let sgd = Sgd::new(cfg.lr, cfg.momentum)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_c4a7);
        Ok(Trainer {
            model,
            cfg,
            metrics: TrainMetrics::default(),
            sgd,
            rng,
            epoch: 0,
            best_val: f64::NEG_INFINITY,
            stale: 0,
            phase: phase.to_string(),
        })
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.sgd.lr
    }

    /// Discards momentum for the classifier after it is overwritten.
    pub fn reset_classifier_momentum(&mut self) {
        let n = self.model.params.tensors().len();
        self.sgd.reset(n - 2);
        self.sgd.reset(n - 1);
    }

    fn step(&mut self, grads: &Gradients<T>, objective: Objective) -> Result<()> {
        let (freeze_w, freeze_b) = objective.frozen();
        let placeholder = grads.classifier.is_none().then(|| {
            let c = &self.model.params.classifier;
            (Tensor::zeros(c.weight.shape()), Tensor::zeros(c.bias.shape()))
        });
        let mut g: Vec<&Tensor<T>> = grads.net.tensors();
        match (&grads.classifier, &placeholder) {
            (Some(c), _) => {
                g.push(&c.weight);
                g.push(&c.bias);
            }
            (None, Some((w, b))) => {
                g.push(w);
                g.push(b);
            }
            (None, None) => unreachable!(),
        }
        let mut frozen = vec![false; g.len()];
        let n = frozen.len();
        frozen[n - 2] = freeze_w || grads.classifier.is_none();
        frozen[n - 1] = freeze_b || grads.classifier.is_none();
        let mut params = self.model.params.tensors_mut();
        self.sgd.step(&mut params, &g, &frozen)
    }

    /// One pass over `train` in shuffled chunks. Validation accuracy and loss
    /// are measured before the first update and after the last.
    pub fn run_epoch(
        &mut self,
        train: &FrameStream<T>,
        val: &FrameStream<T>,
        objective: Objective,
    ) -> Result<EpochRecord> {
        let t0 = Instant::now();
        let rf = self.model.receptive_field();
        let (start_acc, start_loss) = evaluate(&self.model, val)?;
        let mut chunks = train.chunks(rf, self.cfg.chunk_frames);
        chunks.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct_sum, mut frames_sum) = (0.0, 0usize, 0usize);
        for (b, batch) in chunks.chunks(self.cfg.batch_chunks).enumerate() {
            let total: usize = batch.iter().map(|c| c.features).sum();
            let model = &self.model;
            let parts = batch
                .par_iter()
                .map(|c| {
                    let w = train.window(c, rf);
                    let labels = vec![train.utterances[c.utt].label; c.features];
                    model.loss_and_grad(
                        &w,
                        &labels,
                        objective.classifier_grads(),
                        c.features as f64 / total as f64,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut it = parts.into_iter();
            let (mut loss, mut correct, mut grads) = it.next().expect("non-empty batch");
            for (l, c, g) in it {
                loss += l;
                correct += c;
                grads.add_assign(&g)?;
            }
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at {} epoch {} batch {b}",
                    self.phase, self.epoch
                )));
            }
            self.step(&grads, objective)?;
            loss_sum += loss * total as f64;
            correct_sum += correct;
            frames_sum += total;
            self.metrics.batches.push(BatchRecord {
                epoch: self.epoch,
                batch: b,
                loss,
                acc: correct as f64 / total as f64,
                epoch_start_val_acc: start_acc,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
        let (end_acc, _) = evaluate(&self.model, val)?;
        let rec = EpochRecord {
            epoch: self.epoch,
            phase: self.phase.clone(),
            lr: self.sgd.lr,
            start_val_acc: start_acc,
            start_val_loss: start_loss,
            end_val_acc: end_acc,
            train_loss: loss_sum / frames_sum.max(1) as f64,
            train_acc: correct_sum as f64 / frames_sum.max(1) as f64,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {}: lr {:.4} loss {:.4} train acc {:.4} val acc {:.4} -> {:.4} ({:.1}s)",
            self.phase,
            self.epoch,
            rec.lr,
            rec.train_loss,
            rec.train_acc,
            rec.start_val_acc,
            rec.end_val_acc,
            rec.seconds
        );
        if self.cfg.halve_lr_on_plateau && !val.is_empty() {
            if end_acc < self.best_val + self.cfg.plateau_tolerance {
                self.stale += 1;
            } else {
                self.stale = 0;
            }
            self.best_val = self.best_val.max(end_acc);
            if self.stale >= 2 {
                self.sgd.lr *= 0.5;
                self.stale = 0;
            }
        }
        self.metrics.epochs.push(rec.clone());
        self.epoch += 1;
        Ok(rec)
    }
}

/// Training and validation streams built from one utterance list.
pub struct Streams<T> {
    pub speakers: SpeakerMap,
    pub train: FrameStream<T>,
    pub val: FrameStream<T>,
}

impl<T: Real> Streams<T> {
    pub fn build(utts: &[Utterance], receptive_field: usize, validation_fraction: f64) -> Result<Self> {
        let speakers = SpeakerMap::from_utterances(utts);
        if speakers.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "training needs at least 2 speakers, found {}",
                speakers.len()
            )));
        }
        let (train, val) = split_validation(utts, validation_fraction);
        Ok(Streams {
            train: FrameStream::new(&train, &speakers, receptive_field)?,
            val: FrameStream::new(&val, &speakers, receptive_field)?,
            speakers,
        })
    }
}

fn check_streams<T: Real>(streams: &Streams<T>, net: &NetConfig) -> Result<()> {
    if streams.train.num_speakers < 2 || streams.train.is_empty() {
        return Err(Error::InsufficientData("training needs at least 2 speakers".into()));
    }
    if streams.train.num_speakers != net.num_speakers {
        return Err(Error::ConfigMismatch(format!(
            "data has {} speakers, network expects {}",
            streams.train.num_speakers, net.num_speakers
        )));
    }
    Ok(())
}

/// Joint training of the feature net and a free affine classifier, for
/// `epochs` epochs or until the plateau rule fires when `stop_on_plateau`.
pub fn train_baseline<T: Real>(
    cfg: &TrainConfig,
    streams: &Streams<T>,
    net: &NetConfig,
) -> Result<(Model<T>, TrainMetrics)> {
    check_streams(streams, net)?;
    let model = Model::init(net.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone(), "baseline")?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch(&streams.train, &streams.val, Objective::Baseline)?;
        if cfg.stop_on_plateau && plateaued(&trainer.metrics.epochs, cfg.plateau_tolerance) {
            break;
        }
    }
    Ok((trainer.model, trainer.metrics))
}

/// True once the last two epochs each gained less than `tol` validation
/// accuracy over the best accuracy seen before them.
pub fn plateaued(epochs: &[EpochRecord], tol: f64) -> bool {
    let n = epochs.len();
    if n < 3 {
        return false;
    }
    let best_before = |k: usize| {
        epochs[..k]
            .iter()
            .map(|e| e.end_val_acc)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    (n - 2..n).all(|k| epochs[k].end_val_acc - best_before(k) < tol)
}

/// Seed offset separating the warm-up initialization from the baseline one.
const WARMUP_SEED_SALT: u64 = 0x77a2_4d5e_11c3_0b9f;

/// Initializes a fresh feature net, installs the baseline's speaker vectors
/// as its classifier and trains until validation accuracy gains less than
/// `plateau_tolerance` for two consecutive epochs (or `warmup_max_epochs`).
pub fn warm_up<T: Real>(
    baseline: &Model<T>,
    fresh_cfg: &NetConfig,
    streams: &Streams<T>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, TrainMetrics)> {
    check_streams(streams, fresh_cfg)?;
    if baseline.cfg.num_speakers != fresh_cfg.num_speakers
        || baseline.cfg.feature_dim != fresh_cfg.feature_dim
    {
        return Err(Error::ConfigMismatch(
            "warm-up source must match the fresh net in speakers and feature dimension".into(),
        ));
    }
    let table = estimate_speaker_vectors(baseline, &streams.train)?;
    let mut fresh = Model::init(fresh_cfg.clone(), cfg.seed ^ WARMUP_SEED_SALT)?;
    install_classifier(&mut fresh, &table)?;
    let mut trainer = Trainer::new(fresh, cfg.clone(), "warmup")?;
    let objective = Objective::FullInfo(cfg.classifier_update_policy);
    for _ in 0..cfg.warmup_max_epochs {
        trainer.run_epoch(&streams.train, &streams.val, objective)?;
        if plateaued(&trainer.metrics.epochs, cfg.plateau_tolerance) {
            break;
        }
    }
    Ok((trainer.model, trainer.metrics))
}

/// The iterative full-info loop: each epoch re-estimates the speaker
/// vectors with the current net, installs them as the classifier and runs
/// one epoch of SGD on the cosine-softmax objective.
pub fn run_fullinfo<T: Real>(
    model: Model<T>,
    streams: &Streams<T>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, TrainMetrics)> {
    check_streams(streams, &model.cfg)?;
    let mut trainer = Trainer::new(model, cfg.clone(), "fullinfo")?;
    let objective = Objective::FullInfo(cfg.classifier_update_policy);
    for _ in 0..cfg.epochs {
        let table = estimate_speaker_vectors(&trainer.model, &streams.train)?;
        install_classifier(&mut trainer.model, &table)?;
        trainer.reset_classifier_momentum();
        trainer.run_epoch(&streams.train, &streams.val, objective)?;
    }
    Ok((trainer.model, trainer.metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureMatrix;
    use crate::net::{Activation, ConvSpec, TdnnSpec};

    fn tiny_net(s: usize) -> NetConfig {
        NetConfig {
            input_dim: 6,
            splice_left: 1,
            splice_right: 1,
            conv: vec![ConvSpec {
                filters: 3,
                kernel_time: 2,
                kernel_freq: 3,
                pool: 2,
            }],
            tdnn: vec![TdnnSpec {
                offsets: vec![-1, 0, 1],
                width: 8,
            }],
            feature_dim: 4,
            num_speakers: s,
            cosine_scale: 1.0,
            activation: Activation::Relu,
        }
    }

    fn utt(spk: usize, u: usize, frames: usize, dim: usize) -> Utterance {
        let data = (0..frames * dim)
            .map(|i| {
                let k = (i % dim) as f32;
                2.0 * (0.9 * k + 2.1 * spk as f32).sin() + ((i * 37 + u * 11) % 13) as f32 * 0.05
            })
            .collect();
        Utterance {
            utt_id: format!("s{spk}u{u}"),
            speaker_id: format!("s{spk}"),
            feats: FeatureMatrix::from_rows(frames, dim, data).unwrap(),
        }
    }

    #[test]
    fn speaker_vector_trivial_cases() {
        let net = tiny_net(2);
        let model = Model::<f64>::init(net.clone(), 1).unwrap();
        let utts = vec![utt(0, 0, 6, 6), utt(1, 0, 6, 6)];
        let speakers = SpeakerMap::from_utterances(&utts);
        let stream = FrameStream::<f64>::new(&utts, &speakers, net.receptive_field()).unwrap();
        assert_eq!(net.receptive_field(), 6);
        let table = estimate_speaker_vectors(&model, &stream).unwrap();
        assert_eq!(table.frame_counts, vec![1, 1]);
        let f0 = model.forward_features(&stream.utterances[0].frames).unwrap();
        assert_eq!(table.vectors.row(0), f0.row(0));
    }

    #[test]
    fn missing_speaker_is_reported() {
        let net = tiny_net(3);
        let model = Model::<f64>::init(net.clone(), 1).unwrap();
        let utts = vec![utt(0, 0, 8, 6), utt(2, 0, 8, 6)];
        let speakers = SpeakerMap::from_ids(["s0", "s1", "s2"]);
        let stream = FrameStream::<f64>::new(&utts, &speakers, 6).unwrap();
        assert!(matches!(
            estimate_speaker_vectors(&model, &stream),
            Err(Error::EmptySpeakers(ref v)) if v == &vec![1]
        ));
    }

    #[test]
    fn posterior_closed_forms() {
        let table = SpeakerVectorTable {
            vectors: Tensor::<f64>::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 5.0]).unwrap(),
            frame_counts: vec![1, 1],
        };
        let p = cosine_softmax_posterior(&[1.0, 0.0], &table);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);

        let same = SpeakerVectorTable {
            vectors: Tensor::<f64>::from_f64(&[3, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap(),
            frame_counts: vec![1; 3],
        };
        for v in cosine_softmax_posterior(&[0.3, -2.0], &same) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn install_normalizes_and_zeroes_bias() {
        let mut net = tiny_net(2);
        net.feature_dim = 2;
        let mut model = Model::<f64>::init(net, 1).unwrap();
        model.params.classifier.bias.fill(3.0);
        let table = SpeakerVectorTable {
            vectors: Tensor::from_f64(&[2, 2], &[3.0, 4.0, 0.0, 1.0]).unwrap(),
            frame_counts: vec![1, 1],
        };
        install_classifier(&mut model, &table).unwrap();
        let w = model.params.classifier.weight.data();
        assert!((w[0] - 0.6).abs() < 1e-12 && (w[1] - 0.8).abs() < 1e-12);
        assert!((w[3] - 1.0).abs() < 1e-7);
        assert!(model.params.classifier.bias.data().iter().all(|&b| b == 0.0));

        let degenerate = SpeakerVectorTable {
            vectors: Tensor::from_f64(&[2, 2], &[3.0, 4.0, 1e-9, 0.0]).unwrap(),
            frame_counts: vec![1, 1],
        };
        assert!(matches!(
            install_classifier(&mut model, &degenerate),
            Err(Error::DegenerateSpeaker { speaker: 1, .. })
        ));
    }

    fn streams(n_spk: usize) -> Streams<f64> {
        let utts: Vec<Utterance> = (0..n_spk)
            .flat_map(|s| (0..4).map(move |u| utt(s, u, 20, 6)))
            .collect();
        Streams::build(&utts, 6, 0.25).unwrap()
    }

    #[test]
    fn single_speaker_is_refused() {
        let utts: Vec<Utterance> = (0..3).map(|u| utt(0, u, 20, 6)).collect();
        assert!(matches!(
            Streams::<f64>::build(&utts, 6, 0.0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn zero_lr_keeps_initial_params() {
        let st = streams(2);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let (model, metrics) = train_baseline(&cfg, &st, &tiny_net(2)).unwrap();
        let init = Model::<f64>::init(tiny_net(2), cfg.seed).unwrap();
        assert_eq!(model.params, init.params);
        assert_eq!(metrics.epochs.len(), 2);
    }

    #[test]
    fn lr_halves_after_two_flat_epochs() {
        let st = streams(2);
        let cfg = TrainConfig {
            lr: 1e-12,
            epochs: 6,
            ..TrainConfig::default()
        };
        let (_, metrics) = train_baseline(&cfg, &st, &tiny_net(2)).unwrap();
        let lrs: Vec<f64> = metrics.epochs.iter().map(|e| e.lr / cfg.lr).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.25]);
        let fixed = TrainConfig {
            halve_lr_on_plateau: false,
            ..cfg
        };
        let (_, metrics) = train_baseline(&fixed, &st, &tiny_net(2)).unwrap();
        assert!(metrics.epochs.iter().all(|e| e.lr == fixed.lr));
    }

    #[test]
    fn separable_pair_is_learned_and_deterministic() {
        let st = streams(2);
        let cfg = TrainConfig {
            lr: 0.1,
            epochs: 10,
            batch_chunks: 2,
            chunk_frames: 5,
            ..TrainConfig::default()
        };
        let (a, ma) = train_baseline(&cfg, &st, &tiny_net(2)).unwrap();
        let (b, _) = train_baseline(&cfg, &st, &tiny_net(2)).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let (acc, _) = evaluate(&a, &st.train).unwrap();
        assert!(acc > 0.99, "train accuracy {acc}, metrics {:?}", ma.epochs.last());
    }

    #[test]
    fn fullinfo_zero_epochs_and_frozen_policy() {
        let st = streams(3);
        let net = tiny_net(3);
        let base_cfg = TrainConfig {
            lr: 0.05,
            epochs: 2,
            batch_chunks: 2,
            chunk_frames: 5,
            ..TrainConfig::default()
        };
        let (baseline, _) = train_baseline(&base_cfg, &st, &net).unwrap();
        let (warm, _) = warm_up(&baseline, &net, &st, &TrainConfig { warmup_max_epochs: 2, ..base_cfg.clone() }).unwrap();
        let norms: Vec<f64> = (0..3)
            .map(|s| warm.params.classifier.weight.row(s).iter().map(|v| v * v).sum::<f64>())
            .collect();
        assert!(norms.iter().all(|n| n.is_finite()));

        let zero = TrainConfig {
            epochs: 0,
            ..base_cfg.clone()
        };
        let (same, _) = run_fullinfo(warm.clone(), &st, &zero).unwrap();
        assert_eq!(same, warm);

        let frozen = TrainConfig {
            epochs: 1,
            classifier_update_policy: ClassifierPolicy::Frozen,
            ..base_cfg
        };
        let mut expected = warm.clone();
        let table = estimate_speaker_vectors(&expected, &st.train).unwrap();
        install_classifier(&mut expected, &table).unwrap();
        let (after, _) = run_fullinfo(warm, &st, &frozen).unwrap();
        assert_eq!(after.params.classifier, expected.params.classifier);
        assert_ne!(after.params.net, expected.params.net);
    }

    fn rec(acc: f64) -> EpochRecord {
        EpochRecord {
            epoch: 0,
            phase: String::new(),
            lr: 0.0,
            start_val_acc: 0.0,
            start_val_loss: 0.0,
            end_val_acc: acc,
            train_loss: 0.0,
            train_acc: 0.0,
            seconds: 0.0,
        }
    }

    #[test]
    fn plateau_rule() {
        let h = |v: &[f64]| v.iter().map(|&a| rec(a)).collect::<Vec<_>>();
        assert!(!plateaued(&h(&[0.5, 0.5]), 0.001));
        assert!(plateaued(&h(&[0.5, 0.5005, 0.5009]), 0.001));
        assert!(!plateaued(&h(&[0.5, 0.5005, 0.502]), 0.001));
        assert!(!plateaued(&h(&[0.5, 0.6, 0.6005]), 0.001));
        assert!(plateaued(&h(&[0.5, 0.6, 0.59, 0.6005]), 0.001));
    }

    #[test]
    fn validation_split_holds_out_last_utterances() {
        let utts: Vec<Utterance> = (0..2)
            .flat_map(|s| (0..20).map(move |u| utt(s, u, 8, 6)))
            .collect();
        let (train, val) = split_validation(&utts, 0.05);
        assert_eq!(val.len(), 2);
        assert_eq!(train.len(), 38);
        assert!(val.iter().all(|u| u.utt_id.ends_with("u19")));
    }
}
