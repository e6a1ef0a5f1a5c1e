//! Seeded synthetic speaker corpora in the feature domain.
//!
//! Frame `t` of utterance `u` by speaker `s` is `m_s + c_u + e_t`, where the
//! speaker prototype `m_s ~ N(0, sb^2 I)`, the channel offset
//! `c_u ~ N(0, su^2 I)` and `e_t` is a stationary AR(1) process with
//! coefficient `rho` and innovation standard deviation `sf`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::{checksum, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    /// Length of evaluation test utterances produced by [`split`]; `None`
    /// keeps `frames_per_utt`. The first `frames_per_utt` frames are the
    /// stored utterance, extended by the same noise process.
    pub test_frames_per_utt: Option<usize>,
    pub feature_dim: usize,
    pub speaker_spread: f64,
    pub channel_spread: f64,
    pub frame_noise: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec::standard(0)
    }
}

impl CorpusSpec {
    /// 70 speakers (50 train + 20 eval), 20 utterances of 200 frames each.
    pub fn standard(seed: u64) -> Self {
        CorpusSpec {
            n_speakers: 70,
            utts_per_speaker: 20,
            frames_per_utt: 200,
            test_frames_per_utt: None,
            feature_dim: 40,
            speaker_spread: 1.0,
            channel_spread: 0.5,
            frame_noise: 0.8,
            rho: 0.7,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_speakers == 0 || self.utts_per_speaker == 0 || self.frames_per_utt == 0 {
            return bad("corpus needs speakers, utterances and frames");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if [self.speaker_spread, self.channel_spread, self.frame_noise]
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return bad("spreads must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1)");
        }
        if self.test_frames_per_utt.is_some_and(|n| n < self.frames_per_utt) {
            return bad("test_frames_per_utt must be >= frames_per_utt");
        }
        Ok(())
    }

    /// Expected between/within variance ratio per dimension.
    pub fn separability(&self) -> f64 {
        let within =
            self.channel_spread.powi(2) + self.frame_noise.powi(2) / (1.0 - self.rho.powi(2));
        self.speaker_spread.powi(2) / within
    }

    pub fn speaker_id(s: usize) -> String {
        format!("spk{s:03}")
    }

    pub fn utt_id(s: usize, u: usize) -> String {
        format!("spk{s:03}-utt{u:02}")
    }
}

pub(crate) fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the mixed inputs
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * sd
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: CorpusSpec,
    /// Ground-truth speaker prototypes `[n_speakers, feature_dim]`.
    pub prototypes: Tensor<f32>,
    /// Utterances in speaker-major order.
    pub utterances: Vec<Utterance>,
}

impl SynthCorpus {
    pub fn checksum(&self) -> u64 {
        checksum(std::iter::once(&self.prototypes).chain(self.utterances.iter().map(|u| &u.feats.frames)))
    }

    pub fn speaker_of(&self, utt_index: usize) -> usize {
        utt_index / self.spec.utts_per_speaker
    }

    /// Regenerates utterance `u` of speaker `s` with `frames` frames.
    pub fn utterance(&self, s: usize, u: usize, frames: usize) -> Utterance {
        render_utterance(&self.spec, self.prototypes.row(s), s, u, frames)
    }
}

fn render_utterance(spec: &CorpusSpec, proto: &[f32], s: usize, u: usize, frames: usize) -> Utterance {
    let d = spec.feature_dim;
    let global = (s * spec.utts_per_speaker + u) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, 2, global));
    let channel: Vec<f64> = (0..d).map(|_| gaussian(&mut rng, spec.channel_spread)).collect();
    let stationary = spec.frame_noise / (1.0 - spec.rho * spec.rho).sqrt();
    let mut noise: Vec<f64> = (0..d).map(|_| gaussian(&mut rng, stationary)).collect();
    let mut data = Vec::with_capacity(frames * d);
    for t in 0..frames {
        if t > 0 {
            for e in noise.iter_mut() {
                *e = spec.rho * *e + gaussian(&mut rng, spec.frame_noise);
            }
        }
        for k in 0..d {
            data.push((proto[k] as f64 + channel[k] + noise[k]) as f32);
        }
    }
    Utterance {
        utt_id: CorpusSpec::utt_id(s, u),
        speaker_id: CorpusSpec::speaker_id(s),
        feats: FeatureMatrix::from_rows(frames, d, data).expect("consistent shape"),
    }
}

pub fn generate(spec: &CorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut protos = Vec::with_capacity(spec.n_speakers * d);
    for s in 0..spec.n_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, 1, s as u64));
        protos.extend((0..d).map(|_| gaussian(&mut rng, spec.speaker_spread) as f32));
    }
    let prototypes = Tensor::new(&[spec.n_speakers, d], protos)?;
    let utterances = (0..spec.n_speakers)
        .flat_map(|s| (0..spec.utts_per_speaker).map(move |u| (s, u)))
        .map(|(s, u)| render_utterance(spec, prototypes.row(s), s, u, spec.frames_per_utt))
        .collect();
    Ok(SynthCorpus {
        spec: spec.clone(),
        prototypes,
        utterances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Utterance>,
    pub enroll: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// First `train_speakers` speakers train; the next `eval_speakers` are
/// evaluated, with their first `enroll_utts` utterances used for enrollment
/// and the rest for test.
pub fn split(
    corpus: &SynthCorpus,
    train_speakers: usize,
    eval_speakers: usize,
    enroll_utts: usize,
) -> Result<CorpusSplit> {
    let spec = &corpus.spec;
    if train_speakers == 0 || eval_speakers == 0 || train_speakers + eval_speakers > spec.n_speakers {
        return Err(Error::InsufficientData(format!(
            "{train_speakers} train + {eval_speakers} eval speakers from a corpus of {}",
            spec.n_speakers
        )));
    }
    if enroll_utts == 0 || enroll_utts >= spec.utts_per_speaker {
        return Err(Error::InsufficientData(format!(
            "enrolling {enroll_utts} of {} utterances leaves an empty enrollment or test set",
            spec.utts_per_speaker
        )));
    }
    let per = spec.utts_per_speaker;
    let train = corpus.utterances[..train_speakers * per].to_vec();
    let mut enroll = Vec::new();
    let mut test = Vec::new();
    let test_frames = spec.test_frames_per_utt.unwrap_or(spec.frames_per_utt);
    for s in train_speakers..train_speakers + eval_speakers {
        for u in 0..per {
            if u < enroll_utts {
                enroll.push(corpus.utterances[s * per + u].clone());
            } else if test_frames == spec.frames_per_utt {
                test.push(corpus.utterances[s * per + u].clone());
            } else {
                test.push(corpus.utterance(s, u, test_frames));
            }
        }
    }
    Ok(CorpusSplit {
        train,
        enroll,
        test,
    })
}
