//! Verification back-end: d-vectors, LDA, cosine scoring and EER.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::net::Model;
use crate::ops::LENGTH_NORM_EPS;
use crate::synth::sub_seed;
use crate::tensor::Real;

/// Utterance-level (or speaker-level) vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DVector {
    pub id: String,
    pub vector: Vec<f64>,
    pub n_frames_used: usize,
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + LENGTH_NORM_EPS).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = (a.iter().map(|x| x * x).sum::<f64>() + LENGTH_NORM_EPS).sqrt();
    let nb = (b.iter().map(|x| x * x).sum::<f64>() + LENGTH_NORM_EPS).sqrt();
    dot / (na * nb)
}

/// Mean of the utterance's frame features, length-normalized when
/// `normalize` is set.
pub fn extract_dvector<T: Real>(
    model: &Model<T>,
    id: &str,
    feats: &FeatureMatrix,
    normalize: bool,
) -> Result<DVector> {
    let f = model.features_of(feats)?;
    let d = f.cols();
    let mut mean = vec![0.0; d];
    for row in f.data().chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    let n = f.rows();
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(DVector {
        id: id.to_string(),
        vector: if normalize { normalized(mean) } else { mean },
        n_frames_used: n,
    })
}

/// d-vectors of many utterances, computed in parallel, in input order.
pub fn extract_all<T: Real>(model: &Model<T>, utts: &[Utterance], normalize: bool) -> Result<Vec<DVector>> {
    utts.par_iter()
        .map(|u| extract_dvector(model, &u.utt_id, &u.feats, normalize))
        .collect()
}

/// Speaker model: mean of the enrollment d-vectors, re-normalized.
pub fn enroll(id: &str, dvectors: &[DVector], normalize: bool) -> Result<DVector> {
    let first = dvectors
        .first()
        .ok_or_else(|| Error::InsufficientData(format!("no enrollment utterances for {id}")))?;
    let d = first.vector.len();
    let mut mean = vec![0.0; d];
    for v in dvectors {
        if v.vector.len() != d {
            return Err(Error::dim("enroll", &[d], &[v.vector.len()]));
        }
        for (m, x) in mean.iter_mut().zip(&v.vector) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= dvectors.len() as f64);
    Ok(DVector {
        id: id.to_string(),
        vector: if normalize { normalized(mean) } else { mean },
        n_frames_used: dvectors.iter().map(|v| v.n_frames_used).sum(),
    })
}

/// Linear discriminant projection fitted on labelled vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaTransform {
    /// `[d_out][d_in]`
    pub projection: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
    pub n_classes: usize,
}

impl LdaTransform {
    pub fn d_in(&self) -> usize {
        self.mean.len()
    }

    pub fn d_out(&self) -> usize {
        self.projection.len()
    }

    pub fn identity(d: usize) -> Self {
        LdaTransform {
            projection: (0..d).map(|i| (0..d).map(|j| f64::from(i == j)).collect()).collect(),
            eigenvalues: vec![1.0; d],
            mean: vec![0.0; d],
            n_classes: 0,
        }
    }
}

/// Default LDA output size: `3/8` of the input dimension, capped by the
/// number of classes minus one.
pub fn default_lda_dim(n_classes: usize, d_in: usize) -> usize {
    (3 * d_in / 8).max(1).min(n_classes.saturating_sub(1)).max(1)
}

/// Solves `S_b w = lambda (S_w + r I) w` with `r = 1e-4 trace(S_w) / D` and
/// keeps the `d_out` leading directions, scaled so that
/// `w^T (S_w + r I) w = 1` and with the largest-magnitude entry positive.
pub fn lda_fit(vectors: &[Vec<f64>], labels: &[usize], d_out: usize) -> Result<LdaTransform> {
    if vectors.len() != labels.len() {
        return Err(Error::dim("lda_fit", &[vectors.len()], &[labels.len()]));
    }
    let d = vectors.first().map(|v| v.len()).unwrap_or(0);
    let mut classes: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (v, &l) in vectors.iter().zip(labels) {
        if v.len() != d {
            return Err(Error::dim("lda_fit", &[d], &[v.len()]));
        }
        classes.entry(l).or_default().push(v);
    }
    if classes.len() < 2 || classes.values().any(|c| c.len() < 2) {
        return Err(Error::InsufficientData(
            "LDA needs at least 2 classes with at least 2 samples each".into(),
        ));
    }
    let bound = (classes.len() - 1).min(d);
    if d_out == 0 || d_out > bound {
        return Err(Error::Config(format!("LDA output dimension {d_out} outside 1..={bound}")));
    }
    let n = vectors.len() as f64;
    let mean = DMatrix::from_fn(d, 1, |i, _| vectors.iter().map(|v| v[i]).sum::<f64>() / n);
    let mut sw = DMatrix::<f64>::zeros(d, d);
    let mut sb = DMatrix::<f64>::zeros(d, d);
    for members in classes.values() {
        let m = members.len() as f64;
        let mu = DMatrix::from_fn(d, 1, |i, _| members.iter().map(|v| v[i]).sum::<f64>() / m);
        for v in members {
            let x = DMatrix::from_fn(d, 1, |i, _| v[i]) - &mu;
            sw += &x * x.transpose();
        }
        let dm = &mu - &mean;
        sb += (&dm * dm.transpose()) * m;
    }
    sw /= n;
    sb /= n;
    let ridge = 1e-4 * sw.trace() / d as f64;
    for i in 0..d {
        sw[(i, i)] += ridge;
    }
    let chol = sw
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("within-class scatter is singular after regularization".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("within-class Cholesky factor is singular".into()))?;
    let mut m = &linv * &sb * linv.transpose();
    m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let back = linv.transpose();
    let mut projection = Vec::with_capacity(d_out);
    let mut eigenvalues = Vec::with_capacity(d_out);
    for &k in order.iter().take(d_out) {
        let w = &back * eig.eigenvectors.column(k);
        let mut row: Vec<f64> = w.iter().copied().collect();
        let pivot = row.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if pivot < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
        projection.push(row);
        eigenvalues.push(eig.eigenvalues[k]);
    }
    Ok(LdaTransform {
        projection,
        eigenvalues,
        mean: mean.iter().copied().collect(),
        n_classes: classes.len(),
    })
}

/// Projects and length-normalizes. The transform is linear (no centering),
/// so a zero vector stays zero.
pub fn lda_project(t: &LdaTransform, v: &DVector) -> Result<DVector> {
    if v.vector.len() != t.d_in() {
        return Err(Error::dim("lda_project", &[t.d_in()], &[v.vector.len()]));
    }
    let y = t
        .projection
        .iter()
        .map(|row| row.iter().zip(&v.vector).map(|(a, b)| a * b).sum())
        .collect();
    Ok(DVector {
        id: v.id.clone(),
        vector: normalized(y),
        n_frames_used: v.n_frames_used,
    })
}

/// Evaluation conditions: short tests of a fixed frame count and long tests
/// of a fixed duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    S20f,
    S50f,
    S100f,
    L3s,
    L9s,
    L18s,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::S20f,
        Condition::S50f,
        Condition::S100f,
        Condition::L3s,
        Condition::L9s,
        Condition::L18s,
    ];
    pub const SHORT: [Condition; 3] = [Condition::S20f, Condition::S50f, Condition::S100f];
    pub const LONG: [Condition; 3] = [Condition::L3s, Condition::L9s, Condition::L18s];

    pub fn tag(self) -> &'static str {
        match self {
            Condition::S20f => "S20f",
            Condition::S50f => "S50f",
            Condition::S100f => "S100f",
            Condition::L3s => "L3s",
            Condition::L9s => "L9s",
            Condition::L18s => "L18s",
        }
    }

    /// Raw frames per test segment at the given frame shift.
    pub fn frames(self, frame_shift_ms: f32) -> usize {
        let secs = match self {
            Condition::S20f => return 20,
            Condition::S50f => return 50,
            Condition::S100f => return 100,
            Condition::L3s => 3.0,
            Condition::L9s => 9.0,
            Condition::L18s => 18.0,
        };
        (secs * 1000.0 / frame_shift_ms as f64).round() as usize
    }

    pub fn is_short(self) -> bool {
        Condition::SHORT.contains(&self)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown condition '{s}'")))
    }
}

pub fn parse_conditions(list: &str) -> Result<Vec<Condition>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_speaker: String,
    pub test_utt: String,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    pub condition: Option<Condition>,
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let label = if t.target { "target" } else { "nontarget" };
            let _ = writeln!(s, "{} {} {label}", t.enroll_speaker, t.test_utt);
        }
        s
    }

    pub fn parse(text: &str) -> Result<TrialList> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let target = match f.as_slice() {
                [_, _, "target"] => true,
                [_, _, "nontarget"] => false,
                _ => {
                    return Err(Error::Format {
                        offset: i as u64 + 1,
                        msg: format!("expected 'enroll test target|nontarget', got '{line}'"),
                    })
                }
            };
            trials.push(Trial {
                enroll_speaker: f[0].to_string(),
                test_utt: f[1].to_string(),
                target,
            });
        }
        Ok(TrialList {
            condition: None,
            trials,
        })
    }
}

/// Test segments and trials of one condition.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub condition: Condition,
    pub tests: Vec<Utterance>,
    pub trials: TrialList,
    /// Test utterances too short for the condition.
    pub skipped: usize,
}

/// Start of a `len`-frame crop of utterance `index` (of `total` frames). The
/// random position is drawn once per utterance and scaled to the free range,
/// so shorter crops of the same utterance lie inside longer ones.
pub fn crop_start(seed: u64, index: usize, total: usize, len: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 16, index as u64));
    let u: f64 = rng.gen();
    ((u * (total - len + 1) as f64) as usize).min(total - len)
}

/// Crops every test utterance to the condition length at a seeded random
/// offset and crosses all enrolled speakers with all kept segments.
pub fn make_conditions(
    tests: &[Utterance],
    enrolled: &[String],
    condition: Condition,
    seed: u64,
) -> Result<ConditionSet> {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for (i, u) in tests.iter().enumerate() {
        let len = condition.frames(u.feats.frame_shift_ms);
        if u.feats.time() < len {
            skipped += 1;
            continue;
        }
        let start = crop_start(seed, i, u.feats.time(), len);
        kept.push(Utterance {
            utt_id: u.utt_id.clone(),
            speaker_id: u.speaker_id.clone(),
            feats: u.feats.crop(start, len)?,
        });
    }
    if skipped > 0 {
        log::warn!("{condition}: skipped {skipped} test utterances shorter than the condition");
    }
    let trials = enrolled
        .iter()
        .flat_map(|spk| {
            kept.iter().map(move |t| Trial {
                enroll_speaker: spk.clone(),
                test_utt: t.utt_id.clone(),
                target: &t.speaker_id == spk,
            })
        })
        .collect();
    Ok(ConditionSet {
        condition,
        tests: kept,
        trials: TrialList {
            condition: Some(condition),
            trials,
        },
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub enroll_speaker: String,
    pub test_utt: String,
    pub score: f64,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub scores: Vec<Score>,
}

impl ScoreSet {
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut t = Vec::new();
        let mut n = Vec::new();
        for s in &self.scores {
            if s.target {
                t.push(s.score);
            } else {
                n.push(s.score);
            }
        }
        (t, n)
    }

    pub fn eer(&self) -> Result<f64> {
        let (t, n) = self.split();
        eer(&t, &n)
    }

    pub fn extend(&mut self, other: ScoreSet) {
        self.scores.extend(other.scores);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for x in &self.scores {
            let _ = writeln!(s, "{} {} {:.8}", x.enroll_speaker, x.test_utt, x.score);
        }
        s
    }
}

/// Cosine score of every trial.
pub fn score_trials(
    enrollments: &BTreeMap<String, DVector>,
    tests: &BTreeMap<String, DVector>,
    trials: &TrialList,
) -> Result<ScoreSet> {
    let scores = trials
        .trials
        .iter()
        .map(|t| {
            let e = enrollments
                .get(&t.enroll_speaker)
                .ok_or_else(|| Error::Unresolved(format!("enrollment speaker {}", t.enroll_speaker)))?;
            let x = tests
                .get(&t.test_utt)
                .ok_or_else(|| Error::Unresolved(format!("test utterance {}", t.test_utt)))?;
            Ok(Score {
                enroll_speaker: t.enroll_speaker.clone(),
                test_utt: t.test_utt.clone(),
                score: cosine(&e.vector, &x.vector),
                target: t.target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { scores })
}

/// Equal error rate in percent. Thresholds are swept over all distinct
/// scores (plus one above the maximum); a trial is accepted when its score is
/// at least the threshold. Between the last operating point with
/// `FRR < FAR` and the first with `FRR >= FAR` the rates are interpolated
/// linearly.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::InsufficientData(
            "EER needs both target and nontarget scores".into(),
        ));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    let mut t = targets.to_vec();
    let mut n = nontargets.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = t.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nt, nn) = (t.len() as f64, n.len() as f64);
    let (mut it, mut inn) = (0, 0);
    let mut prev = (0.0, 1.0);
    for th in thresholds.into_iter().map(Some).chain(std::iter::once(None)) {
        let (frr, far) = match th {
            Some(th) => {
                while it < t.len() && t[it] < th {
                    it += 1;
                }
                while inn < n.len() && n[inn] < th {
                    inn += 1;
                }
                (it as f64 / nt, (n.len() - inn) as f64 / nn)
            }
            None => (1.0, 0.0),
        };
        if frr >= far {
            let (pf, pa) = prev;
            let gap_prev = pa - pf;
            let gap_cur = far - frr;
            let e = if gap_prev <= 0.0 {
                frr
            } else {
                let a = gap_prev / (gap_prev + (frr - far));
                debug_assert!(gap_cur <= 0.0);
                pf + a * (frr - pf)
            };
            return Ok(100.0 * e);
        }
        prev = (frr, far);
    }
    unreachable!("the final operating point always has FRR >= FAR")
}

/// Cosine EERs of one condition, without and with LDA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub condition: String,
    pub trials: usize,
    pub targets: usize,
    pub cosine_eer: f64,
    pub lda_eer: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub cosine_scores: BTreeMap<Condition, ScoreSet>,
    pub lda_scores: BTreeMap<Condition, ScoreSet>,
}

impl EvalReport {
    fn pooled(sets: &BTreeMap<Condition, ScoreSet>, which: &[Condition]) -> Option<Result<f64>> {
        let mut all = ScoreSet::default();
        let mut any = false;
        for c in which {
            if let Some(s) = sets.get(c) {
                all.extend(s.clone());
                any = true;
            }
        }
        any.then(|| all.eer())
    }

    /// EER over the union of the short-condition trials.
    pub fn pooled_short_cosine(&self) -> Option<Result<f64>> {
        Self::pooled(&self.cosine_scores, &Condition::SHORT)
    }

    pub fn pooled_short_lda(&self) -> Option<Result<f64>> {
        Self::pooled(&self.lda_scores, &Condition::SHORT)
    }

    pub fn row(&self, c: Condition) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.condition == c.tag())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,trials,targets,cosine_eer,lda_eer\n");
        for r in &self.rows {
            let lda = r.lda_eer.map(|v| format!("{v:.4}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{:.4},{lda}", r.condition, r.trials, r.targets, r.cosine_eer);
        }
        s
    }

    /// Fixed-width table, one row per condition.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10}{:>10}{:>10}{:>12}{:>12}\n", "condition", "trials", "targets", "cosine", "lda");
        for r in &self.rows {
            let lda = r.lda_eer.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<10}{:>10}{:>10}{:>12.2}{:>12}",
                r.condition, r.trials, r.targets, r.cosine_eer, lda
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub conditions: Vec<Condition>,
    /// LDA output size; `Some(0)` picks the default size, `None` skips LDA.
    pub lda_dim: Option<usize>,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conditions: Condition::ALL.to_vec(),
            lda_dim: Some(0),
            normalize: true,
            seed: 0,
        }
    }
}

/// Enrolls the evaluation speakers, builds every condition, scores it with
/// cosine (and LDA fitted on `lda_train` d-vectors when requested) and
/// reports per-condition EERs.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    lda_train: &[Utterance],
    enroll_utts: &[Utterance],
    tests: &[Utterance],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let enroll_vecs = extract_all(model, enroll_utts, cfg.normalize)?;
    let mut per_spk: BTreeMap<&str, Vec<DVector>> = BTreeMap::new();
    for (u, v) in enroll_utts.iter().zip(enroll_vecs) {
        per_spk.entry(u.speaker_id.as_str()).or_default().push(v);
    }
    let mut enrollments = BTreeMap::new();
    for (spk, vs) in &per_spk {
        enrollments.insert(spk.to_string(), enroll(spk, vs, cfg.normalize)?);
    }
    let speakers: Vec<String> = enrollments.keys().cloned().collect();

    let lda = match cfg.lda_dim {
        None => None,
        Some(dim) => {
            let vecs = extract_all(model, lda_train, cfg.normalize)?;
            let map = crate::data::SpeakerMap::from_utterances(lda_train);
            let labels = lda_train
                .iter()
                .map(|u| map.index_of(&u.speaker_id))
                .collect::<Result<Vec<_>>>()?;
            let d_in = model.cfg.feature_dim;
            let dim = if dim == 0 { default_lda_dim(map.len(), d_in) } else { dim };
            let raw: Vec<Vec<f64>> = vecs.into_iter().map(|v| v.vector).collect();
            Some(lda_fit(&raw, &labels, dim)?)
        }
    };
    let lda_enroll = match &lda {
        Some(t) => Some(
            enrollments
                .iter()
                .map(|(k, v)| Ok((k.clone(), lda_project(t, v)?)))
                .collect::<Result<BTreeMap<_, _>>>()?,
        ),
        None => None,
    };

    let mut report = EvalReport::default();
    for &c in &cfg.conditions {
        let set = make_conditions(tests, &speakers, c, cfg.seed)?;
        if set.tests.is_empty() {
            log::warn!("{c}: no test utterance is long enough, condition skipped");
            continue;
        }
        let tv: BTreeMap<String, DVector> = extract_all(model, &set.tests, cfg.normalize)?
            .into_iter()
            .map(|v| (v.id.clone(), v))
            .collect();
        let cos = score_trials(&enrollments, &tv, &set.trials)?;
        let cosine_eer = cos.eer()?;
        let lda_eer = match (&lda, &lda_enroll) {
            (Some(t), Some(le)) => {
                let tp = tv
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), lda_project(t, v)?)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                let s = score_trials(le, &tp, &set.trials)?;
                let e = s.eer()?;
                report.lda_scores.insert(c, s);
                Some(e)
            }
            _ => None,
        };
        report.rows.push(EvalRow {
            condition: c.tag().to_string(),
            trials: set.trials.len(),
            targets: set.trials.n_targets(),
            cosine_eer,
            lda_eer,
        });
        report.cosine_scores.insert(c, cos);
    }
    Ok(report)
}

/// Mean cosine between each frame feature and the mean feature of its
/// speaker, over all frames of `utts`.
pub fn within_speaker_cosine<T: Real>(model: &Model<T>, utts: &[Utterance]) -> Result<f64> {
    let feats = utts
        .par_iter()
        .map(|u| model.features_of(&u.feats))
        .collect::<Result<Vec<_>>>()?;
    let d = model.cfg.feature_dim;
    let mut means: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (u, f) in utts.iter().zip(&feats) {
        let e = means.entry(u.speaker_id.as_str()).or_insert_with(|| (vec![0.0; d], 0));
        for row in f.data().chunks_exact(d) {
            for (m, &v) in e.0.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        e.1 += f.rows();
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (u, f) in utts.iter().zip(&feats) {
        let (sum, _) = &means[u.speaker_id.as_str()];
        for row in f.data().chunks_exact(d) {
            let x: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            total += cosine(&x, sum);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData("no frames".into()));
    }
    Ok(total / count as f64)
}

/// CSV `utt_id,v0,...,v{D-1}`.
pub fn dvectors_to_csv(vs: &[DVector]) -> String {
    let d = vs.first().map(|v| v.vector.len()).unwrap_or(0);
    let mut s = String::from("utt_id");
    for i in 0..d {
        let _ = write!(s, ",v{i}");
    }
    s.push('\n');
    for v in vs {
        s.push_str(&v.id);
        for x in &v.vector {
            let _ = write!(s, ",{x:.8}");
        }
        s.push('\n');
    }
    s
}
