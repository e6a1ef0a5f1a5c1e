//! Utterance collections shared by the trainer and the evaluation back-end.

use std::collections::BTreeMap;

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::featio::Archive;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub feats: FeatureMatrix,
}

/// Dense indices for a set of speaker ids, in sorted id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerMap {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl SpeakerMap {
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v: Vec<String> = ids.into_iter().map(str::to_string).collect();
        v.sort();
        v.dedup();
        let index = v.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        SpeakerMap { ids: v, index }
    }

    pub fn from_utterances(utts: &[Utterance]) -> Self {
        Self::from_ids(utts.iter().map(|u| u.speaker_id.as_str()))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Unresolved(format!("speaker {id}")))
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

pub fn load_archive(arc: &Archive) -> Result<Vec<Utterance>> {
    arc.load_all().map(|v| {
        v.into_iter()
            .map(|(e, feats)| Utterance {
                utt_id: e.utt_id,
                speaker_id: e.speaker_id,
                feats,
            })
            .collect()
    })
}

/// Groups utterances by speaker id, preserving input order within a speaker.
pub fn by_speaker(utts: &[Utterance]) -> BTreeMap<&str, Vec<&Utterance>> {
    let mut m: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in utts {
        m.entry(u.speaker_id.as_str()).or_default().push(u);
    }
    m
}
