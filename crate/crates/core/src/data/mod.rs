//! Samples, vocabulary, chain-of-thought sequences, dataset ingestion and the
//! synthetic shapes world.

mod cot;
mod io;
mod synthetic;
mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cot::{assemble_cot, parse_generation, parse_generation_ordered, CotOrder, CotSequence};
pub use io::{load_dataset, save_dataset_json, DatasetFormat, LoadOptions};
pub use synthetic::{check_entailment, generate_synthetic, SyntheticConfig, COUNT_WORDS};
pub use vocab::{build_vocab, Vocab, ANSWER_PREFIX, BECAUSE, BOS, EOS, MASK, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    #[default]
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub sample_id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    pub explanations: Vec<String>,
    pub split: SplitKind,
}

/// Row-major `rows x cols` matrix of raw image features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "feature matrix {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<RawSample>,
    pub features: BTreeMap<String, FeatureMatrix>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&RawSample> {
        self.samples
            .binary_search_by(|s| s.sample_id.as_str().cmp(sample_id))
            .ok()
            .map(|i| &self.samples[i])
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.samples
            .binary_search_by(|s| s.sample_id.as_str().cmp(sample_id))
            .ok()
    }

    pub fn features_of(&self, sample: &RawSample) -> &FeatureMatrix {
        &self.features[&sample.image_ref]
    }

    /// Sorts samples by id and checks the split invariants.
    pub(crate) fn finalize(mut self) -> Result<Self> {
        self.samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        for pair in self.samples.windows(2) {
            if pair[0].sample_id == pair[1].sample_id {
                return Err(Error::InvalidInput(format!(
                    "duplicate sample_id {}",
                    pair[0].sample_id
                )));
            }
        }
        let missing: Vec<String> = self
            .samples
            .iter()
            .filter(|s| !self.features.contains_key(&s.image_ref))
            .map(|s| s.image_ref.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFeatures { missing });
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub sample_id: String,
    pub image_ref: String,
    pub question_ids: Vec<u32>,
    pub explanation_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
}

impl TokenizedSample {
    /// Tokenizes a raw sample, training on its first reference explanation.
    pub fn from_raw(sample: &RawSample, vocab: &Vocab) -> Self {
        TokenizedSample {
            sample_id: sample.sample_id.clone(),
            image_ref: sample.image_ref.clone(),
            question_ids: vocab.encode(&sample.question),
            explanation_ids: sample
                .explanations
                .first()
                .map(|e| vocab.encode(e))
                .unwrap_or_default(),
            answer_ids: vocab.encode(&sample.answer),
        }
    }
}

/// Lowercases and splits on whitespace; every ASCII punctuation character is
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
