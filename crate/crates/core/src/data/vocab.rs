use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{tokenize, DatasetSplit};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const MASK: &str = "<mask>";
pub const UNK: &str = "<unk>";
pub const BECAUSE: &str = "because";
pub const ANSWER_PREFIX: [&str; 4] = ["so", "the", "answer", "is"];

/// Dense token vocabulary. Ids `0..5` are the reserved specials, followed by
/// the marker words and then corpus tokens in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    answer_prefix: [u32; 4],
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(repr: VocabRepr) -> Self {
        Vocab::from_tokens(repr.tokens).expect("serialized vocabulary is well-formed")
    }
}

impl From<Vocab> for VocabRepr {
    fn from(vocab: Vocab) -> Self {
        VocabRepr {
            tokens: vocab.tokens,
        }
    }
}

fn reserved() -> impl Iterator<Item = &'static str> {
    [PAD, BOS, EOS, MASK, UNK, BECAUSE]
        .into_iter()
        .chain(ANSWER_PREFIX)
}

impl Vocab {
    pub const PAD_ID: u32 = 0;
    pub const BOS_ID: u32 = 1;
    pub const EOS_ID: u32 = 2;
    pub const MASK_ID: u32 = 3;
    pub const UNK_ID: u32 = 4;
    pub const BECAUSE_ID: u32 = 5;

    /// Rebuilds a vocabulary from its token list. The list must start with
    /// the reserved tokens in canonical order and contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, expected) in reserved().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(expected) {
                return Err(Error::InvalidInput(format!(
                    "vocabulary slot {i} must hold reserved token {expected:?}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {tok:?}")));
            }
        }
        let answer_prefix = ANSWER_PREFIX.map(|t| index[t]);
        Ok(Vocab {
            tokens,
            index,
            answer_prefix,
        })
    }

    /// Vocabulary with only the reserved tokens plus `words`.
    pub fn with_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = reserved().map(str::to_owned).collect();
        let extra: std::collections::BTreeSet<&str> = words.into_iter().collect();
        for w in extra {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_owned());
            }
        }
        Vocab::from_tokens(tokens).expect("reserved prefix is canonical")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> u32 {
        Self::PAD_ID
    }
    pub fn bos(&self) -> u32 {
        Self::BOS_ID
    }
    pub fn eos(&self) -> u32 {
        Self::EOS_ID
    }
    pub fn mask(&self) -> u32 {
        Self::MASK_ID
    }
    pub fn unk(&self) -> u32 {
        Self::UNK_ID
    }
    pub fn because(&self) -> u32 {
        Self::BECAUSE_ID
    }
    pub fn answer_prefix(&self) -> &[u32] {
        &self.answer_prefix
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes `text` and maps out-of-vocabulary tokens to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(self.unk()))
            .collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode_tokens(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined surface text; special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id > self.mask())
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabRepr {
            tokens: self.tokens.clone(),
        })
        .expect("vocab serializes")
    }
}

/// Collects every token whose frequency across questions, answers, and all
/// reference explanations reaches `min_freq`.
pub fn build_vocab(splits: &[&DatasetSplit], min_freq: usize) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(Error::InvalidInput("min_freq must be >= 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for split in splits {
        for s in &split.samples {
            let texts = std::iter::once(&s.question)
                .chain(std::iter::once(&s.answer))
                .chain(s.explanations.iter());
            for text in texts {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus("no tokens in the given splits".into()));
    }
    let mut tokens: Vec<String> = reserved().map(str::to_owned).collect();
    for (tok, n) in counts {
        if n >= min_freq && !tokens.contains(&tok) {
            tokens.push(tok);
        }
    }
    Vocab::from_tokens(tokens)
}
