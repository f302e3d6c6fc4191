use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{TokenizedSample, Vocab};
use crate::error::{Error, Result};

/// Segment ordering of the supervised target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotOrder {
    /// `because <explanation> so the answer is <answer> <eos>`
    #[default]
    ExplanationFirst,
    /// `so the answer is <answer> because <explanation> <eos>`
    AnswerFirst,
}

/// Prefixed explanation and prefixed answer concatenated into one target.
/// The two spans are disjoint, contiguous and cover `ids`; EOS belongs to
/// whichever span comes last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotSequence {
    pub ids: Vec<u32>,
    pub explanation: Range<usize>,
    pub answer: Range<usize>,
    /// Answer tokens proper: inside `answer`, after the prefix, before EOS.
    pub answer_tokens: Range<usize>,
    pub order: CotOrder,
}

impl CotSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Builds the supervised target for one sample. When the result would exceed
/// `max_len`, the explanation tail is dropped; the answer is never truncated.
pub fn assemble_cot(
    sample: &TokenizedSample,
    vocab: &Vocab,
    max_len: usize,
    order: CotOrder,
) -> Result<CotSequence> {
    let prefix = vocab.answer_prefix();
    let fixed = 1 + prefix.len() + sample.answer_ids.len() + 1;
    if fixed > max_len {
        return Err(Error::Unrepresentable {
            sample_id: sample.sample_id.clone(),
            reason: format!("answer needs {fixed} positions, limit is {max_len}"),
        });
    }
    let keep = sample.explanation_ids.len().min(max_len - fixed);
    let explanation = &sample.explanation_ids[..keep];

    let mut expl_seg = Vec::with_capacity(keep + 1);
    expl_seg.push(vocab.because());
    expl_seg.extend_from_slice(explanation);
    let mut ans_seg = Vec::with_capacity(prefix.len() + sample.answer_ids.len());
    ans_seg.extend_from_slice(prefix);
    ans_seg.extend_from_slice(&sample.answer_ids);

    let (ids, explanation, answer) = match order {
        CotOrder::ExplanationFirst => {
            ans_seg.push(vocab.eos());
            let e = 0..expl_seg.len();
            let a = e.end..e.end + ans_seg.len();
            (expl_seg.into_iter().chain(ans_seg).collect(), e, a)
        }
        CotOrder::AnswerFirst => {
            expl_seg.push(vocab.eos());
            let a = 0..ans_seg.len();
            let e = a.end..a.end + expl_seg.len();
            (ans_seg.into_iter().chain(expl_seg).collect(), e, a)
        }
    };
    let answer_tokens = answer.start + prefix.len()..answer.start + prefix.len() + sample.answer_ids.len();
    Ok(CotSequence {
        ids,
        explanation,
        answer,
        answer_tokens,
        order,
    })
}

fn find_subsequence(haystack: &[u32], needle: &[u32]) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Splits explanation-first model output into `(explanation, answer)`.
/// Never fails: missing markers yield empty components.
pub fn parse_generation(ids: &[u32], vocab: &Vocab) -> (Vec<u32>, Vec<u32>) {
    parse_generation_ordered(ids, vocab, CotOrder::ExplanationFirst)
}

pub fn parse_generation_ordered(
    ids: &[u32],
    vocab: &Vocab,
    order: CotOrder,
) -> (Vec<u32>, Vec<u32>) {
    let mut body = ids;
    if body.first() == Some(&vocab.bos()) {
        body = &body[1..];
    }
    if let Some(end) = body.iter().position(|&t| t == vocab.eos()) {
        body = &body[..end];
    }
    let prefix = vocab.answer_prefix();
    match order {
        CotOrder::ExplanationFirst => {
            if body.first() == Some(&vocab.because()) {
                body = &body[1..];
            }
            match find_subsequence(body, prefix) {
                Some(at) => (body[..at].to_vec(), body[at + prefix.len()..].to_vec()),
                None => (body.to_vec(), Vec::new()),
            }
        }
        CotOrder::AnswerFirst => {
            let Some(at) = find_subsequence(body, prefix) else {
                let expl = body.strip_prefix(&[vocab.because()]).unwrap_or(body);
                return (expl.to_vec(), Vec::new());
            };
            let rest = &body[at + prefix.len()..];
            match rest.iter().position(|&t| t == vocab.because()) {
                Some(b) => (rest[b + 1..].to_vec(), rest[..b].to_vec()),
                None => (Vec::new(), rest.to_vec()),
            }
        }
    }
}
