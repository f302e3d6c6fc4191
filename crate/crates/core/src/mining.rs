//! Counterfactual material for the image and instance levels: a retrieval
//! index over question/answer embeddings, gradient attribution of the answer
//! log-probability, and factual/counterfactual masking.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::data::{CotSequence, DatasetSplit, Vocab};
use crate::error::{Error, Result};
use crate::model::{gold_logprob_sum, Backbone, CotInput};

/// Mean of the model's word-embedding rows (no positional term).
pub fn text_embedding<B: Backbone + ?Sized>(model: &B, ids: &[u32]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("text embedding of an empty sequence".into()));
    }
    Ok(model
        .word_embeddings(ids)?
        .mean(0)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningEntry {
    pub sample_id: String,
    pub image_ref: String,
    pub answer: String,
    pub e_q: Vec<f64>,
    pub e_a: Vec<f64>,
}

/// One entry per sample of a split, ordered like the split (by sample_id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningIndex {
    pub entries: Vec<MiningEntry>,
}

pub fn build_mining_index<B: Backbone + ?Sized>(
    split: &DatasetSplit,
    vocab: &Vocab,
    model: &B,
) -> Result<MiningIndex> {
    if split.is_empty() {
        return Err(Error::InvalidInput("cannot index an empty split".into()));
    }
    let entries = split
        .samples
        .iter()
        .map(|s| {
            Ok(MiningEntry {
                sample_id: s.sample_id.clone(),
                image_ref: s.image_ref.clone(),
                answer: normalize_answer_key(&s.answer),
                e_q: text_embedding(model, &vocab.encode(&s.question))?,
                e_a: text_embedding(model, &vocab.encode(&s.answer))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MiningIndex { entries })
}

fn normalize_answer_key(a: &str) -> String {
    a.trim().to_lowercase()
}

/// Cosine similarity of plain vectors; 0 when either has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// High when the candidate asks a similar question but answers differently.
pub fn mining_score(anchor: &MiningEntry, candidate: &MiningEntry) -> f64 {
    cosine(&candidate.e_q, &anchor.e_q) - cosine(&candidate.e_a, &anchor.e_a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedImages {
    pub sample_ids: Vec<String>,
    pub image_refs: Vec<String>,
    /// How many of the requested `K` could not be filled.
    pub shortfall: usize,
}

struct Ranked<'a> {
    score: f64,
    id: &'a str,
    idx: usize,
}

// "Greater" means worse, so a max-heap keeps the current worst on top.
impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}
impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked<'_> {}

impl MiningIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.sample_id == sample_id)
    }

    /// Score of every other entry against `anchor`, in index order.
    pub fn scores_vs(&self, anchor: &str) -> Result<Vec<(String, f64)>> {
        let a = self
            .position(anchor)
            .ok_or_else(|| Error::UnknownSamples(vec![anchor.to_owned()]))?;
        let anchor = &self.entries[a];
        Ok(self
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != a)
            .map(|(_, e)| (e.sample_id.clone(), mining_score(anchor, e)))
            .collect())
    }

    /// Top-`k` entries by mining score, excluding the anchor and every entry
    /// whose answer equals the anchor's. Ties go to the smaller sample_id.
    pub fn mine(&self, anchor: &str, k: usize) -> Result<MinedImages> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be >= 1".into()));
        }
        let a = self
            .position(anchor)
            .ok_or_else(|| Error::UnknownSamples(vec![anchor.to_owned()]))?;
        let anchor = &self.entries[a];
        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
        for (idx, e) in self.entries.iter().enumerate() {
            if idx == a || e.answer == anchor.answer {
                continue;
            }
            let cand = Ranked {
                score: mining_score(anchor, e),
                id: &e.sample_id,
                idx,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        let best: Vec<usize> = heap.into_sorted_vec().into_iter().map(|r| r.idx).collect();
        let shortfall = k - best.len();
        if shortfall > 0 {
            log::warn!("anchor {}: only {} eligible counterfactuals", anchor.sample_id, best.len());
        }
        Ok(MinedImages {
            sample_ids: best.iter().map(|&i| self.entries[i].sample_id.clone()).collect(),
            image_refs: best.iter().map(|&i| self.entries[i].image_ref.clone()).collect(),
            shortfall,
        })
    }
}

pub fn mine_counterfactual_images(anchor: &str, index: &MiningIndex, k: usize) -> Result<MinedImages> {
    index.mine(anchor, k)
}

/// Per-row contributions of the image objects and question words to the
/// ground-truth answer log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScores {
    pub object_scores: Vec<f64>,
    pub word_scores: Vec<f64>,
}

/// Inputs for one attribution query: `Z_V`, `Z_Q` and the teacher-forced
/// target.
pub struct AttributionInput<'a> {
    pub z_v: &'a Tensor,
    pub z_q: &'a Tensor,
    pub cot: &'a CotSequence,
}

/// `s(a, row) = 1 . d log P(a) / d row` for every object and word row.
pub fn attribution_scores<B: Backbone + ?Sized>(
    model: &B,
    z_v: &Tensor,
    z_q: &Tensor,
    cot: &CotSequence,
) -> Result<AttributionScores> {
    let mut out = attribution_scores_batch(model, &[AttributionInput { z_v, z_q, cot }])?;
    Ok(out.remove(0))
}

/// Batched form: the samples' log-probabilities are independent, so one
/// backward pass through their sum yields every sample's row gradients.
pub fn attribution_scores_batch<B: Backbone + ?Sized>(
    model: &B,
    inputs: &[AttributionInput<'_>],
) -> Result<Vec<AttributionScores>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let mut vars = Vec::with_capacity(inputs.len());
    for inp in inputs {
        if inp.cot.answer_tokens.is_empty() {
            return Err(Error::InvalidInput("empty answer".into()));
        }
        let v = Var::from_tensor(&inp.z_v.detach())?;
        let q = Var::from_tensor(&inp.z_q.detach())?;
        vars.push((v, q));
    }
    let items: Vec<CotInput<'_>> = vars
        .iter()
        .zip(inputs)
        .map(|((v, q), inp)| CotInput {
            z_v: v.as_tensor(),
            z_q: q.as_tensor(),
            cot: inp.cot,
        })
        .collect();
    let outs = model.forward_cot_batch(&items)?;
    let mut total: Option<Tensor> = None;
    for (out, inp) in outs.iter().zip(inputs) {
        let lp = gold_logprob_sum(&out.token_logprobs, &inp.cot.ids, inp.cot.answer_tokens.clone())?;
        total = Some(match total {
            None => lp,
            Some(acc) => (acc + lp)?,
        });
    }
    let total = total.expect("inputs are nonempty");
    let grads = total.backward()?;
    vars.iter()
        .map(|(v, q)| {
            let row_sums = |var: &Var| -> Result<Vec<f64>> {
                let (rows, _) = var.as_tensor().dims2()?;
                let g = match grads.get(var.as_tensor()) {
                    Some(g) => g.sum(D::Minus1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
                    None => vec![0.0; rows],
                };
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("attribution gradient".into()));
                }
                Ok(g)
            };
            Ok(AttributionScores {
                object_scores: row_sums(v)?,
                word_scores: row_sums(q)?,
            })
        })
        .collect()
}

/// Indices of the `k` largest scores (ties to the lower index), ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[derive(Debug, Clone)]
pub struct FactualSplit {
    /// `Z+_V`: kept objects, every other row replaced by the MASK row.
    pub factual_image: Tensor,
    /// `Z-_V`: kept objects replaced by the MASK row.
    pub counterfactual_image: Tensor,
    pub factual_question: Tensor,
    pub counterfactual_question: Tensor,
    pub kept_objects: Vec<usize>,
    pub kept_words: Vec<usize>,
}

impl FactualSplit {
    /// `[Z+_V; Z+_Q]`
    pub fn factual(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.factual_image, &self.factual_question], 0)?)
    }

    /// `[Z-_V; Z-_Q]`
    pub fn counterfactual(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.counterfactual_image, &self.counterfactual_question], 0)?)
    }
}

fn keep_mask(rows: usize, kept: &[usize], dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; rows];
    for &i in kept {
        m[i] = 1.0;
    }
    Ok(Tensor::from_vec(m, (rows, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `keep * rows + (1 - keep) * mask_row`
fn blend(rows: &Tensor, keep: &Tensor, mask_row: &Tensor) -> Result<Tensor> {
    let drop = (1.0 - keep)?;
    Ok((rows.broadcast_mul(keep)? + mask_row.broadcast_mul(&drop)?)?)
}

/// Keeps the top-`k_ins` objects and, separately, the top-`k_ins` words as
/// the factual view; the counterfactual view masks exactly those rows.
pub fn split_factual_counterfactual(
    z_v: &Tensor,
    z_q: &Tensor,
    scores: &AttributionScores,
    k_ins: usize,
    mask_row: &Tensor,
) -> Result<FactualSplit> {
    let (m, _) = z_v.dims2()?;
    let (n, _) = z_q.dims2()?;
    if scores.object_scores.len() != m || scores.word_scores.len() != n {
        return Err(Error::InvalidInput(format!(
            "scores for {}x{} rows, inputs have {m}x{n}",
            scores.object_scores.len(),
            scores.word_scores.len()
        )));
    }
    FactualSplit::from_kept(
        z_v,
        z_q,
        top_k_indices(&scores.object_scores, k_ins),
        top_k_indices(&scores.word_scores, k_ins),
        mask_row,
    )
}

impl FactualSplit {
    /// Builds both views from precomputed kept index sets.
    pub fn from_kept(
        z_v: &Tensor,
        z_q: &Tensor,
        kept_objects: Vec<usize>,
        kept_words: Vec<usize>,
        mask_row: &Tensor,
    ) -> Result<Self> {
        let (m, _) = z_v.dims2()?;
        let (n, _) = z_q.dims2()?;
        if kept_objects.iter().any(|&i| i >= m) || kept_words.iter().any(|&i| i >= n) {
            return Err(Error::InvalidInput("kept index out of range".into()));
        }
        let dtype = z_v.dtype();
        let keep_v = keep_mask(m, &kept_objects, dtype)?;
        let keep_q = keep_mask(n, &kept_words, dtype)?;
        let mask_row = mask_row.reshape((1, mask_row.elem_count()))?;
        Ok(FactualSplit {
            factual_image: blend(z_v, &keep_v, &mask_row)?,
            counterfactual_image: blend(z_v, &(1.0 - &keep_v)?, &mask_row)?,
            factual_question: blend(z_q, &keep_q, &mask_row)?,
            counterfactual_question: blend(z_q, &(1.0 - &keep_q)?, &mask_row)?,
            kept_objects,
            kept_words,
        })
    }
}
