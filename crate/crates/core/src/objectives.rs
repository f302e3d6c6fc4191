//! The four training losses and their weighted total.

use candle_core::{DType, Tensor};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_loss, project, ProjectionHead};
use crate::data::CotSequence;
use crate::error::{Error, Result};
use crate::mining::FactualSplit;
use crate::model::{gold_logprob_sum, DecoderOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.2,
            gamma: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vqa: f64,
    pub l_sem: f64,
    pub l_img: f64,
    pub l_ins: f64,
    pub total: f64,
}

/// `total = l_vqa + alpha l_sem + beta l_img + gamma l_ins`.
pub fn total_loss(l_vqa: f64, l_sem: f64, l_img: f64, l_ins: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_vqa", l_vqa), ("l_sem", l_sem), ("l_img", l_img), ("l_ins", l_ins)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(LossBreakdown {
        l_vqa,
        l_sem,
        l_img,
        l_ins,
        total: l_vqa + w.alpha * l_sem + w.beta * l_img + w.gamma * l_ins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaNormalization {
    /// Mean over supervised tokens.
    #[default]
    PerToken,
    /// Unnormalized sum.
    Sum,
}

/// Cross-entropy over the explanation and answer spans.
pub fn vqa_loss(outputs: &DecoderOutputs, cot: &CotSequence, norm: VqaNormalization) -> Result<Tensor> {
    let t = cot.len();
    if outputs.token_logprobs.dim(0)? != t || outputs.len() != t {
        return Err(Error::InvalidInput(format!(
            "decoder produced {} positions for a {t}-token target",
            outputs.token_logprobs.dim(0)?
        )));
    }
    let ll = gold_logprob_sum(&outputs.token_logprobs, &cot.ids, 0..t)?;
    let nll = ll.neg()?;
    Ok(match norm {
        VqaNormalization::PerToken => (nll / t as f64)?,
        VqaNormalization::Sum => nll,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeDraw {
    /// Batch positions of the chosen negatives.
    pub members: Vec<usize>,
    /// Fewer than `k` members with a different answer were available.
    pub degenerate: bool,
}

/// Draws `k` batch members whose answer differs from the anchor's, uniformly
/// without replacement. With too few such members it samples with
/// replacement from them (or from all other members if none differ).
pub fn sample_negative_answers<R: Rng + ?Sized>(
    answers: &[String],
    anchor: usize,
    k: usize,
    rng: &mut R,
) -> NegativeDraw {
    let eligible: Vec<usize> = (0..answers.len())
        .filter(|&j| j != anchor && answers[j] != answers[anchor])
        .collect();
    if eligible.len() >= k {
        return NegativeDraw {
            members: eligible.choose_multiple(rng, k).copied().collect(),
            degenerate: false,
        };
    }
    let pool: Vec<usize> = if eligible.is_empty() {
        (0..answers.len()).filter(|&j| j != anchor).collect()
    } else {
        eligible
    };
    let members = if pool.is_empty() {
        Vec::new()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    NegativeDraw {
        members,
        degenerate: true,
    }
}

fn project_all(seqs: &[Tensor], head: &ProjectionHead) -> Result<Tensor> {
    let rows = seqs
        .iter()
        .map(|s| project(s, head))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

/// Anchor `[Z_V; Z_Q; Z_E]`, positive `H_A`, negatives other answers' `H_A`.
pub fn semantic_cl(
    anchor_zvqe: &Tensor,
    positive_h_a: &Tensor,
    negative_h_a: &[Tensor],
    head: &ProjectionHead,
    tau: &Tensor,
) -> Result<Tensor> {
    if negative_h_a.is_empty() {
        return Err(Error::InvalidInput("semantic level needs negatives".into()));
    }
    contrastive_loss(
        &project(anchor_zvqe, head)?,
        &project(positive_h_a, head)?,
        &project_all(negative_h_a, head)?,
        tau,
    )
}

/// Anchor `[H_E; H_A]`, positive `[Z_V; Z_Q]`, negatives `[Z^_V; Z_Q]`.
pub fn image_cl(
    anchor_h_ea: &Tensor,
    factual_zvq: &Tensor,
    counterfactual_zvq: &[Tensor],
    head: &ProjectionHead,
    tau: &Tensor,
) -> Result<Tensor> {
    if counterfactual_zvq.is_empty() {
        return Err(Error::InvalidInput("image level needs mined counterfactuals".into()));
    }
    contrastive_loss(
        &project(anchor_h_ea, head)?,
        &project(factual_zvq, head)?,
        &project_all(counterfactual_zvq, head)?,
        tau,
    )
}

/// Anchor `[H_E; H_A]`, positive `[Z+_V; Z+_Q]`, single negative `[Z-_V; Z-_Q]`.
pub fn instance_cl(
    anchor_h_ea: &Tensor,
    split: &FactualSplit,
    head: &ProjectionHead,
    tau: &Tensor,
) -> Result<Tensor> {
    contrastive_loss(
        &project(anchor_h_ea, head)?,
        &project(&split.factual()?, head)?,
        &project(&split.counterfactual()?, head)?.unsqueeze(0)?,
        tau,
    )
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
