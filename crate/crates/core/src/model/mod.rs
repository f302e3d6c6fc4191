//! Vision-language decoder: image projection, token embedding and a tiny
//! prefix-conditioned transformer that exposes per-span hidden states.

mod checkpoint;
mod params;
mod transformer;

use std::ops::Range;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{CotSequence, FeatureMatrix};
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use params::ParamStore;
pub(crate) use params::Init;
pub use transformer::{TinyTransformer, HEAD_LEVELS, LOG_TAU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Image slots per sample.
    pub m: usize,
    pub d_raw: usize,
    pub max_text_len: usize,
    /// Text positions available to question plus target.
    pub max_positions: usize,
    pub ffn_mult: usize,
    pub positional: bool,
    /// Amplitude of the sinusoidal position codes.
    #[serde(default = "default_pos_scale")]
    pub pos_scale: f64,
}

fn default_pos_scale() -> f64 {
    0.25
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_layers: 3,
            n_heads: 4,
            vocab_size: 0,
            m: 3,
            d_raw: 9,
            max_text_len: 40,
            max_positions: 80,
            ffn_mult: 4,
            positional: true,
            pos_scale: default_pos_scale(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("m", self.m),
            ("d_raw", self.d_raw),
            ("max_text_len", self.max_text_len),
            ("max_positions", self.max_positions),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.pos_scale.is_finite() && self.pos_scale >= 0.0) {
            return Err(Error::Config("pos_scale must be finite and non-negative".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d={} is not divisible by n_heads={}",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    /// Reads `MCLE_PRECISION` (`f32` or `f64`).
    pub fn from_env() -> Option<Precision> {
        std::env::var("MCLE_PRECISION").ok()?.parse().ok()
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Image,
    Question,
    Explanation,
    Answer,
}

#[derive(Debug, Clone)]
pub struct EmbeddedSequence {
    /// `t x d`
    pub vectors: Tensor,
    pub segment: Segment,
}

/// Teacher-forced decoder pass over one target sequence.
#[derive(Debug, Clone)]
pub struct DecoderOutputs {
    /// `t x V`; row `i` is the log-distribution for target token `i`.
    pub token_logprobs: Tensor,
    /// `t x d`; row `i` is the final hidden state that predicts token `i`.
    pub hidden: Tensor,
    /// `t x d` embedded target (token plus position), the source of `Z_E`/`Z_A`.
    pub embedded: Tensor,
    pub explanation: Range<usize>,
    pub answer: Range<usize>,
}

impl DecoderOutputs {
    pub fn len(&self) -> usize {
        self.explanation.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden_expl(&self) -> Result<Tensor> {
        Ok(self
            .hidden
            .narrow(0, self.explanation.start, self.explanation.len())?)
    }

    pub fn hidden_ans(&self) -> Result<Tensor> {
        Ok(self.hidden.narrow(0, self.answer.start, self.answer.len())?)
    }

    /// Mean-pooled `H_E`.
    pub fn pooled_expl(&self) -> Result<Tensor> {
        Ok(self.hidden_expl()?.mean(0)?)
    }

    /// Mean-pooled `H_A`.
    pub fn pooled_ans(&self) -> Result<Tensor> {
        Ok(self.hidden_ans()?.mean(0)?)
    }

    pub fn embedded_expl(&self) -> Result<Tensor> {
        Ok(self
            .embedded
            .narrow(0, self.explanation.start, self.explanation.len())?)
    }

    /// `[H_E; H_A]` along the sequence axis, regardless of target order.
    pub fn hidden_expl_ans(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[self.hidden_expl()?, self.hidden_ans()?], 0)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeConfig {
    Greedy,
    Beam { width: usize },
}

/// One sample's decoder input.
#[derive(Clone, Copy)]
pub struct CotInput<'a> {
    pub z_v: &'a Tensor,
    pub z_q: &'a Tensor,
    pub cot: &'a CotSequence,
}

/// Contract every backbone satisfies for the objectives, mining and the
/// harness. `params` carries all trainable state including projection heads.
pub trait Backbone {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;

    /// `m x d_raw` raw features to `Z_V` (`m x d`).
    fn encode_image(&self, raw: &Tensor) -> Result<EmbeddedSequence>;

    /// Token rows plus positional encoding starting at text position `offset`.
    fn embed_text(&self, ids: &[u32], offset: usize, segment: Segment) -> Result<EmbeddedSequence>;

    /// Token rows with no positional term.
    fn word_embeddings(&self, ids: &[u32]) -> Result<Tensor>;

    /// The learned MASK row, `1 x d`.
    fn mask_embedding(&self) -> Result<Tensor>;

    fn forward_cot(&self, z_v: &Tensor, z_q: &Tensor, cot: &CotSequence) -> Result<DecoderOutputs>;

    /// `forward_cot` over several samples; implementations may pad and run
    /// them as one batch.
    fn forward_cot_batch(&self, items: &[CotInput<'_>]) -> Result<Vec<DecoderOutputs>> {
        items
            .iter()
            .map(|it| self.forward_cot(it.z_v, it.z_q, it.cot))
            .collect()
    }

    /// Log-distribution over the token following `prefix`.
    fn next_token_logprobs(&self, z_v: &Tensor, z_q: &Tensor, prefix: &[u32]) -> Result<Vec<f64>>;

    /// Sum of the answer tokens' conditional log-probabilities given image,
    /// question and the teacher-forced explanation.
    fn answer_logprob(&self, z_v: &Tensor, z_q: &Tensor, cot: &CotSequence) -> Result<Tensor> {
        if cot.answer_tokens.is_empty() {
            return Err(Error::InvalidInput("empty answer".into()));
        }
        let out = self.forward_cot(z_v, z_q, cot)?;
        gold_logprob_sum(&out.token_logprobs, &cot.ids, cot.answer_tokens.clone())
    }

    /// Autoregressive continuation of `start` until `eos` or `max_len` tokens.
    fn generate(
        &self,
        z_v: &Tensor,
        z_q: &Tensor,
        start: &[u32],
        eos: u32,
        decode: DecodeConfig,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        match decode {
            DecodeConfig::Greedy => greedy(self, z_v, z_q, start, eos, max_len),
            DecodeConfig::Beam { width } => beam(self, z_v, z_q, start, eos, width.max(1), max_len),
        }
    }
}

/// Sum over `positions` of the gold tokens' log-probabilities.
pub fn gold_logprob_sum(logprobs: &Tensor, ids: &[u32], positions: Range<usize>) -> Result<Tensor> {
    let (t, v) = logprobs.dims2()?;
    if ids.len() != t || positions.end > t {
        return Err(Error::InvalidInput(format!(
            "{t} log-distributions for {} targets (positions {positions:?})",
            ids.len()
        )));
    }
    let mut onehot = vec![0f64; positions.len() * v];
    for (row, pos) in positions.clone().enumerate() {
        let id = ids[pos] as usize;
        if id >= v {
            return Err(Error::TokenOutOfRange { id: ids[pos], vocab_size: v });
        }
        onehot[row * v + id] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (positions.len(), v), &Device::Cpu)?
        .to_dtype(logprobs.dtype())?;
    let picked = logprobs.narrow(0, positions.start, positions.len())?;
    Ok((picked * onehot)?.sum_all()?)
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

fn greedy<B: Backbone + ?Sized>(
    model: &B,
    z_v: &Tensor,
    z_q: &Tensor,
    start: &[u32],
    eos: u32,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut out = start.to_vec();
    while out.len() < max_len && out.last() != Some(&eos) {
        let lp = model.next_token_logprobs(z_v, z_q, &out)?;
        out.push(argmax(&lp));
    }
    Ok(out)
}

fn beam<B: Backbone + ?Sized>(
    model: &B,
    z_v: &Tensor,
    z_q: &Tensor,
    start: &[u32],
    eos: u32,
    width: usize,
    max_len: usize,
) -> Result<Vec<u32>> {
    let done = |ids: &Vec<u32>| ids.len() >= max_len || ids.last() == Some(&eos);
    let mut beams: Vec<(Vec<u32>, f64)> = vec![(start.to_vec(), 0.0)];
    while !beams.iter().all(|(ids, _)| done(ids)) {
        let mut cands: Vec<(Vec<u32>, f64)> = Vec::new();
        for (ids, score) in &beams {
            if done(ids) {
                cands.push((ids.clone(), *score));
                continue;
            }
            let lp = model.next_token_logprobs(z_v, z_q, ids)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                let mut next = ids.clone();
                next.push(tok as u32);
                cands.push((next, score + lp[tok]));
            }
        }
        // stable sort keeps expansion order among equal scores
        cands.sort_by(|a, b| b.1.total_cmp(&a.1));
        cands.truncate(width);
        beams = cands;
    }
    Ok(beams.swap_remove(0).0)
}

/// Raw feature matrix as an `m x d_raw` tensor of `dtype`.
pub fn feature_tensor(f: &FeatureMatrix, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(&f.data, (f.rows, f.cols), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(candle_core::D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(candle_core::D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub(crate) fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(candle_core::D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(candle_core::D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}
