//! Sequence projection, cosine similarity and the InfoNCE-style loss shared
//! by the three contrastive levels.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);

/// How many zero-norm vectors `similarity` has seen (and scored as 0).
pub fn zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClLevel {
    Semantic,
    Image,
    Instance,
}

impl ClLevel {
    pub const ALL: [ClLevel; 3] = [ClLevel::Semantic, ClLevel::Image, ClLevel::Instance];

    pub fn name(self) -> &'static str {
        match self {
            ClLevel::Semantic => "semantic",
            ClLevel::Image => "image",
            ClLevel::Instance => "instance",
        }
    }
}

/// `u_t = ReLU(x_t W + b)`, mean-pooled over the sequence.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ProjectionHead {
    pub fn from_store(store: &ParamStore, level: ClLevel) -> Result<Self> {
        Ok(ProjectionHead {
            weight: store.get(&format!("cl.{}.weight", level.name()))?.clone(),
            bias: store.get(&format!("cl.{}.bias", level.name()))?.clone(),
        })
    }

    pub fn param_names(level: ClLevel) -> [String; 2] {
        [
            format!("cl.{}.weight", level.name()),
            format!("cl.{}.bias", level.name()),
        ]
    }
}

/// Temperature `exp(log_tau)` as a differentiable scalar.
pub fn temperature(store: &ParamStore) -> Result<Tensor> {
    Ok(store.get(crate::model::LOG_TAU)?.exp()?)
}

/// Projects a `t x d` sequence to a `d` vector with non-negative entries.
pub fn project(seq: &Tensor, head: &ProjectionHead) -> Result<Tensor> {
    let t = seq.dim(0)?;
    if t == 0 {
        return Err(Error::InvalidInput("cannot project an empty sequence".into()));
    }
    let u = seq.matmul(&head.weight)?.broadcast_add(&head.bias)?.relu()?;
    Ok(u.mean(0)?)
}

/// Cosine similarity of `anchor` (`d`) against each row of `cands` (`k x d`).
/// Zero-norm vectors score 0 and bump the diagnostic counter.
pub fn cosine_rows(anchor: &Tensor, cands: &Tensor) -> Result<Tensor> {
    let dtype = anchor.dtype();
    let k = cands.dim(0)?;
    let dots = cands.matmul(&anchor.unsqueeze(1)?)?.squeeze(1)?;
    let cand_sq = cands.sqr()?.sum(D::Minus1)?;
    let anchor_sq = anchor.sqr()?.sum_all()?;

    let cand_vals = cand_sq.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let anchor_val = anchor_sq.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let mut zero_rows = 0u64;
    let guard: Vec<f64> = cand_vals
        .iter()
        .map(|&v| {
            if v == 0.0 {
                zero_rows += 1;
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let anchor_zero = anchor_val == 0.0;
    if anchor_zero {
        zero_rows += 1;
    }
    if zero_rows > 0 {
        ZERO_NORM_EVENTS.fetch_add(zero_rows, Ordering::Relaxed);
    }
    let guard = Tensor::from_vec(guard, k, &Device::Cpu)?.to_dtype(dtype)?;
    let cand_norm = (cand_sq + guard)?.sqrt()?;
    let anchor_norm = (anchor_sq + if anchor_zero { 1.0 } else { 0.0 })?.sqrt()?;
    Ok(dots.broadcast_div(&cand_norm.broadcast_mul(&anchor_norm)?)?)
}

/// Cosine similarity of two `d` vectors as a scalar tensor.
pub fn similarity(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(cosine_rows(u, &v.unsqueeze(0)?)?.squeeze(0)?)
}

/// `-log softmax` of the positive among `[positive, negatives...]` with
/// logits `sim(., anchor) / tau`. The positive is part of the denominator.
pub fn contrastive_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &Tensor,
    tau: &Tensor,
) -> Result<Tensor> {
    if negatives.dim(0)? == 0 {
        return Err(Error::InvalidInput("contrastive loss needs at least one negative".into()));
    }
    let cands = Tensor::cat(&[positive.unsqueeze(0)?, negatives.clone()], 0)?;
    let sims = cosine_rows(anchor, &cands)?;
    let check = sims.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if check.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("contrastive similarity".into()));
    }
    let logits = sims.broadcast_div(tau)?;
    let max = logits.max_keepdim(0)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_all()?.log()?;
    Ok((lse - shifted.get(0)?)?)
}

/// Plain-vector triplet for inspection and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTriplet {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    pub tau: f64,
}

impl ContrastiveTriplet {
    pub fn loss(&self) -> Result<f64> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidInput("tau must be positive".into()));
        }
        let dev = Device::Cpu;
        let d = self.anchor.len();
        let flat: Vec<f64> = self.negatives.iter().flatten().copied().collect();
        if self.negatives.iter().any(|n| n.len() != d) || self.positive.len() != d {
            return Err(Error::InvalidInput("embedding widths differ".into()));
        }
        let loss = contrastive_loss(
            &Tensor::from_slice(&self.anchor, d, &dev)?,
            &Tensor::from_slice(&self.positive, d, &dev)?,
            &Tensor::from_vec(flat, (self.negatives.len(), d), &dev)?,
            &Tensor::new(self.tau, &dev)?,
        )?;
        Ok(loss.to_scalar::<f64>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn head(w: Vec<Vec<f64>>, b: Vec<f64>) -> ProjectionHead {
        ProjectionHead {
            weight: t2(&w),
            bias: t1(&b),
        }
    }

    fn unit(angle: f64) -> Vec<f64> {
        vec![angle.cos(), angle.sin()]
    }

    /// Unit vector whose cosine with (1, 0) is `s`.
    fn at_sim(s: f64) -> Vec<f64> {
        unit(s.acos())
    }

    #[test]
    fn zero_head_projects_to_zero() {
        let h = head(vec![vec![0.0; 3]; 3], vec![0.0; 3]);
        let seq = t2(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]);
        assert_eq!(project(&seq, &h).unwrap().to_vec1::<f64>().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_row_projection_is_relu_affine() {
        let h = head(vec![vec![1.0, -1.0], vec![2.0, 0.5]], vec![0.1, -0.2]);
        let out = project(&t2(&[vec![1.0, 1.0]]), &h).unwrap().to_vec1::<f64>().unwrap();
        // x W + b = [1 + 2 + 0.1, -1 + 0.5 - 0.2] = [3.1, -0.7]
        assert!((out[0] - 3.1).abs() < 1e-12);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let h = head(vec![vec![1.0]], vec![0.0]);
        let empty = Tensor::zeros((0, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(project(&empty, &h).is_err());
    }

    #[test]
    fn similarity_basics() {
        let s = |a: &[f64], b: &[f64]| similarity(&t1(a), &t1(b)).unwrap().to_scalar::<f64>().unwrap();
        assert!((s(&[0.3, -1.2, 4.0], &[0.3, -1.2, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(s(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((s(&[2.0, 4.0], &[1.0, -3.0]) - s(&[1.0, 2.0], &[1.0, -3.0])).abs() < 1e-12);
        assert!((s(&[1.0, 2.0], &[3.0, -1.0]) - s(&[3.0, -1.0], &[1.0, 2.0])).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_similarity_is_zero_and_counted() {
        let before = zero_norm_events();
        let u = Var::from_tensor(&t1(&[0.0, 0.0])).unwrap();
        let sim = similarity(u.as_tensor(), &t1(&[1.0, 2.0])).unwrap();
        assert_eq!(sim.to_scalar::<f64>().unwrap(), 0.0);
        assert!(zero_norm_events() > before);
        let grads = sim.backward().unwrap();
        let g = grads.get(u.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }

    use candle_core::Var;

    fn triplet_loss(pos: f64, negs: &[f64], tau: f64) -> f64 {
        ContrastiveTriplet {
            anchor: vec![1.0, 0.0],
            positive: at_sim(pos),
            negatives: negs.iter().map(|&s| at_sim(s)).collect(),
            tau,
        }
        .loss()
        .unwrap()
    }

    #[test]
    fn uniform_similarities_give_log_k_plus_one() {
        let l = triplet_loss(0.3, &[0.3, 0.3, 0.3], 0.2);
        assert!((l - 4f64.ln()).abs() < 1e-9, "{l}");
        let l = triplet_loss(-0.7, &[-0.7], 0.5);
        assert!((l - 2f64.ln()).abs() < 1e-9, "{l}");
    }

    #[test]
    fn worked_values() {
        // frozen from direct scalar evaluation: ln(1 + e^-4 + e^-5.5)
        let l = triplet_loss(0.9, &[0.1, -0.2], 0.2);
        assert!((l - 0.022_155_1).abs() < 1e-5, "{l}");
        // ln(1 + e^-10)
        let l = triplet_loss(1.0, &[-1.0], 0.2);
        assert!((l - 4.539_889e-5).abs() < 1e-9, "{l}");
    }

    #[test]
    fn requires_a_negative() {
        let z = Tensor::zeros((0, 2), DType::F64, &Device::Cpu).unwrap();
        let a = t1(&[1.0, 0.0]);
        assert!(contrastive_loss(&a, &a, &z, &Tensor::new(0.2f64, &Device::Cpu).unwrap()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn monotone_and_bounded(
            pos in -0.95f64..0.9,
            eps in 0.001f64..0.05,
            negs in prop::collection::vec(-1.0f64..1.0, 1..5),
            tau in 0.05f64..2.0,
        ) {
            let base = triplet_loss(pos, &negs, tau);
            prop_assert!(base > 0.0);
            prop_assert!(triplet_loss(pos + eps, &negs, tau) < base);
            let mut bumped = negs.clone();
            bumped[0] = (bumped[0] - 0.1).max(-1.0) + 0.05;
            if bumped[0] > negs[0] {
                prop_assert!(triplet_loss(pos, &bumped, tau) > base);
            }
            let max_s = negs.iter().copied().fold(pos, f64::max);
            let bound = ((negs.len() + 1) as f64).ln() + (max_s - pos) / tau;
            prop_assert!(base <= bound + 1e-12);
        }
    }
}
