//! Training harness: run configuration, per-batch loss assembly, AdamW with
//! global-norm clipping, per-epoch mining refresh, checkpoints and resume.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{temperature, ClLevel, ProjectionHead};
use crate::data::{
    assemble_cot, build_vocab, parse_generation_ordered, CotOrder, CotSequence, DatasetSplit,
    TokenizedSample, Vocab,
};
use crate::error::{Error, Result};
use crate::mining::{
    attribution_scores_batch, build_mining_index, top_k_indices, AttributionInput, FactualSplit,
    MiningIndex,
};
use crate::metrics::{evaluate_split, AnswerMatch, EvalMode, MetricReport};
use crate::model::{
    feature_tensor, read_checkpoint, write_checkpoint, Backbone, CotInput, DecodeConfig, DecoderOutputs, ModelConfig,
    ParamStore, Precision, Segment, TinyTransformer, LOG_TAU,
};
use crate::objectives::{
    image_cl, instance_cl, sample_negative_answers, scalar, semantic_cl, total_loss, vqa_loss,
    LossBreakdown, LossWeights, VqaNormalization,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_cot: bool,
    pub no_semantic: bool,
    pub no_image: bool,
    pub no_instance: bool,
    pub no_all: bool,
}

impl Ablations {
    /// `no_all` switches off every contrastive level.
    pub fn normalized(mut self) -> Self {
        if self.no_all {
            self.no_semantic = true;
            self.no_image = true;
            self.no_instance = true;
        }
        self
    }

    pub fn enabled(&self, level: ClLevel) -> bool {
        let a = self.normalized();
        match level {
            ClLevel::Semantic => !a.no_semantic,
            ClLevel::Image => !a.no_image,
            ClLevel::Instance => !a.no_instance,
        }
    }

    pub fn order(&self) -> CotOrder {
        if self.no_cot {
            CotOrder::AnswerFirst
        } else {
            CotOrder::ExplanationFirst
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopK {
    pub sem: usize,
    pub img: usize,
    pub ins: usize,
}

impl Default for TopK {
    fn default() -> Self {
        TopK { sem: 3, img: 3, ins: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over the planned number of steps.
    #[default]
    Cosine,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.3,
            clip_norm: 1.0,
            schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub feature_dir: Option<PathBuf>,
    /// Checkpoints, step log and predictions go here.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub tau_init: f64,
    pub top_k: TopK,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_text_len: usize,
    pub seed: u64,
    pub ablations: Ablations,
    pub optimizer: OptimizerConfig,
    pub precision: Precision,
    pub vqa_normalization: VqaNormalization,
    /// Epochs between mining-index rebuilds.
    pub mining_refresh: usize,
    pub min_freq: usize,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            tau_init: 0.2,
            top_k: TopK::default(),
            batch_size: 16,
            epochs: 30,
            max_text_len: 40,
            seed: 0,
            ablations: Ablations::default(),
            optimizer: OptimizerConfig::default(),
            precision: Precision::F32,
            vqa_normalization: VqaNormalization::PerToken,
            mining_refresh: 1,
            min_freq: 1,
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("max_text_len", self.max_text_len),
            ("top_k.sem", self.top_k.sem),
            ("top_k.img", self.top_k.img),
            ("top_k.ins", self.top_k.ins),
            ("mining_refresh", self.mining_refresh),
            ("min_freq", self.min_freq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::Config("tau_init must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.clip_norm > 0.0 && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer settings must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.max_text_len > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_text_len {} exceeds the model's {} text positions",
                self.max_text_len, self.model.max_positions
            )));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.weights,
            ablations: self.ablations.normalized(),
            normalization: self.vqa_normalization,
        }
    }
}

/// One training sample with its target already assembled.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: String,
    pub image_ref: String,
    /// Lowercased, trimmed answer text; negatives must differ from it.
    pub answer_key: String,
    /// Raw `m x d_raw` features.
    pub features: Tensor,
    pub question_ids: Vec<u32>,
    pub cot: CotSequence,
}

pub fn prepare_split(
    split: &DatasetSplit,
    vocab: &Vocab,
    max_text_len: usize,
    order: CotOrder,
    dtype: DType,
) -> Result<Vec<PreparedSample>> {
    split
        .samples
        .iter()
        .map(|s| {
            let tok = TokenizedSample::from_raw(s, vocab);
            Ok(PreparedSample {
                sample_id: s.sample_id.clone(),
                image_ref: s.image_ref.clone(),
                answer_key: s.answer.trim().to_lowercase(),
                features: feature_tensor(split.features_of(s), dtype)?,
                question_ids: tok.question_ids.clone(),
                cot: assemble_cot(&tok, vocab, max_text_len, order)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ablations: Ablations,
    pub normalization: VqaNormalization,
}

/// Everything a batch loss needs beyond the parameters. Discrete choices
/// (negatives, mined images, kept rows) and the counterfactual image
/// encodings are fixed here, so the loss is a smooth function of the
/// parameters alone.
#[derive(Debug, Clone)]
pub struct BatchMaterial {
    /// Indices into the prepared sample list.
    pub members: Vec<usize>,
    /// Per member: batch positions of its negative answers.
    pub negatives: Vec<Vec<usize>>,
    /// Per member: encoded counterfactual images, treated as constants.
    pub counterfactual_images: Vec<Vec<Tensor>>,
    /// Per member: kept (object, word) rows of the factual view.
    pub kept: Vec<(Vec<usize>, Vec<usize>)>,
    pub degenerate_negatives: usize,
}

/// Picks negatives, encodes mined images and runs attribution for one batch.
pub fn build_material<B: Backbone + ?Sized>(
    model: &B,
    samples: &[PreparedSample],
    members: &[usize],
    mined: Option<&[Vec<usize>]>,
    top_k: TopK,
    ablations: Ablations,
    rng: &mut ChaCha8Rng,
) -> Result<BatchMaterial> {
    let ablations = ablations.normalized();
    let b = members.len();
    let mut mat = BatchMaterial {
        members: members.to_vec(),
        negatives: vec![Vec::new(); b],
        counterfactual_images: vec![Vec::new(); b],
        kept: vec![(Vec::new(), Vec::new()); b],
        degenerate_negatives: 0,
    };
    if ablations.enabled(ClLevel::Semantic) && b > 1 {
        let answers: Vec<String> = members.iter().map(|&i| samples[i].answer_key.clone()).collect();
        for pos in 0..b {
            let draw = sample_negative_answers(&answers, pos, top_k.sem, rng);
            mat.degenerate_negatives += draw.degenerate as usize;
            mat.negatives[pos] = draw.members;
        }
    }
    if ablations.enabled(ClLevel::Image) {
        let mined = mined.ok_or_else(|| Error::InvalidInput("image level needs mined images".into()))?;
        for (pos, &i) in members.iter().enumerate() {
            mat.counterfactual_images[pos] = mined[i]
                .iter()
                .map(|&j| Ok(model.encode_image(&samples[j].features)?.vectors.detach()))
                .collect::<Result<_>>()?;
        }
    }
    if ablations.enabled(ClLevel::Instance) {
        let mut prefixes = Vec::with_capacity(b);
        for &i in members {
            let s = &samples[i];
            let z_v = model.encode_image(&s.features)?.vectors;
            let z_q = model.embed_text(&s.question_ids, 0, Segment::Question)?.vectors;
            prefixes.push((z_v, z_q));
        }
        let inputs: Vec<AttributionInput<'_>> = members
            .iter()
            .zip(&prefixes)
            .map(|(&i, (z_v, z_q))| AttributionInput {
                z_v,
                z_q,
                cot: &samples[i].cot,
            })
            .collect();
        let scores = attribution_scores_batch(model, &inputs)?;
        for (pos, s) in scores.iter().enumerate() {
            mat.kept[pos] = (
                top_k_indices(&s.object_scores, top_k.ins),
                top_k_indices(&s.word_scores, top_k.ins),
            );
        }
    }
    Ok(mat)
}

/// Differentiable batch loss and its breakdown.
pub struct BatchLoss {
    pub total: Tensor,
    /// Unweighted level losses in the order vqa, semantic, image, instance;
    /// `None` for levels that are disabled or had no contributing sample.
    pub components: [Option<Tensor>; 4],
    pub breakdown: LossBreakdown,
}

fn mean(parts: Vec<Tensor>, dtype: DType) -> Result<Option<Tensor>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let n = parts.len() as f64;
    let stacked = Tensor::stack(&parts, 0)?.to_dtype(dtype)?;
    Ok(Some((stacked.sum_all()? / n)?))
}

/// Mean over the batch of each loss, combined with the configured weights.
/// Levels switched off in `cfg` are neither computed nor differentiated.
pub fn batch_loss<B: Backbone + ?Sized>(
    model: &B,
    samples: &[PreparedSample],
    mat: &BatchMaterial,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let dtype = model.params().dtype();
    let ablations = cfg.ablations.normalized();
    let tau = temperature(model.params())?;
    let head = |level| ProjectionHead::from_store(model.params(), level);

    let mut prefixes = Vec::with_capacity(mat.members.len());
    for &i in &mat.members {
        let s = &samples[i];
        let z_v = model.encode_image(&s.features)?.vectors;
        let z_q = model.embed_text(&s.question_ids, 0, Segment::Question)?.vectors;
        prefixes.push((z_v, z_q));
    }
    let items: Vec<CotInput<'_>> = prefixes
        .iter()
        .zip(&mat.members)
        .map(|((z_v, z_q), &i)| CotInput {
            z_v,
            z_q,
            cot: &samples[i].cot,
        })
        .collect();
    let outs = model.forward_cot_batch(&items)?;
    let passes: Vec<(Tensor, Tensor, DecoderOutputs)> = prefixes
        .into_iter()
        .zip(outs)
        .map(|((z_v, z_q), out)| (z_v, z_q, out))
        .collect();

    let mut vqa = Vec::new();
    for (pos, &i) in mat.members.iter().enumerate() {
        vqa.push(vqa_loss(&passes[pos].2, &samples[i].cot, cfg.normalization)?);
    }
    let l_vqa = mean(vqa, dtype)?.expect("batch is nonempty");

    let mut sem = Vec::new();
    if ablations.enabled(ClLevel::Semantic) {
        let h = head(ClLevel::Semantic)?;
        for (pos, (z_v, z_q, out)) in passes.iter().enumerate() {
            if mat.negatives[pos].is_empty() {
                continue;
            }
            let anchor = Tensor::cat(&[z_v, z_q, &out.embedded_expl()?], 0)?;
            let negs = mat.negatives[pos]
                .iter()
                .map(|&j| passes[j].2.hidden_ans())
                .collect::<Result<Vec<_>>>()?;
            sem.push(semantic_cl(&anchor, &out.hidden_ans()?, &negs, &h, &tau)?);
        }
    }

    let mut img = Vec::new();
    if ablations.enabled(ClLevel::Image) {
        let h = head(ClLevel::Image)?;
        for (pos, (z_v, z_q, out)) in passes.iter().enumerate() {
            if mat.counterfactual_images[pos].is_empty() {
                continue;
            }
            let factual = Tensor::cat(&[z_v, z_q], 0)?;
            let negs = mat.counterfactual_images[pos]
                .iter()
                .map(|cf| Ok(Tensor::cat(&[cf, z_q], 0)?))
                .collect::<Result<Vec<_>>>()?;
            img.push(image_cl(&out.hidden_expl_ans()?, &factual, &negs, &h, &tau)?);
        }
    }

    let mut ins = Vec::new();
    if ablations.enabled(ClLevel::Instance) {
        let h = head(ClLevel::Instance)?;
        let mask_row = model.mask_embedding()?;
        for (pos, (z_v, z_q, out)) in passes.iter().enumerate() {
            let (objs, words) = &mat.kept[pos];
            if objs.is_empty() && words.is_empty() {
                continue;
            }
            let split = FactualSplit::from_kept(z_v, z_q, objs.clone(), words.clone(), &mask_row)?;
            ins.push(instance_cl(&out.hidden_expl_ans()?, &split, &h, &tau)?);
        }
    }

    let w = cfg.weights;
    let mut total = l_vqa.clone();
    let mut values = [scalar(&l_vqa)?, 0.0, 0.0, 0.0];
    let mut components = [Some(l_vqa), None, None, None];
    for (k, (parts, weight)) in [(sem, w.alpha), (img, w.beta), (ins, w.gamma)]
        .into_iter()
        .enumerate()
    {
        if let Some(l) = mean(parts, dtype)? {
            values[k + 1] = scalar(&l)?;
            total = (total + (&l * weight)?)?;
            components[k + 1] = Some(l);
        }
    }
    let breakdown = total_loss(values[0], values[1], values[2], values[3], &w)?;
    Ok(BatchLoss {
        total,
        components,
        breakdown,
    })
}

/// Decoupled-weight-decay Adam with global gradient-norm clipping. Moments
/// are kept per parameter name so they can be checkpointed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub t: u64,
    /// Planned number of steps, used by decaying schedules.
    pub horizon: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            horizon: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Learning rate of the next step.
    pub fn learning_rate(&self) -> f64 {
        match self.cfg.schedule {
            LrSchedule::Constant => self.cfg.lr,
            LrSchedule::Cosine if self.horizon > 0 => {
                let frac = (self.t as f64 / self.horizon as f64).min(1.0);
                0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            LrSchedule::Cosine => self.cfg.lr,
        }
    }

    /// Applies one update; parameters without a gradient are left untouched.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut present = Vec::new();
        let mut sq = 0.0;
        for (name, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
                present.push((name.to_owned(), var, g.clone()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let scale = if norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        debug_assert!(norm * scale <= self.cfg.clip_norm * (1.0 + 1e-9));
        let mut c = self.cfg;
        c.lr = self.learning_rate();
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, var, g) in present {
            let g = (g * scale)?;
            let m_prev = match self.m.get(&name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(&name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v_prev * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let p = var.as_tensor();
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            let step = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let next = ((p * (1.0 - c.lr * decay))? - (step * c.lr)?)?;
            var.set(&next.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name, v.detach());
        }
        Ok(norm)
    }
}

/// One JSON line per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_vqa: f64,
    pub l_sem: f64,
    pub l_img: f64,
    pub l_ins: f64,
    pub total: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCounters {
    pub degenerate_negatives: u64,
    pub mining_shortfall: u64,
}

/// Training state: model, optimizer, RNG and progress counters.
pub struct Trainer {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model: TinyTransformer,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
    pub counters: TrainCounters,
    pub logs: Vec<StepLog>,
    pub last_checkpoint: Option<PathBuf>,
    train: DatasetSplit,
    samples: Vec<PreparedSample>,
    index: Option<MiningIndex>,
    mined: Vec<Vec<usize>>,
}

impl Trainer {
    /// Builds the vocabulary over `vocab_splits` and fresh parameters.
    pub fn new(mut config: RunConfig, train: DatasetSplit, vocab_splits: &[&DatasetSplit]) -> Result<Self> {
        let mut splits: Vec<&DatasetSplit> = vec![&train];
        splits.extend_from_slice(vocab_splits);
        let vocab = build_vocab(&splits, config.min_freq)?;
        config.model.vocab_size = vocab.len();
        if let Some((_, f)) = train.features.iter().next() {
            config.model.m = f.rows;
            config.model.d_raw = f.cols;
        }
        config.model.max_text_len = config.max_text_len;
        config.validate()?;
        let model = TinyTransformer::init(
            config.model.clone(),
            config.precision.dtype(),
            config.seed,
            config.tau_init,
        )?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e);
        Self::assemble(config, vocab, model, AdamW::new(Default::default()), rng, train)
    }

    fn assemble(
        config: RunConfig,
        vocab: Vocab,
        model: TinyTransformer,
        mut optimizer: AdamW,
        rng: ChaCha8Rng,
        train: DatasetSplit,
    ) -> Result<Self> {
        optimizer.cfg = config.optimizer;
        let samples = prepare_split(
            &train,
            &vocab,
            config.max_text_len,
            config.ablations.order(),
            config.precision.dtype(),
        )?;
        if samples.is_empty() {
            return Err(Error::EmptyCorpus("training split has no samples".into()));
        }
        optimizer.horizon = (config.epochs * samples.len().div_ceil(config.batch_size)) as u64;
        Ok(Trainer {
            config,
            vocab,
            model,
            optimizer,
            rng,
            epoch: 0,
            step: 0,
            counters: TrainCounters::default(),
            logs: Vec::new(),
            last_checkpoint: None,
            train,
            samples,
            index: None,
            mined: Vec::new(),
        })
    }

    pub fn samples(&self) -> &[PreparedSample] {
        &self.samples
    }

    pub fn mining_index(&self) -> Option<&MiningIndex> {
        self.index.as_ref()
    }

    /// Material for a batch of the given sample positions, drawn from the
    /// trainer's rng. Mines counterfactual images first if the image level
    /// is on and no index exists yet.
    pub fn batch_material(&mut self, members: &[usize]) -> Result<BatchMaterial> {
        let ablations = self.config.ablations.normalized();
        if ablations.enabled(ClLevel::Image) && self.mined.is_empty() {
            self.refresh_mining()?;
        }
        build_material(
            &self.model,
            &self.samples,
            members,
            Some(&self.mined),
            self.config.top_k,
            ablations,
            &mut self.rng,
        )
    }

    /// Number of optimizer steps per epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.config.batch_size)
    }

    fn refresh_mining(&mut self) -> Result<()> {
        let index = build_mining_index(&self.train, &self.vocab, &self.model)?;
        let k = self.config.top_k.img;
        let mut mined = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let got = index.mine(&s.sample_id, k)?;
            self.counters.mining_shortfall += got.shortfall as u64;
            mined.push(
                got.sample_ids
                    .iter()
                    .map(|id| self.train.position(id).expect("index built from this split"))
                    .collect(),
            );
        }
        self.index = Some(index);
        self.mined = mined;
        Ok(())
    }

    /// Runs one epoch and returns its step logs.
    pub fn train_epoch(&mut self, mut log_sink: Option<&mut dyn Write>) -> Result<Vec<StepLog>> {
        let ablations = self.config.ablations.normalized();
        if ablations.enabled(ClLevel::Image)
            && (self.mined.is_empty() || self.epoch % self.config.mining_refresh == 0)
        {
            self.refresh_mining()?;
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let loss_cfg = self.config.loss_config();
        let mut logs = Vec::new();
        for members in order.chunks(self.config.batch_size) {
            let mat = build_material(
                &self.model,
                &self.samples,
                members,
                Some(&self.mined),
                self.config.top_k,
                ablations,
                &mut self.rng,
            )?;
            self.counters.degenerate_negatives += mat.degenerate_negatives as u64;
            let tau = scalar(&temperature(self.model.params())?)?;
            let loss = match batch_loss(&self.model, &self.samples, &mat, &loss_cfg) {
                Ok(l) if l.breakdown.total.is_finite() => l,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        step: self.step + 1,
                        last_good: self.last_checkpoint.clone(),
                    })
                }
                Err(e) => return Err(e),
            };
            let grads = loss.total.backward()?;
            if let Err(Error::NonFinite(_)) = self.optimizer.step(self.model.params(), &grads) {
                return Err(Error::Diverged {
                    step: self.step + 1,
                    last_good: self.last_checkpoint.clone(),
                });
            }
            self.step += 1;
            let b = loss.breakdown;
            let entry = StepLog {
                step: self.step,
                l_vqa: b.l_vqa,
                l_sem: b.l_sem,
                l_img: b.l_img,
                l_ins: b.l_ins,
                total: b.total,
                tau,
            };
            if let Some(sink) = log_sink.as_deref_mut() {
                serde_json::to_writer(&mut *sink, &entry)?;
                sink.write_all(b"\n").map_err(|e| Error::io("step log", e))?;
            }
            logs.push(entry);
        }
        self.epoch += 1;
        if self.counters.degenerate_negatives > 0 {
            log::debug!("{} degenerate negative draws so far", self.counters.degenerate_negatives);
        }
        self.logs.extend_from_slice(&logs);
        Ok(logs)
    }

    /// Trains until `config.epochs`, writing the step log and one checkpoint
    /// per epoch under `out_dir` when given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        let mut sink = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("steps.jsonl");
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        while self.epoch < self.config.epochs {
            let logs = self.train_epoch(sink.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(last) = logs.last() {
                info!(
                    "epoch {} step {} total {:.4} vqa {:.4} tau {:.4}",
                    self.epoch, last.step, last.total, last.l_vqa, last.tau
                );
            }
            if let Some(dir) = out_dir {
                if let Some(w) = sink.as_mut() {
                    w.flush().map_err(|e| Error::io(dir, e))?;
                }
                let path = dir.join(format!("epoch-{:03}.ckpt", self.epoch));
                self.save(&path)?;
                let latest = dir.join("latest.ckpt");
                fs::copy(&path, &latest).map_err(|e| Error::io(&latest, e))?;
            }
        }
        Ok(())
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "mcle-train",
            "config": self.config,
            "vocab": self.vocab.tokens(),
            "epoch": self.epoch,
            "step": self.step,
            "adam_t": self.optimizer.t,
            "rng": self.rng,
            "counters": self.counters,
            "mined": self.mined,
        });
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (name, var) in self.model.params().iter() {
            named.push((format!("param/{name}"), var.as_tensor().clone()));
        }
        for (name, t) in &self.optimizer.m {
            named.push((format!("adam_m/{name}"), t.clone()));
        }
        for (name, t) in &self.optimizer.v {
            named.push((format!("adam_v/{name}"), t.clone()));
        }
        write_checkpoint(path, &meta, named.iter().map(|(n, t)| (n.as_str(), t)))?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Restores a trainer from a checkpoint; training continues with the
    /// next epoch exactly as an uninterrupted run would.
    pub fn resume(path: &Path, train: DatasetSplit) -> Result<Self> {
        let saved = load_trained(path)?;
        let ckpt = saved.checkpoint;
        let meta = &ckpt.meta;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let rng: ChaCha8Rng = serde_json::from_value(field("rng")?)?;
        let mut optimizer = AdamW::new(saved.config.optimizer);
        optimizer.t = serde_json::from_value(field("adam_t")?)?;
        let dtype = saved.model.params().dtype();
        for (name, t) in &ckpt.tensors {
            if let Some(p) = name.strip_prefix("adam_m/") {
                optimizer.m.insert(p.to_owned(), t.to_dtype(dtype)?);
            } else if let Some(p) = name.strip_prefix("adam_v/") {
                optimizer.v.insert(p.to_owned(), t.to_dtype(dtype)?);
            }
        }
        let mut trainer = Self::assemble(saved.config, saved.vocab, saved.model, optimizer, rng, train)?;
        trainer.epoch = serde_json::from_value(field("epoch")?)?;
        trainer.step = serde_json::from_value(field("step")?)?;
        trainer.counters = serde_json::from_value(field("counters")?)?;
        if let Some(mined) = meta.get("mined") {
            trainer.mined = serde_json::from_value(mined.clone())?;
        }
        trainer.last_checkpoint = Some(path.to_path_buf());
        Ok(trainer)
    }
}

/// A checkpoint decoded into a ready-to-use model.
pub struct TrainedModel {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model: TinyTransformer,
    pub checkpoint: crate::model::Checkpoint,
}

/// Loads model parameters, vocabulary and run configuration. Parameters are
/// cast to the precision recorded in the checkpoint.
pub fn load_trained(path: &Path) -> Result<TrainedModel> {
    let ckpt = read_checkpoint(path)?;
    let config: RunConfig = serde_json::from_value(
        ckpt.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
    )?;
    let tokens: Vec<String> = serde_json::from_value(
        ckpt.meta
            .get("vocab")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing vocab".into()))?,
    )?;
    let vocab = Vocab::from_tokens(tokens)?;
    let dtype = config.precision.dtype();
    let mut params = ParamStore::new(dtype);
    for (name, t) in &ckpt.tensors {
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p, t.to_dtype(dtype)?)?;
        }
    }
    if !params.contains(LOG_TAU) {
        return Err(Error::Checkpoint("checkpoint has no parameters".into()));
    }
    let model = TinyTransformer::from_params(config.model.clone(), params)?;
    Ok(TrainedModel {
        config,
        vocab,
        model,
        checkpoint: ckpt,
    })
}

/// Generated explanation and answer for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub explanation: String,
    pub answer: String,
}

/// Greedy-decodes every sample and parses the output into explanation and
/// answer.
pub fn predict<B: Backbone + ?Sized>(
    model: &B,
    vocab: &Vocab,
    split: &DatasetSplit,
    order: CotOrder,
    max_len: usize,
) -> Result<Vec<PredictionRecord>> {
    let dtype = model.params().dtype();
    let start = match order {
        CotOrder::ExplanationFirst => vec![vocab.because()],
        CotOrder::AnswerFirst => vec![vocab.answer_prefix()[0]],
    };
    split
        .samples
        .iter()
        .map(|s| {
            let z_v = model.encode_image(&feature_tensor(split.features_of(s), dtype)?)?.vectors;
            let z_q = model
                .embed_text(&vocab.encode(&s.question), 0, Segment::Question)?
                .vectors;
            let ids = model.generate(&z_v, &z_q, &start, vocab.eos(), DecodeConfig::Greedy, max_len)?;
            let (e, a) = parse_generation_ordered(&ids, vocab, order);
            Ok(PredictionRecord {
                sample_id: s.sample_id.clone(),
                explanation: vocab.decode(&e),
                answer: vocab.decode(&a),
            })
        })
        .collect()
}

/// Predicts every sample of `split` and scores the predictions.
pub fn evaluate<B: Backbone + ?Sized>(
    model: &B,
    vocab: &Vocab,
    split: &DatasetSplit,
    order: CotOrder,
    max_len: usize,
    mode: EvalMode,
) -> Result<(Vec<PredictionRecord>, MetricReport)> {
    let preds = predict(model, vocab, split, order, max_len)?;
    let report = evaluate_split(&preds, split, mode, AnswerMatch::Normalized)?;
    Ok((preds, report))
}

pub fn write_predictions(preds: &[PredictionRecord], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                record: format!("line {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}
