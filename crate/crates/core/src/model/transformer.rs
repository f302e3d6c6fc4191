use candle_core::{DType, Device, Tensor, D};

use super::{
    log_softmax_rows, softmax_rows, Backbone, CotInput, DecoderOutputs, EmbeddedSequence, Init, ModelConfig,
    ParamStore, Segment,
};
use crate::data::CotSequence;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// CL levels sharing the store with the backbone.
pub const HEAD_LEVELS: [&str; 3] = ["semantic", "image", "instance"];
pub const LOG_TAU: &str = "cl.log_tau";

/// Decoder-only pre-norm transformer. Image slots are prepended without
/// positions; question and target carry sinusoidal positions. The image and
/// question prefix is fully visible, the target is causal.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    cfg: ModelConfig,
    params: ParamStore,
    positions: Tensor,
    blocked_image_slots: Vec<usize>,
}

fn sinusoidal(n: usize, d: usize, scale: f64) -> Tensor {
    let mut data = vec![0f64; n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = scale * (p as f64 * freq).sin();
            data[p * d + 2 * i + 1] = scale * (p as f64 * freq).cos();
        }
    }
    Tensor::from_vec(data, (n, d), &Device::Cpu).expect("shape matches")
}

impl TinyTransformer {
    /// Fresh parameters, including projection heads and `log tau`.
    pub fn init(cfg: ModelConfig, dtype: DType, seed: u64, tau_init: f64) -> Result<Self> {
        cfg.validate()?;
        if tau_init <= 0.0 {
            return Err(Error::Config("tau_init must be positive".into()));
        }
        let d = cfg.d;
        let ff = cfg.ffn_mult * d;
        let mut init = Init::new(seed);
        let mut p = ParamStore::new(dtype);
        p.insert("image_proj.weight", init.xavier(cfg.d_raw, d)?)?;
        p.insert("image_proj.bias", Init::constant(&[d], 0.0)?)?;
        p.insert("tok_emb", init.uniform(&[cfg.vocab_size, d], 0.5)?)?;
        for l in 0..cfg.n_layers {
            let b = format!("blocks.{l}");
            for ln in ["ln1", "ln2"] {
                p.insert(format!("{b}.{ln}.gain"), Init::constant(&[d], 1.0)?)?;
                p.insert(format!("{b}.{ln}.bias"), Init::constant(&[d], 0.0)?)?;
            }
            for w in ["q", "k", "v", "o"] {
                p.insert(format!("{b}.attn.{w}.weight"), init.xavier(d, d)?)?;
                p.insert(format!("{b}.attn.{w}.bias"), Init::constant(&[d], 0.0)?)?;
            }
            p.insert(format!("{b}.mlp.fc1.weight"), init.xavier(d, ff)?)?;
            p.insert(format!("{b}.mlp.fc1.bias"), Init::constant(&[ff], 0.0)?)?;
            p.insert(format!("{b}.mlp.fc2.weight"), init.xavier(ff, d)?)?;
            p.insert(format!("{b}.mlp.fc2.bias"), Init::constant(&[d], 0.0)?)?;
        }
        p.insert("ln_f.gain", Init::constant(&[d], 1.0)?)?;
        p.insert("ln_f.bias", Init::constant(&[d], 0.0)?)?;
        p.insert("lm_head.weight", init.xavier(d, cfg.vocab_size)?)?;
        p.insert("lm_head.bias", Init::constant(&[cfg.vocab_size], 0.0)?)?;
        for level in HEAD_LEVELS {
            p.insert(format!("cl.{level}.weight"), init.xavier(d, d)?)?;
            p.insert(format!("cl.{level}.bias"), init.uniform(&[d], 0.1)?)?;
        }
        p.insert(LOG_TAU, Tensor::new(tau_init.ln(), &Device::Cpu)?)?;
        Self::from_params(cfg, p)
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let positions = sinusoidal(cfg.max_positions, cfg.d, cfg.pos_scale).to_dtype(params.dtype())?;
        let model = TinyTransformer {
            cfg,
            params,
            positions,
            blocked_image_slots: Vec::new(),
        };
        let emb = model.params.get("tok_emb")?;
        if emb.dims2()? != (model.cfg.vocab_size, model.cfg.d) {
            return Err(Error::Config(format!(
                "tok_emb has shape {:?}, config expects {}x{}",
                emb.dims(),
                model.cfg.vocab_size,
                model.cfg.d
            )));
        }
        Ok(model)
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Hides the given image slots from every attention query. Used to build
    /// models that provably ignore some objects.
    pub fn with_blocked_image_slots(mut self, slots: Vec<usize>) -> Self {
        self.blocked_image_slots = slots;
        self
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    fn linear(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(x.matmul(w)?.broadcast_add(b)?)
    }

    fn layer_norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(y
            .broadcast_mul(self.p(&format!("{prefix}.gain"))?)?
            .broadcast_add(self.p(&format!("{prefix}.bias"))?)?)
    }

    /// Additive `L x L` mask for one sample laid out as
    /// `[image; question (n real of n_pad); target (t real of t_pad)]`.
    /// Prefix keys are visible to every query, target keys causally, padding
    /// to none.
    fn mask_rows(&self, n: usize, n_pad: usize, t: usize, t_pad: usize, out: &mut Vec<f64>) {
        let m = self.cfg.m;
        let total = m + n_pad + t_pad;
        for i in 0..total {
            for j in 0..total {
                let visible = if j < m {
                    !self.blocked_image_slots.contains(&j)
                } else if j < m + n_pad {
                    j < m + n
                } else {
                    j < m + n_pad + t && j <= i
                };
                out.push(if visible { 0.0 } else { MASKED });
            }
        }
    }

    /// Multi-head self-attention over `b` sequences of length `l`, with `x`
    /// flattened to `(b * l) x d` and `mask` shaped `b x 1 x l x l`.
    fn attention(&self, x: &Tensor, mask: &Tensor, b: usize, l: usize, prefix: &str) -> Result<Tensor> {
        let d = self.cfg.d;
        let h = self.cfg.n_heads;
        let dh = d / h;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, l, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.linear(x, &format!("{prefix}.q"))?)?;
        let k = split(self.linear(x, &format!("{prefix}.k"))?)?;
        let v = split(self.linear(x, &format!("{prefix}.v"))?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let weights = softmax_rows(&scores.broadcast_add(mask)?)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * l, d))?;
        self.linear(&ctx, &format!("{prefix}.o"))
    }

    fn blocks(&self, mut x: Tensor, mask: &Tensor, b: usize, l: usize) -> Result<Tensor> {
        for layer in 0..self.cfg.n_layers {
            let p = format!("blocks.{layer}");
            let a = self.attention(&self.layer_norm(&x, &format!("{p}.ln1"))?, mask, b, l, &format!("{p}.attn"))?;
            x = (x + a)?;
            let hmid = self
                .linear(&self.layer_norm(&x, &format!("{p}.ln2"))?, &format!("{p}.mlp.fc1"))?
                .gelu()?;
            x = (x + self.linear(&hmid, &format!("{p}.mlp.fc2"))?)?;
        }
        self.layer_norm(&x, "ln_f")
    }

    fn check_prefix(&self, z_v: &Tensor, z_q: &Tensor) -> Result<()> {
        let (m, d) = z_v.dims2()?;
        let (n, dq) = z_q.dims2()?;
        if m != self.cfg.m || d != self.cfg.d || dq != self.cfg.d {
            return Err(Error::Config(format!(
                "prefix shapes {m}x{d} / {n}x{dq} do not match m={} d={}",
                self.cfg.m, self.cfg.d
            )));
        }
        Ok(())
    }

    /// Final-norm hidden states for `[z_v; z_q; tail]`.
    fn hidden_states(&self, z_v: &Tensor, z_q: &Tensor, tail: Option<&Tensor>) -> Result<Tensor> {
        self.check_prefix(z_v, z_q)?;
        let n = z_q.dim(0)?;
        let mut parts = vec![z_v.clone(), z_q.clone()];
        let mut t = 0;
        if let Some(tail) = tail {
            t = tail.dim(0)?;
            parts.push(tail.clone());
        }
        let x = Tensor::cat(&parts, 0)?;
        let l = x.dim(0)?;
        let mut mask = Vec::with_capacity(l * l);
        self.mask_rows(n, n, t, t, &mut mask);
        let mask = Tensor::from_vec(mask, (1, 1, l, l), &Device::Cpu)?.to_dtype(self.params.dtype())?;
        self.blocks(x, &mask, 1, l)
    }

    fn check_capacity(&self, text_len: usize) -> Result<()> {
        if text_len > self.cfg.max_positions {
            return Err(Error::CapacityExceeded {
                len: self.cfg.m + text_len,
                limit: self.cfg.m + self.cfg.max_positions,
            });
        }
        Ok(())
    }
}

impl Backbone for TinyTransformer {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn encode_image(&self, raw: &Tensor) -> Result<EmbeddedSequence> {
        let (m, d_raw) = raw.dims2()?;
        if m != self.cfg.m || d_raw != self.cfg.d_raw {
            return Err(Error::Config(format!(
                "image features are {m}x{d_raw}, config expects {}x{}",
                self.cfg.m, self.cfg.d_raw
            )));
        }
        let raw = raw.to_dtype(self.params.dtype())?;
        Ok(EmbeddedSequence {
            vectors: self.linear(&raw, "image_proj")?,
            segment: Segment::Image,
        })
    }

    fn embed_text(&self, ids: &[u32], offset: usize, segment: Segment) -> Result<EmbeddedSequence> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("cannot embed an empty sequence".into()));
        }
        self.check_capacity(offset + ids.len())?;
        let mut vectors = self.word_embeddings(ids)?;
        if self.cfg.positional {
            vectors = (vectors + self.positions.narrow(0, offset, ids.len())?)?;
        }
        Ok(EmbeddedSequence { vectors, segment })
    }

    fn word_embeddings(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: self.cfg.vocab_size,
            });
        }
        let idx = Tensor::new(ids, &Device::Cpu)?;
        Ok(self.p("tok_emb")?.index_select(&idx, 0)?)
    }

    fn mask_embedding(&self) -> Result<Tensor> {
        self.word_embeddings(&[crate::data::Vocab::MASK_ID])
    }

    fn forward_cot(&self, z_v: &Tensor, z_q: &Tensor, cot: &CotSequence) -> Result<DecoderOutputs> {
        let n = z_q.dim(0)?;
        let t = cot.len();
        if t == 0 {
            return Err(Error::InvalidInput("empty target sequence".into()));
        }
        self.check_capacity(n + t)?;
        let embedded = self.embed_text(&cot.ids, n, Segment::Explanation)?.vectors;
        let tail = (t > 1).then(|| embedded.narrow(0, 0, t - 1)).transpose()?;
        let hidden_all = self.hidden_states(z_v, z_q, tail.as_ref())?;
        let hidden = hidden_all.narrow(0, self.cfg.m + n - 1, t)?;
        let logits = self.linear(&hidden, "lm_head")?;
        Ok(DecoderOutputs {
            token_logprobs: log_softmax_rows(&logits)?,
            hidden,
            embedded,
            explanation: cot.explanation.clone(),
            answer: cot.answer.clone(),
        })
    }

    fn forward_cot_batch(&self, items: &[CotInput<'_>]) -> Result<Vec<DecoderOutputs>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let m = self.cfg.m;
        let d = self.cfg.d;
        let dtype = self.params.dtype();
        let mut dims = Vec::with_capacity(items.len());
        for it in items {
            self.check_prefix(it.z_v, it.z_q)?;
            let n = it.z_q.dim(0)?;
            let t = it.cot.len();
            if t == 0 {
                return Err(Error::InvalidInput("empty target sequence".into()));
            }
            self.check_capacity(n + t)?;
            dims.push((n, t));
        }
        let n_pad = dims.iter().map(|d| d.0).max().unwrap_or(0);
        let t_pad = dims.iter().map(|d| d.1 - 1).max().unwrap_or(0);
        let l = m + n_pad + t_pad;
        let b = items.len();

        let mut rows = Vec::with_capacity(b);
        let mut embedded = Vec::with_capacity(b);
        let mut mask = Vec::with_capacity(b * l * l);
        let mut gather = Vec::with_capacity(b * 8);
        for (k, (it, &(n, t))) in items.iter().zip(&dims).enumerate() {
            let emb = self.embed_text(&it.cot.ids, n, Segment::Explanation)?.vectors;
            let mut parts = vec![it.z_v.clone(), it.z_q.clone()];
            if n_pad > n {
                parts.push(Tensor::zeros((n_pad - n, d), dtype, &Device::Cpu)?);
            }
            if t > 1 {
                parts.push(emb.narrow(0, 0, t - 1)?);
            }
            if t_pad > t - 1 {
                parts.push(Tensor::zeros((t_pad - (t - 1), d), dtype, &Device::Cpu)?);
            }
            rows.push(Tensor::cat(&parts, 0)?);
            embedded.push(emb);
            self.mask_rows(n, n_pad, t - 1, t_pad, &mut mask);
            let base = (k * l) as u32;
            gather.push(base + (m + n - 1) as u32);
            gather.extend((0..t as u32 - 1).map(|i| base + (m + n_pad) as u32 + i));
        }
        let x = Tensor::cat(&rows, 0)?;
        let mask = Tensor::from_vec(mask, (b, 1, l, l), &Device::Cpu)?.to_dtype(dtype)?;
        let hidden_all = self.blocks(x, &mask, b, l)?;
        let idx = Tensor::new(gather.as_slice(), &Device::Cpu)?;
        let hidden = hidden_all.index_select(&idx, 0)?;
        let logprobs = log_softmax_rows(&self.linear(&hidden, "lm_head")?)?;
        let mut out = Vec::with_capacity(b);
        let mut at = 0;
        for ((it, &(_, t)), emb) in items.iter().zip(&dims).zip(embedded) {
            out.push(DecoderOutputs {
                token_logprobs: logprobs.narrow(0, at, t)?,
                hidden: hidden.narrow(0, at, t)?,
                embedded: emb,
                explanation: it.cot.explanation.clone(),
                answer: it.cot.answer.clone(),
            });
            at += t;
        }
        Ok(out)
    }

    fn next_token_logprobs(&self, z_v: &Tensor, z_q: &Tensor, prefix: &[u32]) -> Result<Vec<f64>> {
        let n = z_q.dim(0)?;
        let tail = if prefix.is_empty() {
            None
        } else {
            Some(self.embed_text(prefix, n, Segment::Explanation)?.vectors)
        };
        let hidden = self.hidden_states(z_v, z_q, tail.as_ref())?;
        let last = hidden.narrow(0, self.cfg.m + n - 1 + prefix.len(), 1)?;
        let lp = log_softmax_rows(&self.linear(&last, "lm_head")?)?;
        Ok(lp.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}
