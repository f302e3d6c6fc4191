//! Explanation metrics (BLEU-4, ROUGE-L, CIDEr-D), answer accuracy and
//! human-evaluation aggregation. Metric conventions follow the captioning
//! evaluation toolkit: corpus BLEU with closest reference length, ROUGE-L
//! over the best precision and recall with beta 1.2, CIDEr-D with n <= 4,
//! sigma 6 and a factor of 10, document frequencies over the references.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, DatasetSplit};
use crate::error::{Error, Result};
use crate::train::PredictionRecord;

pub type Tokens = Vec<String>;

fn check_corpus(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::InvalidInput("empty candidate list".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "{} candidates but {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(|r| r.is_empty()) {
        return Err(Error::InvalidInput(format!("reference set {i} is empty")));
    }
    Ok(())
}

type NgramCounts<'a> = HashMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n_max: usize) -> NgramCounts<'_> {
    let mut out = HashMap::new();
    for n in 1..=n_max {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform 1..4-gram weights and a brevity penalty against
/// the closest reference length.
pub fn bleu4(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(cands, refs)?;
    const N: usize = 4;
    const TINY: f64 = 1e-15;
    const SMALL: f64 = 1e-9;
    let mut guess = [0usize; N];
    let mut correct = [0usize; N];
    let (mut testlen, mut reflen) = (0usize, 0usize);
    for (cand, rs) in cands.iter().zip(refs) {
        let mut max_ref: NgramCounts<'_> = HashMap::new();
        for r in rs {
            for (g, c) in ngram_counts(r, N) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let len = cand.len();
        testlen += len;
        reflen += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(len), l))
            .expect("nonempty reference set");
        for k in 0..N {
            guess[k] += len.saturating_sub(k);
        }
        for (g, c) in ngram_counts(cand, N) {
            correct[g.len() - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
        }
    }
    let mut prod = 1.0;
    for k in 0..N {
        prod *= (correct[k] as f64 + TINY) / (guess[k] as f64 + SMALL);
    }
    let mut bleu = prod.powf(1.0 / N as f64);
    let ratio = (testlen as f64 + TINY) / (reflen as f64 + SMALL);
    if ratio < 1.0 {
        bleu *= (1.0 - 1.0 / ratio).exp();
    }
    Ok(bleu)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

fn rouge_l_single(cand: &[String], refs: &[Tokens]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
    for r in refs {
        if r.is_empty() {
            continue;
        }
        let l = lcs(r, cand) as f64;
        p_max = p_max.max(l / cand.len() as f64);
        r_max = r_max.max(l / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

/// Mean over samples of the LCS F-measure built from the best precision and
/// the best recall across references.
pub fn rouge_l(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(cands, refs)?;
    let total: f64 = cands.iter().zip(refs).map(|(c, r)| rouge_l_single(c, r)).sum();
    Ok(total / cands.len() as f64)
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

struct TfIdf {
    vec: [HashMap<Vec<String>, f64>; CIDER_N],
    norm: [f64; CIDER_N],
    /// The toolkit's length: the number of bigrams.
    length: f64,
}

fn tfidf(tokens: &[String], df: &HashMap<Vec<String>, f64>, log_n: f64) -> TfIdf {
    let mut vec: [HashMap<Vec<String>, f64>; CIDER_N] = Default::default();
    let mut norm = [0.0; CIDER_N];
    let mut length = 0.0;
    for (g, tf) in ngram_counts(tokens, CIDER_N) {
        let n = g.len() - 1;
        let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
        let v = tf as f64 * (log_n - d);
        norm[n] += v * v;
        if n == 1 {
            length += tf as f64;
        }
        vec[n].insert(g.to_vec(), v);
    }
    for x in norm.iter_mut() {
        *x = x.sqrt();
    }
    TfIdf { vec, norm, length }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut sum = 0.0;
    for n in 0..CIDER_N {
        let mut val = 0.0;
        for (g, &hv) in &h.vec[n] {
            if let Some(&rv) = r.vec[n].get(g) {
                val += hv.min(rv) * rv;
            }
        }
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val /= h.norm[n] * r.norm[n];
        }
        sum += val * penalty;
    }
    sum / CIDER_N as f64
}

/// Per-sample CIDEr-D scores; document frequencies come from the
/// references of the evaluated corpus.
pub fn cider_d_scores(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<Vec<f64>> {
    check_corpus(cands, refs)?;
    if cands.len() < 2 {
        return Err(Error::InvalidInput(
            "CIDEr-D needs at least two samples for document frequencies".into(),
        ));
    }
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for rs in refs {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in rs {
            seen.extend(ngram_counts(r, CIDER_N).into_keys());
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (refs.len() as f64).ln();
    Ok(cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let h = tfidf(c, &df, log_n);
            let total: f64 = rs.iter().map(|r| cider_sim(&h, &tfidf(r, &df, log_n))).sum();
            10.0 * total / rs.len() as f64
        })
        .collect())
}

pub fn cider_d(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    let s = cider_d_scores(cands, refs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMatch {
    /// Lowercase, strip punctuation and leading articles.
    #[default]
    Normalized,
    Exact,
}

pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    let mut words: &[&str] = &cleaned.split_whitespace().collect::<Vec<_>>();
    while let Some((first, rest)) = words.split_first() {
        if matches!(*first, "a" | "an" | "the") && !rest.is_empty() {
            words = rest;
        } else {
            break;
        }
    }
    words.join(" ")
}

fn answers_match(pred: &str, gold: &str, how: AnswerMatch) -> bool {
    match how {
        AnswerMatch::Normalized => normalize_answer(pred) == normalize_answer(gold),
        AnswerMatch::Exact => pred == gold,
    }
}

fn resolve<'a>(
    preds: &'a [PredictionRecord],
    split: &'a DatasetSplit,
) -> Result<Vec<(&'a PredictionRecord, &'a crate::data::RawSample)>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        match split.get(&p.sample_id) {
            Some(s) => out.push((p, s)),
            None => missing.push(p.sample_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::UnknownSamples(missing));
    }
    Ok(out)
}

/// Fraction of predictions whose answer matches the gold answer.
pub fn answer_accuracy(preds: &[PredictionRecord], split: &DatasetSplit, how: AnswerMatch) -> Result<f64> {
    let pairs = resolve(preds, split)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no predictions".into()));
    }
    let hits = pairs
        .iter()
        .filter(|(p, s)| answers_match(&p.answer, &s.answer, how))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Every explanation is scored.
    #[default]
    Unfiltered,
    /// Only explanations of correctly answered samples are scored.
    Filtered,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unfiltered" => Ok(EvalMode::Unfiltered),
            "filtered" => Ok(EvalMode::Filtered),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?}"))),
        }
    }
}

/// Explanation metrics are `None` when undefined (nothing to score, or a
/// single sample for CIDEr-D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub accuracy: f64,
    pub mode: EvalMode,
    pub n_evaluated: usize,
}

pub fn evaluate_split(
    preds: &[PredictionRecord],
    split: &DatasetSplit,
    mode: EvalMode,
    how: AnswerMatch,
) -> Result<MetricReport> {
    let accuracy = answer_accuracy(preds, split, how)?;
    let pairs = resolve(preds, split)?;
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (p, s) in pairs {
        if mode == EvalMode::Filtered && !answers_match(&p.answer, &s.answer, how) {
            continue;
        }
        cands.push(tokenize(&p.explanation));
        refs.push(s.explanations.iter().map(|e| tokenize(e)).collect::<Vec<_>>());
    }
    let n = cands.len();
    Ok(MetricReport {
        bleu4: (n > 0).then(|| bleu4(&cands, &refs)).transpose()?,
        rouge_l: (n > 0).then(|| rouge_l(&cands, &refs)).transpose()?,
        cider: (n > 1).then(|| cider_d(&cands, &refs)).transpose()?,
        accuracy,
        mode,
        n_evaluated: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationOption {
    Yes,
    WeakYes,
    WeakNo,
    No,
}

impl AnnotationOption {
    pub fn score(self) -> f64 {
        match self {
            AnnotationOption::Yes => 1.0,
            AnnotationOption::WeakYes => 2.0 / 3.0,
            AnnotationOption::WeakNo => 1.0 / 3.0,
            AnnotationOption::No => 0.0,
        }
    }

    pub fn unqualified(self) -> bool {
        matches!(self, AnnotationOption::WeakNo | AnnotationOption::No)
    }
}

/// Logical error types of unqualified explanations: deductive
/// unsatisfiability, factual inconsistency, insensitivity to semantic
/// perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorType {
    I,
    II,
    III,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub sample_id: String,
    pub evaluator_id: String,
    pub option: AnnotationOption,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<ErrorType>,
}

impl AnnotationResponse {
    /// Field-level problems; empty when the response is valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.sample_id.trim().is_empty() {
            out.push("sample_id: must be nonempty".into());
        }
        if self.evaluator_id.trim().is_empty() {
            out.push("evaluator_id: must be nonempty".into());
        }
        match (self.option.unqualified(), self.error_type) {
            (true, None) => out.push("error_type: required when option is weak_no or no".into()),
            (false, Some(_)) => out.push("error_type: only allowed when option is weak_no or no".into()),
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(p.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanReport {
    pub human_score: f64,
    /// Fraction of unqualified responses of each error type.
    pub type_fractions: BTreeMap<ErrorType, f64>,
    pub n_responses: usize,
    pub n_unqualified: usize,
}

pub fn aggregate_human(responses: &[AnnotationResponse]) -> Result<HumanReport> {
    if responses.is_empty() {
        return Err(Error::InvalidInput("no annotation responses".into()));
    }
    for r in responses {
        r.validate()
            .map_err(|e| Error::InvalidInput(format!("{}/{}: {e}", r.sample_id, r.evaluator_id)))?;
    }
    let human_score = responses.iter().map(|r| r.option.score()).sum::<f64>() / responses.len() as f64;
    let mut counts: BTreeMap<ErrorType, usize> =
        [ErrorType::I, ErrorType::II, ErrorType::III].into_iter().map(|t| (t, 0)).collect();
    let mut unqualified = 0;
    for r in responses {
        if let Some(t) = r.error_type {
            unqualified += 1;
            *counts.get_mut(&t).expect("all types present") += 1;
        }
    }
    let type_fractions = counts
        .into_iter()
        .map(|(t, c)| (t, if unqualified == 0 { 0.0 } else { c as f64 / unqualified as f64 }))
        .collect();
    Ok(HumanReport {
        human_score,
        type_fractions,
        n_responses: responses.len(),
        n_unqualified: unqualified,
    })
}
