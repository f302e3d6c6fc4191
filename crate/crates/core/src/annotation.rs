//! Human-evaluation tasks and the response store behind the annotation
//! service.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::metrics::AnnotationResponse;
use crate::train::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub sample_id: String,
    pub image_ref: String,
    pub question: String,
    pub generated_answer: String,
    pub generated_explanation: String,
}

/// Joins predictions with their questions and shuffles them with `seed`.
pub fn export_annotation_tasks(
    preds: &[PredictionRecord],
    split: &DatasetSplit,
    seed: u64,
) -> Result<Vec<AnnotationTask>> {
    let mut missing = Vec::new();
    let mut tasks = Vec::with_capacity(preds.len());
    for p in preds {
        match split.get(&p.sample_id) {
            Some(s) => tasks.push(AnnotationTask {
                sample_id: p.sample_id.clone(),
                image_ref: s.image_ref.clone(),
                question: s.question.clone(),
                generated_answer: p.answer.clone(),
                generated_explanation: p.explanation.clone(),
            }),
            None => missing.push(p.sample_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::UnknownSamples(missing));
    }
    tasks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(tasks)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
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

/// Tasks plus the responses received so far. Responses are appended to a
/// JSON-lines file; a later response for the same (sample, evaluator) pair
/// replaces the earlier one.
#[derive(Debug)]
pub struct ResponseStore {
    tasks: Vec<AnnotationTask>,
    responses: BTreeMap<(String, String), AnnotationResponse>,
    path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
}

impl ResponseStore {
    /// Replays an existing responses file, if any.
    pub fn open(tasks: Vec<AnnotationTask>, path: Option<PathBuf>) -> Result<Self> {
        let mut store = ResponseStore {
            tasks,
            responses: BTreeMap::new(),
            path: None,
        };
        if let Some(p) = &path {
            if p.exists() {
                for r in read_jsonl::<AnnotationResponse>(p)? {
                    store.insert(r);
                }
            }
        }
        store.path = path;
        Ok(store)
    }

    fn insert(&mut self, r: AnnotationResponse) {
        self.responses
            .insert((r.sample_id.clone(), r.evaluator_id.clone()), r);
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    /// Tasks the evaluator has not answered yet, in task order.
    pub fn pending_for(&self, evaluator: &str) -> Vec<AnnotationTask> {
        self.tasks
            .iter()
            .filter(|t| {
                !self
                    .responses
                    .contains_key(&(t.sample_id.clone(), evaluator.to_owned()))
            })
            .cloned()
            .collect()
    }

    /// Field-level problems of a submission, including unknown sample ids.
    pub fn problems(&self, r: &AnnotationResponse) -> Vec<String> {
        let mut p = r.problems();
        if !r.sample_id.trim().is_empty() && !self.tasks.iter().any(|t| t.sample_id == r.sample_id) {
            p.push(format!("sample_id: no task for {:?}", r.sample_id));
        }
        p
    }

    /// Validates, appends to the responses file and records the response.
    pub fn submit(&mut self, r: AnnotationResponse) -> Result<()> {
        let p = self.problems(&r);
        if !p.is_empty() {
            return Err(Error::InvalidInput(p.join("; ")));
        }
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&r)?;
            line.push(b'\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(&line).map_err(|e| Error::io(path, e))?;
        }
        self.insert(r);
        Ok(())
    }

    /// With an evaluator: tasks that evaluator has answered. Without: tasks
    /// answered by at least one evaluator.
    pub fn progress(&self, evaluator: Option<&str>) -> Progress {
        let answered = self
            .tasks
            .iter()
            .filter(|t| match evaluator {
                Some(e) => self.responses.contains_key(&(t.sample_id.clone(), e.to_owned())),
                None => self.responses.keys().any(|(s, _)| *s == t.sample_id),
            })
            .count();
        Progress {
            answered,
            total: self.tasks.len(),
        }
    }

    /// Current responses, one per (sample, evaluator).
    pub fn responses(&self) -> Vec<AnnotationResponse> {
        self.responses.values().cloned().collect()
    }
}

/// Reads a responses file keeping the last response per (sample, evaluator).
pub fn read_responses(path: &Path) -> Result<Vec<AnnotationResponse>> {
    let mut latest = BTreeMap::new();
    for r in read_jsonl::<AnnotationResponse>(path)? {
        latest.insert((r.sample_id.clone(), r.evaluator_id.clone()), r);
    }
    Ok(latest.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::metrics::{AnnotationOption, ErrorType};

    fn preds(split: &DatasetSplit) -> Vec<PredictionRecord> {
        split
            .samples
            .iter()
            .map(|s| PredictionRecord {
                sample_id: s.sample_id.clone(),
                explanation: s.explanations[0].clone(),
                answer: s.answer.clone(),
            })
            .collect()
    }

    #[test]
    fn export_joins_and_shuffles_deterministically() {
        let split = generate_synthetic(1, 12, &SyntheticConfig::default());
        let p = preds(&split);
        let a = export_annotation_tasks(&p, &split, 9).unwrap();
        let b = export_annotation_tasks(&p, &split, 9).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        assert_ne!(
            a.iter().map(|t| &t.sample_id).collect::<Vec<_>>(),
            p.iter().map(|t| &t.sample_id).collect::<Vec<_>>()
        );
        for t in &a {
            assert_eq!(t.question, split.get(&t.sample_id).unwrap().question);
        }
        let mut bad = p.clone();
        bad[0].sample_id = "nope".into();
        assert!(matches!(
            export_annotation_tasks(&bad, &split, 9),
            Err(Error::UnknownSamples(ids)) if ids == vec!["nope".to_string()]
        ));
    }

    #[test]
    fn store_filters_and_replaces() {
        let split = generate_synthetic(1, 4, &SyntheticConfig::default());
        let tasks = export_annotation_tasks(&preds(&split), &split, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.jsonl");
        let mut store = ResponseStore::open(tasks.clone(), Some(path.clone())).unwrap();
        let first = tasks[0].sample_id.clone();
        let mk = |opt, t| AnnotationResponse {
            sample_id: first.clone(),
            evaluator_id: "e1".into(),
            option: opt,
            error_type: t,
        };
        store.submit(mk(AnnotationOption::Yes, None)).unwrap();
        assert_eq!(store.pending_for("e1").len(), 3);
        assert_eq!(store.pending_for("e2").len(), 4);
        assert!(store.submit(mk(AnnotationOption::No, None)).is_err());
        store
            .submit(mk(AnnotationOption::No, Some(ErrorType::II)))
            .unwrap();
        assert_eq!(store.responses().len(), 1);
        assert_eq!(store.responses()[0].option, AnnotationOption::No);
        assert_eq!(store.progress(Some("e1")), Progress { answered: 1, total: 4 });

        let replayed = ResponseStore::open(tasks, Some(path.clone())).unwrap();
        assert_eq!(replayed.responses(), store.responses());
        assert_eq!(read_responses(&path).unwrap(), store.responses());
    }
}
