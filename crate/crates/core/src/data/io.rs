use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DatasetSplit, FeatureMatrix, RawSample, SplitKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Generic records, or the VQA-X layout keyed by question id.
    VqaxJson,
    /// Generic records, or the A-OKVQA list layout with rationales.
    AokvqaJson,
    /// Generic records carrying an inline `features` matrix.
    SyntheticJson,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqax_json" => Ok(DatasetFormat::VqaxJson),
            "aokvqa_json" => Ok(DatasetFormat::AokvqaJson),
            "synthetic_json" => Ok(DatasetFormat::SyntheticJson),
            other => Err(Error::InvalidInput(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// Directory holding one feature file per image_ref (`<ref>`, `<ref>.bin`
    /// or `<ref>.csv`). Defaults to the dataset file's directory.
    pub feature_dir: Option<PathBuf>,
    /// Image slots per sample.
    pub m: usize,
    pub d_raw: usize,
    /// Split assigned to records that do not name one.
    pub default_split: SplitKind,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            feature_dir: None,
            m: 3,
            d_raw: 9,
            default_split: SplitKind::Train,
        }
    }
}

#[derive(Serialize)]
struct GenericRecordOut<'a> {
    #[serde(flatten)]
    sample: &'a RawSample,
    features: Vec<&'a [f32]>,
}

/// Writes a split as JSON lines in the synthetic layout (inline features).
pub fn save_dataset_json(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &split.samples {
        let feats = split.features_of(s);
        let rec = GenericRecordOut {
            sample: s,
            features: (0..feats.rows).map(|r| feats.row(r)).collect(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path, format: DatasetFormat, opts: &LoadOptions) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_records(path, &text)?;

    let mut samples = Vec::new();
    let mut inline = BTreeMap::new();
    match (format, &records) {
        (DatasetFormat::VqaxJson, Records::Keyed(map)) => {
            for (key, rec) in map {
                samples.push(vqax_native(path, key, rec, opts.default_split)?);
            }
        }
        (DatasetFormat::AokvqaJson, Records::List(list)) if is_aokvqa_native(list) => {
            for (i, rec) in list.iter().enumerate() {
                samples.push(aokvqa_native(path, i, rec, opts.default_split)?);
            }
        }
        (_, Records::List(list)) => {
            for (i, rec) in list.iter().enumerate() {
                let sample = generic(path, i, rec, opts.default_split)?;
                if format == DatasetFormat::SyntheticJson {
                    let feats = inline_features(path, &sample.sample_id, rec, opts)?;
                    inline.insert(sample.image_ref.clone(), feats);
                }
                samples.push(sample);
            }
        }
        (_, Records::Keyed(_)) => {
            return Err(parse_err(path, "<root>", "expected a list of records"));
        }
    }

    let features = if format == DatasetFormat::SyntheticJson {
        inline
    } else {
        let dir = opts
            .feature_dir
            .clone()
            .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
        load_feature_store(&dir, &samples, opts)?
    };
    DatasetSplit { samples, features }.finalize()
}

enum Records {
    List(Vec<Value>),
    Keyed(serde_json::Map<String, Value>),
}

fn parse_err(path: &Path, record: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        record: record.into(),
        message: message.into(),
    }
}

fn parse_records(path: &Path, text: &str) -> Result<Records> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') || trimmed.starts_with('{') {
        if let Ok(v) = serde_json::from_str::<Value>(text) {
            return match v {
                Value::Array(list) => Ok(Records::List(list)),
                Value::Object(map) if !map.contains_key("sample_id") => Ok(Records::Keyed(map)),
                obj @ Value::Object(_) => Ok(Records::List(vec![obj])),
                _ => Err(parse_err(path, "<root>", "expected array or object")),
            };
        }
    }
    let mut list = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| parse_err(path, format!("line {}", lineno + 1), e.to_string()))?;
        list.push(v);
    }
    Ok(Records::List(list))
}

fn str_field<'a>(path: &Path, id: &str, rec: &'a Value, key: &str) -> Result<&'a str> {
    match rec.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s),
        Some(Value::String(_)) => Err(parse_err(path, id, format!("field {key:?} is empty"))),
        Some(_) => Err(parse_err(path, id, format!("field {key:?} is not a string"))),
        None => Err(parse_err(path, id, format!("missing field {key:?}"))),
    }
}

fn str_list(path: &Path, id: &str, rec: &Value, key: &str) -> Result<Vec<String>> {
    let list = rec
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(path, id, format!("missing list field {key:?}")))?;
    let out: Vec<String> = list
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_owned)
                .ok_or_else(|| parse_err(path, id, format!("{key:?} must hold strings")))
        })
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(parse_err(path, id, format!("{key:?} is empty")));
    }
    Ok(out)
}

fn split_field(path: &Path, id: &str, rec: &Value, default: SplitKind) -> Result<SplitKind> {
    match rec.get("split") {
        None | Some(Value::Null) => Ok(default),
        Some(Value::String(s)) => s.parse().map_err(|_| parse_err(path, id, format!("bad split {s:?}"))),
        Some(_) => Err(parse_err(path, id, "split must be a string")),
    }
}

fn generic(path: &Path, index: usize, rec: &Value, default: SplitKind) -> Result<RawSample> {
    let fallback = format!("#{index}");
    let id = rec
        .get("sample_id")
        .and_then(Value::as_str)
        .unwrap_or(&fallback)
        .to_owned();
    Ok(RawSample {
        sample_id: str_field(path, &id, rec, "sample_id")?.to_owned(),
        image_ref: str_field(path, &id, rec, "image_ref")?.to_owned(),
        question: str_field(path, &id, rec, "question")?.to_owned(),
        answer: str_field(path, &id, rec, "answer")?.to_owned(),
        explanations: str_list(path, &id, rec, "explanations")?,
        split: split_field(path, &id, rec, default)?,
    })
}

fn most_common(answers: impl Iterator<Item = String>) -> Option<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    // max_by_key keeps the last maximum; iterate reversed so ties go to the
    // lexicographically smallest answer
    counts.into_iter().rev().max_by_key(|(_, n)| *n).map(|(a, _)| a)
}

fn vqax_native(path: &Path, key: &str, rec: &Value, default: SplitKind) -> Result<RawSample> {
    let answer = match rec.get("answers").and_then(Value::as_array) {
        Some(list) => most_common(list.iter().filter_map(|a| {
            a.get("answer")
                .and_then(Value::as_str)
                .or_else(|| a.as_str())
                .map(str::to_owned)
        }))
        .ok_or_else(|| parse_err(path, key, "\"answers\" holds no answer strings"))?,
        None => str_field(path, key, rec, "answer")?.to_owned(),
    };
    let image_ref = match rec.get("image_name").or_else(|| rec.get("image_id")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(parse_err(path, key, "missing field \"image_name\"")),
    };
    let explanations = if rec.get("explanation").is_some() {
        str_list(path, key, rec, "explanation")?
    } else {
        str_list(path, key, rec, "explanations")?
    };
    Ok(RawSample {
        sample_id: key.to_owned(),
        image_ref,
        question: str_field(path, key, rec, "question")?.to_owned(),
        answer,
        explanations,
        split: split_field(path, key, rec, default)?,
    })
}

fn is_aokvqa_native(list: &[Value]) -> bool {
    list.first()
        .is_some_and(|r| r.get("question_id").is_some() && r.get("rationales").is_some())
}

fn aokvqa_native(path: &Path, index: usize, rec: &Value, default: SplitKind) -> Result<RawSample> {
    let id = rec
        .get("question_id")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .unwrap_or_else(|| format!("#{index}"));
    let choice = rec
        .get("correct_choice_idx")
        .and_then(Value::as_u64)
        .and_then(|i| rec.get("choices")?.get(i as usize)?.as_str().map(str::to_owned));
    let answer = match choice {
        Some(a) => a,
        None => rec
            .get("direct_answers")
            .and_then(Value::as_array)
            .and_then(|l| most_common(l.iter().filter_map(|a| a.as_str().map(str::to_owned))))
            .ok_or_else(|| parse_err(path, &id, "no correct choice or direct answers"))?,
    };
    let image_ref = match rec.get("image_id") {
        Some(Value::Number(n)) => format!("{:012}", n.as_u64().unwrap_or_default()),
        Some(Value::String(s)) => s.clone(),
        _ => return Err(parse_err(path, &id, "missing field \"image_id\"")),
    };
    Ok(RawSample {
        sample_id: id.clone(),
        image_ref,
        question: str_field(path, &id, rec, "question")?.to_owned(),
        answer,
        explanations: str_list(path, &id, rec, "rationales")?,
        split: split_field(path, &id, rec, default)?,
    })
}

fn inline_features(path: &Path, id: &str, rec: &Value, opts: &LoadOptions) -> Result<FeatureMatrix> {
    let rows = rec
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(path, id, "missing field \"features\""))?;
    let mut data = Vec::with_capacity(opts.m * opts.d_raw);
    for row in rows {
        let row = row
            .as_array()
            .ok_or_else(|| parse_err(path, id, "features must be a matrix"))?;
        if row.len() != opts.d_raw {
            return Err(parse_err(
                path,
                id,
                format!("feature row has {} columns, expected {}", row.len(), opts.d_raw),
            ));
        }
        for v in row {
            data.push(
                v.as_f64()
                    .ok_or_else(|| parse_err(path, id, "non-numeric feature"))? as f32,
            );
        }
    }
    if rows.len() != opts.m {
        return Err(parse_err(
            path,
            id,
            format!("features have {} rows, expected {}", rows.len(), opts.m),
        ));
    }
    FeatureMatrix::new(opts.m, opts.d_raw, data)
}

fn load_feature_store(
    dir: &Path,
    samples: &[RawSample],
    opts: &LoadOptions,
) -> Result<BTreeMap<String, FeatureMatrix>> {
    let mut store = BTreeMap::new();
    let mut missing = Vec::new();
    for s in samples {
        if store.contains_key(&s.image_ref) {
            continue;
        }
        let base = dir.join(&s.image_ref);
        let candidates = [
            base.clone(),
            PathBuf::from(format!("{}.bin", base.display())),
            PathBuf::from(format!("{}.csv", base.display())),
        ];
        match candidates.iter().find(|p| p.is_file()) {
            Some(p) => {
                store.insert(s.image_ref.clone(), read_feature_file(p, opts.m, opts.d_raw)?);
            }
            None => missing.push(s.image_ref.clone()),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingFeatures { missing });
    }
    Ok(store)
}

/// Reads an `m x d_raw` matrix stored as little-endian f32, or as CSV when
/// the file has a `.csv` extension.
pub fn read_feature_file(path: &Path, m: usize, d_raw: usize) -> Result<FeatureMatrix> {
    let is_csv = path.extension().is_some_and(|e| e == "csv");
    let data = if is_csv {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut data = Vec::with_capacity(m * d_raw);
        for (r, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row: Vec<f32> = line
                .split(',')
                .map(|c| c.trim().parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(path, format!("row {r}"), e.to_string()))?;
            if row.len() != d_raw {
                return Err(parse_err(path, format!("row {r}"), "wrong column count"));
            }
            data.extend(row);
        }
        data
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != m * d_raw * 4 {
            return Err(parse_err(
                path,
                "<binary>",
                format!("expected {} bytes, found {}", m * d_raw * 4, bytes.len()),
            ));
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    if data.len() != m * d_raw {
        return Err(parse_err(path, "<matrix>", format!("expected {m}x{d_raw} values")));
    }
    FeatureMatrix::new(m, d_raw, data)
}
