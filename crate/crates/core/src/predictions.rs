//! Line-delimited prediction dumps: one `{sample_id, model_id, probs}` record
//! per line, optionally carrying the true label and the object name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("prediction dump is empty")]
    Empty,
    #[error("model `{model}` has {got} probabilities for {sample}, expected {expected}")]
    Width {
        model: String,
        sample: String,
        got: usize,
        expected: usize,
    },
    #[error("model `{model}` has no prediction for sample `{sample}`")]
    MissingSample { model: String, sample: String },
    #[error("sample `{sample}` appears twice for model `{model}`")]
    Duplicate { model: String, sample: String },
    #[error("sample `{0}` has conflicting labels or objects across models")]
    Conflict(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub model_id: String,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
}

pub fn parse_dump(text: &str) -> Result<Vec<PredictionRecord>, DumpError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DumpError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_dump(path: &Path) -> Result<Vec<PredictionRecord>, DumpError> {
    let text = fs::read_to_string(path).map_err(|source| DumpError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dump(&text)
}

pub fn to_jsonl(records: &[PredictionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Rows of `probs` as records for one model.
pub fn records_for_model(
    model_id: &str,
    sample_ids: &[String],
    probs: &Array2<f64>,
    labels: Option<&[usize]>,
    objects: Option<&[String]>,
) -> Vec<PredictionRecord> {
    sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| PredictionRecord {
            sample_id: id.clone(),
            model_id: model_id.to_string(),
            probs: probs.row(i).to_vec(),
            label: labels.map(|l| l[i]),
            object: objects.map(|o| o[i].clone()),
        })
        .collect()
}

/// Per-model matrices with rows in a shared sample order.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPredictions {
    /// Models in order of first appearance.
    pub model_ids: Vec<String>,
    /// Samples in order of first appearance.
    pub sample_ids: Vec<String>,
    pub matrices: Vec<Array2<f64>>,
    /// Present only when every sample carries a label.
    pub labels: Option<Vec<usize>>,
    pub objects: Vec<Option<String>>,
}

impl AlignedPredictions {
    pub fn class_count(&self) -> usize {
        self.matrices[0].ncols()
    }

    pub fn model(&self, id: &str) -> Option<&Array2<f64>> {
        self.model_ids.iter().position(|m| m == id).map(|i| &self.matrices[i])
    }
}

pub fn align(records: &[PredictionRecord]) -> Result<AlignedPredictions, DumpError> {
    let first = records.first().ok_or(DumpError::Empty)?;
    let width = first.probs.len();
    let mut model_ids: Vec<String> = Vec::new();
    let mut sample_ids: Vec<String> = Vec::new();
    let mut sample_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut meta: Vec<(Option<usize>, Option<String>)> = Vec::new();
    let mut cells: BTreeMap<(&str, usize), &PredictionRecord> = BTreeMap::new();
    for r in records {
        if r.probs.len() != width {
            return Err(DumpError::Width {
                model: r.model_id.clone(),
                sample: r.sample_id.clone(),
                got: r.probs.len(),
                expected: width,
            });
        }
        if !model_ids.contains(&r.model_id) {
            model_ids.push(r.model_id.clone());
        }
        let idx = *sample_index.entry(&r.sample_id).or_insert_with(|| {
            sample_ids.push(r.sample_id.clone());
            meta.push((r.label, r.object.clone()));
            sample_ids.len() - 1
        });
        let (label, object) = &meta[idx];
        let label_ok = r.label.is_none() || label.is_none() || r.label == *label;
        let object_ok = r.object.is_none() || object.is_none() || r.object == *object;
        if !label_ok || !object_ok {
            return Err(DumpError::Conflict(r.sample_id.clone()));
        }
        if r.label.is_some() {
            meta[idx].0 = r.label;
        }
        if r.object.is_some() {
            meta[idx].1 = r.object.clone();
        }
        if cells.insert((&r.model_id, idx), r).is_some() {
            return Err(DumpError::Duplicate {
                model: r.model_id.clone(),
                sample: r.sample_id.clone(),
            });
        }
    }
    let mut matrices = Vec::with_capacity(model_ids.len());
    for m in &model_ids {
        let mut mat = Array2::<f64>::zeros((sample_ids.len(), width));
        for (i, s) in sample_ids.iter().enumerate() {
            let r = cells.get(&(m.as_str(), i)).ok_or_else(|| DumpError::MissingSample {
                model: m.clone(),
                sample: s.clone(),
            })?;
            for (j, p) in r.probs.iter().enumerate() {
                mat[[i, j]] = *p;
            }
        }
        matrices.push(mat);
    }
    let labels = meta.iter().map(|(l, _)| *l).collect::<Option<Vec<_>>>();
    Ok(AlignedPredictions {
        model_ids,
        sample_ids,
        matrices,
        labels,
        objects: meta.into_iter().map(|(_, o)| o).collect(),
    })
}
