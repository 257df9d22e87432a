//! Turning model predictions on unlabeled records into review proposals.

use ndarray::Array4;
use statechef::dataset::{DataError, ImageSource};
use statechef::ensemble::Predictor;
use statechef::manifest::SampleRecord;
use statechef::metrics::ranking;
use statechef::model::ModelError;
use thiserror::Error;

use crate::store::{LabelProposal, ScoredState};

#[derive(Debug, Error)]
pub enum ProposeError {
    #[error("k must be between 1 and {classes}, got {k}")]
    BadK { k: usize, classes: usize },
    #[error("predictor has {predictor} classes but {names} class names were given")]
    ClassNames { predictor: usize, names: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug)]
pub struct ProposalBatch {
    pub proposals: Vec<LabelProposal>,
    /// Records whose image could not be loaded, with the reason.
    pub skipped: Vec<(String, DataError)>,
}

const CHUNK: usize = 32;

/// Scores each record and keeps the `k` most probable states.
pub fn propose_labels(
    predictor: &dyn Predictor,
    class_names: &[String],
    records: &[SampleRecord],
    source: &dyn ImageSource,
    size: (usize, usize),
    k: usize,
    model_ref: &str,
) -> Result<ProposalBatch, ProposeError> {
    let classes = predictor.class_count();
    if class_names.len() != classes {
        return Err(ProposeError::ClassNames {
            predictor: classes,
            names: class_names.len(),
        });
    }
    if k == 0 || k > classes {
        return Err(ProposeError::BadK { k, classes });
    }
    let mut proposals = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    let mut loaded = Vec::new();
    for r in records {
        match source.load(r, size) {
            Ok(img) => loaded.push((r, img)),
            Err(e) => skipped.push((r.id.clone(), e)),
        }
    }
    for chunk in loaded.chunks(CHUNK) {
        let mut batch = Array4::<f64>::zeros((chunk.len(), size.0, size.1, 3));
        for (i, (_, img)) in chunk.iter().enumerate() {
            batch.index_axis_mut(ndarray::Axis(0), i).assign(img);
        }
        let probs = predictor.predict(&batch)?;
        for (i, (record, _)) in chunk.iter().enumerate() {
            let row = probs.row(i).to_vec();
            let order = ranking(&row);
            let proposed = order[..k]
                .iter()
                .map(|&c| ScoredState {
                    state: class_names[c].clone(),
                    probability: row[c],
                })
                .collect();
            proposals.push(LabelProposal::pending((*record).clone(), proposed, model_ref));
        }
    }
    Ok(ProposalBatch { proposals, skipped })
}

/// [`ProposalEngine`](crate::service::ProposalEngine) backed by a predictor.
pub struct PredictorEngine<P> {
    pub predictor: P,
    pub class_names: Vec<String>,
    pub source: Box<dyn ImageSource + Send>,
    pub size: (usize, usize),
    pub model_ref: String,
}

impl<P: Predictor + Send> crate::service::ProposalEngine for PredictorEngine<P> {
    fn propose(&self, records: &[SampleRecord], k: usize) -> Result<ProposalBatch, String> {
        propose_labels(
            &self.predictor,
            &self.class_names,
            records,
            self.source.as_ref(),
            self.size,
            k,
            &self.model_ref,
        )
        .map_err(|e| e.to_string())
    }
}
