//! Model-assisted labeling: proposals from a trained predictor, a durable
//! review store, and the HTTP service the review UI talks to.

pub mod propose;
pub mod service;
pub mod store;

pub use propose::{propose_labels, PredictorEngine, ProposalBatch, ProposeError};
pub use service::{router, serve, AppState, JobState, JobStatus, ProposalEngine};
pub use store::{
    AuditEntry, Decision, DecisionOutcome, LabelProposal, ProposalStatus, ProposalStore, ReviewSession, ScoredState,
    StatusCounts, StoreError,
};
