//! Durable proposal store: an append-only event log (`events.jsonl`) plus a
//! periodically compacted snapshot (`snapshot.json`).
//!
//! Every mutation is written and fsynced to the log before it is applied in
//! memory, so an acknowledged decision survives a crash. Recovery loads the
//! snapshot and replays the log entries after it; a torn final line (a write
//! cut short by the crash) is dropped.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statechef::manifest::{DatasetManifest, LabelOrigin, SampleRecord};
use statechef::taxonomy::{Taxonomy, OTHER};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt log entry at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown proposal `{0}`")]
    UnknownProposal(String),
    #[error("version conflict: expected {expected}, session is at {actual}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("proposal `{id}` is {status}, not pending")]
    NotPending { id: String, status: ProposalStatus },
    #[error("proposal `{0}` is already pending")]
    AlreadyPending(String),
    #[error("invalid override for `{id}`: {reason}")]
    InvalidOverride { id: String, reason: String },
    #[error("invalid proposal `{id}`: {reason}")]
    InvalidProposal { id: String, reason: String },
    #[error("proposal `{0}` already exists")]
    DuplicateProposal(String),
    #[error("export can only select accepted or overridden proposals (got {0})")]
    BadExportStatus(ProposalStatus),
}

impl StoreError {
    /// Whether a client may retry after refreshing its view.
    pub fn is_retryable(&self) -> bool {
        matches!(self, StoreError::VersionConflict { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStatus {
    Pending,
    Accepted,
    Overridden,
    Discarded,
}

impl ProposalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalStatus::Pending => "pending",
            ProposalStatus::Accepted => "accepted",
            ProposalStatus::Overridden => "overridden",
            ProposalStatus::Discarded => "discarded",
        }
    }
}

impl std::fmt::Display for ProposalStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProposalStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(Self::Pending),
            "accepted" => Ok(Self::Accepted),
            "overridden" => Ok(Self::Overridden),
            "discarded" => Ok(Self::Discarded),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredState {
    pub state: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelProposal {
    pub proposal_id: String,
    pub sample_id: String,
    /// Top-k states, most probable first.
    pub proposed: Vec<ScoredState>,
    pub model_ref: String,
    pub status: ProposalStatus,
    pub final_state: Option<String>,
    #[serde(default)]
    pub decided_by: Option<String>,
    /// Record the proposal was made for; exported with its final state.
    pub record: SampleRecord,
}

impl LabelProposal {
    pub fn pending(record: SampleRecord, proposed: Vec<ScoredState>, model_ref: &str) -> Self {
        Self {
            proposal_id: record.id.clone(),
            sample_id: record.id.clone(),
            proposed,
            model_ref: model_ref.to_string(),
            status: ProposalStatus::Pending,
            final_state: None,
            decided_by: None,
            record,
        }
    }

    pub fn top_state(&self) -> &str {
        &self.proposed[0].state
    }

    fn check(&self) -> Result<(), StoreError> {
        let bad = |reason: &str| {
            Err(StoreError::InvalidProposal {
                id: self.proposal_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.proposed.is_empty() {
            return bad("no proposed states");
        }
        if self.proposed.windows(2).any(|w| w[1].probability > w[0].probability) {
            return bad("probabilities must be non-increasing");
        }
        if self.proposed.iter().any(|s| !(0.0..=1.0).contains(&s.probability)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.status != ProposalStatus::Pending || self.final_state.is_some() {
            return bad("new proposals must be pending");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    pub reviewer: String,
    /// Next pending proposal at the time of the last read or decision.
    pub cursor: Option<String>,
    /// Number of decisions applied through this session.
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Override {
        state: String,
    },
    Discard,
    /// Returns a decided proposal to pending; the log keeps both entries.
    Reopen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub session_id: String,
    pub reviewer: String,
    pub proposal_id: String,
    pub decision: Decision,
    /// Session version after the decision.
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    ProposalsAdded {
        job_id: String,
        proposals: Vec<LabelProposal>,
    },
    SessionOpened {
        session: ReviewSession,
    },
    Decided {
        session_id: String,
        proposal_id: String,
        decision: Decision,
        version: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    #[serde(flatten)]
    event: Event,
}

/// Everything recoverable from the log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub proposals: BTreeMap<String, LabelProposal>,
    /// Proposal ids in insertion order.
    pub order: Vec<String>,
    pub sessions: BTreeMap<String, ReviewSession>,
    pub audit: Vec<AuditEntry>,
    pub last_seq: u64,
}

impl StoreState {
    fn next_pending(&self) -> Option<&str> {
        self.order
            .iter()
            .find(|id| self.proposals[*id].status == ProposalStatus::Pending)
            .map(String::as_str)
    }

    fn apply(&mut self, seq: u64, event: &Event) {
        self.last_seq = seq;
        match event {
            Event::ProposalsAdded { proposals, .. } => {
                for p in proposals {
                    self.order.push(p.proposal_id.clone());
                    self.proposals.insert(p.proposal_id.clone(), p.clone());
                }
            }
            Event::SessionOpened { session } => {
                self.sessions.insert(session.session_id.clone(), session.clone());
            }
            Event::Decided {
                session_id,
                proposal_id,
                decision,
                version,
            } => {
                let reviewer = self.sessions[session_id].reviewer.clone();
                let p = self.proposals.get_mut(proposal_id).expect("validated before logging");
                match decision {
                    Decision::Accept => {
                        p.status = ProposalStatus::Accepted;
                        p.final_state = Some(p.top_state().to_string());
                        p.decided_by = Some(reviewer.clone());
                    }
                    Decision::Override { state } => {
                        p.status = ProposalStatus::Overridden;
                        p.final_state = Some(state.clone());
                        p.decided_by = Some(reviewer.clone());
                    }
                    Decision::Discard => {
                        p.status = ProposalStatus::Discarded;
                        p.final_state = None;
                        p.decided_by = Some(reviewer.clone());
                    }
                    Decision::Reopen => {
                        p.status = ProposalStatus::Pending;
                        p.final_state = None;
                        p.decided_by = None;
                    }
                }
                self.audit.push(AuditEntry {
                    seq,
                    session_id: session_id.clone(),
                    reviewer,
                    proposal_id: proposal_id.clone(),
                    decision: decision.clone(),
                    version: *version,
                });
                let cursor = self.next_pending().map(str::to_string);
                let s = self.sessions.get_mut(session_id).expect("validated before logging");
                s.version = *version;
                s.cursor = cursor;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub session: ReviewSession,
    pub proposal: LabelProposal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatusCounts {
    pub pending: usize,
    pub accepted: usize,
    pub overridden: usize,
    pub discarded: usize,
}

pub struct ProposalStore {
    dir: PathBuf,
    log: File,
    state: StoreState,
    taxonomy: Taxonomy,
    snapshot_every: u64,
}

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

impl ProposalStore {
    /// Opens (or creates) a store in `dir`, recovering from snapshot and log.
    pub fn open(dir: impl AsRef<Path>, taxonomy: Taxonomy) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut state = if snap_path.exists() {
            let text = fs::read_to_string(&snap_path).map_err(io_err(&snap_path))?;
            serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                line: 0,
                message: format!("snapshot: {e}"),
            })?
        } else {
            StoreState::default()
        };
        let log_path = dir.join(LOG_FILE);
        let valid_len = replay(&log_path, &mut state)?;
        let log = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        if let Some(len) = valid_len {
            log.set_len(len).map_err(io_err(&log_path))?;
            log.sync_all().map_err(io_err(&log_path))?;
        }
        Ok(Self {
            dir,
            log,
            state,
            taxonomy,
            snapshot_every: 256,
        })
    }

    pub fn with_snapshot_every(mut self, events: u64) -> Self {
        self.snapshot_every = events.max(1);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    fn append(&mut self, event: Event) -> Result<u64, StoreError> {
        let seq = self.state.last_seq + 1;
        let line = serde_json::to_string(&LogLine {
            seq,
            event: event.clone(),
        })
        .expect("event serializes")
            + "\n";
        let log_path = self.dir.join(LOG_FILE);
        self.log.write_all(line.as_bytes()).map_err(io_err(&log_path))?;
        self.log.sync_data().map_err(io_err(&log_path))?;
        self.state.apply(seq, &event);
        if seq % self.snapshot_every == 0 {
            self.snapshot()?;
        }
        Ok(seq)
    }

    /// Writes the compacted snapshot atomically. The log is kept as the audit trail.
    pub fn snapshot(&self) -> Result<(), StoreError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let json = serde_json::to_vec(&self.state).expect("state serializes");
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&json).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    pub fn add_proposals(&mut self, job_id: &str, proposals: Vec<LabelProposal>) -> Result<usize, StoreError> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &proposals {
            p.check()?;
            if self.state.proposals.contains_key(&p.proposal_id) || !seen.insert(p.proposal_id.clone()) {
                return Err(StoreError::DuplicateProposal(p.proposal_id.clone()));
            }
        }
        let n = proposals.len();
        if n > 0 {
            self.append(Event::ProposalsAdded {
                job_id: job_id.to_string(),
                proposals,
            })?;
        }
        Ok(n)
    }

    pub fn open_session(&mut self, reviewer: &str) -> Result<ReviewSession, StoreError> {
        let session = ReviewSession {
            session_id: format!("s{:06}", self.state.sessions.len() + 1),
            reviewer: reviewer.to_string(),
            cursor: self.state.next_pending().map(str::to_string),
            version: 0,
        };
        self.append(Event::SessionOpened {
            session: session.clone(),
        })?;
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<ReviewSession, StoreError> {
        let mut s = self
            .state
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownSession(id.to_string()))?;
        s.cursor = self.state.next_pending().map(str::to_string);
        Ok(s)
    }

    pub fn proposal(&self, id: &str) -> Result<&LabelProposal, StoreError> {
        self.state
            .proposals
            .get(id)
            .ok_or_else(|| StoreError::UnknownProposal(id.to_string()))
    }

    pub fn proposal_by_sample(&self, sample_id: &str) -> Option<&LabelProposal> {
        self.state.proposals.values().find(|p| p.sample_id == sample_id)
    }

    /// Next pending proposal, in insertion order.
    pub fn next(&self, session_id: &str) -> Result<Option<&LabelProposal>, StoreError> {
        self.session(session_id)?;
        Ok(self.state.next_pending().map(|id| &self.state.proposals[id]))
    }

    /// Applies a decision if `expected_version` matches the session's version.
    /// The decision is durable when this returns `Ok`.
    pub fn decide(
        &mut self,
        session_id: &str,
        proposal_id: &str,
        decision: Decision,
        expected_version: u64,
    ) -> Result<DecisionOutcome, StoreError> {
        let session = self
            .state
            .sessions
            .get(session_id)
            .ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))?;
        if session.version != expected_version {
            return Err(StoreError::VersionConflict {
                expected: expected_version,
                actual: session.version,
            });
        }
        let p = self.proposal(proposal_id)?;
        match &decision {
            Decision::Reopen => {
                if p.status == ProposalStatus::Pending {
                    return Err(StoreError::AlreadyPending(proposal_id.to_string()));
                }
            }
            _ if p.status != ProposalStatus::Pending => {
                return Err(StoreError::NotPending {
                    id: proposal_id.to_string(),
                    status: p.status,
                })
            }
            Decision::Override { state } => self.check_override(p, state)?,
            _ => {}
        }
        let version = expected_version + 1;
        self.append(Event::Decided {
            session_id: session_id.to_string(),
            proposal_id: proposal_id.to_string(),
            decision,
            version,
        })?;
        Ok(DecisionOutcome {
            session: self.state.sessions[session_id].clone(),
            proposal: self.state.proposals[proposal_id].clone(),
        })
    }

    fn check_override(&self, p: &LabelProposal, state: &str) -> Result<(), StoreError> {
        let bad = |reason: String| {
            Err(StoreError::InvalidOverride {
                id: p.proposal_id.clone(),
                reason,
            })
        };
        if self.taxonomy.class_index(state).is_none() {
            return bad(format!("`{state}` is not a state class"));
        }
        if state == p.top_state() {
            return bad(format!("`{state}` is already the top proposal; accept instead"));
        }
        if state != OTHER {
            if let Ok(false) = self.taxonomy.is_admissible(&p.record.object, state) {
                return bad(format!("`{state}` is not admissible for {}", p.record.object));
            }
        }
        Ok(())
    }

    pub fn audit(&self, session_id: Option<&str>) -> Vec<&AuditEntry> {
        self.state
            .audit
            .iter()
            .filter(|a| session_id.is_none_or(|s| a.session_id == s))
            .collect()
    }

    pub fn counts(&self) -> StatusCounts {
        let mut c = StatusCounts::default();
        for p in self.state.proposals.values() {
            match p.status {
                ProposalStatus::Pending => c.pending += 1,
                ProposalStatus::Accepted => c.accepted += 1,
                ProposalStatus::Overridden => c.overridden += 1,
                ProposalStatus::Discarded => c.discarded += 1,
            }
        }
        c
    }

    /// Accepted and/or overridden proposals as manifest records carrying
    /// their final state. `None` selects both.
    pub fn export(&self, status: Option<ProposalStatus>) -> Result<DatasetManifest, StoreError> {
        let wanted: &[ProposalStatus] = match status {
            None => &[ProposalStatus::Accepted, ProposalStatus::Overridden],
            Some(ProposalStatus::Accepted) => &[ProposalStatus::Accepted],
            Some(ProposalStatus::Overridden) => &[ProposalStatus::Overridden],
            Some(other) => return Err(StoreError::BadExportStatus(other)),
        };
        let records = self
            .state
            .order
            .iter()
            .map(|id| &self.state.proposals[id])
            .filter(|p| wanted.contains(&p.status))
            .map(|p| {
                let mut r = p.record.clone();
                r.state = p.final_state.clone().expect("decided proposals carry a final state");
                r.label_origin = Some(LabelOrigin {
                    review: p.status.as_str().to_string(),
                    proposed_state: p.top_state().to_string(),
                    model_ref: p.model_ref.clone(),
                    reviewer: p.decided_by.clone().unwrap_or_default(),
                });
                r
            })
            .collect();
        Ok(DatasetManifest {
            records,
            meta: Default::default(),
        })
    }
}

/// Replays log lines after `state.last_seq`. Returns the byte length to
/// truncate to when the final line is torn.
fn replay(path: &Path, state: &mut StoreState) -> Result<Option<u64>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut offset = 0u64;
    let mut line_no = 0;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            return Ok(None);
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        match serde_json::from_str::<LogLine>(buf.trim_end()) {
            Ok(entry) if complete => {
                if entry.seq > state.last_seq {
                    if entry.seq != state.last_seq + 1 {
                        return Err(StoreError::Corrupt {
                            line: line_no,
                            message: format!("sequence jumps from {} to {}", state.last_seq, entry.seq),
                        });
                    }
                    state.apply(entry.seq, &entry.event);
                }
            }
            // An unterminated last line was never acknowledged.
            _ if !complete => return Ok(Some(offset)),
            Ok(_) => unreachable!(),
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
        offset += n as u64;
    }
}
