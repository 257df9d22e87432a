//! Sample records, manifests, stratified splitting and class statistics.
//!
//! Manifests are stored as JSON lines, one [`SampleRecord`] per line. Split
//! ratios and the taxonomy digest live in a `<manifest>.meta.json` sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::taxonomy::{Taxonomy, CLASS_NAMES};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("split ratios must be non-negative and sum to 1 (got {0:?})")]
    BadRatios([f64; 3]),
    #[error("record `{0}` already has a split; pass the reassignment flag to resplit")]
    AlreadyAssigned(String),
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}`: state `{state}` is not admissible for object `{object}`")]
    Inadmissible { id: String, object: String, state: String },
    #[error("record `{id}`: {message}")]
    InvalidRecord { id: String, message: String },
    #[error("category `{category}` has {available} records in the pool, {required} required")]
    InsufficientPool {
        category: String,
        available: usize,
        required: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Val,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Test, Split::Val];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    WebCrawl,
    Imagenet,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    MultiState,
    Ambiguous,
    MislabeledSuspect,
}

/// How a label was finalized when it came out of the review workflow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelOrigin {
    /// `accepted` or `overridden`.
    pub review: String,
    pub proposed_state: String,
    pub model_ref: String,
    pub reviewer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub uri: String,
    pub object: String,
    pub state: String,
    pub split: Split,
    pub source: Source,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_origin: Option<LabelOrigin>,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        uri: impl Into<String>,
        object: impl Into<String>,
        state: impl Into<String>,
        source: Source,
    ) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
            object: object.into(),
            state: state.into(),
            split: Split::Unassigned,
            source,
            flags: BTreeSet::new(),
            width: None,
            height: None,
            label_origin: None,
        }
    }

    /// Local filesystem path for `file://` and bare-path URIs.
    pub fn local_path(&self) -> Option<PathBuf> {
        uri_to_path(&self.uri)
    }
}

pub fn uri_to_path(uri: &str) -> Option<PathBuf> {
    if let Some(rest) = uri.strip_prefix("file://") {
        return Some(PathBuf::from(rest));
    }
    if uri.contains("://") {
        return None;
    }
    Some(PathBuf::from(uri))
}

/// Train/test/val fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl SplitRatios {
    pub fn new(train: f64, test: f64, val: f64) -> Result<Self, ManifestError> {
        let r = [train, test, val];
        let ok = r.iter().all(|x| x.is_finite() && *x >= 0.0) && ((train + test + val) - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(ManifestError::BadRatios(r));
        }
        Ok(Self { train, test, val })
    }

    /// 70 / 15 / 15.
    pub fn standard() -> Self {
        Self::new(0.70, 0.15, 0.15).expect("valid")
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.test, self.val]
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| ManifestError::BadRatios([f64::NAN; 3]))?;
        match parts.as_slice() {
            [a, b, c] => Self::new(*a, *b, *c),
            _ => Err(ManifestError::BadRatios([f64::NAN; 3])),
        }
    }
}

/// Per-class split sizes by largest remainder, ties toward train then test.
pub fn largest_remainder_counts(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = ratios.as_array().map(|r| r * n as f64);
    let mut counts = [0usize; 3];
    let mut remainders = [0f64; 3];
    for i in 0..3 {
        let q = quotas[i];
        let nearest = q.round();
        let floor = if (q - nearest).abs() < 1e-9 { nearest } else { q.floor() };
        counts[i] = floor as usize;
        remainders[i] = (q - floor).max(0.0);
    }
    let assigned: usize = counts.iter().sum();
    let leftover = n.saturating_sub(assigned);
    let mut order = [0usize, 1, 2];
    // stable sort keeps train < test < val among equal remainders
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]));
    for &i in order.iter().take(leftover) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    #[serde(default)]
    pub ratios: Option<SplitRatios>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub taxonomy_version: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub meta: ManifestMeta,
}

/// Counts per training class, in canonical class order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
    /// States that are not one of the training classes.
    pub unrecognized: BTreeMap<String, usize>,
}

impl ClassHistogram {
    pub fn get(&self, class: &str) -> usize {
        self.classes
            .iter()
            .position(|c| c == class)
            .map(|i| self.counts[i])
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.unrecognized.values().sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct CrawlImport {
    pub records: Vec<SampleRecord>,
    pub errors: Vec<LineError>,
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>) -> Self {
        Self {
            records,
            meta: ManifestMeta::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_counts(&self) -> [usize; 3] {
        Split::ASSIGNED.map(|s| self.split(s).count())
    }

    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            records: self.split(split).cloned().collect(),
            meta: self.meta.clone(),
        }
    }

    /// Records for one object whose state is admissible for it.
    pub fn restrict_to_object(&self, taxonomy: &Taxonomy, object: &str) -> Result<DatasetManifest, ManifestError> {
        let category = taxonomy.object(object).map_err(|e| ManifestError::InvalidRecord {
            id: object.into(),
            message: e.to_string(),
        })?;
        let records = self
            .records
            .iter()
            .filter(|r| {
                taxonomy
                    .object(&r.object)
                    .map(|o| o.name == category.name)
                    .unwrap_or(false)
                    && category.admissible_states.iter().any(|c| c.name == r.state)
            })
            .cloned()
            .collect();
        Ok(DatasetManifest {
            records,
            meta: self.meta.clone(),
        })
    }

    /// Checks id uniqueness and state admissibility. Records sourced from
    /// ImageNet may use synset categories outside the taxonomy's objects.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), ManifestError> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(ManifestError::DuplicateId(r.id.clone()));
            }
            if taxonomy.class(&r.state).is_err() {
                return Err(ManifestError::InvalidRecord {
                    id: r.id.clone(),
                    message: format!("unknown state class `{}`", r.state),
                });
            }
            match taxonomy.is_admissible(&r.object, &r.state) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(ManifestError::Inadmissible {
                        id: r.id.clone(),
                        object: r.object.clone(),
                        state: r.state.clone(),
                    })
                }
                Err(_) if r.source == Source::Imagenet => {}
                Err(e) => {
                    return Err(ManifestError::InvalidRecord {
                        id: r.id.clone(),
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok(())
    }

    /// Assigns every record to train/test/val, stratified by state class.
    ///
    /// Each class is canonicalized by sorting on id, shuffled with a stream
    /// keyed by `(seed, class)`, and cut at the largest-remainder counts. The
    /// result therefore depends only on the seed and the record ids.
    pub fn stratified_split(
        &self,
        ratios: SplitRatios,
        seed: u64,
        allow_reassign: bool,
    ) -> Result<DatasetManifest, ManifestError> {
        SplitRatios::new(ratios.train, ratios.test, ratios.val)?;
        if !allow_reassign {
            if let Some(r) = self.records.iter().find(|r| r.split != Split::Unassigned) {
                return Err(ManifestError::AlreadyAssigned(r.id.clone()));
            }
        }
        let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !ids.insert(r.id.as_str()) {
                return Err(ManifestError::DuplicateId(r.id.clone()));
            }
            by_class.entry(r.state.as_str()).or_default().push(i);
        }
        let mut out = self.clone();
        for (class, mut members) in by_class {
            members.sort_by(|&a, &b| self.records[a].id.cmp(&self.records[b].id));
            let mut rng = rng_for(seed, &[b"stratified-split", class.as_bytes()]);
            members.shuffle(&mut rng);
            let [train, test, _] = largest_remainder_counts(members.len(), &ratios);
            for (pos, &i) in members.iter().enumerate() {
                out.records[i].split = if pos < train {
                    Split::Train
                } else if pos < train + test {
                    Split::Test
                } else {
                    Split::Val
                };
            }
        }
        out.meta.ratios = Some(ratios);
        out.meta.seed = Some(seed);
        Ok(out)
    }

    pub fn class_stats(&self) -> ClassHistogram {
        let mut counts = vec![0usize; CLASS_NAMES.len()];
        let mut unrecognized = BTreeMap::new();
        for r in &self.records {
            match CLASS_NAMES.iter().position(|c| *c == r.state) {
                Some(i) => counts[i] += 1,
                None => *unrecognized.entry(r.state.clone()).or_insert(0) += 1,
            }
        }
        ClassHistogram {
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            counts,
            unrecognized,
        }
    }

    /// Draws `per_category` records uniformly without replacement for each
    /// category (matched against the record's `object`).
    pub fn sample_subset(
        &self,
        categories: &[String],
        per_category: usize,
        seed: u64,
    ) -> Result<DatasetManifest, ManifestError> {
        let mut records = Vec::with_capacity(categories.len() * per_category);
        for category in categories {
            let mut pool: Vec<&SampleRecord> = self.records.iter().filter(|r| &r.object == category).collect();
            if pool.len() < per_category {
                return Err(ManifestError::InsufficientPool {
                    category: category.clone(),
                    available: pool.len(),
                    required: per_category,
                });
            }
            pool.sort_by(|a, b| a.id.cmp(&b.id));
            let mut rng = rng_for(seed, &[b"subset", category.as_bytes()]);
            let (chosen, _) = pool.partial_shuffle(&mut rng, per_category);
            let mut chosen: Vec<SampleRecord> = chosen.iter().map(|r| (*r).clone()).collect();
            chosen.sort_by(|a, b| a.id.cmp(&b.id));
            records.extend(chosen);
        }
        Ok(DatasetManifest {
            records,
            meta: ManifestMeta {
                seed: Some(seed),
                ..self.meta.clone()
            },
        })
    }

    // -- file io ----------------------------------------------------------

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".meta.json");
        PathBuf::from(name)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(io_err(path))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        let meta_path = Self::meta_path(path);
        let meta = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            serde_json::from_str(&text).map_err(|e| ManifestError::Parse {
                path: meta_path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?
        } else {
            ManifestMeta::default()
        };
        Ok(Self { records, meta })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses line-delimited records; metadata is left at its default.
    pub fn from_jsonl(text: &str) -> Result<Self, ManifestError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                path: "<memory>".into(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self {
            records,
            meta: ManifestMeta::default(),
        })
    }

    /// Writes the manifest under an exclusive advisory lock on the file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(path)
            .map_err(io_err(path))?;
        file.lock().map_err(io_err(path))?;
        file.set_len(0).map_err(io_err(path))?;
        let mut writer = BufWriter::new(&file);
        writer.write_all(self.to_jsonl().as_bytes()).map_err(io_err(path))?;
        writer.flush().map_err(io_err(path))?;
        drop(writer);
        if self.meta != ManifestMeta::default() {
            let meta_path = Self::meta_path(path);
            let text = serde_json::to_string_pretty(&self.meta).expect("meta serializes") + "\n";
            std::fs::write(&meta_path, text).map_err(io_err(&meta_path))?;
        }
        file.unlock().map_err(io_err(path))?;
        Ok(())
    }

    /// Appends records to an existing manifest file under its advisory lock.
    pub fn append_to(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<(), ManifestError> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        file.lock().map_err(io_err(path))?;
        let mut writer = BufWriter::new(&file);
        for r in records {
            serde_json::to_writer(&mut writer, r).expect("record serializes");
            writer.write_all(b"\n").map_err(io_err(path))?;
        }
        writer.flush().map_err(io_err(path))?;
        drop(writer);
        file.unlock().map_err(io_err(path))?;
        Ok(())
    }
}

/// Reads a crawl list (one URI per line) into unassigned web-crawl records
/// labeled with the keyword state. Blank lines and `#` comments are skipped.
pub fn import_crawl_list(
    path: impl AsRef<Path>,
    object: &str,
    keyword_state: &str,
) -> Result<CrawlImport, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(import_crawl_text(&text, object, keyword_state))
}

pub fn import_crawl_text(text: &str, object: &str, keyword_state: &str) -> CrawlImport {
    let mut out = CrawlImport::default();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = match url::Url::parse(line) {
            Ok(u)
                if matches!(u.scheme(), "http" | "https" | "file") && (u.scheme() == "file" || u.host().is_some()) =>
            {
                u
            }
            Ok(u) => {
                out.errors.push(LineError {
                    line: i + 1,
                    message: format!("unsupported URI scheme `{}`", u.scheme()),
                });
                continue;
            }
            Err(e) => {
                out.errors.push(LineError {
                    line: i + 1,
                    message: format!("malformed URI: {e}"),
                });
                continue;
            }
        };
        let uri = parsed.to_string();
        if !seen.insert(uri.clone()) {
            out.errors.push(LineError {
                line: i + 1,
                message: "duplicate URI".into(),
            });
            continue;
        }
        let digest = crate::seed::derive_seed(0, &[uri.as_bytes()]);
        let id = format!("{object}-{keyword_state}-{digest:016x}");
        out.records
            .push(SampleRecord::new(id, uri, object, keyword_state, Source::WebCrawl));
    }
    out
}
