use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "statechef", version, about = "Cooking-object state identification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inspect and check the state taxonomy.
    #[command(subcommand)]
    Taxonomy(TaxonomyCommand),
    /// Build, split and summarize dataset manifests.
    #[command(subcommand)]
    Manifest(ManifestCommand),
    /// Train the whole-dataset model or the per-object models.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Search and apply soft-voting weights.
    #[command(subcommand)]
    Vote(VoteCommand),
    /// Run a model over a split and render result tables.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Model-assisted labeling.
    #[command(subcommand)]
    Label(LabelCommand),
}

/// Flags every command accepts.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file whose keys override the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output path; defaults to a location under STATECHEF_DATA_DIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum TaxonomyCommand {
    Validate(TaxonomyValidate),
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct TaxonomyValidate {
    /// Taxonomy file; the built-in canonical taxonomy when omitted.
    pub path: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
pub enum ManifestCommand {
    /// Turn a crawl list (one URI per line) into manifest records.
    Import(ManifestImport),
    /// Assign train/test/val per class.
    Split(ManifestSplit),
    /// Per-class and per-split counts.
    Stats(ManifestStats),
    /// Draw a fixed number of records per object.
    Sample(ManifestSample),
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct ManifestImport {
    pub list: PathBuf,
    #[arg(long)]
    pub object: String,
    /// State keyword the crawl was run with.
    #[arg(long)]
    pub state: String,
    /// Append to the output manifest instead of replacing it.
    #[arg(long)]
    #[serde(default)]
    pub append: bool,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub manifest: PathBuf,
    /// train,test,val fractions.
    #[arg(long, default_value = "0.7,0.15,0.15")]
    pub ratios: String,
    /// Allow records that already have a split.
    #[arg(long)]
    #[serde(default)]
    pub reassign: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct ManifestStats {
    pub manifest: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct ManifestSample {
    pub manifest: PathBuf,
    /// Comma-separated objects; all fine-tuned objects when omitted.
    #[arg(long)]
    pub objects: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub per_object: usize,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

/// Where images come from.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct Images {
    /// Root for relative image paths.
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    /// Use procedural textures keyed by record id instead of files.
    #[arg(long)]
    #[serde(default)]
    pub synthetic_images: bool,
}

#[derive(Subcommand, Debug)]
pub enum TrainCommand {
    /// Stage-wise training on all eleven classes.
    Whole(TrainWhole),
    /// Fine-tune one model per object from a whole-dataset checkpoint.
    Object(TrainObject),
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct TrainWhole {
    pub manifest: PathBuf,
    /// `production` or `tiny`.
    #[arg(long, default_value = "production")]
    pub model: String,
    /// Parameter archive with pretrained backbone tensors.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Schedule JSON; the built-in whole-dataset schedule when omitted.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Comma-separated epoch counts replacing the schedule's.
    #[arg(long)]
    pub epochs: Option<String>,
    /// Voting member index; member 0 is the base architecture.
    #[arg(long, default_value_t = 0)]
    pub member: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub images: Images,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct TrainObject {
    pub manifest: PathBuf,
    /// Whole-dataset checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub images: Images,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
pub enum VoteCommand {
    /// Grid search for the weights maximizing class-averaged top-1.
    Search(VoteSearch),
    /// Combine prediction dumps with fixed weights.
    Apply(VoteApply),
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct VoteSearch {
    /// Labeled validation prediction dumps.
    #[arg(required = true)]
    pub predictions: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub grid_step: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct VoteApply {
    #[arg(required = true)]
    pub predictions: Vec<PathBuf>,
    /// Output of `vote search`.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value = "voting")]
    pub model_id: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Predict a manifest split and write a prediction dump and report.
    Run(EvalRun),
    /// Render result rows or prediction dumps as a table.
    Report(EvalReport),
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct EvalRun {
    pub manifest: PathBuf,
    /// One or more checkpoints; several are evaluated one after another.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Keep only records of this object (for per-object checkpoints).
    #[arg(long)]
    pub object: Option<String>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub images: Images,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row files or prediction dumps.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "table1")]
    pub layout: String,
    /// Model whose dump rows fill the accuracy columns.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Model whose dump rows fill the voting column.
    #[arg(long)]
    pub voting_id: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
pub enum LabelCommand {
    /// Propose top-k states for records and queue them for review.
    Propose(LabelPropose),
    /// Run the review HTTP service.
    Serve(LabelServe),
    /// Write reviewed records as a manifest.
    Export(LabelExport),
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct LabelPropose {
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value = "cli")]
    pub job_id: String,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub images: Images,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct LabelServe {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub images: Images,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize, Deserialize)]
pub struct LabelExport {
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// `accepted`, `overridden`, `discarded` or `all` (accepted and overridden).
    #[arg(long, default_value = "all")]
    pub status: String,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}
