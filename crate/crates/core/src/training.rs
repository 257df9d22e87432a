//! Staged training: freeze scopes, Adam, L2 and online augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_view, AugmentError, AugmentationConfig};
use crate::checkpoint::save_checkpoint;
use crate::dataset::{DataError, ImageSource, TrainingSet};
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{argmax, per_class_accuracy};
use crate::model::{FreezeScope, Model, ModelError, ParamGroup};
use crate::seed::{derive_seed, rng_for};
use crate::taxonomy::{Taxonomy, TaxonomyError};

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_L2: f64 = 1e-4;
pub const ADAM_EPSILON: f64 = 1e-7;

/// Objects left out of per-object fine-tuning.
pub const FINETUNE_EXCLUDED: [&str; 1] = ["dough"];

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("model has {model} classes but the data has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("training split is empty")]
    EmptySplit,
    #[error("invalid stage `{stage}`: {reason}")]
    InvalidStage { stage: String, reason: String },
    #[error("schedule `{0}` has no stages")]
    EmptySchedule(String),
    #[error("no manifest for object `{0}`")]
    MissingManifest(String),
    #[error("object `{object}` has {count} states; at least 2 are needed")]
    TooFewStates { object: String, count: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schedule parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainingError + '_ {
    move |source| TrainingError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_l2() -> f64 {
    DEFAULT_L2
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingStage {
    pub name: String,
    pub freeze_scope: FreezeScope,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    pub epochs: usize,
    #[serde(default = "default_l2")]
    pub l2_coefficient: f64,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl TrainingStage {
    pub fn new(name: &str, freeze_scope: FreezeScope, learning_rate: f64, epochs: usize) -> Self {
        Self {
            name: name.to_string(),
            freeze_scope,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epochs,
            l2_coefficient: DEFAULT_L2,
            augmentation: AugmentationConfig::default(),
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    /// Checks the stage. A zero learning rate is accepted so that a
    /// frozen run can be exercised; negative or non-finite rates are not.
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |reason: String| {
            Err(TrainingError::InvalidStage {
                stage: self.name.clone(),
                reason,
            })
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        for (label, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{label} {b} outside (0, 1)"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.l2_coefficient >= 0.0 && self.l2_coefficient.is_finite()) {
            return bad(format!("l2 coefficient {} must be non-negative", self.l2_coefficient));
        }
        self.augmentation.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub name: String,
    pub stages: Vec<TrainingStage>,
}

impl Schedule {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.stages.is_empty() {
            return Err(TrainingError::EmptySchedule(self.name.clone()));
        }
        self.stages.iter().try_for_each(TrainingStage::validate)
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let schedule: Schedule = serde_json::from_str(&text)?;
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    /// Same stages with epoch counts replaced.
    pub fn with_epochs(mut self, epochs: &[usize]) -> Self {
        for (stage, &e) in self.stages.iter_mut().zip(epochs) {
            stage.epochs = e;
        }
        self
    }
}

/// Two phases on the 11-class problem: added layers with the backbone
/// frozen, then every layer at a small learning rate.
pub fn whole_dataset_schedule() -> Schedule {
    Schedule {
        name: "whole".into(),
        stages: vec![
            TrainingStage::new("added-layers", FreezeScope::BackboneOnly, 0.001, 100),
            TrainingStage::new("all-layers", FreezeScope::NoFreeze, 0.000005, 250),
        ],
    }
}

/// Four stages after head replacement, progressively unfreezing.
pub fn object_finetune_schedule() -> Schedule {
    Schedule {
        name: "object".into(),
        stages: vec![
            TrainingStage::new("stage1", FreezeScope::AllButFinal, 0.01, 40),
            TrainingStage::new("stage2", FreezeScope::AllButFinal, 0.001, 80),
            TrainingStage::new("stage3", FreezeScope::AddedLayersUnfrozen, 0.00001, 120),
            TrainingStage::new("stage4", FreezeScope::NoFreeze, 0.000005, 160),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub stage_index: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    /// Macro (average per-class) top-1 accuracy.
    pub val_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TrainingError> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { epochs })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io_err(path))
    }
}

/// Adam with bias correction; moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    moments: BTreeMap<String, (ndarray::ArrayD<f64>, ndarray::ArrayD<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon: ADAM_EPSILON,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every learned tensor that `scope` trains and that has a gradient.
    pub fn step(&mut self, model: &mut Model, scope: FreezeScope) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (name, p) in model.named_params_mut() {
            if !p.kind.is_learned() || !scope.trains(Model::group_of(&name)) {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let (m, v) = self.moments.entry(name).or_insert_with(|| {
                (
                    ndarray::ArrayD::zeros(grad.raw_dim()),
                    ndarray::ArrayD::zeros(grad.raw_dim()),
                )
            });
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Execution options that do not change results.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Threads for augmentation. Every sample draws from its own seeded
    /// stream, so results do not depend on this value.
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

fn augment_batch(
    set: &TrainingSet,
    indices: &[usize],
    config: &AugmentationConfig,
    labels: &[&[u8]],
    seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Array4<f64>, TrainingError> {
    if !config.is_enabled() {
        return Ok(set.images.select(Axis(0), indices));
    }
    let one = |&i: &usize| -> Result<ndarray::Array3<f64>, AugmentError> {
        let mut key: Vec<&[u8]> = labels.to_vec();
        key.push(set.ids[i].as_bytes());
        let mut rng = rng_for(derive_seed(seed, &[b"augment", &config.seed.to_le_bytes()]), &key);
        augment_view(set.image(i), config, &mut rng)
    };
    let views: Vec<ndarray::Array3<f64>> = match pool {
        Some(pool) => pool.install(|| indices.par_iter().map(one).collect::<Result<_, _>>())?,
        None => indices.iter().map(one).collect::<Result<_, _>>()?,
    };
    let (h, w) = set.image_size();
    let mut out = Array4::<f64>::zeros((indices.len(), h, w, 3));
    for (mut dst, v) in out.axis_iter_mut(Axis(0)).zip(&views) {
        dst.assign(v);
    }
    Ok(out)
}

/// Inference-mode loss, sample-weighted top-1 and macro top-1 on a set.
pub fn evaluate_set(model: &Model, set: &TrainingSet) -> Result<(f64, f64, f64), TrainingError> {
    if set.is_empty() {
        return Err(TrainingError::EmptySplit);
    }
    let probs = model.predict(&set.images)?;
    Ok(summarize(&probs, &set.labels))
}

fn summarize(probs: &Array2<f64>, labels: &[usize]) -> (f64, f64, f64) {
    let n = labels.len() as f64;
    let loss = probs
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| -row[y].max(1e-300).ln())
        .sum::<f64>()
        / n;
    let correct = probs
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| argmax(row.as_slice().expect("contiguous")) == y)
        .count();
    let macro_acc = per_class_accuracy(probs.view(), labels)
        .map(|p| p.macro_accuracy)
        .unwrap_or(0.0);
    (loss, correct as f64 / n, macro_acc)
}

fn check_set(model: &Model, set: &TrainingSet) -> Result<(), TrainingError> {
    if set.class_count() != model.class_count() {
        return Err(TrainingError::ClassMismatch {
            model: model.class_count(),
            data: set.class_count(),
        });
    }
    Ok(())
}

/// Trains `model` in place for `stage.epochs` epochs.
///
/// Tensors outside the freeze scope are never written, and frozen batch-norm
/// layers normalize with (and keep) their running statistics. `observer` sees
/// the model after every epoch.
pub fn run_stage(
    model: &mut Model,
    train: &TrainingSet,
    val: Option<&TrainingSet>,
    stage: &TrainingStage,
    stage_index: usize,
    seed: u64,
    options: RunOptions,
    observer: &mut dyn FnMut(&Model, &EpochRecord) -> Result<(), TrainingError>,
) -> Result<Vec<EpochRecord>, TrainingError> {
    stage.validate()?;
    if train.is_empty() {
        return Err(TrainingError::EmptySplit);
    }
    check_set(model, train)?;
    if let Some(v) = val {
        check_set(model, v)?;
    }
    let pool = if options.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(options.workers)
                .build()
                .expect("thread pool"),
        )
    } else {
        None
    };
    let mut adam = Adam::new(stage.learning_rate, stage.beta1, stage.beta2);
    let stage_key = (stage_index as u64).to_le_bytes();
    let mut records = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let started = Instant::now();
        let epoch_key = (epoch as u64).to_le_bytes();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, &[b"shuffle", &stage_key, &epoch_key]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(stage.batch_size) {
            let images = augment_batch(
                train,
                batch,
                &stage.augmentation,
                &[&stage_key, &epoch_key],
                seed,
                pool.as_ref(),
            )?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let out = model.train_step_gradients(&images, &labels, stage.freeze_scope, stage.l2_coefficient)?;
            adam.step(model, stage.freeze_scope);
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
        }
        let (val_loss, val_accuracy) = match val.filter(|v| !v.is_empty()) {
            Some(v) => {
                let (loss, _, macro_acc) = evaluate_set(model, v)?;
                (Some(loss), Some(macro_acc))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            stage: stage.name.clone(),
            stage_index,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        observer(model, &record)?;
        records.push(record);
    }
    Ok(records)
}

/// Where [`run_schedule`] writes checkpoints and history.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub dir: PathBuf,
}

impl OutputLayout {
    pub fn stage_checkpoint(&self, schedule: &str, stage_index: usize) -> PathBuf {
        self.dir.join(format!("{schedule}-stage{}.ckpt", stage_index + 1))
    }

    pub fn best_checkpoint(&self, schedule: &str) -> PathBuf {
        self.dir.join(format!("{schedule}-best.ckpt"))
    }

    pub fn history(&self, schedule: &str) -> PathBuf {
        self.dir.join(format!("{schedule}-history.jsonl"))
    }
}

/// Runs every stage in order. With an output layout, a checkpoint is saved
/// at the end of each stage and whenever validation accuracy improves.
pub fn run_schedule(
    model: &mut Model,
    train: &TrainingSet,
    val: Option<&TrainingSet>,
    schedule: &Schedule,
    seed: u64,
    options: RunOptions,
    output: Option<&OutputLayout>,
) -> Result<TrainingHistory, TrainingError> {
    schedule.validate()?;
    let mut history = TrainingHistory::default();
    let mut best = f64::NEG_INFINITY;
    let history_path = output.map(|o| o.history(&schedule.name));
    for (i, stage) in schedule.stages.iter().enumerate() {
        let stage_seed = derive_seed(seed, &[schedule.name.as_bytes(), &(i as u64).to_le_bytes()]);
        let mut observer = |m: &Model, r: &EpochRecord| -> Result<(), TrainingError> {
            if let (Some(out), Some(acc)) = (output, r.val_accuracy) {
                if acc > best {
                    best = acc;
                    let label = format!("{}/{}/epoch{}", schedule.name, r.stage, r.epoch);
                    save_checkpoint(
                        m,
                        &out.best_checkpoint(&schedule.name),
                        history_path.as_deref(),
                        Some(&label),
                    )?;
                }
            }
            Ok(())
        };
        let records = run_stage(model, train, val, stage, i, stage_seed, options, &mut observer)?;
        history.epochs.extend(records);
        if let (Some(out), Some(hp)) = (output, &history_path) {
            history.save(hp)?;
            let label = format!("{}/{}/final", schedule.name, stage.name);
            save_checkpoint(model, &out.stage_checkpoint(&schedule.name, i), Some(hp), Some(&label))?;
        }
    }
    Ok(history)
}

#[derive(Clone, Debug)]
pub struct ObjectModel {
    pub object: String,
    pub model: Model,
    pub history: TrainingHistory,
}

/// Inputs for per-object fine-tuning.
pub struct ObjectTraining<'a> {
    pub taxonomy: &'a Taxonomy,
    /// Model trained on the full class set.
    pub base: &'a Model,
    /// Per-object manifests keyed by canonical object name.
    pub manifests: &'a BTreeMap<String, DatasetManifest>,
    pub schedule: &'a Schedule,
    pub source: &'a dyn ImageSource,
    pub seed: u64,
    pub options: RunOptions,
    /// Each object writes into `dir/<object>/`.
    pub output: Option<&'a Path>,
}

/// Objects that get their own fine-tuned model.
pub fn finetune_objects(taxonomy: &Taxonomy) -> Vec<String> {
    taxonomy
        .objects()
        .iter()
        .map(|o| o.name.clone())
        .filter(|n| !FINETUNE_EXCLUDED.contains(&n.as_str()))
        .collect()
}

/// Replaces the softmax layer with one unit per admissible state and runs
/// the fine-tuning schedule, once per object.
pub fn train_object_models(job: &ObjectTraining<'_>) -> Result<BTreeMap<String, ObjectModel>, TrainingError> {
    let class_count = job.taxonomy.classes().len();
    if job.base.class_count() != class_count {
        return Err(TrainingError::ClassMismatch {
            model: job.base.class_count(),
            data: class_count,
        });
    }
    let objects = finetune_objects(job.taxonomy);
    for object in &objects {
        if !job.manifests.contains_key(object) {
            return Err(TrainingError::MissingManifest(object.clone()));
        }
        let count = job.taxonomy.admissible_states(object)?.len();
        if count < 2 {
            return Err(TrainingError::TooFewStates {
                object: object.clone(),
                count,
            });
        }
    }
    let size = job.base.spec().input_size;
    let mut out = BTreeMap::new();
    for object in objects {
        let states: Vec<String> = job
            .taxonomy
            .admissible_states(&object)?
            .iter()
            .map(|c| c.name.clone())
            .collect();
        let object_seed = derive_seed(job.seed, &[b"object", object.as_bytes()]);
        let mut model = job
            .base
            .replace_head(states.len(), object_seed)?
            .with_class_names(states.clone())?;
        let manifest = &job.manifests[&object];
        let (train, _) = TrainingSet::from_records(manifest.split(Split::Train), &states, job.source, size)?;
        let (val, _) = TrainingSet::from_records(manifest.split(Split::Val), &states, job.source, size)?;
        let layout = job.output.map(|dir| OutputLayout { dir: dir.join(&object) });
        let mut schedule = job.schedule.clone();
        schedule.name = object.clone();
        let history = run_schedule(
            &mut model,
            &train,
            (!val.is_empty()).then_some(&val),
            &schedule,
            object_seed,
            job.options,
            layout.as_ref(),
        )?;
        out.insert(object.clone(), ObjectModel { object, model, history });
    }
    Ok(out)
}

/// Names of learned tensors a stage may write.
pub fn trainable_tensors(model: &Model, scope: FreezeScope) -> Vec<String> {
    model
        .named_params()
        .into_iter()
        .filter(|(n, p)| p.kind.is_learned() && scope.trains(Model::group_of(n)))
        .map(|(n, _)| n)
        .collect()
}

/// Groups whose tensors (including batch-norm statistics) stay fixed under `scope`.
pub fn frozen_groups(scope: FreezeScope) -> Vec<ParamGroup> {
    [ParamGroup::Backbone, ParamGroup::Added, ParamGroup::Final]
        .into_iter()
        .filter(|g| !scope.trains(*g))
        .collect()
}
