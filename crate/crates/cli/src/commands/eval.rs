use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use statechef::checkpoint::load_checkpoint;
use statechef::dataset::TrainingSet;
use statechef::ensemble::{search_weights, weighted_vote, EnsembleWeights};
use statechef::manifest::{DatasetManifest, Split};
use statechef::metrics::evaluate;
use statechef::predictions::{align, read_dump, records_for_model, to_jsonl, AlignedPredictions, PredictionRecord};
use statechef::report::{object_rows, parse_rows, render_rows, Layout, ReportRow};

use super::{image_source, load_taxonomy, predict_set, report_skipped, result_line, write_file};
use crate::args::*;
use crate::config::output_path;
use crate::Usage;

/// Output of `vote search`, input of `vote apply`.
#[derive(Debug, Serialize, Deserialize)]
struct VoteFile {
    model_ids: Vec<String>,
    weights: Vec<f64>,
    /// Class-averaged top-1 on the search set.
    metric: f64,
    evaluated: usize,
    grid_step: f64,
}

fn read_dumps(paths: &[PathBuf]) -> anyhow::Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_dump(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(records)
}

pub fn vote_search(a: VoteSearch) -> anyhow::Result<()> {
    let preds = align(&read_dumps(&a.predictions)?)?;
    let labels = preds
        .labels
        .as_ref()
        .context("validation predictions must carry labels")?;
    let search = search_weights(&preds.matrices, labels, a.grid_step)?;
    let file = VoteFile {
        model_ids: preds.model_ids.clone(),
        weights: search.weights.weights.clone(),
        metric: search.metric,
        evaluated: search.evaluated,
        grid_step: search.grid_step,
    };
    for (id, w) in file.model_ids.iter().zip(&file.weights) {
        println!("  {id:<20} {w:.3}");
    }
    println!(
        "class-averaged top-1 {:.4} over {} samples ({} weight vectors)",
        search.metric,
        labels.len(),
        search.evaluated
    );
    let out = output_path(a.common.out.as_deref(), "voting/weights.json");
    write_file(&out, &(serde_json::to_string_pretty(&file)? + "\n"))?;
    result_line(&out);
    Ok(())
}

fn objects_of(preds: &AlignedPredictions) -> Option<Vec<String>> {
    preds.objects.iter().cloned().collect()
}

pub fn vote_apply(a: VoteApply) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    let file: VoteFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.weights.display()))?;
    let preds = align(&read_dumps(&a.predictions)?)?;
    let mut matrices = Vec::new();
    for id in &file.model_ids {
        match preds.model(id) {
            Some(m) => matrices.push(m.clone()),
            None => bail!(Usage(format!("the dumps have no predictions for model `{id}`"))),
        }
    }
    let vote = weighted_vote(&matrices, &EnsembleWeights::new(file.weights.clone())?)?;
    let objects = objects_of(&preds);
    let records = records_for_model(
        &a.model_id,
        &preds.sample_ids,
        &vote,
        preds.labels.as_deref(),
        objects.as_deref(),
    );
    let out = output_path(a.common.out.as_deref(), "voting/predictions.jsonl");
    write_file(&out, &to_jsonl(&records))?;
    println!("voted {} samples over {} models", records.len(), matrices.len());
    result_line(&out);
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "val" => Ok(Split::Val),
        other => Err(Usage(format!("--split must be train, test or val, got `{other}`")).into()),
    }
}

fn model_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

pub fn run(a: EvalRun) -> anyhow::Result<()> {
    let split = parse_split(&a.split)?;
    let mut manifest =
        DatasetManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    if let Some(object) = &a.object {
        let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
        manifest = manifest.restrict_to_object(&taxonomy, object)?;
    }
    let source = image_source(&a.images, a.common.seed);
    let dir = output_path(a.common.out.as_deref(), "eval");
    let mut dump = Vec::new();
    let mut rows = Vec::new();
    for path in &a.checkpoint {
        let (model, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let class_names = model.class_names().to_vec();
        let (set, skipped) = TrainingSet::from_records(
            manifest.split(split),
            &class_names,
            source.as_ref(),
            model.spec().input_size,
        )?;
        report_skipped(&skipped);
        if set.is_empty() {
            bail!(statechef::manifest::ManifestError::InvalidRecord {
                id: a.split.clone(),
                message: "no readable records in this split".into(),
            });
        }
        let probs = predict_set(&model, &set)?;
        let id = model_id_of(path);
        let object_by_id: BTreeMap<&str, &str> = manifest
            .records
            .iter()
            .map(|r| (r.id.as_str(), r.object.as_str()))
            .collect();
        let objects: Vec<String> = set.ids.iter().map(|i| object_by_id[i.as_str()].to_string()).collect();
        dump.extend(records_for_model(
            &id,
            &set.ids,
            &probs,
            Some(&set.labels),
            Some(&objects),
        ));
        let report = evaluate(probs.view(), &set.labels, &class_names)?;
        println!(
            "{id}: {} samples, top-1 {:.3}, class-averaged top-1 {:.3}",
            report.sample_count, report.micro_accuracy, report.macro_accuracy
        );
        write_file(
            &dir.join(format!("report-{id}.json")),
            &(serde_json::to_string_pretty(&report)? + "\n"),
        )?;
        rows.push(ReportRow::from_report(&id, &report));
    }
    let rows_text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect();
    write_file(&dir.join("rows.jsonl"), &rows_text)?;
    let dump_path = dir.join("predictions.jsonl");
    write_file(&dump_path, &to_jsonl(&dump))?;
    result_line(&dump_path);
    Ok(())
}

fn is_dump(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .is_some_and(|v| v.get("probs").is_some())
}

pub fn report(a: EvalReport) -> anyhow::Result<()> {
    let layout: Layout = a.layout.parse().map_err(|e| Usage(format!("--layout: {e}")))?;
    let mut rows = Vec::new();
    let mut dump = Vec::new();
    for p in &a.inputs {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        if is_dump(&text) {
            dump.extend(statechef::predictions::parse_dump(&text).with_context(|| format!("parsing {}", p.display()))?);
        } else {
            rows.extend(parse_rows(&text).with_context(|| format!("parsing {}", p.display()))?);
        }
    }
    if !dump.is_empty() {
        let preds = align(&dump)?;
        let model_id = match &a.model_id {
            Some(m) => m.clone(),
            None => preds
                .model_ids
                .iter()
                .find(|m| Some(*m) != a.voting_id.as_ref())
                .cloned()
                .context("no model to report")?,
        };
        let names: Vec<String> = (0..preds.class_count()).map(|i| format!("class{i}")).collect();
        rows.extend(object_rows(&preds, &names, &model_id, a.voting_id.as_deref())?);
    }
    let table = render_rows(&rows, layout)?;
    print!("{}", table.text());
    if let Some(out) = &a.common.out {
        write_file(out, &table.to_json())?;
        result_line(out);
    }
    Ok(())
}
