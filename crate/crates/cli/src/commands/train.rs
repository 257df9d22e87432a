use std::collections::BTreeMap;

use anyhow::Context;
use statechef::checkpoint::load_checkpoint;
use statechef::dataset::TrainingSet;
use statechef::ensemble::member_specs;
use statechef::manifest::{DatasetManifest, Split};
use statechef::model::{build_model, BackboneSpec, ModelSpec};
use statechef::taxonomy::Taxonomy;
use statechef::training::{
    finetune_objects, object_finetune_schedule, run_schedule, train_object_models, whole_dataset_schedule,
    ObjectTraining, OutputLayout, RunOptions,
};

use super::{image_source, load_schedule, load_taxonomy, report_skipped, result_line};
use crate::args::*;
use crate::config::output_path;
use crate::Usage;

fn base_spec(a: &TrainWhole, class_count: usize) -> anyhow::Result<ModelSpec> {
    let mut spec = match a.model.as_str() {
        "production" => {
            let mut spec = ModelSpec::production();
            spec.backbone = BackboneSpec::production(a.weights.is_some(), a.weights.clone());
            spec.head.class_count = class_count;
            spec
        }
        "tiny" => ModelSpec::tiny(class_count, 0),
        other => return Err(Usage(format!("--model must be `production` or `tiny`, got `{other}`")).into()),
    };
    spec.init_seed = a.common.seed;
    Ok(member_specs(&spec, a.member + 1)
        .pop()
        .expect("member count is at least 1"))
}

pub fn whole(a: TrainWhole) -> anyhow::Result<()> {
    let taxonomy = Taxonomy::canonical();
    let class_names = taxonomy.class_names();
    let spec = base_spec(&a, class_names.len())?;
    if a.model == "production" && a.weights.is_none() {
        eprintln!("warning: no --weights archive; the backbone starts from random initialization");
    }
    let mut model = build_model(spec.clone())?.with_class_names(class_names.clone())?;
    let schedule = load_schedule(a.schedule.as_deref(), whole_dataset_schedule(), a.epochs.as_deref())?;
    let manifest = DatasetManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let source = image_source(&a.images, a.common.seed);
    let (train, skipped) = TrainingSet::from_records(
        manifest.split(Split::Train),
        &class_names,
        source.as_ref(),
        spec.input_size,
    )?;
    report_skipped(&skipped);
    let (val, skipped) = TrainingSet::from_records(
        manifest.split(Split::Val),
        &class_names,
        source.as_ref(),
        spec.input_size,
    )?;
    report_skipped(&skipped);
    let dir = output_path(a.common.out.as_deref(), "runs/whole");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let layout = OutputLayout { dir };
    println!(
        "training {} ({} parameters) on {} images, {} validation, {} epochs",
        schedule.name,
        model.parameter_count(),
        train.len(),
        val.len(),
        schedule.total_epochs()
    );
    let history = run_schedule(
        &mut model,
        &train,
        (!val.is_empty()).then_some(&val),
        &schedule,
        a.common.seed,
        RunOptions {
            workers: a.workers.max(1),
        },
        Some(&layout),
    )?;
    if let Some(last) = history.epochs.last() {
        println!(
            "final train loss {:.4}, train accuracy {:.3}",
            last.train_loss, last.train_accuracy
        );
    }
    let best = history
        .epochs
        .iter()
        .filter_map(|r| r.val_accuracy)
        .fold(None, |b: Option<f64>, v| Some(b.map_or(v, |b| b.max(v))));
    if let Some(best) = best {
        println!("best validation class-averaged accuracy {best:.3}");
    }
    result_line(&layout.stage_checkpoint(&schedule.name, schedule.stages.len() - 1));
    Ok(())
}

pub fn object(a: TrainObject) -> anyhow::Result<()> {
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let (base, _) = load_checkpoint(&a.base).with_context(|| format!("loading {}", a.base.display()))?;
    let schedule = load_schedule(a.schedule.as_deref(), object_finetune_schedule(), a.epochs.as_deref())?;
    let manifest = DatasetManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let mut manifests = BTreeMap::new();
    for object in finetune_objects(&taxonomy) {
        let m = manifest.restrict_to_object(&taxonomy, &object)?;
        manifests.insert(object, m);
    }
    let source = image_source(&a.images, a.common.seed);
    let dir = output_path(a.common.out.as_deref(), "runs/objects");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let job = ObjectTraining {
        taxonomy: &taxonomy,
        base: &base,
        manifests: &manifests,
        schedule: &schedule,
        source: source.as_ref(),
        seed: a.common.seed,
        options: RunOptions {
            workers: a.workers.max(1),
        },
        output: Some(&dir),
    };
    let models = train_object_models(&job)?;
    for (object, m) in &models {
        let val = m.history.epochs.iter().filter_map(|r| r.val_accuracy).last();
        let val = val.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        println!(
            "  {object:<10} {} states, final validation accuracy {val}",
            m.model.class_count()
        );
    }
    println!("trained {} object models", models.len());
    result_line(&dir);
    Ok(())
}
