mod common;

use std::collections::BTreeMap;

use common::checks::*;
use statechef::checkpoint::{load_checkpoint, read_meta, BN_POLICY};
use statechef::dataset::{SyntheticImageSource, TrainingSet};
use statechef::manifest::{DatasetManifest, SampleRecord, Source, SplitRatios};
use statechef::model::{build_model, FreezeScope, ModelSpec, ParamGroup};
use statechef::taxonomy::Taxonomy;
use statechef::training::*;

#[test]
fn whole_dataset_schedule_fields() {
    let s = whole_dataset_schedule();
    assert_eq!(s.stages.len(), 2);
    let expected = [
        (FreezeScope::BackboneOnly, 0.001, 100),
        (FreezeScope::NoFreeze, 0.000005, 250),
    ];
    for (stage, (scope, lr, epochs)) in s.stages.iter().zip(expected) {
        assert_eq!(stage.freeze_scope, scope);
        assert_eq!(stage.learning_rate, lr);
        assert_eq!(stage.epochs, epochs);
        assert_eq!(stage.beta1, 0.9);
        assert_eq!(stage.beta2, 0.999);
        assert!(stage.l2_coefficient > 0.0);
        assert!(stage.augmentation.is_enabled());
        assert_eq!(stage.batch_size, 32);
    }
    assert!(!FreezeScope::BackboneOnly.trains(ParamGroup::Backbone));
    assert!(FreezeScope::BackboneOnly.trains(ParamGroup::Added));
}

#[test]
fn object_finetune_schedule_fields() {
    let s = object_finetune_schedule();
    let expected = [
        (FreezeScope::AllButFinal, 0.01, 40),
        (FreezeScope::AllButFinal, 0.001, 80),
        (FreezeScope::AddedLayersUnfrozen, 0.00001, 120),
        (FreezeScope::NoFreeze, 0.000005, 160),
    ];
    assert_eq!(s.stages.len(), 4);
    for (stage, (scope, lr, epochs)) in s.stages.iter().zip(expected) {
        assert_eq!(
            (stage.freeze_scope, stage.learning_rate, stage.epochs),
            (scope, lr, epochs)
        );
        assert_eq!((stage.beta1, stage.beta2), (0.9, 0.999));
        assert!(stage.l2_coefficient > 0.0 && stage.augmentation.is_enabled());
    }
    // Stages 1 and 2 train only the softmax layer, stage 3 adds the head layers.
    assert_eq!(
        frozen_groups(s.stages[0].freeze_scope),
        vec![ParamGroup::Backbone, ParamGroup::Added]
    );
    assert_eq!(frozen_groups(s.stages[2].freeze_scope), vec![ParamGroup::Backbone]);
    assert!(frozen_groups(s.stages[3].freeze_scope).is_empty());
    assert_eq!(s.total_epochs(), 400);
}

#[test]
fn schedule_json_round_trip() {
    let s = object_finetune_schedule();
    let back: Schedule = serde_json::from_str(&s.to_json()).unwrap();
    assert_eq!(back, s);
    let minimal: Schedule = serde_json::from_str(
        r#"{"name":"x","stages":[{"name":"a","freeze_scope":"none","learning_rate":0.1,"epochs":2}]}"#,
    )
    .unwrap();
    assert_eq!(minimal.stages[0].beta1, 0.9);
    assert_eq!(minimal.stages[0].batch_size, 32);
}

#[test]
fn freeze_bit_exactness() {
    let outcomes = freeze_check();
    assert_eq!(outcomes.len(), 6);
    for o in &outcomes {
        assert!(o.ok(), "{o:?}");
    }
    assert!(outcomes
        .iter()
        .any(|o| o.scope == FreezeScope::AllButFinal && o.frozen_count > 0));
}

#[test]
fn overfit_reaches_95_percent() {
    let run = overfit_run();
    assert!(run.train_top1 >= 0.95, "train top-1 {}", run.train_top1);
    let first = run.history.first().unwrap().train_loss;
    let last = run.history.last().unwrap().train_loss;
    assert!(last <= first, "{last} > {first}");
    assert_eq!(run.history.len(), overfit_schedule().total_epochs());
}

#[test]
fn reproducible_and_worker_independent() {
    let set = TrainingSet::synthetic(11, 3, (16, 16), 4);
    let stage = TrainingStage::new("s", FreezeScope::NoFreeze, 0.01, 2);
    let run = |workers: usize| {
        let mut m = build_model(ModelSpec::tiny(11, 6)).unwrap();
        run_stage(&mut m, &set, None, &stage, 0, 5, RunOptions { workers }, &mut |_, _| {
            Ok(())
        })
        .unwrap();
        m.snapshot_parameters()
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
}

fn object_manifests(taxonomy: &Taxonomy) -> BTreeMap<String, DatasetManifest> {
    let mut out = BTreeMap::new();
    for object in finetune_objects(taxonomy) {
        let states = taxonomy.admissible_states(&object).unwrap();
        let records: Vec<SampleRecord> = states
            .iter()
            .flat_map(|s| {
                let object = object.clone();
                (0..4).map(move |i| {
                    SampleRecord::new(
                        format!("{object}-{}-{i}", s.name),
                        "",
                        object.clone(),
                        s.name.clone(),
                        Source::Synthetic,
                    )
                })
            })
            .collect();
        let m = DatasetManifest {
            records,
            meta: Default::default(),
        };
        out.insert(
            object,
            m.stratified_split(SplitRatios::new(0.5, 0.25, 0.25).unwrap(), 1, false)
                .unwrap(),
        );
    }
    out
}

#[test]
fn sixteen_object_models() {
    let taxonomy = Taxonomy::canonical();
    let base = build_model(ModelSpec::tiny(11, 12)).unwrap();
    let manifests = object_manifests(&taxonomy);
    let schedule = object_finetune_schedule().with_epochs(&[1, 1, 1, 1]);
    let dir = tempfile::tempdir().unwrap();
    let job = ObjectTraining {
        taxonomy: &taxonomy,
        base: &base,
        manifests: &manifests,
        schedule: &schedule,
        source: &SyntheticImageSource { seed: 2 },
        seed: 3,
        options: RunOptions::default(),
        output: Some(dir.path()),
    };
    let models = train_object_models(&job).unwrap();
    assert_eq!(models.len(), 16);
    assert!(!models.contains_key("dough"));
    assert_eq!(models["garlic"].model.class_count(), 5);
    assert_eq!(models["milk"].model.class_count(), 2);
    for (object, m) in &models {
        assert_eq!(m.model.class_count(), taxonomy.admissible_states(object).unwrap().len());
        assert_eq!(m.history.len(), 4);
        let states: Vec<String> = taxonomy
            .admissible_states(object)
            .unwrap()
            .iter()
            .map(|c| c.name.clone())
            .collect();
        assert_eq!(m.model.class_names(), states.as_slice());
    }
    // Stage 1 leaves the backbone as loaded from the base model.
    let (stage1, meta) = load_checkpoint(&dir.path().join("garlic").join("garlic-stage1.ckpt")).unwrap();
    assert_eq!(
        stage1.snapshot_parameters().group_checksum(ParamGroup::Backbone),
        base.snapshot_parameters().group_checksum(ParamGroup::Backbone)
    );
    assert_eq!(meta.bn_policy, BN_POLICY);
    assert_eq!(
        read_meta(&dir.path().join("garlic").join("garlic-best.ckpt"))
            .unwrap()
            .class_names
            .len(),
        5
    );

    let mut missing = manifests.clone();
    missing.remove("tomato");
    let job = ObjectTraining {
        manifests: &missing,
        output: None,
        ..job
    };
    assert!(matches!(train_object_models(&job), Err(TrainingError::MissingManifest(o)) if o == "tomato"));
    let wrong = build_model(ModelSpec::tiny(5, 1)).unwrap();
    let job = ObjectTraining {
        base: &wrong,
        manifests: &manifests,
        ..job
    };
    assert!(matches!(
        train_object_models(&job),
        Err(TrainingError::ClassMismatch { .. })
    ));
}

#[test]
fn run_schedule_writes_checkpoints_and_history() {
    let set = TrainingSet::synthetic(11, 2, (16, 16), 9);
    let mut model = build_model(ModelSpec::tiny(11, 2)).unwrap();
    let schedule = whole_dataset_schedule().with_epochs(&[2, 1]);
    let dir = tempfile::tempdir().unwrap();
    let layout = OutputLayout {
        dir: dir.path().to_path_buf(),
    };
    let history = run_schedule(
        &mut model,
        &set,
        Some(&set),
        &schedule,
        1,
        RunOptions::default(),
        Some(&layout),
    )
    .unwrap();
    assert_eq!(history.len(), 3);
    assert!(history.epochs.iter().all(|r| r.val_accuracy.is_some()));
    for i in 0..2 {
        assert!(layout.stage_checkpoint("whole", i).exists());
    }
    let (reloaded, meta) = load_checkpoint(&layout.stage_checkpoint("whole", 1)).unwrap();
    assert_eq!(reloaded.snapshot_parameters(), model.snapshot_parameters());
    assert_eq!(meta.truncation, ModelSpec::tiny(11, 2).backbone.truncation);
    assert!(layout.best_checkpoint("whole").exists());
    let text = std::fs::read_to_string(layout.history("whole")).unwrap();
    assert_eq!(TrainingHistory::from_jsonl(&text).unwrap(), history);
}
