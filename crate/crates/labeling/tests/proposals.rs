use statechef::dataset::{DataError, FileImageSource, SyntheticImageSource};
use statechef::manifest::{DatasetManifest, SampleRecord, Source};
use statechef::metrics::argmax;
use statechef::model::{build_model, ModelSpec};
use statechef::taxonomy::{Taxonomy, CLASS_NAMES};
use statechef::training::finetune_objects;
use statechef_labeling::{propose_labels, Decision, ProposalStatus, ProposalStore, ProposeError};

fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Candidate pool of unlabeled images: 60 per object, drawn down to 50.
fn imagenet_subset(taxonomy: &Taxonomy) -> DatasetManifest {
    let categories = finetune_objects(taxonomy);
    let mut pool = Vec::new();
    for (o, object) in categories.iter().enumerate() {
        for i in 0..60 {
            // The synthetic source renders by state; the proposal ignores it.
            let state = CLASS_NAMES[(o + i) % CLASS_NAMES.len()];
            pool.push(SampleRecord::new(
                format!("n{o:02}-{i:03}"),
                format!("imagenet/{object}/{i:03}.jpg"),
                object.clone(),
                state,
                Source::Imagenet,
            ));
        }
    }
    DatasetManifest {
        records: pool,
        meta: Default::default(),
    }
    .sample_subset(&categories, 50, 7)
    .unwrap()
}

#[test]
fn one_proposal_per_subset_record() {
    let taxonomy = Taxonomy::canonical();
    let subset = imagenet_subset(&taxonomy);
    assert_eq!(subset.records.len(), 800);
    let model = build_model(ModelSpec::tiny(11, 3)).unwrap();
    let batch = propose_labels(
        &model,
        &class_names(),
        &subset.records,
        &SyntheticImageSource { seed: 1 },
        (16, 16),
        3,
        "tiny",
    )
    .unwrap();
    assert_eq!(batch.proposals.len(), 800);
    assert!(batch.skipped.is_empty());
    for p in &batch.proposals {
        assert_eq!(p.proposed.len(), 3);
        assert!(p.proposed.windows(2).all(|w| w[0].probability >= w[1].probability));
        assert_eq!(p.status, ProposalStatus::Pending);
    }
    let dir = tempfile::tempdir().unwrap();
    let mut store = ProposalStore::open(dir.path(), taxonomy).unwrap();
    assert_eq!(store.add_proposals("job-1", batch.proposals).unwrap(), 800);
    assert_eq!(store.counts().pending, 800);
}

#[test]
fn k_one_is_the_argmax() {
    let model = build_model(ModelSpec::tiny(11, 5)).unwrap();
    let records: Vec<SampleRecord> = (0..20)
        .map(|i| SampleRecord::new(format!("s{i}"), "", "egg", CLASS_NAMES[i % 11], Source::Synthetic))
        .collect();
    let source = SyntheticImageSource { seed: 2 };
    let one = propose_labels(&model, &class_names(), &records, &source, (16, 16), 1, "m").unwrap();
    let all = propose_labels(&model, &class_names(), &records, &source, (16, 16), 11, "m").unwrap();
    for (a, b) in one.proposals.iter().zip(&all.proposals) {
        assert_eq!(a.proposed.len(), 1);
        let probs: Vec<f64> = CLASS_NAMES
            .iter()
            .map(|c| b.proposed.iter().find(|s| s.state == *c).unwrap().probability)
            .collect();
        assert_eq!(a.proposed[0].state, CLASS_NAMES[argmax(&probs)]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn bad_k_and_unreadable_images() {
    let model = build_model(ModelSpec::tiny(11, 5)).unwrap();
    let records = vec![SampleRecord::new(
        "x",
        "/nonexistent/x.png",
        "egg",
        "whole",
        Source::Imagenet,
    )];
    let names = class_names();
    for k in [0, 12] {
        assert!(matches!(
            propose_labels(&model, &names, &records, &FileImageSource::new(None), (16, 16), k, "m"),
            Err(ProposeError::BadK { .. })
        ));
    }
    let batch = propose_labels(&model, &names, &records, &FileImageSource::new(None), (16, 16), 3, "m").unwrap();
    assert!(batch.proposals.is_empty());
    assert_eq!(batch.skipped.len(), 1);
    assert!(matches!(
        batch.skipped[0].1,
        DataError::Io { .. } | DataError::NotLocal { .. }
    ));
}

fn reviewed_store(dir: &std::path::Path) -> ProposalStore {
    let model = build_model(ModelSpec::tiny(11, 9)).unwrap();
    let records: Vec<SampleRecord> = (0..5)
        .map(|i| {
            SampleRecord::new(
                format!("s{i}"),
                format!("s{i}.png"),
                "tomato",
                "whole",
                Source::Imagenet,
            )
        })
        .collect();
    let batch = propose_labels(
        &model,
        &class_names(),
        &records,
        &SyntheticImageSource::default(),
        (16, 16),
        3,
        "m",
    )
    .unwrap();
    let mut store = ProposalStore::open(dir, Taxonomy::canonical()).unwrap();
    store.add_proposals("job-1", batch.proposals).unwrap();
    store
}

#[test]
fn export_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = reviewed_store(dir.path());
    assert!(store.export(None).unwrap().records.is_empty());
    let s = store.open_session("ana").unwrap();
    let decisions = [
        Decision::Accept,
        Decision::Discard,
        Decision::Accept,
        Decision::Discard,
        Decision::Accept,
    ];
    for (v, d) in decisions.into_iter().enumerate() {
        let next = store.next(&s.session_id).unwrap().unwrap().proposal_id.clone();
        store.decide(&s.session_id, &next, d, v as u64).unwrap();
    }
    assert!(store.next(&s.session_id).unwrap().is_none());
    let exported = store.export(Some(ProposalStatus::Accepted)).unwrap();
    assert_eq!(exported.records.len(), 3);
    assert_eq!(
        exported.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
        vec!["s0", "s2", "s4"]
    );
    for r in &exported.records {
        assert_eq!(r.state, store.proposal(&r.id).unwrap().top_state());
    }
}

#[test]
fn export_reimport_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = reviewed_store(dir.path());
    let s = store.open_session("ana").unwrap();
    store.decide(&s.session_id, "s0", Decision::Accept, 0).unwrap();
    let top = store.proposal("s1").unwrap().top_state().to_string();
    let alt = if top == "sliced" { "diced" } else { "sliced" };
    store
        .decide(&s.session_id, "s1", Decision::Override { state: alt.into() }, 1)
        .unwrap();
    store.decide(&s.session_id, "s2", Decision::Discard, 2).unwrap();

    let exported = store.export(None).unwrap();
    assert_eq!(exported.records.len(), 2);
    let overridden = &exported.records[1];
    assert_eq!(overridden.state, alt);
    let origin = overridden.label_origin.as_ref().unwrap();
    assert_eq!(origin.review, "overridden");
    assert_eq!(origin.proposed_state, top);
    assert_eq!(origin.reviewer, "ana");

    let reparsed = DatasetManifest::from_jsonl(&exported.to_jsonl()).unwrap();
    assert_eq!(reparsed, exported);
    let path = dir.path().join("export.jsonl");
    exported.save(&path).unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap(), exported);
}
