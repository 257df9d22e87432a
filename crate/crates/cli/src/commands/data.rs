use anyhow::Context;
use serde_json::json;
use statechef::manifest::{import_crawl_list, DatasetManifest, SplitRatios};
use statechef::training::finetune_objects;

use super::{ensure_parent, load_taxonomy, parse_list, result_line, write_file};
use crate::args::*;
use crate::config::output_path;
use crate::Usage;

pub fn taxonomy_validate(a: TaxonomyValidate) -> anyhow::Result<()> {
    let taxonomy = load_taxonomy(a.path.as_deref())?;
    println!(
        "taxonomy {}: {} fine states, {} classes, {} objects",
        &taxonomy.digest()[..12],
        taxonomy.fine_states().len(),
        taxonomy.classes().len(),
        taxonomy.objects().len()
    );
    for object in taxonomy.objects() {
        let states: Vec<&str> = object.admissible_states.iter().map(|c| c.name.as_str()).collect();
        println!("  {:<10} {}", object.name, states.join(", "));
    }
    if let Some(out) = &a.common.out {
        ensure_parent(out)?;
        taxonomy.save(out)?;
        result_line(out);
    }
    Ok(())
}

pub fn manifest_import(a: ManifestImport) -> anyhow::Result<()> {
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    taxonomy.object(&a.object)?;
    let state = match taxonomy.class(&a.state) {
        Ok(c) => c.name.clone(),
        Err(_) => taxonomy
            .class_of_fine_state(&a.state)
            .map(|c| c.name.clone())
            .ok_or_else(|| Usage(format!("`{}` is neither a state class nor a fine state", a.state)))?,
    };
    let import = import_crawl_list(&a.list, &a.object, &state)?;
    for e in &import.errors {
        eprintln!("{}:{}: {}", a.list.display(), e.line, e.message);
    }
    let out = output_path(a.common.out.as_deref(), "manifest.jsonl");
    ensure_parent(&out)?;
    if a.append {
        DatasetManifest::append_to(&out, &import.records)?;
    } else {
        DatasetManifest::new(import.records.clone()).save(&out)?;
    }
    println!(
        "imported {} records as {}/{state}; {} lines rejected",
        import.records.len(),
        a.object,
        import.errors.len()
    );
    result_line(&out);
    Ok(())
}

pub fn manifest_split(a: ManifestSplit) -> anyhow::Result<()> {
    let ratios: SplitRatios = a.ratios.parse().map_err(|e| Usage(format!("--ratios: {e}")))?;
    let manifest = DatasetManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let split = manifest.stratified_split(ratios, a.common.seed, a.reassign)?;
    let out = output_path(a.common.out.as_deref(), "manifest.split.jsonl");
    ensure_parent(&out)?;
    split.save(&out)?;
    let [train, test, val] = split.split_counts();
    println!("split {} records: train {train}, test {test}, val {val}", split.len());
    result_line(&out);
    Ok(())
}

pub fn manifest_stats(a: ManifestStats) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let hist = manifest.class_stats();
    let [train, test, val] = manifest.split_counts();
    println!("{} records", manifest.len());
    for (class, n) in hist.classes.iter().zip(&hist.counts) {
        println!("  {class:<9} {n:>6}");
    }
    for (state, n) in &hist.unrecognized {
        println!("  {state:<9} {n:>6}  (not a training class)");
    }
    println!(
        "split: train {train}, test {test}, val {val}, unassigned {}",
        manifest.len() - train - test - val
    );
    if let Some(out) = &a.common.out {
        let doc = json!({
            "total": manifest.len(),
            "classes": hist.classes.iter().zip(&hist.counts).collect::<std::collections::BTreeMap<_, _>>(),
            "unrecognized": hist.unrecognized,
            "splits": {"train": train, "test": test, "val": val},
        });
        write_file(out, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
        result_line(out);
    }
    Ok(())
}

pub fn manifest_sample(a: ManifestSample) -> anyhow::Result<()> {
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let objects: Vec<String> = match &a.objects {
        Some(list) => parse_list(list, "object list")?,
        None => finetune_objects(&taxonomy),
    };
    let manifest = DatasetManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let subset = manifest.sample_subset(&objects, a.per_object, a.common.seed)?;
    let out = output_path(a.common.out.as_deref(), "manifest.subset.jsonl");
    ensure_parent(&out)?;
    subset.save(&out)?;
    println!(
        "sampled {} records ({} objects x {})",
        subset.len(),
        objects.len(),
        a.per_object
    );
    result_line(&out);
    Ok(())
}
