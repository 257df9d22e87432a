use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::Context;
use statechef::checkpoint::load_checkpoint;
use statechef::manifest::DatasetManifest;
use statechef_labeling::{
    propose_labels, serve as serve_http, AppState, PredictorEngine, ProposalStatus, ProposalStore,
};

use super::{ensure_parent, image_source, load_taxonomy, report_skipped, result_line};
use crate::args::*;
use crate::config::output_path;
use crate::Usage;

pub fn propose(a: LabelPropose) -> anyhow::Result<()> {
    if a.k == 0 {
        return Err(Usage("--k must be at least 1".into()).into());
    }
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let dir = output_path(a.store.as_deref(), "labeling");
    let mut store = ProposalStore::open(&dir, taxonomy)?;
    let (model, _) = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let manifest = DatasetManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let source = image_source(&a.images, a.common.seed);
    let batch = propose_labels(
        &model,
        model.class_names(),
        &manifest.records,
        source.as_ref(),
        model.spec().input_size,
        a.k,
        &a.checkpoint.display().to_string(),
    )?;
    report_skipped(&batch.skipped);
    let added = store.add_proposals(&a.job_id, batch.proposals)?;
    let counts = store.counts();
    println!("queued {added} proposals; {} pending in the store", counts.pending);
    result_line(&dir);
    Ok(())
}

pub fn serve(a: LabelServe) -> anyhow::Result<()> {
    let addr: SocketAddr = a.addr.parse().map_err(|e| Usage(format!("--addr: {e}")))?;
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let dir = output_path(a.store.as_deref(), "labeling");
    let store = ProposalStore::open(&dir, taxonomy)?;
    let (model, _) = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let size = model.spec().input_size;
    let engine = PredictorEngine {
        class_names: model.class_names().to_vec(),
        predictor: model,
        source: image_source(&a.images, a.common.seed),
        size,
        model_ref: a.checkpoint.display().to_string(),
    };
    let images = Arc::from(image_source(&a.images, a.common.seed));
    let state = AppState::new(store, Arc::new(engine), images, size);
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    println!("serving {} on http://{addr}", dir.display());
    runtime.block_on(serve_http(addr, state)).context("http server")?;
    Ok(())
}

pub fn export(a: LabelExport) -> anyhow::Result<()> {
    let status = match a.status.as_str() {
        "all" => None,
        s => Some(
            s.parse::<ProposalStatus>()
                .map_err(|_| Usage(format!("--status: unknown status `{s}`")))?,
        ),
    };
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let dir = output_path(a.store.as_deref(), "labeling");
    let store = ProposalStore::open(&dir, taxonomy)?;
    let manifest = store.export(status)?;
    let out = output_path(a.common.out.as_deref(), "labeling/export.jsonl");
    ensure_parent(&out)?;
    manifest.save(&out)?;
    println!("exported {} records", manifest.len());
    result_line(&out);
    Ok(())
}
