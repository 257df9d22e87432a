mod data;
mod eval;
mod label;
mod train;

use std::path::Path;

use anyhow::Context;
use ndarray::{s, Array2};
use statechef::dataset::{FileImageSource, ImageSource, SyntheticImageSource, TrainingSet};
use statechef::ensemble::Predictor;
use statechef::taxonomy::Taxonomy;
use statechef::training::Schedule;

use crate::args::*;
use crate::config::merge;
use crate::Usage;

const PREDICT_BATCH: usize = 32;

pub fn run(command: Command) -> anyhow::Result<()> {
    macro_rules! with_config {
        ($args:expr, $name:literal, $f:path) => {{
            let args = $args;
            let config = args.common.config.clone();
            $f(merge(args, config.as_deref(), $name)?)
        }};
    }
    match command {
        Command::Taxonomy(TaxonomyCommand::Validate(a)) => {
            with_config!(a, "taxonomy validate", data::taxonomy_validate)
        }
        Command::Manifest(ManifestCommand::Import(a)) => with_config!(a, "manifest import", data::manifest_import),
        Command::Manifest(ManifestCommand::Split(a)) => with_config!(a, "manifest split", data::manifest_split),
        Command::Manifest(ManifestCommand::Stats(a)) => with_config!(a, "manifest stats", data::manifest_stats),
        Command::Manifest(ManifestCommand::Sample(a)) => with_config!(a, "manifest sample", data::manifest_sample),
        Command::Train(TrainCommand::Whole(a)) => with_config!(a, "train whole", train::whole),
        Command::Train(TrainCommand::Object(a)) => with_config!(a, "train object", train::object),
        Command::Vote(VoteCommand::Search(a)) => with_config!(a, "vote search", eval::vote_search),
        Command::Vote(VoteCommand::Apply(a)) => with_config!(a, "vote apply", eval::vote_apply),
        Command::Eval(EvalCommand::Run(a)) => with_config!(a, "eval run", eval::run),
        Command::Eval(EvalCommand::Report(a)) => with_config!(a, "eval report", eval::report),
        Command::Label(LabelCommand::Propose(a)) => with_config!(a, "label propose", label::propose),
        Command::Label(LabelCommand::Serve(a)) => with_config!(a, "label serve", label::serve),
        Command::Label(LabelCommand::Export(a)) => with_config!(a, "label export", label::export),
    }
}

fn load_taxonomy(path: Option<&Path>) -> anyhow::Result<Taxonomy> {
    match path {
        Some(p) => Taxonomy::load(p).with_context(|| format!("loading taxonomy {}", p.display())),
        None => Ok(Taxonomy::canonical()),
    }
}

fn image_source(images: &Images, seed: u64) -> Box<dyn ImageSource + Send> {
    if images.synthetic_images {
        Box::new(SyntheticImageSource { seed })
    } else {
        Box::new(FileImageSource::new(images.images_root.clone()))
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> anyhow::Result<Vec<T>> {
    text.split(',')
        .map(|p| p.trim().parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| Usage(format!("cannot parse {what} `{text}`")).into())
}

fn load_schedule(path: Option<&Path>, default: Schedule, epochs: Option<&str>) -> anyhow::Result<Schedule> {
    let mut schedule = match path {
        Some(p) => Schedule::load(p).with_context(|| format!("loading schedule {}", p.display()))?,
        None => default,
    };
    if let Some(text) = epochs {
        let counts: Vec<usize> = parse_list(text, "epoch counts")?;
        if counts.len() != schedule.stages.len() {
            return Err(Usage(format!(
                "schedule `{}` has {} stages but {} epoch counts were given",
                schedule.name,
                schedule.stages.len(),
                counts.len()
            ))
            .into());
        }
        schedule = schedule.with_epochs(&counts);
    }
    Ok(schedule)
}

/// Class probabilities for every image of `set`.
fn predict_set(model: &dyn Predictor, set: &TrainingSet) -> anyhow::Result<Array2<f64>> {
    let mut out = Array2::zeros((set.len(), model.class_count()));
    for start in (0..set.len()).step_by(PREDICT_BATCH) {
        let end = (start + PREDICT_BATCH).min(set.len());
        let batch = set.images.slice(s![start..end, .., .., ..]).to_owned();
        let probs = model.predict(&batch)?;
        out.slice_mut(s![start..end, ..]).assign(&probs);
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display())),
        None => Ok(()),
    }
}

fn report_skipped(skipped: &[(String, statechef::dataset::DataError)]) {
    if skipped.is_empty() {
        return;
    }
    eprintln!("warning: skipped {} unreadable images", skipped.len());
    for (id, e) in skipped.iter().take(5) {
        eprintln!("  {id}: {e}");
    }
}

fn result_line(path: &Path) {
    println!("result: {}", path.display());
}
