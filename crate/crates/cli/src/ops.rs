//! Operations shared by the single-step subcommands and the pipeline.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};

use heatlevel::clustering::{
    derive_levels, label_corpus, points_1d, sample_eval_set, select_k, EvalSet, HeatLevel, HeatLevelScheme, KSelection,
};
use heatlevel::corpus::{
    build_triplets, clean_events, events_to_jsonl, load_events, summarize_corpus, CleanConfig, EventCorpus,
    EventFormat, SummarizeConfig, TripletSet,
};
use heatlevel::embedding::{index_corpus, Embedder, VectorStore};
use heatlevel::evalharness::{
    emit_report, load_run, run_scenario, write_run_artifacts, ReportEntry, ReportFormat, RunResult, ScenarioDeps,
    ScenarioKind, ScenarioSpec,
};
use heatlevel::fsio;
use heatlevel::llm::build_client;

use crate::config::{failure_policy, ClusterSection, PipelineConfig};

pub fn load_corpus(path: &Path, format: Option<&str>) -> Result<EventCorpus> {
    let format = match format {
        Some(f) => EventFormat::parse(f)?,
        None => EventFormat::from_path(path),
    };
    load_events(path, format).with_context(|| format!("loading events from {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fsio::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_events(path: &Path, corpus: &EventCorpus) -> Result<()> {
    write_text(path, &events_to_jsonl(&corpus.events)?)
}

pub fn clean(corpus: EventCorpus, config: &PipelineConfig) -> Result<EventCorpus> {
    config.category_set()?.validate(&corpus)?;
    let cleaned = clean_events(
        corpus,
        &CleanConfig {
            garbled_threshold: config.clean.garbled_threshold,
        },
    );
    info!(
        "cleaned corpus: {} raw, {} removed, {} kept",
        cleaned.source_meta.raw,
        cleaned.source_meta.removed,
        cleaned.events.len()
    );
    Ok(cleaned)
}

pub fn summarize(corpus: EventCorpus, config: &PipelineConfig, model: &str) -> Result<EventCorpus> {
    let model_config = config.model(model)?;
    let client = build_client(&model_config, None)?;
    let outcome = summarize_corpus(
        corpus,
        client.as_ref(),
        &SummarizeConfig {
            max_len: config.summarize.max_len,
        },
        failure_policy(&config.summarize.on_failure)?,
        config.summarize.parallelism,
    )?;
    for failure in &outcome.failures {
        warn!("{failure}");
    }
    Ok(outcome.corpus)
}

pub fn triplets(corpus: &EventCorpus, cap: usize, seed: u64) -> Result<TripletSet> {
    let set = build_triplets(corpus, cap, seed)?;
    for w in &set.warnings {
        warn!("{w}");
    }
    info!(
        "built {} triplets over {} categories",
        set.triplets.len(),
        set.per_category_counts.len()
    );
    Ok(set)
}

pub fn fit_levels(corpus: &EventCorpus, section: &ClusterSection, seed: u64) -> Result<(KSelection, HeatLevelScheme)> {
    let heats: Vec<f64> = corpus.events.iter().map(|e| e.heat_index).collect();
    let points = points_1d(&heats);
    let selection = select_k(&points, section.k_min..=section.k_max, &section.params(seed))?;
    let scheme = derive_levels(&selection.model, &points)?;
    info!(
        "selected k = {} with boundaries {:?}",
        selection.chosen, scheme.boundaries
    );
    Ok((selection, scheme))
}

pub fn label(corpus: &EventCorpus, scheme: &HeatLevelScheme) -> Result<EventCorpus> {
    Ok(label_corpus(corpus, scheme)?)
}

pub fn sample_eval(labeled: &EventCorpus, scheme: &HeatLevelScheme, per_level: usize, seed: u64) -> Result<EvalSet> {
    Ok(sample_eval_set(labeled, scheme, per_level, seed)?)
}

pub fn load_evalset(path: &Path) -> Result<EvalSet> {
    let corpus = load_corpus(path, Some("jsonl"))?;
    let mut per_level: HashMap<HeatLevel, usize> = HashMap::new();
    for e in &corpus.events {
        let level = e
            .level
            .with_context(|| format!("evaluation event {:?} has no level", e.id))?;
        *per_level.entry(level).or_default() += 1;
    }
    Ok(EvalSet {
        n_per_level: per_level.values().copied().min().unwrap_or(0),
        records: corpus.events,
    })
}

pub fn build_index(labeled: &EventCorpus, embedder: &dyn Embedder) -> Result<VectorStore> {
    let store = index_corpus(labeled, embedder)?;
    info!("indexed {} events with {}", store.len(), embedder.describe());
    Ok(store)
}

pub fn load_store(path: &Path) -> Result<VectorStore> {
    let (store, warnings) =
        VectorStore::load_checked(path).with_context(|| format!("loading store {}", path.display()))?;
    for w in warnings {
        warn!("{}: {w}", path.display());
    }
    Ok(store)
}

/// Inputs a scenario may draw on.
pub struct EvalInputs<'a> {
    pub evalset: &'a EvalSet,
    pub scheme: &'a HeatLevelScheme,
    pub store: Option<&'a VectorStore>,
    pub pool: Option<&'a EventCorpus>,
    pub embedder: Option<&'a dyn Embedder>,
}

pub fn run_one(
    config: &PipelineConfig,
    inputs: &EvalInputs<'_>,
    kind: ScenarioKind,
    model: Option<&str>,
    seed: u64,
) -> Result<RunResult> {
    let templates = config.templates()?;
    let truth: HashMap<String, HeatLevel> = inputs
        .evalset
        .records
        .iter()
        .filter_map(|e| e.level.map(|l| (e.id.clone(), l)))
        .collect();
    let (client, model_hash) = match (kind.uses_llm(), model) {
        (true, Some(name)) => {
            let mc = config.model(name)?;
            (Some(build_client(&mc, Some(&truth))?), Some(mc.content_hash()))
        }
        (true, None) => bail!("scenario {kind} needs --model"),
        (false, _) => (None, None),
    };
    let deps = ScenarioDeps {
        scheme: inputs.scheme,
        templates: &templates,
        store: inputs.store,
        embedder: inputs.embedder,
        client: client.as_deref(),
        case_pool: inputs.pool,
        parallelism: config.eval.parallelism,
        model_config_hash: model_hash,
    };
    let spec = ScenarioSpec {
        k: config.eval.k,
        seed,
        ..ScenarioSpec::new(kind)
    };
    let run = run_scenario(inputs.evalset, &spec, &deps)?;
    info!("{}: {} predictions", run.manifest.run_id, run.records.len());
    Ok(run)
}

pub fn save_run(runs_dir: &Path, run: &RunResult) -> Result<ReportEntry> {
    let dir = runs_dir.join(&run.manifest.run_id);
    let entry = write_run_artifacts(&dir, run)?;
    info!(
        "{}: accuracy {:.2}% ({} of {})",
        run.manifest.run_id, entry.metrics.overall_accuracy, entry.metrics.overall.correct, entry.metrics.overall.total
    );
    Ok(entry)
}

/// Report entries for every run directory under `runs_dir`, sorted by id.
pub fn collect_runs(runs_dir: &Path) -> Result<Vec<(String, ReportEntry)>> {
    let mut out = Vec::new();
    if !runs_dir.is_dir() {
        return Ok(out);
    }
    let mut dirs: Vec<_> = fs::read_dir(runs_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    for dir in dirs {
        let run = load_run(&dir).with_context(|| format!("loading run {}", dir.display()))?;
        out.push((run.manifest.run_id.clone(), ReportEntry::from_run(&run)?));
    }
    Ok(out)
}

/// Write `report.md`, `report.csv` and `plotdata.csv` for `entries`.
pub fn write_reports(dir: &Path, entries: &[ReportEntry]) -> Result<()> {
    write_text(&dir.join("report.md"), &emit_report(entries, ReportFormat::Markdown))?;
    write_text(&dir.join("report.csv"), &emit_report(entries, ReportFormat::Csv))?;
    write_text(&dir.join("plotdata.csv"), &emit_report(entries, ReportFormat::PlotData))
}
