//! Stage orchestration over a work directory.
//!
//! Layout under `work_dir`:
//!
//! ```text
//! clean/events.jsonl        summarize/events.jsonl     triplets/triplets.jsonl
//! cluster/levels.json       cluster/kselection.csv     cluster/labeled.jsonl
//! cluster/evalset.jsonl     index/store.jsonl          runs/<run id>/...
//! runs/report.md            manifests/<stage>.json     quarantine/<stage>-<ms>/
//! ```
//!
//! A stage writes into `.staging/<stage>/` and its files are renamed into
//! place only after the whole stage succeeded. A failed stage's staging
//! directory is moved to `quarantine/`. The manifest, written last, records
//! a key over the stage parameters and input file hashes; a stage whose key
//! and outputs are unchanged is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use heatlevel::clustering::HeatLevelScheme;
use heatlevel::evalharness::{ReportEntry, ScenarioKind};
use heatlevel::fsio;

use crate::config::PipelineConfig;
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Clean,
    Summarize,
    Triplets,
    Cluster,
    Index,
    Baseline,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Clean,
        Stage::Summarize,
        Stage::Triplets,
        Stage::Cluster,
        Stage::Index,
        Stage::Baseline,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Clean => "clean",
            Stage::Summarize => "summarize",
            Stage::Triplets => "triplets",
            Stage::Cluster => "cluster",
            Stage::Index => "index",
            Stage::Baseline => "baseline",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            anyhow!("unknown stage {s:?} (expected one of clean, summarize, triplets, cluster, index, baseline, eval)")
        })
    }
}

/// `all` or a comma-separated list, returned in pipeline order.
pub fn parse_stages(spec: &str) -> Result<Vec<Stage>> {
    if spec.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut stages = spec
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<Stage>>>()?;
    stages.sort();
    stages.dedup();
    Ok(stages)
}

const CLEAN_EVENTS: &str = "clean/events.jsonl";
const SUMMARIZED: &str = "summarize/events.jsonl";
const TRIPLETS: &str = "triplets/triplets.jsonl";
const LEVELS: &str = "cluster/levels.json";
const KSELECTION: &str = "cluster/kselection.csv";
const LABELED: &str = "cluster/labeled.jsonl";
const EVALSET: &str = "cluster/evalset.jsonl";
const STORE: &str = "index/store.jsonl";
const RUNS: &str = "runs";
/// Rewritten by both the baseline and eval stages, so not tracked as either
/// stage's output.
const AGGREGATE_REPORTS: [&str; 3] = ["report.md", "report.csv", "plotdata.csv"];

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenarios: Option<Vec<String>>,
    pub models: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
    Disabled,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    key: String,
    params: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    completed_unix: u64,
}

struct Plan {
    params: serde_json::Value,
    inputs: Vec<PathBuf>,
}

pub struct Pipeline<'a> {
    config: &'a PipelineConfig,
    work: PathBuf,
    overrides: Overrides,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(fsio::sha256_hex(&bytes))
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a PipelineConfig, overrides: Overrides) -> Self {
        Self {
            config,
            work: config.work_dir.clone(),
            overrides,
        }
    }

    pub fn artifact(&self, rel: &str) -> PathBuf {
        self.work.join(rel)
    }

    fn scenarios(&self) -> Result<Vec<ScenarioKind>> {
        let names = self.overrides.scenarios.as_ref().unwrap_or(&self.config.eval.scenarios);
        let kinds = names
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<ScenarioKind>, _>>()?;
        if let Some(k) = kinds.iter().find(|k| !k.uses_llm()) {
            bail!("scenario {k} is a baseline; run the baseline stage instead");
        }
        Ok(kinds)
    }

    fn models(&self) -> &[String] {
        self.overrides.models.as_deref().unwrap_or(&self.config.eval.models)
    }

    fn corpus_artifact(&self) -> (&'static str, Stage) {
        if self.config.summarize.enabled {
            (SUMMARIZED, Stage::Summarize)
        } else {
            (CLEAN_EVENTS, Stage::Clean)
        }
    }

    /// Existing artifact from an earlier stage, or an error naming that stage.
    fn need(&self, stage: Stage, rel: &str, producer: Stage) -> Result<PathBuf> {
        let path = self.artifact(rel);
        if !path.is_file() {
            bail!(
                "stage {stage} needs {} which is produced by stage \"{producer}\"; run \"{producer}\" first",
                path.display()
            );
        }
        Ok(path)
    }

    fn plan(&self, stage: Stage) -> Result<Option<Plan>> {
        let c = self.config;
        let seeds = c.seeds;
        let plan = match stage {
            Stage::Clean => {
                let corpus = c.corpus.clone().context("config has no corpus path")?;
                if !corpus.is_file() {
                    bail!("corpus file {} not found", corpus.display());
                }
                let mut inputs = vec![corpus];
                inputs.extend(c.categories.clone());
                Plan {
                    params: json!({"clean": c.clean, "format": c.corpus_format}),
                    inputs,
                }
            }
            Stage::Summarize => {
                if !c.summarize.enabled {
                    return Ok(None);
                }
                Plan {
                    params: json!({"summarize": c.summarize, "model": c.model(&c.summarize.model)?.content_hash()}),
                    inputs: vec![self.need(stage, CLEAN_EVENTS, Stage::Clean)?],
                }
            }
            Stage::Triplets => {
                let (rel, producer) = self.corpus_artifact();
                Plan {
                    params: json!({"triplets": c.triplets, "seed": seeds.triplets}),
                    inputs: vec![self.need(stage, rel, producer)?],
                }
            }
            Stage::Cluster => {
                let (rel, producer) = self.corpus_artifact();
                Plan {
                    params: json!({
                        "cluster": c.cluster,
                        "per_level": c.eval.per_level,
                        "seeds": {"clustering": seeds.clustering, "sampling": seeds.sampling},
                    }),
                    inputs: vec![self.need(stage, rel, producer)?],
                }
            }
            Stage::Index => {
                let mut inputs = vec![self.need(stage, LABELED, Stage::Cluster)?];
                inputs.extend(c.embedder.store.clone());
                Plan {
                    params: json!({"embedder": c.embedder}),
                    inputs,
                }
            }
            Stage::Baseline => {
                if !c.eval.baselines {
                    return Ok(None);
                }
                Plan {
                    params: json!({"k": c.eval.k, "embedder": c.embedder}),
                    inputs: vec![
                        self.need(stage, LEVELS, Stage::Cluster)?,
                        self.need(stage, EVALSET, Stage::Cluster)?,
                        self.need(stage, STORE, Stage::Index)?,
                    ],
                }
            }
            Stage::Eval => {
                let scenarios = self.scenarios()?;
                let mut inputs = vec![
                    self.need(stage, LEVELS, Stage::Cluster)?,
                    self.need(stage, EVALSET, Stage::Cluster)?,
                    self.need(stage, LABELED, Stage::Cluster)?,
                ];
                if scenarios.contains(&ScenarioKind::RecalledCases) {
                    inputs.push(self.need(stage, STORE, Stage::Index)?);
                }
                let models = self
                    .models()
                    .iter()
                    .map(|m| Ok((m.clone(), c.model(m)?.content_hash())))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                Plan {
                    params: json!({
                        "scenarios": scenarios,
                        "models": models,
                        "k": c.eval.k,
                        "simulated_seed": seeds.simulated,
                        "embedder": c.embedder,
                        "templates": c.templates()?.content_hash(),
                    }),
                    inputs,
                }
            }
        };
        Ok(Some(plan))
    }

    fn key(stage: Stage, plan: &Plan) -> Result<(String, BTreeMap<String, String>)> {
        let mut inputs = BTreeMap::new();
        for p in &plan.inputs {
            inputs.insert(p.display().to_string(), file_hash(p)?);
        }
        let material = json!({"stage": stage.name(), "params": plan.params, "inputs": inputs});
        Ok((fsio::sha256_hex(material.to_string().as_bytes()), inputs))
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.work.join("manifests").join(format!("{stage}.json"))
    }

    fn up_to_date(&self, stage: Stage, key: &str) -> bool {
        let Ok(text) = fs::read_to_string(self.manifest_path(stage)) else {
            return false;
        };
        let Ok(manifest) = serde_json::from_str::<StageManifest>(&text) else {
            return false;
        };
        manifest.key == key
            && manifest
                .outputs
                .iter()
                .all(|(rel, hash)| file_hash(&self.artifact(rel)).is_ok_and(|h| &h == hash))
    }

    /// Run the given stages in pipeline order.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<(Stage, StageStatus)>> {
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        let mut report = Vec::new();
        for stage in ordered {
            let status = self.run_stage(stage)?;
            report.push((stage, status));
        }
        Ok(report)
    }

    fn run_stage(&self, stage: Stage) -> Result<StageStatus> {
        let Some(plan) = self.plan(stage)? else {
            info!("stage {stage}: disabled in config");
            return Ok(StageStatus::Disabled);
        };
        let (key, inputs) = Self::key(stage, &plan)?;
        if self.up_to_date(stage, &key) {
            info!("stage {stage}: up to date");
            return Ok(StageStatus::UpToDate);
        }
        let staging = self.work.join(".staging").join(stage.name());
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        info!("stage {stage}: running");
        let outcome = self
            .execute(stage, &staging)
            .and_then(|outputs| self.commit(&staging, &outputs).map(|_| outputs));
        let outputs = match outcome {
            Ok(outputs) => outputs,
            Err(e) => {
                let target = self.work.join("quarantine").join(format!("{stage}-{}", now_ms()));
                fs::create_dir_all(target.parent().unwrap())?;
                match fs::rename(&staging, &target) {
                    Ok(()) => warn!("stage {stage} failed; partial output moved to {}", target.display()),
                    Err(move_err) => warn!("stage {stage} failed and quarantine failed: {move_err}"),
                }
                return Err(e.context(format!("stage {stage} failed")));
            }
        };
        let mut hashes = BTreeMap::new();
        let shared: Vec<String> = AGGREGATE_REPORTS.iter().map(|n| format!("{RUNS}/{n}")).collect();
        for rel in outputs.into_iter().filter(|r| !shared.contains(r)) {
            let hash = file_hash(&self.artifact(&rel))?;
            hashes.insert(rel, hash);
        }
        let manifest = StageManifest {
            stage: stage.name().into(),
            key,
            params: plan.params,
            inputs,
            outputs: hashes,
            completed_unix: (now_ms() / 1000) as u64,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        ops::write_text(&self.manifest_path(stage), &text)?;
        let _ = fs::remove_dir(self.work.join(".staging"));
        Ok(StageStatus::Ran)
    }

    /// Move staged files into place. Each rename is atomic.
    fn commit(&self, staging: &Path, outputs: &[String]) -> Result<()> {
        for rel in outputs {
            let from = staging.join(rel);
            let to = self.artifact(rel);
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(&from, &to).with_context(|| format!("moving {} into place", from.display()))?;
        }
        fs::remove_dir_all(staging)?;
        Ok(())
    }

    fn execute(&self, stage: Stage, staging: &Path) -> Result<Vec<String>> {
        let c = self.config;
        let out = |rel: &str| staging.join(rel);
        let mut written: Vec<String> = Vec::new();
        let mut emit = |rel: &str, text: &str| -> Result<()> {
            ops::write_text(&out(rel), text)?;
            written.push(rel.to_string());
            Ok(())
        };
        let load_current = || {
            let (rel, _) = self.corpus_artifact();
            ops::load_corpus(&self.artifact(rel), Some("jsonl"))
        };
        match stage {
            Stage::Clean => {
                let corpus = ops::load_corpus(c.corpus.as_deref().unwrap(), c.corpus_format.as_deref())?;
                let cleaned = ops::clean(corpus, c)?;
                emit(CLEAN_EVENTS, &heatlevel::corpus::events_to_jsonl(&cleaned.events)?)?;
            }
            Stage::Summarize => {
                let corpus = ops::load_corpus(&self.artifact(CLEAN_EVENTS), Some("jsonl"))?;
                let summarized = ops::summarize(corpus, c, &c.summarize.model)?;
                emit(SUMMARIZED, &heatlevel::corpus::events_to_jsonl(&summarized.events)?)?;
            }
            Stage::Triplets => {
                let set = ops::triplets(&load_current()?, c.triplets.cap, c.seeds.triplets)?;
                emit(TRIPLETS, &set.to_jsonl()?)?;
            }
            Stage::Cluster => {
                let corpus = load_current()?;
                let (selection, scheme) = ops::fit_levels(&corpus, &c.cluster, c.seeds.clustering)?;
                let labeled = ops::label(&corpus, &scheme)?;
                let evalset = ops::sample_eval(&labeled, &scheme, c.eval.per_level, c.seeds.sampling)?;
                emit(LEVELS, &scheme.to_json()?)?;
                emit(KSELECTION, &selection.to_csv())?;
                emit(LABELED, &heatlevel::corpus::events_to_jsonl(&labeled.events)?)?;
                emit(EVALSET, &heatlevel::corpus::events_to_jsonl(&evalset.records)?)?;
            }
            Stage::Index => {
                let labeled = ops::load_corpus(&self.artifact(LABELED), Some("jsonl"))?;
                let embedder = c.embedder.build()?;
                let store = ops::build_index(&labeled, embedder.as_ref())?;
                emit(STORE, &store.to_jsonl()?)?;
            }
            Stage::Baseline | Stage::Eval => {
                let scheme = HeatLevelScheme::load(&self.artifact(LEVELS))?;
                let evalset = ops::load_evalset(&self.artifact(EVALSET))?;
                let store_path = self.artifact(STORE);
                let store = if store_path.is_file() {
                    Some(ops::load_store(&store_path)?)
                } else {
                    None
                };
                let pool = ops::load_corpus(&self.artifact(LABELED), Some("jsonl"))?;
                let embedder = c.embedder.build()?;
                let inputs = ops::EvalInputs {
                    evalset: &evalset,
                    scheme: &scheme,
                    store: store.as_ref(),
                    pool: Some(&pool),
                    embedder: Some(embedder.as_ref()),
                };
                let mut fresh: Vec<(String, ReportEntry)> = Vec::new();
                let mut jobs: Vec<(ScenarioKind, Option<&str>)> = Vec::new();
                if stage == Stage::Baseline {
                    jobs.push((ScenarioKind::BaselineVote1, None));
                    jobs.push((ScenarioKind::BaselineVote2, None));
                } else {
                    let scenarios = self.scenarios()?;
                    for model in self.models() {
                        for &kind in &scenarios {
                            jobs.push((kind, Some(model.as_str())));
                        }
                    }
                }
                let staged_runs = out(RUNS);
                for (kind, model) in jobs {
                    let run = ops::run_one(c, &inputs, kind, model, c.seeds.simulated)?;
                    let entry = ops::save_run(&staged_runs, &run)?;
                    let id = run.manifest.run_id.clone();
                    for name in ["result.jsonl", "manifest.json", "report.md", "plotdata.csv"] {
                        written.push(format!("{RUNS}/{id}/{name}"));
                    }
                    fresh.push((id, entry));
                }
                let mut entries: Vec<ReportEntry> = fresh.iter().map(|(_, e)| e.clone()).collect();
                for (id, entry) in ops::collect_runs(&self.artifact(RUNS))? {
                    if !fresh.iter().any(|(f, _)| *f == id) {
                        entries.push(entry);
                    }
                }
                ops::write_reports(&staged_runs, &entries)?;
                for name in AGGREGATE_REPORTS {
                    written.push(format!("{RUNS}/{name}"));
                }
            }
        }
        Ok(written)
    }
}
