//! Evaluation scenarios, accuracy metrics and report rendering.
//!
//! A run predicts one heat level per evaluation event, either through an LLM
//! (no cases, recalled cases, or one shared simulated case set) or through
//! the embedding-only votes. Metrics are exact integer counts; percentages
//! are printed with two decimals.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{EvalSet, HeatLevel, HeatLevelScheme};
use crate::corpus::EventCorpus;
use crate::embedding::{Embedder, VectorStore};
use crate::fsio;
use crate::llm::{complete_batch, ChatClient};
use crate::prompting::{parse_answer, PromptError, PromptTemplates, PromptText};
use crate::retrieval::{recall_similar, sample_simulated_cases, tally, CaseSet, RetrievalError, DEFAULT_RECALL_K};

pub const BASELINE_MODEL: &str = "embedding-vote";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run has no records")]
    EmptyRun,
    #[error("either-of-top-two scoring needs top-two predictions; scenario {0} produced top-1 only")]
    ScoringMismatch(ScenarioKind),
    #[error("unknown report format {0:?} (expected csv, markdown or plotdata)")]
    UnknownFormat(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("event {id:?}: {source}")]
    Event {
        id: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    NoCase,
    RecalledCases,
    SimulatedCases,
    BaselineVote1,
    BaselineVote2,
}

impl ScenarioKind {
    pub const LLM: [ScenarioKind; 3] = [Self::NoCase, Self::RecalledCases, Self::SimulatedCases];

    /// Column heading used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::NoCase => "without case references",
            Self::RecalledCases => "with case references",
            Self::SimulatedCases => "with case references(simulated situation)",
            Self::BaselineVote1 => "Scenario 1",
            Self::BaselineVote2 => "Scenario 2",
        }
    }

    /// Short name used on the command line and in run ids.
    pub fn slug(self) -> &'static str {
        match self {
            Self::NoCase => "no-case",
            Self::RecalledCases => "recalled",
            Self::SimulatedCases => "simulated",
            Self::BaselineVote1 => "vote1",
            Self::BaselineVote2 => "vote2",
        }
    }

    pub fn uses_llm(self) -> bool {
        Self::LLM.contains(&self)
    }

    pub fn default_scoring(self) -> Scoring {
        match self {
            Self::BaselineVote2 => Scoring::EitherOfTopTwo,
            _ => Scoring::Top1,
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for ScenarioKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "no-case" | "no_case" => Self::NoCase,
            "recalled" | "recalled_cases" => Self::RecalledCases,
            "simulated" | "simulated_cases" => Self::SimulatedCases,
            "vote1" | "baseline_vote1" | "1" => Self::BaselineVote1,
            "vote2" | "baseline_vote2" | "2" => Self::BaselineVote2,
            other => return Err(EvalError::UnknownScenario(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Recall size for recalled cases and the votes.
    pub k: usize,
    /// Seed for the simulated case draw.
    pub seed: u64,
    /// Draw a fresh simulated case set for every event instead of one per run.
    pub resample_per_event: bool,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        Self {
            kind,
            k: DEFAULT_RECALL_K,
            seed: 0,
            resample_per_event: false,
        }
    }
}

/// Everything a scenario may need. Which fields are required depends on
/// the scenario kind; see [`run_scenario`].
pub struct ScenarioDeps<'a> {
    pub scheme: &'a HeatLevelScheme,
    pub templates: &'a PromptTemplates,
    pub store: Option<&'a VectorStore>,
    pub embedder: Option<&'a dyn Embedder>,
    pub client: Option<&'a dyn ChatClient>,
    /// Pool for simulated case sampling, normally the labeled corpus.
    pub case_pool: Option<&'a EventCorpus>,
    pub parallelism: usize,
    /// Hash of the model configuration, recorded in the manifest.
    pub model_config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub event_id: String,
    pub true_level: HeatLevel,
    pub predicted: Option<HeatLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_two: Option<Vec<HeatLevel>>,
    /// Raw completion text for LLM scenarios.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub scenario: ScenarioSpec,
    pub model: String,
    pub events: usize,
    pub template_hash: String,
    pub scheme_hash: String,
    pub model_config_hash: Option<String>,
    pub embedder: Option<String>,
    pub simulated_case_ids: Option<Vec<String>>,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub scenario: ScenarioKind,
    pub model: String,
    pub records: Vec<PredictionRecord>,
    pub manifest: RunManifest,
}

pub fn run_id(kind: ScenarioKind, model: &str, seed: u64) -> String {
    let slug: String = model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    format!("{}-{}-seed{seed}", kind.slug(), slug)
}

fn require<'a, T: ?Sized>(dep: Option<&'a T>, what: &str, kind: ScenarioKind) -> Result<&'a T> {
    dep.ok_or_else(|| EvalError::Config(format!("scenario {kind} needs {what}")))
}

fn true_level(event: &crate::corpus::Event) -> Result<HeatLevel> {
    event
        .level
        .ok_or_else(|| EvalError::Config(format!("evaluation event {:?} has no true level", event.id)))
}

/// Predict a level for every event of the evaluation set.
///
/// Dependencies are checked before any request is issued: LLM scenarios
/// need a client, recalled cases and the votes need a store and an
/// embedder, simulated cases need a case pool.
pub fn run_scenario(evalset: &EvalSet, spec: &ScenarioSpec, deps: &ScenarioDeps<'_>) -> Result<RunResult> {
    let kind = spec.kind;
    if spec.k == 0 {
        return Err(EvalError::Config("k must be at least 1".into()));
    }
    let client = if kind.uses_llm() {
        deps.templates.render_options(deps.scheme)?;
        Some(require(deps.client, "an LLM client", kind)?)
    } else {
        None
    };
    let (store, embedder) = match kind {
        ScenarioKind::RecalledCases | ScenarioKind::BaselineVote1 | ScenarioKind::BaselineVote2 => (
            Some(require(deps.store, "a vector store", kind)?),
            Some(require(deps.embedder, "an embedder", kind)?),
        ),
        _ => (None, None),
    };
    let pool = match kind {
        ScenarioKind::SimulatedCases => Some(require(deps.case_pool, "a case pool", kind)?),
        _ => None,
    };
    let truths: Vec<HeatLevel> = evalset.records.iter().map(true_level).collect::<Result<_>>()?;

    let shared_simulated = match pool {
        Some(pool) if !spec.resample_per_event => Some(sample_simulated_cases(pool, deps.scheme, spec.seed)?),
        _ => None,
    };
    let model = client.map_or_else(|| BASELINE_MODEL.to_string(), |c| c.model_name().to_string());

    let records = if let Some(client) = client {
        let mut prompts: Vec<PromptText> = Vec::with_capacity(evalset.len());
        for (i, event) in evalset.records.iter().enumerate() {
            let with_id = |e: EvalError| EvalError::Event {
                id: event.id.clone(),
                source: Box::new(e),
            };
            let prompt = match kind {
                ScenarioKind::NoCase => deps.templates.render_no_case(event, deps.scheme),
                ScenarioKind::RecalledCases => {
                    let cases = recall_similar(event, store.unwrap(), embedder.unwrap(), spec.k)
                        .map_err(|e| with_id(e.into()))?;
                    deps.templates.render_with_case(event, &cases, deps.scheme)
                }
                ScenarioKind::SimulatedCases => match &shared_simulated {
                    Some(cases) => deps.templates.render_with_case(event, cases, deps.scheme),
                    None => {
                        let cases =
                            sample_simulated_cases(pool.unwrap(), deps.scheme, spec.seed.wrapping_add(i as u64))?;
                        deps.templates.render_with_case(event, &cases, deps.scheme)
                    }
                },
                _ => unreachable!("baseline scenarios do not prompt"),
            }
            .map_err(|e| with_id(e.into()))?;
            prompts.push(prompt);
        }
        complete_batch(&prompts, client, deps.parallelism)
            .into_iter()
            .zip(evalset.records.iter().zip(&truths))
            .map(|(outcome, (event, &truth))| match outcome {
                Ok(completion) => PredictionRecord {
                    event_id: event.id.clone(),
                    true_level: truth,
                    predicted: parse_answer(&completion.text).level,
                    top_two: None,
                    raw: Some(completion.text),
                    error: None,
                },
                Err(e) => PredictionRecord {
                    event_id: event.id.clone(),
                    true_level: truth,
                    predicted: None,
                    top_two: None,
                    raw: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    } else {
        evalset
            .records
            .iter()
            .zip(&truths)
            .map(|(event, &truth)| {
                let cases: CaseSet =
                    recall_similar(event, store.unwrap(), embedder.unwrap(), spec.k).map_err(|e| EvalError::Event {
                        id: event.id.clone(),
                        source: Box::new(e.into()),
                    })?;
                let vote = tally(cases.levels());
                Ok(match vote {
                    Ok(v) => PredictionRecord {
                        event_id: event.id.clone(),
                        true_level: truth,
                        predicted: Some(v.top_level),
                        top_two: Some(v.top_two),
                        raw: None,
                        error: None,
                    },
                    Err(e) => PredictionRecord {
                        event_id: event.id.clone(),
                        true_level: truth,
                        predicted: None,
                        top_two: Some(Vec::new()),
                        raw: None,
                        error: Some(e.to_string()),
                    },
                })
            })
            .collect::<Result<_>>()?
    };

    let manifest = RunManifest {
        run_id: run_id(kind, &model, spec.seed),
        scenario: *spec,
        model: model.clone(),
        events: evalset.len(),
        template_hash: deps.templates.content_hash(),
        scheme_hash: deps.scheme.content_hash(),
        model_config_hash: deps.model_config_hash.clone(),
        embedder: embedder.map(|e| e.describe()),
        simulated_case_ids: shared_simulated.map(|s| s.cases.into_iter().map(|c| c.id).collect()),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    Ok(RunResult {
        scenario: kind,
        model,
        records,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Top1,
    EitherOfTopTwo,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCount {
    pub correct: usize,
    pub total: usize,
}

impl LevelCount {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scoring: Scoring,
    pub overall: LevelCount,
    /// Percentage, 100 x correct / total.
    pub overall_accuracy: f64,
    pub per_level_accuracy: BTreeMap<HeatLevel, f64>,
    pub counts: BTreeMap<HeatLevel, LevelCount>,
    pub unparseable_count: usize,
}

pub fn compute_metrics(result: &RunResult, scoring: Scoring) -> Result<MetricsReport> {
    if result.records.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let mut counts: BTreeMap<HeatLevel, LevelCount> = BTreeMap::new();
    let mut unparseable_count = 0;
    for r in &result.records {
        let correct = match scoring {
            Scoring::Top1 => r.predicted == Some(r.true_level),
            Scoring::EitherOfTopTwo => r
                .top_two
                .as_ref()
                .ok_or(EvalError::ScoringMismatch(result.scenario))?
                .contains(&r.true_level),
        };
        if r.predicted.is_none() {
            unparseable_count += 1;
        }
        let slot = counts.entry(r.true_level).or_default();
        slot.total += 1;
        slot.correct += usize::from(correct);
    }
    let overall = counts.values().fold(LevelCount::default(), |acc, c| LevelCount {
        correct: acc.correct + c.correct,
        total: acc.total + c.total,
    });
    Ok(MetricsReport {
        scoring,
        overall,
        overall_accuracy: overall.accuracy(),
        per_level_accuracy: counts.iter().map(|(&l, c)| (l, c.accuracy())).collect(),
        counts,
        unparseable_count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub model: String,
    pub scenario: ScenarioKind,
    pub metrics: MetricsReport,
}

impl ReportEntry {
    pub fn from_run(result: &RunResult) -> Result<Self> {
        Ok(Self {
            model: result.model.clone(),
            scenario: result.scenario,
            metrics: compute_metrics(result, result.scenario.default_scoring())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    PlotData,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            "plotdata" => Ok(Self::PlotData),
            other => Err(EvalError::UnknownFormat(other.to_string())),
        }
    }
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

fn level_row_name(level: HeatLevel, total_levels: usize) -> String {
    const NAMES: [&str; 4] = ["Low", "Medium", "High", "Very high"];
    if total_levels == NAMES.len() {
        NAMES[level.index()].to_string()
    } else {
        format!("Level {level}")
    }
}

fn models_in_order(entries: &[ReportEntry], keep: impl Fn(ScenarioKind) -> bool) -> Vec<&str> {
    let mut seen = Vec::new();
    for e in entries.iter().filter(|e| keep(e.scenario)) {
        if !seen.contains(&e.model.as_str()) {
            seen.push(e.model.as_str());
        }
    }
    seen
}

fn all_levels(entries: &[ReportEntry]) -> BTreeSet<HeatLevel> {
    entries.iter().flat_map(|e| e.metrics.counts.keys().copied()).collect()
}

fn render_markdown(entries: &[ReportEntry]) -> String {
    let mut out = String::new();
    let lookup: HashMap<(&str, ScenarioKind), &MetricsReport> = entries
        .iter()
        .map(|e| ((e.model.as_str(), e.scenario), &e.metrics))
        .collect();
    let levels = all_levels(entries);

    let llm_models = models_in_order(entries, ScenarioKind::uses_llm);
    if !llm_models.is_empty() {
        out.push_str("## Overall accuracy (%)\n\n| Model |");
        for kind in ScenarioKind::LLM {
            let _ = write!(out, " {} |", kind.label());
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(ScenarioKind::LLM.len()));
        out.push('\n');
        for model in &llm_models {
            let _ = write!(out, "| {model} |");
            for kind in ScenarioKind::LLM {
                let cell = lookup
                    .get(&(*model, kind))
                    .map_or_else(|| "-".to_string(), |m| pct(m.overall_accuracy));
                let _ = write!(out, " {cell} |");
            }
            out.push('\n');
        }

        out.push_str("\n## Accuracy by heat level (%)\n\n| Model | Scenario |");
        for l in &levels {
            let _ = write!(out, " Level {l} |");
        }
        out.push_str(" Overall | Unparseable |\n|---|---|");
        out.push_str(&"---|".repeat(levels.len() + 2));
        out.push('\n');
        for model in &llm_models {
            for kind in ScenarioKind::LLM {
                let Some(m) = lookup.get(&(*model, kind)) else { continue };
                let _ = write!(out, "| {model} | {} |", kind.label());
                for l in &levels {
                    let cell = m.per_level_accuracy.get(l).map_or_else(|| "-".to_string(), |v| pct(*v));
                    let _ = write!(out, " {cell} |");
                }
                let _ = writeln!(out, " {} | {} |", pct(m.overall_accuracy), m.unparseable_count);
            }
        }
    }

    let baseline_models = models_in_order(entries, |k| !k.uses_llm());
    for model in baseline_models {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "## Embedding baseline: {model} (%)\n");
        let kinds = [ScenarioKind::BaselineVote1, ScenarioKind::BaselineVote2];
        out.push_str("| Heat level |");
        for kind in kinds {
            let _ = write!(out, " {} |", kind.label());
        }
        out.push_str("\n|---|---|---|\n");
        for l in &levels {
            let _ = write!(out, "| {} |", level_row_name(*l, levels.len()));
            for kind in kinds {
                let cell = lookup
                    .get(&(model, kind))
                    .and_then(|m| m.per_level_accuracy.get(l))
                    .map_or_else(|| "-".to_string(), |v| pct(*v));
                let _ = write!(out, " {cell} |");
            }
            out.push('\n');
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(entries: &[ReportEntry]) -> String {
    let levels = all_levels(entries);
    let mut out = String::from("model,scenario,overall_accuracy,correct,total,unparseable");
    for l in &levels {
        let _ = write!(out, ",level_{l}");
    }
    out.push('\n');
    for e in entries {
        let m = &e.metrics;
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&e.model),
            e.scenario.slug(),
            pct(m.overall_accuracy),
            m.overall.correct,
            m.overall.total,
            m.unparseable_count
        );
        for l in &levels {
            let cell = m.per_level_accuracy.get(l).map(|v| pct(*v)).unwrap_or_default();
            let _ = write!(out, ",{cell}");
        }
        out.push('\n');
    }
    out
}

fn render_plotdata(entries: &[ReportEntry]) -> String {
    let mut out = String::from("model,scenario,level,accuracy\n");
    for e in entries {
        for (level, acc) in &e.metrics.per_level_accuracy {
            let _ = writeln!(
                out,
                "{},{},{level},{}",
                csv_field(&e.model),
                e.scenario.slug(),
                pct(*acc)
            );
        }
    }
    out
}

/// Render reports. Markdown puts models in rows and scenarios in columns;
/// plot data has one `(model, scenario, level, accuracy)` row per level.
pub fn emit_report(entries: &[ReportEntry], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(entries),
        ReportFormat::Csv => render_csv(entries),
        ReportFormat::PlotData => render_plotdata(entries),
    }
}

pub fn emit_report_named(entries: &[ReportEntry], format: &str) -> Result<String> {
    Ok(emit_report(entries, format.parse()?))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fsio::write_atomic(path, bytes).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn records_to_jsonl(records: &[PredictionRecord]) -> Result<String> {
    Ok(fsio::to_jsonl(records)?)
}

/// Write `result.jsonl`, `manifest.json`, `report.md` and `plotdata.csv`
/// into `dir`.
pub fn write_run_artifacts(dir: &Path, result: &RunResult) -> Result<ReportEntry> {
    let entry = ReportEntry::from_run(result)?;
    write(&dir.join("result.jsonl"), records_to_jsonl(&result.records)?.as_bytes())?;
    let mut manifest = serde_json::to_string_pretty(&result.manifest)?;
    manifest.push('\n');
    write(&dir.join("manifest.json"), manifest.as_bytes())?;
    let entries = std::slice::from_ref(&entry);
    write(
        &dir.join("report.md"),
        emit_report(entries, ReportFormat::Markdown).as_bytes(),
    )?;
    write(
        &dir.join("plotdata.csv"),
        emit_report(entries, ReportFormat::PlotData).as_bytes(),
    )?;
    Ok(entry)
}

pub fn load_run(dir: &Path) -> Result<RunResult> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    let manifest: RunManifest = serde_json::from_str(&read("manifest.json")?)?;
    let records = read("result.jsonl")?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<PredictionRecord>, _>>()?;
    Ok(RunResult {
        scenario: manifest.scenario.kind,
        model: manifest.model.clone(),
        records,
        manifest,
    })
}
