//! Event corpus: loading, cleaning, LLM summarization and triplet construction.
//!
//! The canonical on-disk form is UTF-8 JSONL with one event per line and the
//! fields `id`, `title`, `content`, `category`, `heat_index`, `level`. CSV with
//! the same column names is accepted on input.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::HeatLevel;
use crate::fsio;
use crate::llm::{complete_batch, ChatClient, LlmError};
use crate::prompting::{PromptKind, PromptText};

pub const DEFAULT_TRIPLET_CAP: usize = 3000;
pub const DEFAULT_SUMMARY_MAX_LEN: usize = 200;
pub const DEFAULT_GARBLED_THRESHOLD: f64 = 0.3;

/// The default twenty-label category list. Real corpora usually ship their
/// own list through a sidecar file (see [`CategorySet::load`]).
pub const DEFAULT_CATEGORIES: [&str; 20] = [
    "transportation",
    "sports",
    "agriculture",
    "healthcare",
    "education",
    "economy",
    "politics",
    "law",
    "public safety",
    "environment",
    "disaster",
    "technology",
    "culture",
    "entertainment",
    "society",
    "food safety",
    "employment",
    "housing",
    "international",
    "military",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate event id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("unknown corpus format {0:?} (expected jsonl or csv)")]
    UnknownFormat(String),
    #[error("event {id:?} has category {category:?} outside the configured label set")]
    UnknownCategory { id: String, category: String },
    #[error("event {0:?} has empty content")]
    EmptyContent(String),
    #[error("summarization failed for event {id:?}: {source}")]
    Summarize {
        id: String,
        #[source]
        source: LlmError,
    },
    #[error("no negatives available: triplets need at least two categories")]
    NoNegatives,
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub category: Option<String>,
    pub heat_index: f64,
    #[serde(default)]
    pub level: Option<HeatLevel>,
}

/// Record counts gathered while the corpus moves through the processing stages.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub raw: usize,
    pub removed: usize,
    pub summarized: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventCorpus {
    pub events: Vec<Event>,
    pub source_meta: SourceMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Jsonl,
    Csv,
}

impl EventFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }

    /// Guess from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Jsonl,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CsvRecord {
    id: String,
    title: String,
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    category: Option<String>,
    heat_index: f64,
    #[serde(default)]
    level: Option<u8>,
}

pub fn load_events(path: &Path, format: EventFormat) -> Result<EventCorpus> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let rows = match format {
        EventFormat::Jsonl => parse_jsonl(&text)?,
        EventFormat::Csv => parse_csv(&text)?,
    };

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut events = Vec::with_capacity(rows.len());
    for (line, event) in rows {
        if !(event.heat_index.is_finite() && event.heat_index >= 0.0) {
            return Err(CorpusError::Malformed {
                line,
                message: format!("heat_index must be a non-negative number, got {}", event.heat_index),
            });
        }
        if let Some(&first_line) = seen.get(&event.id) {
            return Err(CorpusError::DuplicateId {
                id: event.id,
                first_line,
                second_line: line,
            });
        }
        seen.insert(event.id.clone(), line);
        events.push(event);
    }
    let raw = events.len();
    Ok(EventCorpus {
        events,
        source_meta: SourceMeta {
            raw,
            ..SourceMeta::default()
        },
    })
}

fn parse_jsonl(text: &str) -> Result<Vec<(usize, Event)>> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        rows.push((line, event));
    }
    Ok(rows)
}

fn parse_csv(text: &str) -> Result<Vec<(usize, Event)>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.deserialize::<CsvRecord>() {
        let record = record.map_err(|e| CorpusError::Malformed {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rows.len() + 2;
        let level = match record.level {
            Some(l) => Some(HeatLevel::new(l).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })?),
            None => None,
        };
        rows.push((
            line,
            Event {
                id: record.id,
                title: record.title,
                content: record.content.unwrap_or_default(),
                category: record.category.filter(|c| !c.is_empty()),
                heat_index: record.heat_index,
                level,
            },
        ));
    }
    Ok(rows)
}

pub fn events_to_jsonl(events: &[Event]) -> Result<String> {
    Ok(fsio::to_jsonl(events)?)
}

pub fn save_events(corpus: &EventCorpus, path: &Path) -> Result<()> {
    let text = events_to_jsonl(&corpus.events)?;
    fsio::write_atomic(path, text.as_bytes()).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// The configured category label set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySet {
    labels: Vec<String>,
}

impl Default for CategorySet {
    fn default() -> Self {
        Self::new(DEFAULT_CATEGORIES.iter().map(|s| s.to_string()))
    }
}

impl CategorySet {
    pub fn new(labels: impl IntoIterator<Item = String>) -> Self {
        Self {
            labels: labels.into_iter().collect(),
        }
    }

    /// Sidecar file: one label per line, blank lines and `#` comments ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string),
        ))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Every categorized event must carry a label from this set.
    pub fn validate(&self, corpus: &EventCorpus) -> Result<()> {
        for event in &corpus.events {
            if let Some(category) = &event.category {
                if !self.contains(category) {
                    return Err(CorpusError::UnknownCategory {
                        id: event.id.clone(),
                        category: category.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CleanConfig {
    /// Minimum share of readable characters below which text counts as garbled.
    pub garbled_threshold: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            garbled_threshold: DEFAULT_GARBLED_THRESHOLD,
        }
    }
}

const COMMON_PUNCTUATION: &str = ".,;:!?'\"()[]-/%&+\
    \u{3001}\u{3002}\u{ff0c}\u{ff01}\u{ff1f}\u{ff1a}\u{ff1b}\u{201c}\u{201d}\u{2018}\u{2019}\
    \u{ff08}\u{ff09}\u{300a}\u{300b}\u{3010}\u{3011}\u{2014}\u{2026}\u{00b7}";

fn is_readable(c: char) -> bool {
    c.is_alphanumeric() || COMMON_PUNCTUATION.contains(c)
}

/// Share of non-whitespace characters that are letters (CJK ideographs
/// included), digits or common punctuation. `None` for blank text.
pub fn readable_ratio(text: &str) -> Option<f64> {
    let mut total = 0usize;
    let mut readable = 0usize;
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if is_readable(c) {
            readable += 1;
        }
    }
    (total > 0).then(|| readable as f64 / total as f64)
}

pub fn is_garbled(text: &str, threshold: f64) -> bool {
    readable_ratio(text).is_some_and(|r| r < threshold)
}

pub fn clean_events(corpus: EventCorpus, config: &CleanConfig) -> EventCorpus {
    let before = corpus.events.len();
    let events: Vec<Event> = corpus
        .events
        .into_iter()
        .filter_map(|mut event| {
            event.title = event.title.trim().to_string();
            event.content = event.content.trim().to_string();
            if event.content.is_empty() {
                if event.title.is_empty() {
                    return None;
                }
                event.content = event.title.clone();
            }
            if is_garbled(&event.content, config.garbled_threshold) {
                return None;
            }
            Some(event)
        })
        .collect();
    let mut source_meta = corpus.source_meta;
    source_meta.removed += before - events.len();
    EventCorpus { events, source_meta }
}

#[derive(Debug, Clone, Copy)]
pub struct SummarizeConfig {
    pub max_len: usize,
}

impl Default for SummarizeConfig {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_SUMMARY_MAX_LEN,
        }
    }
}

fn summary_prompt(event: &Event, max_len: usize) -> PromptText {
    PromptText {
        text: format!(
            "Summarize the following public opinion event as one concise description of at most {max_len} characters. Output only the description.\n{}",
            event.content
        ),
        kind: PromptKind::Summarize,
        event_id: event.id.clone(),
    }
}

fn needs_summary(event: &Event, max_len: usize) -> bool {
    event.content.chars().count() > max_len
}

fn apply_summary(mut event: Event, summary: &str, max_len: usize) -> Event {
    event.content = summary.trim().chars().take(max_len).collect();
    event
}

/// Replace the event content with an LLM summary of at most `max_len`
/// characters. Content that already fits is returned untouched without a call.
pub fn summarize_event(event: Event, client: &dyn ChatClient, config: &SummarizeConfig) -> Result<Event> {
    if event.content.trim().is_empty() {
        return Err(CorpusError::EmptyContent(event.id));
    }
    if !needs_summary(&event, config.max_len) {
        return Ok(event);
    }
    let prompt = summary_prompt(&event, config.max_len);
    match client.complete(&prompt) {
        Ok(completion) => Ok(apply_summary(event, &completion.text, config.max_len)),
        Err(source) => Err(CorpusError::Summarize { id: event.id, source }),
    }
}

/// What to do with events whose summarization fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SummaryFailurePolicy {
    /// Keep the event with its original content.
    #[default]
    KeepOriginal,
    /// Drop the event from the corpus.
    Skip,
    /// Abort on the first failure.
    Fail,
}

#[derive(Debug)]
pub struct SummarizeOutcome {
    pub corpus: EventCorpus,
    pub failures: Vec<CorpusError>,
}

pub fn summarize_corpus(
    corpus: EventCorpus,
    client: &dyn ChatClient,
    config: &SummarizeConfig,
    policy: SummaryFailurePolicy,
    parallelism: usize,
) -> Result<SummarizeOutcome> {
    let pending: Vec<usize> = corpus
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| needs_summary(e, config.max_len))
        .map(|(i, _)| i)
        .collect();
    let prompts: Vec<PromptText> = pending
        .iter()
        .map(|&i| summary_prompt(&corpus.events[i], config.max_len))
        .collect();
    let mut results: HashMap<usize, std::result::Result<String, LlmError>> = pending
        .iter()
        .copied()
        .zip(
            complete_batch(&prompts, client, parallelism)
                .into_iter()
                .map(|r| r.map(|c| c.text)),
        )
        .collect();

    let mut source_meta = corpus.source_meta;
    let mut events = Vec::with_capacity(corpus.events.len());
    let mut failures = Vec::new();
    for (i, event) in corpus.events.into_iter().enumerate() {
        if event.content.trim().is_empty() {
            let err = CorpusError::EmptyContent(event.id.clone());
            if policy == SummaryFailurePolicy::Fail {
                return Err(err);
            }
            failures.push(err);
            if policy == SummaryFailurePolicy::KeepOriginal {
                events.push(event);
            } else {
                source_meta.removed += 1;
            }
            continue;
        }
        match results.remove(&i) {
            None => events.push(event),
            Some(Ok(summary)) => {
                source_meta.summarized += 1;
                events.push(apply_summary(event, &summary, config.max_len));
            }
            Some(Err(source)) => {
                let err = CorpusError::Summarize {
                    id: event.id.clone(),
                    source,
                };
                match policy {
                    SummaryFailurePolicy::Fail => return Err(err),
                    SummaryFailurePolicy::KeepOriginal => events.push(event),
                    SummaryFailurePolicy::Skip => source_meta.removed += 1,
                }
                failures.push(err);
            }
        }
    }
    Ok(SummarizeOutcome {
        corpus: EventCorpus { events, source_meta },
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// Triplets plus the ids they were built from, for invariant checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSource {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub sources: Vec<TripletSource>,
    pub per_category_counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

impl TripletSet {
    pub fn to_jsonl(&self) -> Result<String> {
        Ok(fsio::to_jsonl(&self.triplets)?)
    }
}

/// One triplet per anchor event. Anchors are capped at `cap` per category
/// with a seeded subsample; positives come from the anchor's category and
/// negatives from any other category, both drawn uniformly.
pub fn build_triplets(corpus: &EventCorpus, cap: usize, seed: u64) -> Result<TripletSet> {
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, event) in corpus.events.iter().enumerate() {
        if let Some(category) = event.category.as_deref() {
            by_category.entry(category).or_default().push(i);
        }
    }
    if by_category.len() < 2 {
        return Err(CorpusError::NoNegatives);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TripletSet::default();
    for (&category, members) in &by_category {
        if members.len() < 2 {
            for &i in members {
                set.warnings.push(format!(
                    "event {:?} skipped as anchor: category {category:?} has no other event",
                    corpus.events[i].id
                ));
            }
            continue;
        }
        let negatives: Vec<usize> = by_category
            .iter()
            .filter(|(&c, _)| c != category)
            .flat_map(|(_, m)| m.iter().copied())
            .collect();

        let mut anchor_slots: Vec<usize> = if members.len() > cap {
            index::sample(&mut rng, members.len(), cap).into_vec()
        } else {
            (0..members.len()).collect()
        };
        anchor_slots.sort_unstable();

        for slot in anchor_slots {
            let mut pos_slot = rng.random_range(0..members.len() - 1);
            if pos_slot >= slot {
                pos_slot += 1;
            }
            let neg = negatives[rng.random_range(0..negatives.len())];
            let anchor = &corpus.events[members[slot]];
            let positive = &corpus.events[members[pos_slot]];
            let negative = &corpus.events[neg];
            set.triplets.push(Triplet {
                anchor: anchor.content.clone(),
                positive: positive.content.clone(),
                negative: negative.content.clone(),
            });
            set.sources.push(TripletSource {
                anchor_id: anchor.id.clone(),
                positive_id: positive.id.clone(),
                negative_id: negative.id.clone(),
            });
            *set.per_category_counts.entry(category.to_string()).or_default() += 1;
        }
    }
    Ok(set)
}
