//! Multiple-choice prompt rendering and answer parsing.
//!
//! Templates are plain UTF-8 resources with `{name}` placeholders, so a
//! translated template set can be dropped in without code changes. The
//! built-in set lives under `templates/` in this crate.

use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{HeatLevel, HeatLevelScheme};
use crate::corpus::Event;
use crate::fsio;
use crate::retrieval::CaseSet;

const OPTION_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("the option block needs exactly 4 heat levels, scheme has {0}")]
    NotFourLevels(usize),
    #[error("event {0:?} has empty content")]
    EmptyContent(String),
    #[error("case set is empty")]
    EmptyCases,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    NoCase,
    WithCase,
    Summarize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub kind: PromptKind,
    pub event_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub no_case: String,
    pub with_case: String,
    pub option_line: String,
    pub case_line: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            no_case: include_str!("../templates/no_case.txt").to_string(),
            with_case: include_str!("../templates/with_case.txt").to_string(),
            option_line: include_str!("../templates/option_line.txt").to_string(),
            case_line: include_str!("../templates/case_line.txt").to_string(),
        }
    }
}

fn read_template(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    let mut text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    // A single trailing newline is an editor artifact, not template content.
    if text.ends_with('\n') {
        text.pop();
        if text.ends_with('\r') {
            text.pop();
        }
    }
    Ok(text)
}

/// Replace `{key}` placeholders in one left-to-right pass, so substituted
/// values are never rescanned.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        match values.iter().find(|(key, _)| {
            tail.len() > key.len() + 1 && tail[1..].starts_with(key) && tail[1 + key.len()..].starts_with('}')
        }) {
            Some((key, value)) => {
                out.push_str(value);
                rest = &tail[key.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn single_line(text: &str) -> String {
    text.split(['\r', '\n'])
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

impl PromptTemplates {
    /// Load `no_case.txt`, `with_case.txt`, `option_line.txt` and
    /// `case_line.txt` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            no_case: read_template(dir, "no_case.txt")?,
            with_case: read_template(dir, "with_case.txt")?,
            option_line: read_template(dir, "option_line.txt")?,
            case_line: read_template(dir, "case_line.txt")?,
        })
    }

    pub fn content_hash(&self) -> String {
        let joined = [
            self.no_case.as_str(),
            self.with_case.as_str(),
            self.option_line.as_str(),
            self.case_line.as_str(),
        ]
        .join("\u{0}");
        fsio::sha256_hex(joined.as_bytes())
    }

    /// Four option lines, one per level, each ending in a newline. Bounds are
    /// printed with six decimals and the open top bound as `Inf`.
    pub fn render_options(&self, scheme: &HeatLevelScheme) -> Result<String> {
        if scheme.num_levels() != OPTION_LETTERS.len() {
            return Err(PromptError::NotFourLevels(scheme.num_levels()));
        }
        let mut out = String::new();
        for (level, letter) in scheme.levels().zip(OPTION_LETTERS) {
            let lower = format!("{:.6}", scheme.lower_bound(level));
            let upper = scheme
                .upper_bound(level)
                .map_or_else(|| "Inf".to_string(), |u| format!("{u:.6}"));
            let letter = letter.to_string();
            let level = level.to_string();
            out.push_str(&fill(
                &self.option_line,
                &[
                    ("letter", &letter),
                    ("level", &level),
                    ("lower", &lower),
                    ("upper", &upper),
                ],
            ));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn render_no_case(&self, event: &Event, scheme: &HeatLevelScheme) -> Result<PromptText> {
        if event.content.trim().is_empty() {
            return Err(PromptError::EmptyContent(event.id.clone()));
        }
        let options = self.render_options(scheme)?;
        Ok(PromptText {
            text: fill(&self.no_case, &[("event", &event.content), ("options", &options)]),
            kind: PromptKind::NoCase,
            event_id: event.id.clone(),
        })
    }

    /// One line per case in set order, each on its own line.
    pub fn render_cases(&self, cases: &CaseSet) -> String {
        let mut out = String::new();
        for case in &cases.cases {
            let heat = format!("{:.6}", case.heat_index);
            let level = case.level.to_string();
            let content = single_line(&case.content);
            out.push('\n');
            out.push_str(&fill(
                &self.case_line,
                &[("content", &content), ("heat_index", &heat), ("level", &level)],
            ));
        }
        out
    }

    pub fn render_with_case(&self, event: &Event, cases: &CaseSet, scheme: &HeatLevelScheme) -> Result<PromptText> {
        if event.content.trim().is_empty() {
            return Err(PromptError::EmptyContent(event.id.clone()));
        }
        if cases.cases.is_empty() {
            return Err(PromptError::EmptyCases);
        }
        let options = self.render_options(scheme)?;
        let case_block = self.render_cases(cases);
        Ok(PromptText {
            text: fill(
                &self.with_case,
                &[("event", &event.content), ("options", &options), ("Case", &case_block)],
            ),
            kind: PromptKind::WithCase,
            event_id: event.id.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub level: Option<HeatLevel>,
    pub raw: String,
}

static OPTION_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i:option|choice|answer)\s*[:：]?\s*[(（]?([A-D])(?:[^A-Za-z0-9]|$)").unwrap());
static LETTER_PUNCT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|[^A-Za-z0-9])([A-D])[.,:;)、，。：；）]").unwrap());
static COLON_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[:：]\s*([A-D])(?:[^A-Za-z0-9]|$)").unwrap());
static BARE_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|[^A-Za-z0-9])([A-D])(?:[^A-Za-z0-9]|$)").unwrap());
static LEVEL_PHRASE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:^|[^A-Za-z])(?:heat\s+)?level\s*([1-4])(?:[^0-9]|$)").unwrap());

fn first_capture(re: &Regex, text: &str) -> Option<(usize, char)> {
    re.captures(text).and_then(|c| {
        let m = c.get(1)?;
        m.as_str().chars().next().map(|ch| (m.start(), ch))
    })
}

fn letter_level(letter: char) -> Option<HeatLevel> {
    OPTION_LETTERS
        .iter()
        .position(|&l| l == letter)
        .and_then(|i| HeatLevel::new(i as u8 + 1).ok())
}

/// Map a free-text completion to a heat level.
///
/// In order: an option letter marked as a choice (after "Option", a colon, or
/// followed by choice punctuation), the first standalone A-D, a "heat level
/// N" / "level N" phrase. Anything else is unparseable.
pub fn parse_answer(completion: &str) -> ParsedAnswer {
    let marked = [&*OPTION_WORD, &*LETTER_PUNCT, &*COLON_LETTER]
        .into_iter()
        .filter_map(|re| first_capture(re, completion))
        .min_by_key(|(pos, _)| *pos);
    let level = marked
        .or_else(|| first_capture(&BARE_LETTER, completion))
        .and_then(|(_, letter)| letter_level(letter))
        .or_else(|| {
            LEVEL_PHRASE
                .captures(completion)
                .and_then(|c| c[1].parse::<u8>().ok())
                .and_then(|n| HeatLevel::new(n).ok())
        });
    ParsedAnswer {
        level,
        raw: completion.to_string(),
    }
}
