//! Pipeline configuration file.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Secrets never live here: remote backends name the environment
//! variable that holds their key.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use heatlevel::clustering::KMeansParams;
use heatlevel::corpus::{
    CategorySet, SummaryFailurePolicy, DEFAULT_GARBLED_THRESHOLD, DEFAULT_SUMMARY_MAX_LEN, DEFAULT_TRIPLET_CAP,
};
use heatlevel::embedding::{
    Embedder, HashingEmbedder, PrecomputedEmbedder, RemoteEmbedder, VectorStore, DEFAULT_DIM, DEFAULT_HASH_SEED,
};
use heatlevel::llm::{ModelConfig, RetryPolicy};
use heatlevel::prompting::PromptTemplates;
use heatlevel::retrieval::DEFAULT_RECALL_K;

/// Name of the model that is always available: a mock answering option A.
pub const BUILTIN_MOCK: &str = "mock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Raw events file (JSONL or CSV).
    pub corpus: Option<PathBuf>,
    /// `jsonl` or `csv`; inferred from the extension when absent.
    pub corpus_format: Option<String>,
    /// Category sidecar, one label per line. Defaults to the built-in list.
    pub categories: Option<PathBuf>,
    /// Directory with replacement prompt templates.
    pub templates_dir: Option<PathBuf>,
    /// Root for every stage artifact.
    pub work_dir: PathBuf,
    pub seeds: Seeds,
    pub clean: CleanSection,
    pub summarize: SummarizeSection,
    pub triplets: TripletSection,
    pub cluster: ClusterSection,
    pub embedder: EmbedderSection,
    pub eval: EvalSection,
    pub models: Vec<ModelConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            corpus_format: None,
            categories: None,
            templates_dir: None,
            work_dir: PathBuf::from("work"),
            seeds: Seeds::default(),
            clean: CleanSection::default(),
            summarize: SummarizeSection::default(),
            triplets: TripletSection::default(),
            cluster: ClusterSection::default(),
            embedder: EmbedderSection::default(),
            eval: EvalSection::default(),
            models: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub clustering: u64,
    pub sampling: u64,
    pub simulated: u64,
    pub triplets: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            clustering: seed,
            sampling: seed,
            simulated: seed,
            triplets: seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanSection {
    pub garbled_threshold: f64,
}

impl Default for CleanSection {
    fn default() -> Self {
        Self {
            garbled_threshold: DEFAULT_GARBLED_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizeSection {
    pub enabled: bool,
    pub model: String,
    pub max_len: usize,
    /// `keep`, `skip` or `fail`.
    pub on_failure: String,
    pub parallelism: usize,
}

impl Default for SummarizeSection {
    fn default() -> Self {
        Self {
            enabled: false,
            model: BUILTIN_MOCK.into(),
            max_len: DEFAULT_SUMMARY_MAX_LEN,
            on_failure: "keep".into(),
            parallelism: 4,
        }
    }
}

pub fn failure_policy(name: &str) -> Result<SummaryFailurePolicy> {
    Ok(match name {
        "keep" => SummaryFailurePolicy::KeepOriginal,
        "skip" => SummaryFailurePolicy::Skip,
        "fail" => SummaryFailurePolicy::Fail,
        other => bail!("unknown summary failure policy {other:?} (expected keep, skip or fail)"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletSection {
    pub cap: usize,
}

impl Default for TripletSection {
    fn default() -> Self {
        Self {
            cap: DEFAULT_TRIPLET_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k_min: usize,
    pub k_max: usize,
    pub batch_size: usize,
    pub max_iters: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let p = KMeansParams::default();
        Self {
            k_min: 2,
            k_max: 10,
            batch_size: p.batch_size,
            max_iters: p.max_iters,
        }
    }
}

impl ClusterSection {
    pub fn params(&self, seed: u64) -> KMeansParams {
        KMeansParams {
            batch_size: self.batch_size,
            max_iters: self.max_iters,
            seed,
            ..KMeansParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    /// `hashing`, `remote` or `precomputed`.
    pub kind: String,
    pub dim: usize,
    pub hash_seed: u64,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    /// Store exported by the fine-tuning job, for `precomputed`.
    pub store: Option<PathBuf>,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self {
            kind: "hashing".into(),
            dim: DEFAULT_DIM,
            hash_seed: DEFAULT_HASH_SEED,
            endpoint: None,
            api_key_env: None,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            store: None,
        }
    }
}

impl EmbedderSection {
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self.kind.as_str() {
            "hashing" => Box::new(HashingEmbedder::new(self.dim, self.hash_seed)),
            "remote" => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .context("embedder.endpoint is required for kind = \"remote\"")?;
                Box::new(RemoteEmbedder::new(
                    endpoint,
                    self.api_key_env.as_deref(),
                    self.dim,
                    Duration::from_secs(self.timeout_secs.max(1)),
                    self.retry,
                )?)
            }
            "precomputed" => {
                let path = self
                    .store
                    .as_deref()
                    .context("embedder.store is required for kind = \"precomputed\"")?;
                let store = VectorStore::load(path).with_context(|| format!("loading {}", path.display()))?;
                Box::new(PrecomputedEmbedder::from_store(&store, &path.display().to_string()))
            }
            other => bail!("unknown embedder kind {other:?} (expected hashing, remote or precomputed)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub per_level: usize,
    pub k: usize,
    pub scenarios: Vec<String>,
    pub models: Vec<String>,
    pub baselines: bool,
    pub parallelism: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            per_level: 250,
            k: DEFAULT_RECALL_K,
            scenarios: vec!["no-case".into(), "recalled".into(), "simulated".into()],
            models: vec![BUILTIN_MOCK.into()],
            baselines: true,
            parallelism: 4,
        }
    }
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.categories,
            &mut self.templates_dir,
            &mut self.embedder.store,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut self.work_dir);
        for m in &mut self.models {
            if let Some(cache) = &mut m.cache {
                resolve(base, cache);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster.k_min < 2 || self.cluster.k_min > self.cluster.k_max {
            bail!("cluster.k_min must be >= 2 and <= cluster.k_max");
        }
        if self.eval.per_level == 0 || self.eval.k == 0 {
            bail!("eval.per_level and eval.k must be positive");
        }
        for m in &self.models {
            m.validate()?;
        }
        failure_policy(&self.summarize.on_failure)?;
        Ok(())
    }

    pub fn model(&self, name: &str) -> Result<ModelConfig> {
        if let Some(m) = self.models.iter().find(|m| m.name == name) {
            return Ok(m.clone());
        }
        if name == BUILTIN_MOCK {
            return Ok(ModelConfig::mock(BUILTIN_MOCK, "always-A"));
        }
        bail!("model {name:?} is not in the config's [[models]] list")
    }

    pub fn templates(&self) -> Result<PromptTemplates> {
        match &self.templates_dir {
            Some(dir) => Ok(PromptTemplates::load_dir(dir)?),
            None => Ok(PromptTemplates::default()),
        }
    }

    pub fn category_set(&self) -> Result<CategorySet> {
        match &self.categories {
            Some(path) => Ok(CategorySet::load(path)?),
            None => Ok(CategorySet::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.eval.per_level, 250);
        assert_eq!(c.triplets.cap, 3000);
        assert_eq!((c.cluster.k_min, c.cluster.k_max), (2, 10));
    }

    #[test]
    fn example_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/heatlevel.example.toml");
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(
            c.model("gpt-4o").unwrap().api_key_env.as_deref(),
            Some("OPENAI_API_KEY")
        );
        assert!(c.work_dir.is_absolute() || c.work_dir.starts_with(env!("CARGO_MANIFEST_DIR")));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("[eval]\nper_levle = 3\n").is_err());
    }

    #[test]
    fn builtin_mock_and_roster() {
        let c: PipelineConfig = toml::from_str(
            "[[models]]\nname = \"gpt-4o\"\nendpoint = \"https://api.example.com/v1\"\napi_key_env = \"OPENAI_API_KEY\"\n",
        )
        .unwrap();
        assert_eq!(
            c.model("gpt-4o").unwrap().api_key_env.as_deref(),
            Some("OPENAI_API_KEY")
        );
        assert_eq!(c.model("mock").unwrap().mock.as_deref(), Some("always-A"));
        assert!(c.model("glm-4").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(&path, "corpus = \"data/events.jsonl\"\nwork_dir = \"out\"\n").unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.corpus.unwrap(), dir.path().join("data/events.jsonl"));
        assert_eq!(c.work_dir, dir.path().join("out"));
    }

    #[test]
    fn bad_k_range_rejected() {
        let c = PipelineConfig {
            cluster: ClusterSection {
                k_min: 5,
                k_max: 3,
                ..ClusterSection::default()
            },
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
