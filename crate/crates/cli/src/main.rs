mod config;
mod ops;
mod pipeline;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use heatlevel::clustering::HeatLevelScheme;
use heatlevel::evalharness::{emit_report, ReportEntry, ReportFormat, ScenarioKind};

use crate::config::PipelineConfig;
use crate::pipeline::{parse_stages, Overrides, Pipeline, Stage, StageStatus};

#[derive(Parser)]
#[command(
    name = "heatlevel",
    version,
    about = "Heat-level clustering and LLM evaluation pipeline"
)]
struct Cli {
    /// Pipeline config (TOML). Built-in defaults are used when the default
    /// file does not exist.
    #[arg(long, global = true, default_value = "heatlevel.toml")]
    config: PathBuf,
    /// Override every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log at debug level.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus preparation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Heat-level clustering.
    #[command(subcommand)]
    Cluster(ClusterCmd),
    /// Vector store.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Embedding-vote baselines.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// LLM evaluation and reports.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run several stages in order.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Clean,
    Summarize,
    Triplets {
        #[arg(long)]
        cap: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ClusterCmd {
    /// Fit levels, label the corpus and sample the evaluation set.
    Fit {
        /// Inclusive range of cluster counts, e.g. `2..10`.
        #[arg(long)]
        k_range: Option<String>,
    },
    /// Label an events file with the fitted levels.
    Assign {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Draw a balanced evaluation set from the labeled corpus.
    SampleEval {
        #[arg(long)]
        per_level: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    Build,
    /// Print the nearest stored events to a text.
    Query {
        text: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum BaselineCmd {
    Vote {
        /// `1` (majority of the top k) or `2` (either of the two most common levels).
        #[arg(long)]
        scenario: String,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Run(EvalRun),
    /// Aggregate finished runs into one report on stdout.
    Report {
        /// Run directories, or directories containing run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: String,
    },
}

#[derive(Args)]
struct EvalRun {
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value = config::BUILTIN_MOCK)]
    model: String,
}

#[derive(Subcommand)]
enum PipelineCmd {
    Run {
        /// `all` or a comma-separated list of stages.
        #[arg(long, default_value = "all")]
        stages: String,
        /// Scenarios for the eval stage, comma-separated.
        #[arg(long)]
        scenario: Option<String>,
        /// Models for the eval stage, comma-separated.
        #[arg(long)]
        model: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let explicit = std::env::args_os().any(|a| a == "--config" || a.to_string_lossy().starts_with("--config="));
    let mut config = if cli.config.is_file() {
        PipelineConfig::load(&cli.config)?
    } else if explicit {
        bail!("config file {} not found", cli.config.display());
    } else {
        log::info!("no {} found; using built-in defaults", cli.config.display());
        PipelineConfig::default()
    };
    if let Some(seed) = cli.seed {
        config.seeds = config::Seeds::all(seed);
    }
    Ok(config)
}

fn parse_k_range(s: &str) -> Result<(usize, usize)> {
    let (lo, hi) = s
        .split_once("..")
        .with_context(|| format!("--k-range {s:?} should look like 2..10"))?;
    let hi = hi.trim_start_matches('=');
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|x| x.trim().to_string())
        .filter(|x| !x.is_empty())
        .collect()
}

fn run_stages(config: &PipelineConfig, stages: &[Stage], overrides: Overrides) -> Result<()> {
    let report = Pipeline::new(config, overrides).run(stages)?;
    for (stage, status) in report {
        let note = match status {
            StageStatus::Ran => "done",
            StageStatus::UpToDate => "up to date",
            StageStatus::Disabled => "disabled",
        };
        println!("{stage}: {note}");
    }
    Ok(())
}

/// Run a single scenario outside the stage machinery and refresh the
/// aggregate report.
fn run_adhoc(config: &PipelineConfig, kind: ScenarioKind, model: Option<&str>) -> Result<()> {
    let pipe = Pipeline::new(config, Overrides::default());
    let require = |rel: &str, producer: &str| -> Result<PathBuf> {
        let p = pipe.artifact(rel);
        if !p.is_file() {
            bail!("{} is missing; run stage \"{producer}\" first", p.display());
        }
        Ok(p)
    };
    let scheme = HeatLevelScheme::load(&require("cluster/levels.json", "cluster")?)?;
    let evalset = ops::load_evalset(&require("cluster/evalset.jsonl", "cluster")?)?;
    let pool = ops::load_corpus(&require("cluster/labeled.jsonl", "cluster")?, Some("jsonl"))?;
    let needs_store = matches!(
        kind,
        ScenarioKind::RecalledCases | ScenarioKind::BaselineVote1 | ScenarioKind::BaselineVote2
    );
    let store = if needs_store {
        Some(ops::load_store(&require("index/store.jsonl", "index")?)?)
    } else {
        None
    };
    let embedder = config.embedder.build()?;
    let inputs = ops::EvalInputs {
        evalset: &evalset,
        scheme: &scheme,
        store: store.as_ref(),
        pool: Some(&pool),
        embedder: Some(embedder.as_ref()),
    };
    let run = ops::run_one(config, &inputs, kind, model, config.seeds.simulated)?;
    let runs = pipe.artifact("runs");
    let entry = ops::save_run(&runs, &run)?;
    println!(
        "{}: {:.2}% ({} of {})",
        run.manifest.run_id, entry.metrics.overall_accuracy, entry.metrics.overall.correct, entry.metrics.overall.total
    );
    let entries: Vec<ReportEntry> = ops::collect_runs(&runs)?.into_iter().map(|(_, e)| e).collect();
    ops::write_reports(&runs, &entries)
}

fn report_entries(dirs: &[PathBuf]) -> Result<Vec<ReportEntry>> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for dir in dirs {
        let found = if dir.join("manifest.json").is_file() {
            let run =
                heatlevel::evalharness::load_run(dir).with_context(|| format!("loading run {}", dir.display()))?;
            vec![(run.manifest.run_id.clone(), ReportEntry::from_run(&run)?)]
        } else if dir.is_dir() {
            ops::collect_runs(dir)?
        } else {
            bail!("{} is not a directory", dir.display());
        };
        for (id, entry) in found {
            if seen.insert(id) {
                entries.push(entry);
            }
        }
    }
    if entries.is_empty() {
        bail!("no runs found");
    }
    Ok(entries)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Eval(EvalCmd::Report { runs, format }) = &cli.command {
        let format: ReportFormat = format.parse()?;
        print!("{}", emit_report(&report_entries(runs)?, format));
        return Ok(());
    }
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Corpus(CorpusCmd::Clean) => run_stages(&config, &[Stage::Clean], Overrides::default()),
        Command::Corpus(CorpusCmd::Summarize) => {
            config.summarize.enabled = true;
            run_stages(&config, &[Stage::Summarize], Overrides::default())
        }
        Command::Corpus(CorpusCmd::Triplets { cap }) => {
            if let Some(cap) = cap {
                config.triplets.cap = cap;
            }
            run_stages(&config, &[Stage::Triplets], Overrides::default())
        }
        Command::Cluster(ClusterCmd::Fit { k_range }) => {
            if let Some(range) = k_range {
                (config.cluster.k_min, config.cluster.k_max) = parse_k_range(&range)?;
                config.validate()?;
            }
            run_stages(&config, &[Stage::Cluster], Overrides::default())
        }
        Command::Cluster(ClusterCmd::Assign { input, output }) => {
            let scheme = HeatLevelScheme::load(&config.work_dir.join("cluster/levels.json"))
                .context("run \"cluster fit\" first")?;
            let corpus = ops::load_corpus(&input, None)?;
            let labeled = ops::label(&corpus, &scheme)?;
            ops::write_events(&output, &labeled)?;
            println!("labeled {} events into {}", labeled.events.len(), output.display());
            Ok(())
        }
        Command::Cluster(ClusterCmd::SampleEval { per_level, output }) => {
            let work = &config.work_dir;
            let scheme =
                HeatLevelScheme::load(&work.join("cluster/levels.json")).context("run \"cluster fit\" first")?;
            let labeled = ops::load_corpus(&work.join("cluster/labeled.jsonl"), Some("jsonl"))?;
            let per_level = per_level.unwrap_or(config.eval.per_level);
            let set = ops::sample_eval(&labeled, &scheme, per_level, config.seeds.sampling)?;
            ops::write_text(&output, &heatlevel::corpus::events_to_jsonl(&set.records)?)?;
            println!("sampled {} events into {}", set.records.len(), output.display());
            Ok(())
        }
        Command::Index(IndexCmd::Build) => run_stages(&config, &[Stage::Index], Overrides::default()),
        Command::Index(IndexCmd::Query { text, k }) => query(&config, &text, k),
        Command::Baseline(BaselineCmd::Vote { scenario }) => {
            let kind = match scenario.as_str() {
                "1" => ScenarioKind::BaselineVote1,
                "2" => ScenarioKind::BaselineVote2,
                other => bail!("--scenario must be 1 or 2, got {other:?}"),
            };
            run_adhoc(&config, kind, None)
        }
        Command::Eval(EvalCmd::Run(args)) => {
            let kind: ScenarioKind = args.scenario.parse()?;
            if !kind.uses_llm() {
                bail!("scenario {kind} is a baseline; use \"baseline vote\"");
            }
            run_adhoc(&config, kind, Some(&args.model))
        }
        Command::Eval(EvalCmd::Report { .. }) => unreachable!(),
        Command::Pipeline(PipelineCmd::Run {
            stages,
            scenario,
            model,
        }) => {
            let overrides = Overrides {
                scenarios: scenario.as_deref().map(split_list),
                models: model.as_deref().map(split_list),
            };
            run_stages(&config, &parse_stages(&stages)?, overrides)
        }
    }
}

fn query(config: &PipelineConfig, text: &str, k: usize) -> Result<()> {
    let path: &Path = &config.work_dir.join("index/store.jsonl");
    if !path.is_file() {
        bail!("{} is missing; run \"index build\" first", path.display());
    }
    let store = ops::load_store(path)?;
    let embedder = config.embedder.build()?;
    let query = embedder.embed(text)?;
    let hits = store.top_k(&query, k, &HashSet::new())?;
    for n in &hits.0 {
        let level = store.get(&n.id).map(|e| e.level.to_string()).unwrap_or_default();
        println!("{:.4}\t{}\t{}", n.score, level, n.id);
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
