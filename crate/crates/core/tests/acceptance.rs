//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use heatlevel::clustering::{
    derive_levels, fit_from, kmeans_plus_plus, points_1d, sample_eval_set, select_k, silhouette, sse, HeatLevel,
    HeatLevelScheme, KMeansParams, Point,
};
use heatlevel::embedding::{index_corpus, EmbeddingVector, HashingEmbedder, StoreEntry, VectorStore};
use heatlevel::evalharness::{
    compute_metrics, emit_report, run_scenario, write_run_artifacts, ReportEntry, ReportFormat, ScenarioDeps,
    ScenarioKind, ScenarioSpec, Scoring,
};
use heatlevel::llm::{build_client, BackendKind, ChatClient, ModelConfig, ReplayCache, RetryPolicy};
use heatlevel::prompting::PromptTemplates;
use heatlevel::retrieval::{vote_majority, vote_top_two, Case, CaseSet, Provenance};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn lvl(n: u8) -> HeatLevel {
    HeatLevel::new(n).unwrap()
}

fn skewed_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0.0..100.0)
            } else {
                -rng.random::<f64>().max(1e-12).ln() * 10.0
            }
        })
        .collect()
}

/// Textbook Lloyd iteration on scalars. Ties go to the lower centroid
/// index; an empty cluster takes the point farthest from its own centroid.
fn naive_lloyd(xs: &[f64], mut c: Vec<f64>, max_iters: usize) -> (Vec<usize>, Vec<f64>) {
    let assign = |c: &[f64]| -> Vec<usize> {
        xs.iter()
            .map(|&x| {
                let mut best = 0;
                for j in 1..c.len() {
                    if (x - c[j]) * (x - c[j]) < (x - c[best]) * (x - c[best]) {
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    for _ in 0..max_iters {
        let a = assign(&c);
        let mut sum = vec![0.0; c.len()];
        let mut cnt = vec![0usize; c.len()];
        for (&x, &j) in xs.iter().zip(&a) {
            sum[j] += x;
            cnt[j] += 1;
        }
        let mut next: Vec<f64> = (0..c.len())
            .map(|j| if cnt[j] > 0 { sum[j] / cnt[j] as f64 } else { c[j] })
            .collect();
        let mut far: Vec<usize> = (0..xs.len()).collect();
        far.sort_by(|&p, &q| {
            let dp = (xs[p] - c[a[p]]) * (xs[p] - c[a[p]]);
            let dq = (xs[q] - c[a[q]]) * (xs[q] - c[a[q]]);
            dq.total_cmp(&dp).then(p.cmp(&q))
        });
        let mut slot = 0;
        for j in 0..c.len() {
            if cnt[j] == 0 {
                next[j] = xs[far[slot % far.len()]];
                slot += 1;
            }
        }
        let moved = next != c;
        c = next;
        if !moved {
            break;
        }
    }
    (assign(&c), c)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut total_points = 0;
    for instance in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let n = rng.random_range(10..=500);
        let k = rng.random_range(2..=6);
        let xs = skewed_values(&mut rng, n);
        let points = points_1d(&xs);
        let init = kmeans_plus_plus(&points, k, instance).map_err(|e| e.to_string())?;
        let params = KMeansParams::full_batch(instance);
        let model = fit_from(&points, init.clone(), &params).map_err(|e| e.to_string())?;
        let (oracle_assign, oracle_c) = naive_lloyd(&xs, init.iter().map(|p| p[0]).collect(), params.max_iters);
        ensure!(
            model.assignment == oracle_assign,
            "instance {instance}: assignments differ"
        );
        let oracle_sse: f64 = xs
            .iter()
            .zip(&oracle_assign)
            .map(|(x, &j)| (x - oracle_c[j]).powi(2))
            .sum();
        let got = sse(&points, &model).map_err(|e| e.to_string())?;
        ensure!(
            (got - oracle_sse).abs() <= 1e-9,
            "instance {instance}: sse {got} vs {oracle_sse}"
        );
        total_points += n;
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!(
        "50 instances, {total_points} points, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let mut steps = 0;
    for instance in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + instance);
        let n = rng.random_range(20..=300);
        let dim = rng.random_range(1..=3);
        let k = rng.random_range(2..=8);
        let points: Vec<Point> = (0..n).map(|_| skewed_values(&mut rng, dim)).collect();
        let model = heatlevel::clustering::minibatch_kmeans(&points, k, &KMeansParams::full_batch(instance))
            .map_err(|e| e.to_string())?;
        for w in model.sse_trace.windows(2) {
            ensure!(
                w[1] <= w[0] + 1e-9,
                "instance {instance}: sse rose {} -> {}",
                w[0],
                w[1]
            );
        }
        steps += model.sse_trace.len();
    }
    Ok(format!("100 instances, {steps} iterations checked"))
}

fn brute_silhouette(points: &[Point], labels: &[usize]) -> Vec<f64> {
    let d = |a: &Point, b: &Point| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let clusters: HashSet<usize> = labels.iter().copied().collect();
    (0..points.len())
        .map(|i| {
            let mean_to = |c: usize| {
                let others: Vec<usize> = (0..points.len()).filter(|&j| j != i && labels[j] == c).collect();
                if others.is_empty() {
                    None
                } else {
                    Some(others.iter().map(|&j| d(&points[i], &points[j])).sum::<f64>() / others.len() as f64)
                }
            };
            let Some(a) = mean_to(labels[i]) else { return 0.0 };
            let b = clusters
                .iter()
                .filter(|&&c| c != labels[i])
                .filter_map(|&c| mean_to(c))
                .fold(f64::INFINITY, f64::min);
            if a.max(b) == 0.0 {
                0.0
            } else {
                (b - a) / a.max(b)
            }
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut checked = 0;
    for instance in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + instance);
        let n = rng.random_range(3..=200);
        let dim = if instance % 2 == 0 { 1 } else { 2 };
        let k = rng.random_range(2..=5).min(n);
        let points: Vec<Point> = (0..n).map(|_| skewed_values(&mut rng, dim)).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let got = silhouette(&points, &labels).map_err(|e| e.to_string())?;
        let want = brute_silhouette(&points, &labels);
        for (i, (p, w)) in got.per_point.iter().zip(&want).enumerate() {
            ensure!((p.s - w).abs() <= 1e-9, "instance {instance} point {i}: {} vs {w}", p.s);
        }
        let mean = want.iter().sum::<f64>() / n as f64;
        ensure!(
            (got.silhouette_mean - mean).abs() <= 1e-9,
            "instance {instance}: mean differs"
        );
        checked += 1;
    }
    let worked = silhouette(&points_1d(&[0.0, 1.0, 10.0, 11.0]), &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    ensure!(
        (worked.silhouette_mean - 0.899749).abs() <= 1e-6,
        "worked example gives {}",
        worked.silhouette_mean
    );
    Ok(format!(
        "{checked} instances; worked example S = {:.6}",
        worked.silhouette_mean
    ))
}

/// Four tight components with sizes proportional to 54789/5719/2000/328.
fn skewed_fixture() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let components = [(1744, 4.0, 0.5), (182, 15.0, 1.0), (64, 32.0, 1.5), (10, 60.0, 3.0)];
    let mut xs = Vec::new();
    for (count, center, half_width) in components {
        for _ in 0..count {
            xs.push(center + rng.random_range(-half_width..half_width));
        }
    }
    xs
}

fn criterion_4() -> Outcome {
    let xs = skewed_fixture();
    let points = points_1d(&xs);
    let selection = select_k(&points, 2..=8, &KMeansParams::default()).map_err(|e| e.to_string())?;
    ensure!(
        selection.chosen == 4,
        "chose k = {}\n{}",
        selection.chosen,
        selection.to_csv()
    );
    let scheme = derive_levels(&selection.model, &points).map_err(|e| e.to_string())?;
    let lowers: Vec<f64> = scheme.levels().map(|l| scheme.lower_bound(l)).collect();
    ensure!(lowers.len() == 4, "{} levels", lowers.len());
    ensure!(
        lowers.windows(2).all(|w| w[0] < w[1]),
        "bounds not ascending: {lowers:?}"
    );
    let mut order: Vec<usize> = (0..selection.model.k).collect();
    order.sort_by(|&a, &b| selection.model.centroids[a][0].total_cmp(&selection.model.centroids[b][0]));
    for (x, &c) in xs.iter().zip(&selection.model.assignment) {
        let rank = order.iter().position(|&o| o == c).unwrap();
        let level = heatlevel::clustering::assign_level(&scheme, *x).map_err(|e| e.to_string())?;
        ensure!(
            level.index() == rank,
            "{x} is in cluster rank {rank} but gets level {level}"
        );
    }
    Ok(format!("k = 4, lower bounds {lowers:.3?}"))
}

fn multisets() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..=10 {
        for b in 0..=10 - a {
            for c in 0..=10 - a - b {
                out.push([a, b, c, 10 - a - b - c]);
            }
        }
    }
    out
}

fn criterion_5() -> Outcome {
    let all = multisets();
    ensure!(all.len() == 286, "{} multisets", all.len());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for counts in &all {
        let mut levels: Vec<u8> = (0..4)
            .flat_map(|l| std::iter::repeat_n(l as u8 + 1, counts[l]))
            .collect();
        levels.shuffle(&mut rng);
        let cases = CaseSet {
            cases: levels
                .iter()
                .enumerate()
                .map(|(i, &l)| Case {
                    id: format!("c{i}"),
                    content: "x".into(),
                    heat_index: 0.0,
                    level: lvl(l),
                })
                .collect(),
            provenance: Provenance::Recalled,
        };
        let mut ranked: Vec<usize> = (0..4).filter(|&l| counts[l] > 0).collect();
        ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let want_top = lvl(ranked[0] as u8 + 1);
        let want_two: Vec<HeatLevel> = ranked.iter().take(2).map(|&l| lvl(l as u8 + 1)).collect();
        let majority = vote_majority(&cases).map_err(|e| e.to_string())?;
        let two = vote_top_two(&cases).map_err(|e| e.to_string())?;
        ensure!(
            majority.top_level == want_top,
            "{counts:?}: majority {}",
            majority.top_level
        );
        ensure!(two.top_two == want_two, "{counts:?}: top two {:?}", two.top_two);
    }

    let corpus = common::balanced_corpus(60);
    let embedder = HashingEmbedder::default();
    let store = index_corpus(&corpus, &embedder).map_err(|e| e.to_string())?;
    let scheme = HeatLevelScheme::reference();
    let templates = PromptTemplates::default();
    let deps = ScenarioDeps {
        scheme: &scheme,
        templates: &templates,
        store: Some(&store),
        embedder: Some(&embedder),
        client: None,
        case_pool: None,
        parallelism: 1,
        model_config_hash: None,
    };
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let evalset = sample_eval_set(&corpus, &scheme, 20, seed).map_err(|e| e.to_string())?;
        let acc = |kind: ScenarioKind| -> Result<f64, String> {
            let run = run_scenario(&evalset, &ScenarioSpec::new(kind), &deps).map_err(|e| e.to_string())?;
            Ok(compute_metrics(&run, kind.default_scoring())
                .map_err(|e| e.to_string())?
                .overall_accuracy)
        };
        let (s1, s2) = (acc(ScenarioKind::BaselineVote1)?, acc(ScenarioKind::BaselineVote2)?);
        ensure!(s2 >= s1, "eval seed {seed}: scenario 2 {s2:.2} < scenario 1 {s1:.2}");
        pairs.push(format!("{s1:.2}/{s2:.2}"));
    }
    Ok(format!("286 multisets; scenario 1/2 accuracy {}", pairs.join(" ")))
}

fn oracle_top_k(store: &[(String, Vec<f64>)], q: &[f64], k: usize, exclude: &HashSet<String>) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut all: Vec<(String, f64)> = store
        .iter()
        .filter(|(id, _)| !exclude.contains(id))
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            (id.clone(), (dot / (norm(v) * qn)).clamp(-1.0, 1.0))
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut sizes = vec![1, 2, 3, 5, 10, 50, 100, 250, 500, 999, 1000];
    sizes.extend((0..30).map(|_| rng.random_range(1..=1000)));
    let mut queries = 0;
    for &size in &sizes {
        let dim = rng.random_range(2..=8);
        let mut ids: Vec<usize> = (0..size).collect();
        ids.shuffle(&mut rng);
        let mut rows: Vec<(String, Vec<f64>)> = Vec::with_capacity(size);
        for id in ids {
            let v: Vec<f64> = loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-3..=3) as f64).collect();
                if v.iter().any(|&x| x != 0.0) {
                    break v;
                }
            };
            rows.push((format!("id{id:04}"), v));
        }
        let store = VectorStore::new(
            rows.iter()
                .map(|(id, v)| StoreEntry {
                    id: id.clone(),
                    heat_index: 1.0,
                    level: lvl(1),
                    content: id.clone(),
                    vector: EmbeddingVector::new(v.clone()).unwrap(),
                })
                .collect(),
        )
        .map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let q = rows[rng.random_range(0..size)].1.clone();
            let k = rng.random_range(1..=size + 2);
            let exclude: HashSet<String> = rows
                .iter()
                .filter(|_| rng.random_bool(0.1))
                .map(|(id, _)| id.clone())
                .collect();
            let got = store
                .top_k(&EmbeddingVector::new(q.clone()).unwrap(), k, &exclude)
                .map_err(|e| e.to_string())?;
            let want = oracle_top_k(&rows, &q, k, &exclude);
            let got: Vec<(String, f64)> = got.0.into_iter().map(|n| (n.id, n.score)).collect();
            ensure!(got == want, "store of {size}, k = {k}: results differ");
            ensure!(got.iter().all(|(id, _)| !exclude.contains(id)), "excluded id returned");
            queries += 1;
        }
    }
    Ok(format!("{} stores up to 1000 entries, {queries} queries", sizes.len()))
}

fn criterion_7() -> Outcome {
    let templates = PromptTemplates::default();
    let scheme = HeatLevelScheme::reference();
    let event = common::golden_event();
    let renders = [
        (
            "no_case.txt",
            templates
                .render_no_case(&event, &scheme)
                .map_err(|e| e.to_string())?
                .text,
        ),
        (
            "with_case.txt",
            templates
                .render_with_case(&event, &common::golden_cases(), &scheme)
                .map_err(|e| e.to_string())?
                .text,
        ),
    ];
    for (name, text) in &renders {
        let expected = std::fs::read_to_string(common::golden_dir().join(name)).map_err(|e| e.to_string())?;
        ensure!(*text == expected, "{name} differs from fixture");
    }
    let options = templates.render_options(&scheme).map_err(|e| e.to_string())?;
    for range in [
        "(0.000000,8.777964)",
        "(8.777964,21.462457)",
        "(21.462457,42.399911)",
        "(42.399911,Inf)",
    ] {
        ensure!(options.contains(range), "options block lacks {range}");
    }
    Ok("2 fixtures byte-equal; ranges verbatim".into())
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let corpus = common::balanced_corpus(300);
    let scheme = HeatLevelScheme::reference();
    let evalset = sample_eval_set(&corpus, &scheme, 250, 8).map_err(|e| e.to_string())?;
    ensure!(evalset.len() == 1000, "eval set has {} events", evalset.len());
    let embedder = HashingEmbedder::default();
    let store = index_corpus(&corpus, &embedder).map_err(|e| e.to_string())?;
    let client = build_client(&ModelConfig::mock("mock", "always-A"), None).map_err(|e| e.to_string())?;
    let templates = PromptTemplates::default();
    let deps = ScenarioDeps {
        scheme: &scheme,
        templates: &templates,
        store: Some(&store),
        embedder: Some(&embedder),
        client: Some(client.as_ref()),
        case_pool: Some(&corpus),
        parallelism: 8,
        model_config_hash: None,
    };
    let mut summary = Vec::new();
    for kind in ScenarioKind::LLM {
        let run = run_scenario(&evalset, &ScenarioSpec::new(kind), &deps).map_err(|e| e.to_string())?;
        let m = compute_metrics(&run, Scoring::Top1).map_err(|e| e.to_string())?;
        let per_level: Vec<String> = m.per_level_accuracy.values().map(|v| format!("{v:.2}")).collect();
        ensure!(
            format!("{:.2}", m.overall_accuracy) == "25.00",
            "{kind}: overall {:.2}",
            m.overall_accuracy
        );
        ensure!(
            per_level == ["100.00", "0.00", "0.00", "0.00"],
            "{kind}: per level {per_level:?}"
        );
        summary.push(format!("{kind} 25.00"));
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "{}; per level 100.00/0.00/0.00/0.00; {:.2}s",
        summary.join(", "),
        elapsed.as_secs_f64()
    ))
}

fn stub_answer(body: &str) -> String {
    let request: serde_json::Value = serde_json::from_str(body).unwrap_or_default();
    let prompt = request["messages"][0]["content"].as_str().unwrap_or_default();
    let digest = heatlevel::fsio::sha256_hex(prompt.as_bytes());
    let letter = ['A', 'B', 'C', 'D'][usize::from_str_radix(&digest[..2], 16).unwrap() % 4];
    format!("Option: {letter}")
}

fn run_into(dir: &Path, client: &dyn ChatClient, corpus: &heatlevel::corpus::EventCorpus) -> Result<(), String> {
    let scheme = HeatLevelScheme::reference();
    let evalset = sample_eval_set(corpus, &scheme, 10, 9).map_err(|e| e.to_string())?;
    let embedder = HashingEmbedder::default();
    let store = index_corpus(corpus, &embedder).map_err(|e| e.to_string())?;
    let templates = PromptTemplates::default();
    let deps = ScenarioDeps {
        scheme: &scheme,
        templates: &templates,
        store: Some(&store),
        embedder: Some(&embedder),
        client: Some(client),
        case_pool: Some(corpus),
        parallelism: 4,
        model_config_hash: None,
    };
    for kind in ScenarioKind::LLM {
        let run = run_scenario(&evalset, &ScenarioSpec::new(kind), &deps).map_err(|e| e.to_string())?;
        write_run_artifacts(&dir.join(&run.manifest.run_id), &run).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let server = common::StubServer::start(|n, _, body| {
        if n == 0 {
            (503, "{\"error\":\"warming up\"}".into())
        } else {
            (200, common::chat_response(&stub_answer(body)))
        }
    });
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache_path = tmp.path().join("cache.jsonl");
    let corpus = common::balanced_corpus(30);
    let record = ModelConfig {
        name: "stub-model".into(),
        endpoint: server.url.clone(),
        backend: BackendKind::Record,
        cache: Some(cache_path.clone()),
        retry: RetryPolicy::no_backoff(3),
        timeout_secs: 10,
        ..ModelConfig::default()
    };
    let client = build_client(&record, None).map_err(|e| e.to_string())?;
    run_into(&tmp.path().join("recorded"), client.as_ref(), &corpus)?;
    let served = server.requests();
    ensure!(
        served == 121,
        "stub served {served} requests, expected 120 plus one retry"
    );

    let replay = ModelConfig {
        backend: BackendKind::Replay,
        ..record
    };
    let client = build_client(&replay, None).map_err(|e| e.to_string())?;
    run_into(&tmp.path().join("replayed"), client.as_ref(), &corpus)?;
    ensure!(server.requests() == served, "replay reached the network");
    ensure!(
        ReplayCache::open(&cache_path).map_err(|e| e.to_string())?.len() == 120,
        "cache size"
    );

    let mut files = 0;
    for kind in ScenarioKind::LLM {
        let id = heatlevel::evalharness::run_id(kind, "stub-model", 0);
        for name in ["result.jsonl", "report.md"] {
            let a = std::fs::read(tmp.path().join("recorded").join(&id).join(name)).map_err(|e| e.to_string())?;
            let b = std::fs::read(tmp.path().join("replayed").join(&id).join(name)).map_err(|e| e.to_string())?;
            ensure!(a == b, "{id}/{name} differs between record and replay");
            files += 1;
        }
    }
    Ok(format!(
        "{files} artifacts byte-identical; {served} requests recorded, 0 on replay"
    ))
}

fn criterion_10() -> Outcome {
    let corpus = common::balanced_corpus(40);
    let scheme = HeatLevelScheme::reference();
    let evalset = sample_eval_set(&corpus, &scheme, 25, 10).map_err(|e| e.to_string())?;
    let truth: HashMap<String, HeatLevel> = evalset
        .records
        .iter()
        .map(|e| (e.id.clone(), e.level.unwrap()))
        .collect();
    let embedder = HashingEmbedder::default();
    let store = index_corpus(&corpus, &embedder).map_err(|e| e.to_string())?;
    let templates = PromptTemplates::default();
    let models = [
        ("fixture-a", "always-A"),
        ("fixture-b", "always-B"),
        ("fixture-c", "always-C"),
        ("fixture-d", "always-D"),
        ("fixture-oracle", "true-level"),
        ("fixture-silent", "text:I cannot tell."),
    ];
    let mut entries = Vec::new();
    for (name, rule) in models {
        let client = build_client(&ModelConfig::mock(name, rule), Some(&truth)).map_err(|e| e.to_string())?;
        let deps = ScenarioDeps {
            scheme: &scheme,
            templates: &templates,
            store: Some(&store),
            embedder: Some(&embedder),
            client: Some(client.as_ref()),
            case_pool: Some(&corpus),
            parallelism: 4,
            model_config_hash: None,
        };
        for kind in ScenarioKind::LLM {
            let run = run_scenario(&evalset, &ScenarioSpec::new(kind), &deps).map_err(|e| e.to_string())?;
            entries.push(ReportEntry::from_run(&run).map_err(|e| e.to_string())?);
        }
    }

    let md = emit_report(&entries, ReportFormat::Markdown);
    let header =
        "| Model | without case references | with case references | with case references(simulated situation) |";
    let lines: Vec<&str> = md.lines().collect();
    let at = lines
        .iter()
        .position(|l| *l == header)
        .ok_or("Table 5 header missing")?;
    let rows: Vec<Vec<&str>> = lines[at + 2..]
        .iter()
        .take_while(|l| l.starts_with('|'))
        .map(|l| l.trim_matches('|').split('|').map(str::trim).collect())
        .collect();
    ensure!(rows.len() == 6, "{} model rows", rows.len());
    let expected = ["25.00", "25.00", "25.00", "25.00", "100.00", "0.00"];
    for (row, ((name, _), want)) in rows.iter().zip(models.iter().zip(expected)) {
        ensure!(row.len() == 4 && row[0] == *name, "bad row {row:?}");
        ensure!(row[1..].iter().all(|c| *c == want), "row {row:?}, expected {want}");
    }

    let plot = emit_report(&entries, ReportFormat::PlotData);
    let mut plot_lines = plot.lines();
    ensure!(
        plot_lines.next() == Some("model,scenario,level,accuracy"),
        "plotdata header"
    );
    let tuples: Vec<Vec<&str>> = plot_lines.map(|l| l.split(',').collect()).collect();
    ensure!(tuples.len() == 72, "{} plotdata rows", tuples.len());
    let unique: HashSet<(&str, &str, &str)> = tuples.iter().map(|t| (t[0], t[1], t[2])).collect();
    ensure!(unique.len() == 72, "duplicate plotdata tuples");
    let lookup: BTreeMap<(&str, &str, &str), &str> = tuples.iter().map(|t| ((t[0], t[1], t[2]), t[3])).collect();
    ensure!(lookup[&("fixture-b", "recalled", "2")] == "100.00", "fixture-b level 2");
    ensure!(lookup[&("fixture-b", "recalled", "1")] == "0.00", "fixture-b level 1");
    ensure!(
        lookup[&("fixture-oracle", "simulated", "4")] == "100.00",
        "oracle level 4"
    );
    Ok("6 models x 3 scenarios; 72 plot tuples".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("full-batch k-means equals naive Lloyd", criterion_1),
        ("SSE non-increasing in full-batch mode", criterion_2),
        ("silhouette equals brute force", criterion_3),
        ("k selection on skewed fixture", criterion_4),
        ("voting equals exhaustive counting", criterion_5),
        ("top-k equals full-scan sort", criterion_6),
        ("prompt golden files", criterion_7),
        ("forced end-to-end with always-A mock", criterion_8),
        ("record/replay determinism", criterion_9),
        ("report shape parity", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
