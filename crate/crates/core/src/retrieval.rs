//! Reference case sets and the embedding-only voting baselines.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{assign_level, ClusterError, HeatLevel, HeatLevelScheme};
use crate::corpus::{Event, EventCorpus};
use crate::embedding::{EmbedError, Embedder, VectorStore};

pub const DEFAULT_RECALL_K: usize = 10;
pub const SIMULATED_PER_LEVEL: usize = 3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("event {0:?} has empty content")]
    EmptyContent(String),
    #[error("case set is empty")]
    EmptyCases,
    #[error("level {level} has {available} events, {required} required for simulated cases")]
    InsufficientLevel {
        level: HeatLevel,
        available: usize,
        required: usize,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Recalled,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub content: String,
    pub heat_index: f64,
    pub level: HeatLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSet {
    pub cases: Vec<Case>,
    pub provenance: Provenance,
}

impl CaseSet {
    pub fn levels(&self) -> impl Iterator<Item = HeatLevel> + '_ {
        self.cases.iter().map(|c| c.level)
    }
}

/// The `k` nearest stored events to `event`, the event itself excluded.
pub fn recall_similar(event: &Event, store: &VectorStore, embedder: &dyn Embedder, k: usize) -> Result<CaseSet> {
    if event.content.trim().is_empty() {
        return Err(RetrievalError::EmptyContent(event.id.clone()));
    }
    let query = embedder.embed(&event.content)?;
    let exclude: HashSet<String> = [event.id.clone()].into();
    let neighbors = store.top_k(&query, k, &exclude)?;
    let cases = neighbors
        .0
        .iter()
        .filter_map(|n| store.get(&n.id))
        .map(|e| Case {
            id: e.id.clone(),
            content: e.content.clone(),
            heat_index: e.heat_index,
            level: e.level,
        })
        .collect();
    Ok(CaseSet {
        cases,
        provenance: Provenance::Recalled,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub top_level: HeatLevel,
    /// Most and second most frequent levels, most frequent first.
    pub top_two: Vec<HeatLevel>,
    pub counts: BTreeMap<HeatLevel, usize>,
}

/// Count levels and rank them by frequency; equal counts rank the lower
/// level first.
pub fn tally(levels: impl IntoIterator<Item = HeatLevel>) -> Result<VoteOutcome> {
    let mut counts: BTreeMap<HeatLevel, usize> = BTreeMap::new();
    for level in levels {
        *counts.entry(level).or_default() += 1;
    }
    let mut ranked: Vec<(HeatLevel, usize)> = counts.iter().map(|(&l, &c)| (l, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let top_level = ranked.first().ok_or(RetrievalError::EmptyCases)?.0;
    let top_two = ranked.iter().take(2).map(|(l, _)| *l).collect();
    Ok(VoteOutcome {
        top_level,
        top_two,
        counts,
    })
}

/// Modal level of the cases.
pub fn vote_majority(cases: &CaseSet) -> Result<VoteOutcome> {
    tally(cases.levels())
}

/// Two most frequent levels of the cases (one if only one level occurs).
pub fn vote_top_two(cases: &CaseSet) -> Result<VoteOutcome> {
    tally(cases.levels())
}

/// Three seeded events from every level from 2 upward, ordered by level and
/// then id. Candidates are sorted by id first, so the draw depends only on
/// the ids in each level and the seed.
pub fn sample_simulated_cases(corpus: &EventCorpus, scheme: &HeatLevelScheme, seed: u64) -> Result<CaseSet> {
    let mut by_level: BTreeMap<HeatLevel, Vec<(&Event, HeatLevel)>> = BTreeMap::new();
    for level in scheme.levels().skip(1) {
        by_level.insert(level, Vec::new());
    }
    for event in &corpus.events {
        let level = assign_level(scheme, event.heat_index)?;
        if let Some(pool) = by_level.get_mut(&level) {
            pool.push((event, level));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for (level, mut pool) in by_level {
        if pool.len() < SIMULATED_PER_LEVEL {
            return Err(RetrievalError::InsufficientLevel {
                level,
                available: pool.len(),
                required: SIMULATED_PER_LEVEL,
            });
        }
        pool.sort_by(|a, b| a.0.id.cmp(&b.0.id));
        let mut picks = index::sample(&mut rng, pool.len(), SIMULATED_PER_LEVEL).into_vec();
        picks.sort_unstable();
        cases.extend(picks.into_iter().map(|i| {
            let (e, level) = pool[i];
            Case {
                id: e.id.clone(),
                content: e.content.clone(),
                heat_index: e.heat_index,
                level,
            }
        }));
    }
    Ok(CaseSet {
        cases,
        provenance: Provenance::Simulated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{index_corpus, HashingEmbedder};

    fn lvl(n: u8) -> HeatLevel {
        HeatLevel::new(n).unwrap()
    }

    fn set_of(levels: &[u8]) -> CaseSet {
        CaseSet {
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
        }
    }

    #[test]
    fn majority_examples() {
        assert_eq!(
            vote_majority(&set_of(&[1, 1, 1, 1, 1, 1, 2, 2, 2, 3]))
                .unwrap()
                .top_level,
            lvl(1)
        );
        assert_eq!(
            vote_majority(&set_of(&[1, 1, 1, 1, 1, 2, 2, 2, 2, 2]))
                .unwrap()
                .top_level,
            lvl(1)
        );
        assert_eq!(vote_majority(&set_of(&[4, 3, 3, 4, 2])).unwrap().top_level, lvl(3));
        assert!(matches!(vote_majority(&set_of(&[])), Err(RetrievalError::EmptyCases)));
    }

    #[test]
    fn top_two_examples() {
        let out = vote_top_two(&set_of(&[2, 2, 2, 2, 3, 3, 3, 3, 1, 1])).unwrap();
        assert_eq!(out.top_two, vec![lvl(2), lvl(3)]);
        assert_eq!(out.counts.values().sum::<usize>(), 10);
        assert_eq!(vote_top_two(&set_of(&[4; 10])).unwrap().top_two, vec![lvl(4)]);
        assert!(vote_top_two(&set_of(&[])).is_err());
    }

    fn corpus() -> EventCorpus {
        let heats = [
            1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0, 25.0, 26.0, 27.0, 50.0, 51.0, 52.0, 53.0,
        ];
        EventCorpus {
            events: heats
                .iter()
                .enumerate()
                .map(|(i, &h)| Event {
                    id: format!("e{i:02}"),
                    title: "t".into(),
                    content: format!("event number {i} about topic {}", i % 3),
                    category: None,
                    heat_index: h,
                    level: Some(assign_level(&HeatLevelScheme::reference(), h).unwrap()),
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn simulated_cases_three_per_upper_level() {
        let scheme = HeatLevelScheme::reference();
        let set = sample_simulated_cases(&corpus(), &scheme, 5).unwrap();
        assert_eq!(set.cases.len(), 9);
        assert_eq!(set.provenance, Provenance::Simulated);
        for l in 2..=4 {
            assert_eq!(set.cases.iter().filter(|c| c.level == lvl(l)).count(), 3);
        }
        assert!(set
            .cases
            .windows(2)
            .all(|w| (w[0].level, &w[0].id) < (w[1].level, &w[1].id)));
        assert_eq!(set, sample_simulated_cases(&corpus(), &scheme, 5).unwrap());

        // Reordering the corpus does not change the draw.
        let mut shuffled = corpus();
        shuffled.events.reverse();
        assert_eq!(set, sample_simulated_cases(&shuffled, &scheme, 5).unwrap());
    }

    #[test]
    fn simulated_cases_short_level_named() {
        let mut c = corpus();
        c.events.retain(|e| e.id != "e13" && e.id != "e12");
        match sample_simulated_cases(&c, &HeatLevelScheme::reference(), 1) {
            Err(RetrievalError::InsufficientLevel { level, available, .. }) => {
                assert_eq!(level, lvl(4));
                assert_eq!(available, 2);
            }
            other => panic!("expected insufficient level, got {other:?}"),
        }
    }

    #[test]
    fn recall_excludes_query_and_exhausts() {
        let c = corpus();
        let embedder = HashingEmbedder::new(128, 3);
        let small = EventCorpus {
            events: c.events[..6].to_vec(),
            ..Default::default()
        };
        let store = index_corpus(&small, &embedder).unwrap();
        let set = recall_similar(&small.events[0], &store, &embedder, 10).unwrap();
        assert_eq!(set.cases.len(), 5);
        assert!(set.cases.iter().all(|case| case.id != "e00"));

        let outsider = Event {
            id: "new".into(),
            ..small.events[0].clone()
        };
        let set = recall_similar(&outsider, &store, &embedder, 10).unwrap();
        assert_eq!(set.cases.len(), 6);
        assert_eq!(set.cases[0].id, "e00");
    }
}
