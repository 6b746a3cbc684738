//! Heat-index clustering into heat levels.
//!
//! Centroids are fitted with mini-batch k-means (seeded k-means++ start).
//! When the batch covers the whole dataset the fit is plain Lloyd iteration:
//! assign every point to its nearest centroid, then move each centroid to the
//! mean of its members. Model selection scans k and keeps the argmax of the
//! mean silhouette. The fitted 1-D clusters are turned into a
//! [`HeatLevelScheme`] of half-open heat-index intervals.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Event, EventCorpus};
use crate::fsio;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("no points to cluster")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of points ({n})")]
    TooFewPoints { k: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, found {found} at point {index}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        index: usize,
    },
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("assignment covers {found} points but {expected} were given")]
    AssignmentLength { expected: usize, found: usize },
    #[error("assignment refers to cluster {cluster} but the model has {k} centroids")]
    AssignmentOutOfRange { cluster: usize, k: usize },
    #[error("silhouette undefined: {0}")]
    SilhouetteUndefined(String),
    #[error("empty k range")]
    EmptyKRange,
    #[error("k range {start}..={end} must lie within 2..={max}")]
    InvalidKRange { start: usize, end: usize, max: usize },
    #[error("heat levels need 1-D points, got dimension {0}")]
    NotOneDimensional(usize),
    #[error("invalid heat level {0}: levels start at 1")]
    InvalidLevel(u8),
    #[error("invalid heat level scheme: {0}")]
    InvalidScheme(String),
    #[error("heat index must be a non-negative number, got {0}")]
    InvalidHeatIndex(f64),
    #[error("level {level} has {available} events, {required} required")]
    InsufficientLevel {
        level: HeatLevel,
        available: usize,
        required: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scheme file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

/// Ordinal heat level, 1 = lowest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct HeatLevel(u8);

impl HeatLevel {
    pub fn new(level: u8) -> Result<Self> {
        if level == 0 {
            return Err(ClusterError::InvalidLevel(level));
        }
        Ok(Self(level))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based position, for indexing per-level tables.
    pub fn index(self) -> usize {
        usize::from(self.0) - 1
    }

    pub(crate) fn from_index(index: usize) -> Self {
        Self(u8::try_from(index + 1).expect("more than 255 heat levels"))
    }
}

impl TryFrom<u8> for HeatLevel {
    type Error = ClusterError;

    fn try_from(value: u8) -> Result<Self> {
        Self::new(value)
    }
}

impl From<HeatLevel> for u8 {
    fn from(level: HeatLevel) -> u8 {
        level.0
    }
}

impl fmt::Display for HeatLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type Point = Vec<f64>;

/// Wrap scalar heat indices as 1-D points.
pub fn points_1d(values: &[f64]) -> Vec<Point> {
    values.iter().map(|&v| vec![v]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    /// Points per mini-batch. A batch at least as large as the dataset
    /// selects full-batch Lloyd iteration.
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Stop once no centroid moves farther than this in one iteration.
    pub convergence_tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            max_iters: 300,
            seed: 0,
            convergence_tol: 0.0,
        }
    }
}

impl KMeansParams {
    pub fn full_batch(seed: u64) -> Self {
        Self {
            batch_size: usize::MAX,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Point>,
    /// Cluster index of every input point.
    pub assignment: Vec<usize>,
    /// Full-batch: final cluster sizes. Mini-batch: streaming update counts.
    pub per_center_counts: Vec<usize>,
    /// SSE after each assignment step.
    pub sse_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_points(points: &[Point]) -> Result<usize> {
    let first = points.first().ok_or(ClusterError::Empty)?;
    let dim = first.len();
    for (index, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(ClusterError::DimensionMismatch {
                expected: dim,
                found: p.len(),
                index,
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::NonFinite(index));
        }
    }
    Ok(dim)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Nearest centroid, ties resolved to the lowest index.
fn nearest(point: &[f64], centroids: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Seeded k-means++ seeding over the full dataset.
pub fn kmeans_plus_plus(points: &[Point], k: usize, seed: u64) -> Result<Vec<Point>> {
    check_points(points)?;
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > points.len() {
        return Err(ClusterError::TooFewPoints { k, n: points.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// Fit `k` clusters. Deterministic for a fixed seed.
pub fn minibatch_kmeans(points: &[Point], k: usize, params: &KMeansParams) -> Result<ClusterModel> {
    let init = kmeans_plus_plus(points, k, params.seed)?;
    fit_from(points, init, params)
}

/// Fit starting from explicit centroids.
pub fn fit_from(points: &[Point], init: Vec<Point>, params: &KMeansParams) -> Result<ClusterModel> {
    let dim = check_points(points)?;
    let k = init.len();
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > points.len() {
        return Err(ClusterError::TooFewPoints { k, n: points.len() });
    }
    for (index, c) in init.iter().enumerate() {
        if c.len() != dim {
            return Err(ClusterError::DimensionMismatch {
                expected: dim,
                found: c.len(),
                index,
            });
        }
    }
    if params.batch_size >= points.len() {
        Ok(lloyd(points, init, params))
    } else {
        Ok(minibatch(points, init, params))
    }
}

fn assign_all(points: &[Point], centroids: &[Point]) -> (Vec<usize>, f64) {
    let mut sse = 0.0;
    let assignment = points
        .iter()
        .map(|p| {
            let (j, d) = nearest(p, centroids);
            sse += d;
            j
        })
        .collect();
    (assignment, sse)
}

/// Move every empty cluster's centroid onto the point farthest from its own
/// centroid, taking distinct points for distinct empty clusters.
fn repair_empty(points: &[Point], assignment: &[usize], current: &[Point], counts: &[usize], next: &mut [Point]) {
    let empty: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut order: Vec<(usize, f64)> = points
        .iter()
        .zip(assignment)
        .enumerate()
        .map(|(i, (p, &j))| (i, sq_dist(p, &current[j])))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (slot, j) in empty.into_iter().enumerate() {
        next[j] = points[order[slot % order.len()].0].clone();
    }
}

fn cluster_means(points: &[Point], assignment: &[usize], k: usize, dim: usize) -> (Vec<Point>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &j) in points.iter().zip(assignment) {
        counts[j] += 1;
        for (s, v) in sums[j].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    (sums, counts)
}

fn lloyd(points: &[Point], mut centroids: Vec<Point>, params: &KMeansParams) -> ClusterModel {
    let k = centroids.len();
    let dim = points[0].len();
    let mut sse_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let (assignment, sse) = assign_all(points, &centroids);
        sse_trace.push(sse);
        let (mut next, counts) = cluster_means(points, &assignment, k, dim);
        for j in 0..k {
            if counts[j] == 0 {
                next[j] = centroids[j].clone();
            }
        }
        repair_empty(points, &assignment, &centroids, &counts, &mut next);
        let movement = centroids.iter().zip(&next).map(|(a, b)| dist(a, b)).fold(0.0, f64::max);
        centroids = next;
        if movement <= params.convergence_tol {
            converged = true;
            break;
        }
    }
    let (assignment, _) = assign_all(points, &centroids);
    let (_, per_center_counts) = cluster_means(points, &assignment, k, dim);
    ClusterModel {
        k,
        centroids,
        assignment,
        per_center_counts,
        sse_trace,
        iterations,
        converged,
    }
}

fn minibatch(points: &[Point], mut centroids: Vec<Point>, params: &KMeansParams) -> ClusterModel {
    let k = centroids.len();
    let dim = points[0].len();
    let batch_size = params.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut counts = vec![0usize; k];
    let mut sse_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let before = centroids.clone();
        for i in index::sample(&mut rng, points.len(), batch_size).iter() {
            let x = &points[i];
            let (j, _) = nearest(x, &centroids);
            counts[j] += 1;
            let eta = 1.0 / counts[j] as f64;
            for (c, v) in centroids[j].iter_mut().zip(x) {
                *c += eta * (v - *c);
            }
        }
        sse_trace.push(assign_all(points, &centroids).1);
        let movement = before
            .iter()
            .zip(&centroids)
            .map(|(a, b)| dist(a, b))
            .fold(0.0, f64::max);
        if movement <= params.convergence_tol {
            converged = true;
            break;
        }
    }

    let (mut assignment, _) = assign_all(points, &centroids);
    for _ in 0..k {
        let (_, sizes) = cluster_means(points, &assignment, k, dim);
        if sizes.iter().all(|&c| c > 0) {
            break;
        }
        let mut next = centroids.clone();
        repair_empty(points, &assignment, &centroids, &sizes, &mut next);
        centroids = next;
        assignment = assign_all(points, &centroids).0;
    }
    ClusterModel {
        k,
        centroids,
        assignment,
        per_center_counts: counts,
        sse_trace,
        iterations,
        converged,
    }
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn sse(points: &[Point], model: &ClusterModel) -> Result<f64> {
    let dim = check_points(points)?;
    if model.assignment.len() != points.len() {
        return Err(ClusterError::AssignmentLength {
            expected: points.len(),
            found: model.assignment.len(),
        });
    }
    let mut total = 0.0;
    for (p, &j) in points.iter().zip(&model.assignment) {
        let c = model
            .centroids
            .get(j)
            .ok_or(ClusterError::AssignmentOutOfRange { cluster: j, k: model.k })?;
        if c.len() != dim {
            return Err(ClusterError::DimensionMismatch {
                expected: dim,
                found: c.len(),
                index: j,
            });
        }
        total += sq_dist(p, c);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSilhouette {
    /// Mean distance to the other members of the point's own cluster.
    pub a: f64,
    /// Smallest mean distance to the members of another cluster.
    pub b: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDiagnostics {
    /// SSE around the mean of each cluster of the assignment.
    pub sse: f64,
    pub silhouette_mean: f64,
    pub per_point: Vec<PointSilhouette>,
    pub n: usize,
}

/// Per-point and mean silhouette of a hard assignment, exact (all pairs).
///
/// Members of singleton clusters score 0.
pub fn silhouette(points: &[Point], assignment: &[usize]) -> Result<ClusterDiagnostics> {
    let dim = check_points(points)?;
    let n = points.len();
    if assignment.len() != n {
        return Err(ClusterError::AssignmentLength {
            expected: n,
            found: assignment.len(),
        });
    }
    if n < 3 {
        return Err(ClusterError::SilhouetteUndefined(format!(
            "need at least 3 points, got {n}"
        )));
    }
    // Compact labels to 0..c in ascending label order.
    let mut labels: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in assignment {
        let next = labels.len();
        labels.entry(l).or_insert(next);
    }
    for (rank, slot) in labels.values_mut().enumerate() {
        *slot = rank;
    }
    let clusters = labels.len();
    if clusters < 2 {
        return Err(ClusterError::SilhouetteUndefined(
            "need at least two non-empty clusters".into(),
        ));
    }
    let compact: Vec<usize> = assignment.iter().map(|l| labels[l]).collect();
    let mut sizes = vec![0usize; clusters];
    for &c in &compact {
        sizes[c] += 1;
    }

    // Row i holds the summed distance from point i to every cluster.
    let dist_sums: Vec<Vec<f64>> = if dim == 1 {
        distance_sums_1d(points, &compact, clusters)
    } else {
        distance_sums_pairwise(points, &compact, clusters)
    };

    let per_point: Vec<PointSilhouette> = (0..n)
        .map(|i| {
            let own = compact[i];
            let b = (0..clusters)
                .filter(|&c| c != own)
                .map(|c| dist_sums[i][c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if sizes[own] == 1 {
                return PointSilhouette { a: 0.0, b, s: 0.0 };
            }
            let a = dist_sums[i][own] / (sizes[own] - 1) as f64;
            let denom = a.max(b);
            let s = if denom > 0.0 { (b - a) / denom } else { 0.0 };
            PointSilhouette { a, b, s }
        })
        .collect();
    let silhouette_mean = per_point.iter().map(|p| p.s).sum::<f64>() / n as f64;

    let (means, _) = cluster_means(points, &compact, clusters, dim);
    let sse = points.iter().zip(&compact).map(|(p, &c)| sq_dist(p, &means[c])).sum();

    Ok(ClusterDiagnostics {
        sse,
        silhouette_mean,
        per_point,
        n,
    })
}

fn distance_sums_pairwise(points: &[Point], compact: &[usize], clusters: usize) -> Vec<Vec<f64>> {
    points
        .par_iter()
        .map(|p| {
            let mut row = vec![0.0; clusters];
            for (q, &c) in points.iter().zip(compact) {
                row[c] += dist(p, q);
            }
            row
        })
        .collect()
}

/// Sorted values with prefix sums turn each per-cluster sum of |x - y| into
/// a binary search, O(n log n) overall.
fn distance_sums_1d(points: &[Point], compact: &[usize], clusters: usize) -> Vec<Vec<f64>> {
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); clusters];
    for (p, &c) in points.iter().zip(compact) {
        members[c].push(p[0]);
    }
    let prefix: Vec<(Vec<f64>, Vec<f64>)> = members
        .into_iter()
        .map(|mut m| {
            m.sort_by(f64::total_cmp);
            let mut acc = Vec::with_capacity(m.len() + 1);
            acc.push(0.0);
            let mut run = 0.0;
            for v in &m {
                run += v;
                acc.push(run);
            }
            (m, acc)
        })
        .collect();
    points
        .par_iter()
        .map(|p| {
            let x = p[0];
            prefix
                .iter()
                .map(|(sorted, acc)| {
                    let below = sorted.partition_point(|&v| v < x);
                    let total = acc[sorted.len()];
                    let lower = x * below as f64 - acc[below];
                    let upper = (total - acc[below]) - x * (sorted.len() - below) as f64;
                    (lower + upper).max(0.0)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KCandidate {
    pub k: usize,
    pub silhouette: f64,
    pub sse: f64,
}

#[derive(Debug, Clone)]
pub struct KSelection {
    pub candidates: Vec<KCandidate>,
    pub chosen: usize,
    /// The fitted model for `chosen`.
    pub model: ClusterModel,
}

impl KSelection {
    /// `k,sse,silhouette` rows for elbow and silhouette plots.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,sse,silhouette\n");
        for c in &self.candidates {
            out.push_str(&format!("{},{},{}\n", c.k, c.sse, c.silhouette));
        }
        out
    }
}

pub const DEFAULT_K_RANGE: RangeInclusive<usize> = 2..=10;

/// Fit each k in `k_range` and keep the one with the highest mean
/// silhouette; ties go to the smaller k.
pub fn select_k(points: &[Point], k_range: RangeInclusive<usize>, params: &KMeansParams) -> Result<KSelection> {
    check_points(points)?;
    if k_range.is_empty() {
        return Err(ClusterError::EmptyKRange);
    }
    let (start, end) = (*k_range.start(), *k_range.end());
    let max = points.len().saturating_sub(1);
    if start < 2 || end > max {
        return Err(ClusterError::InvalidKRange { start, end, max });
    }
    let fitted: Vec<(KCandidate, ClusterModel)> = k_range
        .into_par_iter()
        .map(|k| {
            let model = minibatch_kmeans(points, k, params)?;
            let diag = silhouette(points, &model.assignment)?;
            let sse = sse(points, &model)?;
            Ok((
                KCandidate {
                    k,
                    silhouette: diag.silhouette_mean,
                    sse,
                },
                model,
            ))
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (i, (c, _)) in fitted.iter().enumerate() {
        if c.silhouette > fitted[best].0.silhouette {
            best = i;
        }
    }
    let candidates: Vec<KCandidate> = fitted.iter().map(|(c, _)| *c).collect();
    let (chosen, model) = fitted.into_iter().nth(best).map(|(c, m)| (c.k, m)).unwrap();
    Ok(KSelection {
        candidates,
        chosen,
        model,
    })
}

/// Ordered heat-level boundaries. Level `i` covers `[b[i-2], b[i-1])`, with
/// level 1 starting at 0 and the top level unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatLevelScheme {
    pub boundaries: Vec<f64>,
    pub level_names: Vec<String>,
    pub level_counts: Vec<u64>,
}

const FOUR_LEVEL_NAMES: [&str; 4] = [
    "Low heat level",
    "Medium heat level",
    "High heat level",
    "Very high heat level",
];

fn default_level_names(levels: usize) -> Vec<String> {
    if levels == FOUR_LEVEL_NAMES.len() {
        FOUR_LEVEL_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=levels).map(|l| format!("Level {l}")).collect()
    }
}

impl HeatLevelScheme {
    pub fn new(boundaries: Vec<f64>, level_counts: Vec<u64>) -> Result<Self> {
        let names = default_level_names(boundaries.len() + 1);
        let scheme = Self {
            boundaries,
            level_names: names,
            level_counts,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    /// The published four-level scheme of the reference corpus.
    pub fn reference() -> Self {
        Self::new(vec![8.777964, 21.462457, 42.399911], vec![54789, 5719, 2000, 328])
            .expect("reference scheme is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.boundaries.len() + 1;
        if levels > usize::from(u8::MAX) {
            return Err(ClusterError::InvalidScheme("too many levels".into()));
        }
        if self.boundaries.iter().any(|b| !b.is_finite() || *b <= 0.0) {
            return Err(ClusterError::InvalidScheme(
                "boundaries must be finite and positive".into(),
            ));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ClusterError::InvalidScheme(
                "boundaries must be strictly ascending".into(),
            ));
        }
        if self.level_names.len() != levels {
            return Err(ClusterError::InvalidScheme(format!(
                "{} level names for {levels} levels",
                self.level_names.len()
            )));
        }
        if !self.level_counts.is_empty() && self.level_counts.len() != levels {
            return Err(ClusterError::InvalidScheme(format!(
                "{} level counts for {levels} levels",
                self.level_counts.len()
            )));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn levels(&self) -> impl Iterator<Item = HeatLevel> {
        (0..self.num_levels()).map(HeatLevel::from_index)
    }

    pub fn lower_bound(&self, level: HeatLevel) -> f64 {
        match level.index() {
            0 => 0.0,
            i => self.boundaries[i - 1],
        }
    }

    /// `None` for the unbounded top level.
    pub fn upper_bound(&self, level: HeatLevel) -> Option<f64> {
        self.boundaries.get(level.index()).copied()
    }

    pub fn name(&self, level: HeatLevel) -> &str {
        &self.level_names[level.index()]
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scheme: Self = serde_json::from_str(text)?;
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_json()?.as_bytes()).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn content_hash(&self) -> String {
        fsio::sha256_hex(self.to_json().unwrap_or_default().as_bytes())
    }
}

/// Order clusters by centroid and cut between neighbours at the smallest
/// heat index of the upper cluster. Empty clusters are dropped.
pub fn derive_levels(model: &ClusterModel, points: &[Point]) -> Result<HeatLevelScheme> {
    let dim = check_points(points)?;
    if dim != 1 {
        return Err(ClusterError::NotOneDimensional(dim));
    }
    if model.assignment.len() != points.len() {
        return Err(ClusterError::AssignmentLength {
            expected: points.len(),
            found: model.assignment.len(),
        });
    }
    let mut min_member = vec![f64::INFINITY; model.k];
    let mut sizes = vec![0u64; model.k];
    for (p, &j) in points.iter().zip(&model.assignment) {
        if j >= model.k {
            return Err(ClusterError::AssignmentOutOfRange { cluster: j, k: model.k });
        }
        sizes[j] += 1;
        min_member[j] = min_member[j].min(p[0]);
    }
    let mut order: Vec<usize> = (0..model.k).filter(|&j| sizes[j] > 0).collect();
    order.sort_by(|&a, &b| model.centroids[a][0].total_cmp(&model.centroids[b][0]));

    let boundaries: Vec<f64> = order.iter().skip(1).map(|&j| min_member[j]).collect();
    let counts: Vec<u64> = order.iter().map(|&j| sizes[j]).collect();
    HeatLevelScheme::new(boundaries, counts)
}

/// The level whose half-open interval contains `heat_index`.
pub fn assign_level(scheme: &HeatLevelScheme, heat_index: f64) -> Result<HeatLevel> {
    if heat_index.is_nan() || heat_index < 0.0 {
        return Err(ClusterError::InvalidHeatIndex(heat_index));
    }
    Ok(HeatLevel::from_index(
        scheme.boundaries.partition_point(|&b| b <= heat_index),
    ))
}

/// Copy of the corpus with every event's level set from its heat index.
pub fn label_corpus(corpus: &EventCorpus, scheme: &HeatLevelScheme) -> Result<EventCorpus> {
    let events = corpus
        .events
        .iter()
        .map(|e| {
            Ok(Event {
                level: Some(assign_level(scheme, e.heat_index)?),
                ..e.clone()
            })
        })
        .collect::<Result<_>>()?;
    Ok(EventCorpus {
        events,
        source_meta: corpus.source_meta.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    /// Events with their true level set, grouped by ascending level.
    pub records: Vec<Event>,
    pub n_per_level: usize,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Seeded stratified sample of exactly `n_per_level` events per level,
/// without replacement.
pub fn sample_eval_set(
    corpus: &EventCorpus,
    scheme: &HeatLevelScheme,
    n_per_level: usize,
    seed: u64,
) -> Result<EvalSet> {
    let mut by_level: Vec<Vec<&Event>> = vec![Vec::new(); scheme.num_levels()];
    for event in &corpus.events {
        by_level[assign_level(scheme, event.heat_index)?.index()].push(event);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_per_level * by_level.len());
    for (idx, pool) in by_level.iter().enumerate() {
        let level = HeatLevel::from_index(idx);
        if pool.len() < n_per_level {
            return Err(ClusterError::InsufficientLevel {
                level,
                available: pool.len(),
                required: n_per_level,
            });
        }
        let mut picks = index::sample(&mut rng, pool.len(), n_per_level).into_vec();
        picks.sort_unstable();
        records.extend(picks.into_iter().map(|i| Event {
            level: Some(level),
            ..pool[i].clone()
        }));
    }
    Ok(EvalSet { records, n_per_level })
}
