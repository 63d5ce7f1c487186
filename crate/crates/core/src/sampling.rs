//! Phrase pool, k-means clustering of phrase embeddings and the negative
//! phrase samplers used by phrase-level training.
//!
//! Every sampler returns the clip's caption phrases first (label 1) followed
//! by sampled negatives (label 0). A negative never repeats the text of a
//! positive.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blob::{read_blob, write_blob};
use crate::data::{ClipRecord, PhraseQuery};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, dot};
use crate::rng::Rng;

pub const DEFAULT_QUERY_NUMBER: usize = 32;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_CANDIDATE_BATCH: usize = 128;
pub const DEFAULT_CLUSTERS: usize = 32;
pub const DEFAULT_EMBEDDING_DIM: usize = 16;
pub const ORACLE_NOISE_SIGMA: f64 = 0.1;

/// Unique phrases with unit-norm embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPool {
    phrases: Vec<PhraseQuery>,
    embeddings: Matrix,
    index: HashMap<String, usize>,
}

impl EmbeddingPool {
    /// Rows are normalized here; duplicate texts and zero rows are errors.
    pub fn new(phrases: Vec<PhraseQuery>, mut embeddings: Matrix) -> Result<Self> {
        if phrases.len() != embeddings.rows() {
            return Err(Error::dim(format!(
                "{} phrases but {} embedding rows",
                phrases.len(),
                embeddings.rows()
            )));
        }
        if phrases.len() < 2 {
            return Err(Error::invalid("phrase pool needs at least 2 unique phrases"));
        }
        let mut index = HashMap::with_capacity(phrases.len());
        for (i, p) in phrases.iter().enumerate() {
            if index.insert(p.text.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate pool phrase {:?}", p.text)));
            }
            let row = embeddings.row_mut(i);
            let norm = dot(row, row).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::invalid(format!(
                    "phrase {:?} has a zero or non-finite embedding",
                    p.text
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(EmbeddingPool {
            phrases,
            embeddings,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn phrases(&self) -> &[PhraseQuery] {
        &self.phrases
    }

    pub fn phrase(&self, i: usize) -> &PhraseQuery {
        &self.phrases[i]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn position(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    fn require(&self, text: &str) -> Result<usize> {
        self.position(text)
            .ok_or_else(|| Error::invalid(format!("phrase {text:?} is not in the pool")))
    }
}

/// Stand-in for a learned audio-centric text encoder: each class owns a
/// random unit prototype and a phrase embeds as its class prototype plus
/// Gaussian noise, renormalized. The noise of a phrase depends only on the
/// seed and the phrase text.
#[derive(Debug, Clone)]
pub struct OracleEmbedder {
    prototypes: Matrix,
    sigma: f64,
    seed: u64,
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn unit_gaussian(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl OracleEmbedder {
    pub fn new(num_classes: usize, dim: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f64>> = (0..num_classes).map(|_| unit_gaussian(dim, &mut rng)).collect();
        OracleEmbedder {
            prototypes: Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, dim)),
            sigma,
            seed,
        }
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn embed(&self, phrase: &PhraseQuery) -> Result<Vec<f64>> {
        let class = phrase.class_id.ok_or_else(|| {
            Error::invalid(format!("phrase {:?} has no class id to embed", phrase.text))
        })?;
        if class >= self.prototypes.rows() {
            return Err(Error::invalid(format!(
                "class {class} outside the {} oracle classes",
                self.prototypes.rows()
            )));
        }
        let mut rng = Rng::new(self.seed ^ fnv1a(&phrase.text));
        let mut v: Vec<f64> = self
            .prototypes
            .row(class)
            .iter()
            .map(|p| p + rng.normal(0.0, self.sigma))
            .collect();
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Unique caption phrases of `dataset` (first occurrence order), embedded
/// with `embedder`.
pub fn build_pool(dataset: &[ClipRecord], embedder: &OracleEmbedder) -> Result<EmbeddingPool> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut seen = HashSet::new();
    let mut phrases = Vec::new();
    for p in dataset.iter().flat_map(|c| &c.caption) {
        if seen.insert(p.text.as_str()) {
            phrases.push(p.clone());
        }
    }
    let rows = phrases
        .iter()
        .map(|p| embedder.embed(p))
        .collect::<Result<Vec<_>>>()?;
    let dim = embedder.prototypes().cols();
    let mut embeddings = Matrix::zeros(rows.len(), dim);
    for (i, r) in rows.iter().enumerate() {
        embeddings.row_mut(i).copy_from_slice(r);
    }
    EmbeddingPool::new(phrases, embeddings)
}

pub fn cosine_sim(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::dim(format!("{} vs {} dims", e1.len(), e2.len())));
    }
    let (n1, n2) = (dot(e1, e1).sqrt(), dot(e2, e2).sqrt());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot(e1, e2) / (n1 * n2)).clamp(-1.0, 1.0))
}

#[derive(Serialize, Deserialize)]
struct PoolHeader {
    format: String,
    version: u32,
    dim: usize,
    count: usize,
    phrases: Vec<PhraseQuery>,
}

const POOL_FORMAT: &str = "tagground-pool";

pub fn save_pool(path: impl AsRef<Path>, pool: &EmbeddingPool) -> Result<()> {
    let header = PoolHeader {
        format: POOL_FORMAT.to_string(),
        version: 1,
        dim: pool.dim(),
        count: pool.len(),
        phrases: pool.phrases.clone(),
    };
    write_blob(path.as_ref(), &header, pool.embeddings.as_slice())
}

pub fn load_pool(path: impl AsRef<Path>) -> Result<EmbeddingPool> {
    let path = path.as_ref();
    let (header, floats): (PoolHeader, Vec<f64>) = read_blob(path)?;
    if header.format != POOL_FORMAT || header.phrases.len() != header.count {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "not an embedding pool file".into(),
        });
    }
    let embeddings = Matrix::from_vec(header.count, header.dim, floats)?;
    EmbeddingPool::new(header.phrases, embeddings)
}

/// Hard assignment of every pool phrase to one of `n_c` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub n_c: usize,
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    /// Pool indices of each cluster, by cluster id.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_c];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Converges when assignments stop
/// changing or after `max_iters` updates; empty clusters keep their centroid.
pub fn kmeans(pool: &EmbeddingPool, n_c: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    let points = pool.embeddings();
    let p = points.rows();
    if n_c == 0 || n_c > p {
        return Err(Error::invalid(format!(
            "cluster count {n_c} must be in 1..={p} (pool size)"
        )));
    }
    let mut rng = Rng::new(seed);

    let mut chosen = vec![rng.below(p)];
    let mut min_d: Vec<f64> = (0..p)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < n_c {
        let next = if min_d.iter().sum::<f64>() > 0.0 {
            rng.weighted_index(&min_d)
        } else {
            (0..p).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut centroids = Matrix::zeros(n_c, points.cols());
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(points.row(i));
    }

    let mut assignments = vec![usize::MAX; p];
    let mut inertia_history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..p {
            let (c, d) = nearest(points.row(i), &centroids);
            inertia += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        inertia_history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(n_c, points.cols());
        let mut counts = vec![0usize; n_c];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in (0..n_c).filter(|&c| counts[c] > 0) {
            let row = centroids.row_mut(c);
            for (dst, s) in row.iter_mut().zip(sums.row(c)) {
                *dst = s / counts[c] as f64;
            }
        }
    }
    Ok(Clustering {
        n_c,
        assignments,
        centroids,
        inertia_history,
    })
}

/// Lowest-inertia result over `restarts` seeds derived from `seed`.
pub fn kmeans_best_of(
    pool: &EmbeddingPool,
    n_c: usize,
    seed: u64,
    restarts: usize,
    max_iters: usize,
) -> Result<Clustering> {
    let mut best: Option<Clustering> = None;
    for r in 0..restarts.max(1) as u64 {
        let c = kmeans(pool, n_c, seed.wrapping_add(r.wrapping_mul(0x9e3779b97f4a7c15)), max_iters)?;
        if best.as_ref().is_none_or(|b| c.inertia() < b.inertia()) {
            best = Some(c);
        }
    }
    Ok(best.unwrap())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusteringFile {
    n_c: usize,
    assignments: BTreeMap<String, usize>,
}

pub fn save_clustering(path: impl AsRef<Path>, pool: &EmbeddingPool, clustering: &Clustering) -> Result<()> {
    let path = path.as_ref();
    let file = ClusteringFile {
        n_c: clustering.n_c,
        assignments: pool
            .phrases()
            .iter()
            .zip(&clustering.assignments)
            .map(|(p, c)| (p.text.clone(), *c))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a clustering file; centroids are recomputed from the pool.
pub fn load_clustering(path: impl AsRef<Path>, pool: &EmbeddingPool) -> Result<Clustering> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ClusteringFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut assignments = vec![usize::MAX; pool.len()];
    for (text, c) in &file.assignments {
        if *c >= file.n_c {
            return Err(Error::invalid(format!("cluster {c} >= n_c {}", file.n_c)));
        }
        assignments[pool.require(text)?] = *c;
    }
    if let Some(i) = assignments.iter().position(|c| *c == usize::MAX) {
        return Err(Error::invalid(format!(
            "phrase {:?} has no cluster",
            pool.phrase(i).text
        )));
    }
    let mut centroids = Matrix::zeros(file.n_c, pool.dim());
    let mut counts = vec![0usize; file.n_c];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in centroids.row_mut(c).iter_mut().zip(pool.embedding(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate().filter(|(_, n)| **n > 0) {
        centroids.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    let inertia = (0..pool.len())
        .map(|i| sq_dist(pool.embedding(i), centroids.row(assignments[i])))
        .sum();
    Ok(Clustering {
        n_c: file.n_c,
        assignments,
        centroids,
        inertia_history: vec![inertia],
    })
}

/// One clip with `n_pos` positive phrases followed by sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub clip_id: String,
    pub phrases: Vec<PhraseQuery>,
    pub y: Vec<f64>,
    pub n_pos: usize,
}

impl SampledBatch {
    fn assemble(clip: &ClipRecord, pool: &EmbeddingPool, negatives: Vec<usize>) -> Self {
        let n_pos = clip.caption.len();
        let mut phrases = clip.caption.clone();
        phrases.extend(negatives.iter().map(|&i| pool.phrase(i).clone()));
        let mut y = vec![0.0; phrases.len()];
        y[..n_pos].fill(1.0);
        SampledBatch {
            clip_id: clip.clip_id().to_string(),
            phrases,
            y,
            n_pos,
        }
    }

    pub fn negatives(&self) -> &[PhraseQuery] {
        &self.phrases[self.n_pos..]
    }
}

fn negative_budget(clip: &ClipRecord, n: usize) -> Result<usize> {
    let n_pos = clip.caption.len();
    n.checked_sub(n_pos).ok_or_else(|| {
        Error::invalid(format!(
            "query number {n} is smaller than the {n_pos} positives of clip {}",
            clip.clip_id()
        ))
    })
}

/// Pool indices whose text is not a positive of `clip`.
fn candidates(clip: &ClipRecord, pool: &EmbeddingPool) -> Vec<usize> {
    let positives: HashSet<&str> = clip.caption.iter().map(|p| p.text.as_str()).collect();
    (0..pool.len())
        .filter(|&i| !positives.contains(pool.phrase(i).text.as_str()))
        .collect()
}

/// Negatives drawn uniformly without replacement from the rest of the pool.
pub fn sample_random(
    clip: &ClipRecord,
    pool: &EmbeddingPool,
    n: usize,
    rng: &mut Rng,
) -> Result<SampledBatch> {
    let k = negative_budget(clip, n)?;
    let cands = candidates(clip, pool);
    if cands.len() < k {
        return Err(Error::PoolExhausted(format!(
            "clip {} needs {k} negatives, pool offers {}",
            clip.clip_id(),
            cands.len()
        )));
    }
    let negatives = rng
        .sample_indices(cands.len(), k)
        .into_iter()
        .map(|i| cands[i])
        .collect();
    Ok(SampledBatch::assemble(clip, pool, negatives))
}

/// Batched rejection sampling: candidates are drawn `b` at a time from the
/// unseen part of the pool and kept while their highest cosine similarity
/// to any positive stays below `tau`. Returns however many negatives were
/// found (up to `n - n_pos`) once the pool runs dry.
pub fn sample_similarity_up_to(
    clip: &ClipRecord,
    pool: &EmbeddingPool,
    n: usize,
    tau: f64,
    b: usize,
    rng: &mut Rng,
) -> Result<SampledBatch> {
    if b == 0 {
        return Err(Error::invalid("candidate batch size must be >= 1"));
    }
    let k = negative_budget(clip, n)?;
    let positives = clip
        .caption
        .iter()
        .map(|p| pool.require(&p.text))
        .collect::<Result<Vec<_>>>()?;
    let mut remaining = candidates(clip, pool);
    let mut chosen = Vec::with_capacity(k);
    while chosen.len() < k && !remaining.is_empty() {
        let take = b.min(remaining.len());
        let mut picked = rng.sample_indices(remaining.len(), take);
        let batch: Vec<usize> = picked.iter().map(|&i| remaining[i]).collect();
        // drop the whole batch from the unseen set
        picked.sort_unstable_by(|a, b| b.cmp(a));
        for i in picked {
            remaining.swap_remove(i);
        }
        for q in batch {
            let mut s = f64::NEG_INFINITY;
            for &p in &positives {
                s = s.max(cosine_sim(pool.embedding(q), pool.embedding(p))?);
            }
            if s < tau {
                chosen.push(q);
                if chosen.len() == k {
                    break;
                }
            }
        }
    }
    Ok(SampledBatch::assemble(clip, pool, chosen))
}

/// Like [`sample_similarity_up_to`] but fails unless exactly `n - n_pos`
/// negatives pass the threshold.
pub fn sample_similarity(
    clip: &ClipRecord,
    pool: &EmbeddingPool,
    n: usize,
    tau: f64,
    b: usize,
    rng: &mut Rng,
) -> Result<SampledBatch> {
    let batch = sample_similarity_up_to(clip, pool, n, tau, b, rng)?;
    let want = n - batch.n_pos;
    let got = batch.negatives().len();
    if got < want {
        return Err(Error::PoolExhausted(format!(
            "only {got} of {want} negatives for clip {} fall below tau = {tau}",
            clip.clip_id()
        )));
    }
    Ok(batch)
}

/// Round-robin over the clusters that contain no positive phrase, so
/// per-cluster counts differ by at most one. Within a cluster phrases are
/// drawn without replacement until the cluster is used up, then the
/// cluster is reopened.
pub fn sample_clustering(
    clip: &ClipRecord,
    n: usize,
    pool: &EmbeddingPool,
    clustering: &Clustering,
    rng: &mut Rng,
) -> Result<SampledBatch> {
    if clustering.assignments.len() != pool.len() {
        return Err(Error::dim("clustering does not match the pool"));
    }
    let k = negative_budget(clip, n)?;
    let mut positive_clusters = HashSet::new();
    for p in &clip.caption {
        positive_clusters.insert(clustering.assignments[pool.require(&p.text)?]);
    }
    let members = clustering.members();
    let mut negative_clusters: Vec<usize> = (0..clustering.n_c)
        .filter(|c| !positive_clusters.contains(c) && !members[*c].is_empty())
        .collect();
    if negative_clusters.is_empty() {
        return Err(Error::PoolExhausted(format!(
            "every cluster holds a positive of clip {}",
            clip.clip_id()
        )));
    }
    rng.shuffle(&mut negative_clusters);

    let mut open: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut chosen = Vec::with_capacity(k);
    for j in 0..k {
        let c = negative_clusters[j % negative_clusters.len()];
        let left = open.entry(c).or_default();
        if left.is_empty() {
            left.extend_from_slice(&members[c]);
        }
        let pick = rng.below(left.len());
        chosen.push(left.swap_remove(pick));
    }
    Ok(SampledBatch::assemble(clip, pool, chosen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Positives only; exists to demonstrate the collapse without negatives.
    None,
    Random,
    Similarity,
    Clustering,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Random => "random",
            Strategy::Similarity => "similarity",
            Strategy::Clustering => "clustering",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "random" => Ok(Strategy::Random),
            "similarity" => Ok(Strategy::Similarity),
            "clustering" => Ok(Strategy::Clustering),
            _ => Err(Error::invalid(format!("unknown sampling strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    pub n: usize,
    pub tau: f64,
    pub candidate_batch: usize,
    pub clusters: usize,
    pub kmeans_iters: usize,
    /// Draw fresh negatives every epoch instead of once.
    pub resample_each_epoch: bool,
    /// Let the similarity sampler return fewer negatives when too few
    /// phrases pass `tau`, instead of failing.
    pub allow_short: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            strategy: Strategy::Clustering,
            n: DEFAULT_QUERY_NUMBER,
            tau: DEFAULT_TAU,
            candidate_batch: DEFAULT_CANDIDATE_BATCH,
            clusters: DEFAULT_CLUSTERS,
            kmeans_iters: 100,
            resample_each_epoch: true,
            allow_short: true,
        }
    }
}

/// A configured strategy bound to its pool (and clustering when needed).
#[derive(Debug, Clone)]
pub struct Sampler {
    pub config: SamplingConfig,
    pub pool: EmbeddingPool,
    pub clustering: Option<Clustering>,
}

impl Sampler {
    /// Runs k-means when the strategy needs it.
    pub fn new(config: SamplingConfig, pool: EmbeddingPool, seed: u64) -> Result<Self> {
        let clustering = match config.strategy {
            Strategy::Clustering => Some(kmeans(
                &pool,
                config.clusters.min(pool.len()),
                seed,
                config.kmeans_iters,
            )?),
            _ => None,
        };
        Ok(Sampler {
            config,
            pool,
            clustering,
        })
    }

    pub fn with_clustering(config: SamplingConfig, pool: EmbeddingPool, clustering: Clustering) -> Self {
        Sampler {
            config,
            pool,
            clustering: Some(clustering),
        }
    }

    pub fn sample(&self, clip: &ClipRecord, rng: &mut Rng) -> Result<SampledBatch> {
        let c = &self.config;
        match c.strategy {
            Strategy::None => Ok(SampledBatch::assemble(clip, &self.pool, Vec::new())),
            Strategy::Random => sample_random(clip, &self.pool, c.n, rng),
            Strategy::Similarity if c.allow_short => {
                sample_similarity_up_to(clip, &self.pool, c.n, c.tau, c.candidate_batch, rng)
            }
            Strategy::Similarity => {
                sample_similarity(clip, &self.pool, c.n, c.tau, c.candidate_batch, rng)
            }
            Strategy::Clustering => {
                let clustering = self
                    .clustering
                    .as_ref()
                    .ok_or_else(|| Error::invalid("clustering strategy without a clustering"))?;
                sample_clustering(clip, c.n, &self.pool, clustering, rng)
            }
        }
    }
}

/// Fraction of sampled negatives whose hidden class occurs in the clip.
/// Requires class ids on both captions and pool phrases.
pub fn false_negative_rate(batches: &[(&ClipRecord, SampledBatch)]) -> Result<f64> {
    let mut total = 0usize;
    let mut false_neg = 0usize;
    for (clip, batch) in batches {
        let classes = clip
            .caption
            .iter()
            .map(|p| p.class_id.ok_or_else(|| Error::invalid("caption phrase without class id")))
            .collect::<Result<HashSet<_>>>()?;
        for q in batch.negatives() {
            let c = q
                .class_id
                .ok_or_else(|| Error::invalid("pool phrase without class id"))?;
            total += 1;
            if classes.contains(&c) {
                false_neg += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("sampled negatives"));
    }
    Ok(false_neg as f64 / total as f64)
}
