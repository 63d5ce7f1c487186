//! Synthetic grounding benchmark with hidden strong labels.
//!
//! Every class owns a sparse ±1 signature over a quarter of the feature
//! dimensions. A clip is Gaussian background noise with 1–3 events whose
//! frames get their class signature added; its caption names each event with
//! one of the class's phrase variants. Classes are drawn with Zipf-like
//! frequencies so a few classes dominate the captions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    ClipRecord, DEFAULT_HOP_SECONDS, FrameSequence, PhraseQuery, StrongLabel, round6, save_dataset,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::sampling::{
    DEFAULT_EMBEDDING_DIM, EmbeddingPool, ORACLE_NOISE_SIGMA, OracleEmbedder, save_pool,
};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const POOL_FILE: &str = "pool.bin";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub variants_per_class: usize,
    /// Training clips (validation is split off these later).
    pub clips: usize,
    /// Held-out evaluation clips.
    pub test_clips: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub events_min: usize,
    pub events_max: usize,
    pub duration_min: f64,
    pub duration_max: f64,
    pub noise_sigma: f64,
    pub zipf_exponent: f64,
    pub embedding_dim: usize,
    pub embedding_sigma: f64,
    pub hop_seconds: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 24,
            variants_per_class: 4,
            clips: 2000,
            test_clips: 500,
            frames: 100,
            feature_dim: 20,
            events_min: 1,
            events_max: 3,
            duration_min: 0.1,
            duration_max: 0.9,
            noise_sigma: 0.25,
            zipf_exponent: 1.0,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            embedding_sigma: ORACLE_NOISE_SIGMA,
            hop_seconds: DEFAULT_HOP_SECONDS,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.variants_per_class == 0 {
            return bad("num_classes and variants_per_class must be positive".into());
        }
        if self.frames == 0 || self.feature_dim == 0 || self.embedding_dim == 0 {
            return bad("frames, feature_dim and embedding_dim must be positive".into());
        }
        if self.events_min == 0 || self.events_min > self.events_max {
            return bad(format!(
                "events range {}..={} is empty or starts at 0",
                self.events_min, self.events_max
            ));
        }
        if self.events_max > self.num_classes {
            return bad(format!(
                "events_max {} exceeds the {} classes (events in a clip have distinct classes)",
                self.events_max, self.num_classes
            ));
        }
        if !(self.duration_min > 0.0
            && self.duration_min <= self.duration_max
            && self.duration_max <= 1.0)
        {
            return bad(format!(
                "duration range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.duration_min, self.duration_max
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.embedding_sigma >= 0.0 && self.zipf_exponent >= 0.0) {
            return bad("noise_sigma, embedding_sigma and zipf_exponent must be >= 0".into());
        }
        if !(self.hop_seconds > 0.0) {
            return bad("hop_seconds must be positive".into());
        }
        Ok(())
    }
}

/// In-memory generator output. Phrases carry their hidden class ids.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
    /// Every phrase variant of every class.
    pub pool: EmbeddingPool,
    pub embedder: OracleEmbedder,
    /// `K x D` class signatures.
    pub signatures: Matrix,
}

/// All phrase variants; tokens are unique per variant.
pub fn phrase_inventory(config: &SynthConfig) -> Vec<Vec<PhraseQuery>> {
    (0..config.num_classes)
        .map(|k| {
            (0..config.variants_per_class)
                .map(|v| {
                    let base = 2 * (k * config.variants_per_class + v);
                    let tokens = vec![base, base + 1];
                    let text = tokens
                        .iter()
                        .map(|t| format!("w{t:03}"))
                        .collect::<Vec<_>>()
                        .join(" ");
                    PhraseQuery::new(text, tokens).with_class(k)
                })
                .collect()
        })
        .collect()
}

fn signatures(config: &SynthConfig, rng: &mut Rng) -> Matrix {
    let d = config.feature_dim;
    let active = (d / 4).max(1);
    let mut sig = Matrix::zeros(config.num_classes, d);
    for k in 0..config.num_classes {
        for dim in rng.sample_indices(d, active) {
            sig.set(k, dim, if rng.coin() { 1.0 } else { -1.0 });
        }
    }
    sig
}

fn zipf_weights(config: &SynthConfig) -> Vec<f64> {
    (0..config.num_classes)
        .map(|k| 1.0 / ((k + 1) as f64).powf(config.zipf_exponent))
        .collect()
}

fn make_clip(
    id: String,
    config: &SynthConfig,
    inventory: &[Vec<PhraseQuery>],
    sig: &Matrix,
    weights: &[f64],
    rng: &mut Rng,
) -> Result<ClipRecord> {
    let (t_len, d) = (config.frames, config.feature_dim);
    let mut features = Matrix::zeros(t_len, d);
    if config.noise_sigma > 0.0 {
        for v in features.as_mut_slice() {
            *v = rng.normal(0.0, config.noise_sigma);
        }
    }

    let n_events = rng.between(config.events_min, config.events_max);
    let mut w = weights.to_vec();
    let mut caption = Vec::with_capacity(n_events);
    let mut labels = Vec::with_capacity(n_events);
    for idx in 0..n_events {
        let class = rng.weighted_index(&w);
        w[class] = 0.0;
        let variant = rng.below(config.variants_per_class);
        caption.push(inventory[class][variant].clone());

        let frac = rng.uniform(config.duration_min, config.duration_max);
        let dur = ((frac * t_len as f64).round() as usize).clamp(1, t_len);
        let onset = rng.between(0, t_len - dur);
        for t in onset..onset + dur {
            for (f, s) in features.row_mut(t).iter_mut().zip(sig.row(class)) {
                *f += s;
            }
        }
        labels.push(StrongLabel {
            phrase_index: idx,
            onset: round6(onset as f64 * config.hop_seconds),
            offset: round6((onset + dur) as f64 * config.hop_seconds),
        });
    }
    for v in features.as_mut_slice() {
        *v = round6(*v);
    }
    let frames = FrameSequence::new(id, features, config.hop_seconds)?;
    ClipRecord::new(frames, caption, labels)
}

/// Generates the full benchmark deterministically from `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let inventory = phrase_inventory(config);
    let sig = signatures(config, &mut root.fork(1));
    let weights = zipf_weights(config);

    let mut rng = root.fork(2);
    let train = (0..config.clips)
        .map(|i| make_clip(format!("train-{i:05}"), config, &inventory, &sig, &weights, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = root.fork(3);
    let test = (0..config.test_clips)
        .map(|i| make_clip(format!("test-{i:05}"), config, &inventory, &sig, &weights, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let embedder = OracleEmbedder::new(
        config.num_classes,
        config.embedding_dim,
        config.embedding_sigma,
        config.seed.wrapping_add(0x5eed),
    );
    let phrases: Vec<PhraseQuery> = inventory.into_iter().flatten().collect();
    let mut embeddings = Matrix::zeros(phrases.len(), config.embedding_dim);
    for (i, p) in phrases.iter().enumerate() {
        embeddings.row_mut(i).copy_from_slice(&embedder.embed(p)?);
    }
    let pool = EmbeddingPool::new(phrases, embeddings)?;
    Ok(SynthData {
        train,
        test,
        pool,
        embedder,
        signatures: sig,
    })
}

/// Writes `train.jsonl`, `test.jsonl` (each with its label sidecar),
/// `pool.bin` and the config echo into `dir`.
pub fn write_synth(dir: impl AsRef<Path>, config: &SynthConfig, data: &SynthData) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_dataset(dir.join(TRAIN_FILE), &data.train)?;
    save_dataset(dir.join(TEST_FILE), &data.test)?;
    // an empty dataset still gets its (empty) sidecar
    for name in ["train_labels.jsonl", "test_labels.jsonl"] {
        let p = dir.join(name);
        if !p.exists() {
            fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
        }
    }
    save_pool(dir.join(POOL_FILE), &data.pool)?;
    let echo = serde_json::to_string_pretty(config).map_err(|e| Error::invalid(e.to_string()))?;
    let p = dir.join(SYNTH_CONFIG_FILE);
    fs::write(&p, echo + "\n").map_err(|e| Error::io(&p, e))
}

/// `(clip index, phrase index)` pairs whose labeled duration is strictly
/// less than half the clip.
pub fn make_short_subset(dataset: &[ClipRecord]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (ci, clip) in dataset.iter().enumerate() {
        if clip.strong_labels.is_empty() {
            return Err(Error::invalid(format!(
                "clip {} has no strong labels",
                clip.clip_id()
            )));
        }
        let half = 0.5 * clip.frames.duration();
        for pi in 0..clip.caption.len() {
            let covered = clip.events_for(pi).total_duration();
            // labels are stored at 6 significant digits
            if covered < half * (1.0 - 1e-9) {
                out.push((ci, pi));
            }
        }
    }
    Ok(out)
}
