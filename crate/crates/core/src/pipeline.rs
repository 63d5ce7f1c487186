//! Config-driven experiment runs: data, sampling, teacher, training,
//! inference and evaluation in one output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, LabelAccess, load_dataset, split_dataset};
use crate::error::{Error, Result};
use crate::eval::{
    EvalConfig, Predictions, Report, evaluate, f1_curve, load_predictions, roc_points,
    save_predictions, tracks_for, write_curves,
};
use crate::model::{ModelParams, infer, load_checkpoint, save_checkpoint};
use crate::rng::Rng;
use crate::sampling::{EmbeddingPool, Sampler, SamplingConfig, Strategy, load_pool, save_clustering};
use crate::synth::{POOL_FILE, SynthConfig, TEST_FILE, TRAIN_FILE, generate, write_synth};
use crate::train::{TrainConfig, TrainLog, TrainMode, train_with_vocab};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `train.jsonl`, `test.jsonl` and `pool.bin`.
    pub path: Option<PathBuf>,
    /// Generate synthetic data into the output directory instead.
    pub synth: Option<SynthConfig>,
    pub validation_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synth: None,
            validation_count: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: Option<usize>,
    pub embed_dim: Option<usize>,
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfSupConfig {
    /// Frozen teacher checkpoint.
    pub teacher: Option<PathBuf>,
    /// Train the teacher first with the same train and sampling settings.
    pub train_teacher: bool,
}

impl SelfSupConfig {
    pub fn enabled(&self) -> bool {
        self.teacher.is_some() || self.train_teacher
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub selfsup: SelfSupConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config(
                    "data needs exactly one of `path` or `synth`".into(),
                ));
            }
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        if self.data.validation_count == 0 {
            return Err(Error::Config("data.validation_count must be positive".into()));
        }
        if let Some(e) = self.model.embed_dim {
            if e != self.train.embed_dim && self.train.embed_dim != TrainConfig::default().embed_dim {
                return Err(Error::Config(format!(
                    "model.embed_dim {e} conflicts with train.embed_dim {}",
                    self.train.embed_dim
                )));
            }
        }
        self.train.validate()?;
        self.eval.validate()?;
        if self.selfsup.teacher.is_some() && self.selfsup.train_teacher {
            return Err(Error::Config(
                "selfsup takes either a teacher checkpoint or train_teacher, not both".into(),
            ));
        }
        if self.train.mode == TrainMode::Sentence && self.selfsup.enabled() {
            return Err(Error::Config("self-supervision requires phrase mode".into()));
        }
        if self.train.mode == TrainMode::Phrase {
            let s = &self.sampling;
            if s.strategy != Strategy::None && s.n == 0 {
                return Err(Error::Config("sampling.n must be positive".into()));
            }
            if !(0.0..=1.0).contains(&s.tau) {
                return Err(Error::Config(format!("sampling.tau must be in [0, 1], got {}", s.tau)));
            }
            if s.candidate_batch == 0 || s.clusters == 0 || s.kmeans_iters == 0 {
                return Err(Error::Config(
                    "sampling.candidate_batch, clusters and kmeans_iters must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Moves `model.embed_dim` into the train section so both agree.
    fn resolve(mut self) -> Self {
        if let Some(e) = self.model.embed_dim {
            self.train.embed_dim = e;
        }
        self.model.embed_dim = Some(self.train.embed_dim);
        self
    }
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::invalid(e.to_string()))
}

struct RunLog {
    path: PathBuf,
    lines: String,
}

impl RunLog {
    fn push(&mut self, v: serde_json::Value) -> Result<()> {
        self.lines.push_str(&v.to_string());
        self.lines.push('\n');
        write_file(&self.path, &self.lines)
    }

    fn epochs(&mut self, model: &str, log: &TrainLog) -> Result<()> {
        for e in &log.epochs {
            self.push(serde_json::json!({
                "model": model,
                "epoch": e.epoch,
                "train_loss": e.train_loss,
                "valid_loss": e.valid_loss,
                "lr": e.lr,
            }))?;
        }
        self.push(serde_json::json!({
            "model": model,
            "best_epoch": log.best_epoch,
            "best_valid_loss": log.best_valid_loss,
            "lr_drops": log.lr_drops,
        }))
    }
}

struct LoadedData {
    train: Vec<ClipRecord>,
    test: Vec<ClipRecord>,
    pool: EmbeddingPool,
}

fn load_data(cfg: &ExperimentConfig, out: &Path) -> Result<LoadedData> {
    let dir = match (&cfg.data.path, &cfg.data.synth) {
        (Some(p), _) => p.clone(),
        (None, Some(s)) => {
            let dir = out.join("data");
            write_synth(&dir, s, &generate(s)?)?;
            dir
        }
        (None, None) => unreachable!("validated"),
    };
    Ok(LoadedData {
        train: load_dataset(dir.join(TRAIN_FILE), LabelAccess::Weak)?,
        test: load_dataset(dir.join(TEST_FILE), LabelAccess::Strong)?,
        pool: load_pool(dir.join(POOL_FILE))?,
    })
}

/// Frame probabilities for every caption phrase of every clip.
pub fn predict(params: &ModelParams, clips: &[ClipRecord]) -> Result<Predictions> {
    let per_clip = clips
        .par_iter()
        .map(|c| infer(params, &c.frames, &c.caption))
        .collect::<Result<Vec<_>>>()?;
    let mut preds = Predictions::new();
    for (clip, sim) in clips.iter().zip(per_clip) {
        for (n, phrase) in clip.caption.iter().enumerate() {
            preds.insert(clip.clip_id(), &phrase.text, sim.track(n))?;
        }
    }
    Ok(preds)
}

/// Runs every stage into `out`. On failure a `FAILED` marker holding the
/// error is left next to the partial outputs.
pub fn run_pipeline(config: &ExperimentConfig, out: impl AsRef<Path>) -> Result<Report> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = run_stages(config, out);
    if let Err(e) = &result {
        // best effort; the original error matters more
        let _ = fs::write(&marker, format!("{e}\n"));
    }
    result
}

fn run_stages(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    let cfg = stage("config", || {
        config.validate()?;
        let cfg = config.clone().resolve();
        write_file(&out.join(RESOLVED_CONFIG_FILE), to_json(&cfg)?)?;
        Ok(cfg)
    })?;
    let mut log = RunLog {
        path: out.join(RUN_LOG_FILE),
        lines: String::new(),
    };
    let timed = |name: &str, t: Instant, log: &mut RunLog| {
        log.push(serde_json::json!({"stage": name, "seconds": t.elapsed().as_secs_f64()}))
    };

    let t = Instant::now();
    let data = stage("data", || {
        let data = load_data(&cfg, out)?;
        if data.train.is_empty() || data.test.is_empty() {
            return Err(Error::Empty("training or test set"));
        }
        let d = data.train[0].frames.feature_dim();
        if let Some(want) = cfg.model.feature_dim {
            if want != d {
                return Err(Error::Config(format!("model.feature_dim {want} but data has {d}")));
            }
        }
        Ok(data)
    })?;
    timed("data", t, &mut log)?;
    let (train_set, valid_set) = stage("split", || {
        split_dataset(&data.train, cfg.data.validation_count, &mut Rng::new(cfg.train.seed).fork(7))
    })?;

    let vocab = stage("vocab", || {
        let needed = data
            .pool
            .phrases()
            .iter()
            .chain(data.train.iter().chain(&data.test).flat_map(|c| &c.caption))
            .flat_map(|p| p.tokens.iter().copied())
            .max()
            .map_or(1, |m| m + 1);
        match cfg.model.vocab_size {
            Some(v) if v < needed => Err(Error::Config(format!(
                "model.vocab_size {v} is smaller than the {needed} token ids in the data"
            ))),
            Some(v) => Ok(v),
            None => Ok(needed),
        }
    })?;

    let t = Instant::now();
    let sampler = stage("sampling", || {
        if cfg.train.mode == TrainMode::Sentence {
            return Ok(None);
        }
        let s = Sampler::new(cfg.sampling.clone(), data.pool.clone(), cfg.train.seed)?;
        if let Some(c) = &s.clustering {
            save_clustering(out.join("clustering.json"), &s.pool, c)?;
        }
        Ok(Some(s))
    })?;
    timed("sampling", t, &mut log)?;

    let config_value = serde_json::to_value(&cfg).map_err(|e| Error::invalid(e.to_string()))?;
    let t = Instant::now();
    let teacher = stage("teacher", || {
        if let Some(path) = &cfg.selfsup.teacher {
            return Ok(Some(load_checkpoint(path)?.0));
        }
        if !cfg.selfsup.train_teacher {
            return Ok(None);
        }
        let (params, tlog) =
            train_with_vocab(&train_set, &valid_set, &cfg.train, sampler.as_ref(), None, vocab)?;
        save_checkpoint(out.join(TEACHER_FILE), &params, &config_value)?;
        log.epochs("teacher", &tlog)?;
        Ok(Some(params))
    })?;
    timed("teacher", t, &mut log)?;

    let t = Instant::now();
    let params = stage("train", || {
        let (params, tlog) = train_with_vocab(
            &train_set,
            &valid_set,
            &cfg.train,
            sampler.as_ref(),
            teacher.as_ref(),
            vocab,
        )?;
        save_checkpoint(out.join(MODEL_FILE), &params, &config_value)?;
        log.epochs("model", &tlog)?;
        Ok(params)
    })?;
    timed("train", t, &mut log)?;

    let t = Instant::now();
    stage("infer", || save_predictions(out.join(PREDICTIONS_FILE), &predict(&params, &data.test)?))?;
    timed("infer", t, &mut log)?;

    let t = Instant::now();
    let report = stage("eval", || {
        // score the file as written so reported metrics match the artifact
        let preds = load_predictions(out.join(PREDICTIONS_FILE))?;
        let report = evaluate(&preds, &data.test, &cfg.eval)?;
        write_file(&out.join(METRICS_JSON), to_json(&report)?)?;
        write_file(
            &out.join(METRICS_CSV),
            format!("{}\n{}\n", Report::CSV_HEADER, report.csv_row()),
        )?;
        let tracks = tracks_for(&preds, &data.test)?;
        write_curves(
            out,
            &roc_points(&tracks, &cfg.eval)?,
            &f1_curve(&tracks, &cfg.eval)?,
            cfg.eval.e_max,
        )?;
        Ok(report)
    })?;
    timed("eval", t, &mut log)?;
    Ok(report)
}

/// One row per run directory, best `psds_short` first.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<(String, Report)>,
}

pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let path = dir.join(METRICS_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report: Report = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        rows.push((name, report));
    }
    let key = |r: &Report| r.psds_short.unwrap_or(f64::NEG_INFINITY);
    rows.sort_by(|a, b| key(&b.1).total_cmp(&key(&a.1)).then(a.0.cmp(&b.0)));
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = format!("run,{}\n", Report::CSV_HEADER);
        for (name, r) in &self.rows {
            let _ = writeln!(s, "{name},{}", r.csv_row());
        }
        s
    }

    pub fn to_pretty(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(3);
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let mut s = format!(
            "{:<width$}  {:>10}  {:>11}  {:>10}  {:>11}\n",
            "run", "psds_whole", "thauc_whole", "psds_short", "thauc_short"
        );
        for (name, r) in &self.rows {
            let _ = writeln!(
                s,
                "{name:<width$}  {:>10.2}  {:>11.2}  {:>10}  {:>11}",
                r.psds_whole,
                r.thauc_whole,
                opt(r.psds_short),
                opt(r.thauc_short)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_json(r#"{"data": {"synth": {}}, "train": {"bogus": 1}}"#)
            .unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn data_source_must_be_unique() {
        assert!(ExperimentConfig::from_json("{}").is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"path": "x", "synth": {}}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"synth": {}}}"#).is_ok());
    }

    #[test]
    fn embed_dim_resolution() {
        let cfg = ExperimentConfig::from_json(r#"{"data": {"synth": {}}, "model": {"embed_dim": 8}}"#)
            .unwrap()
            .resolve();
        assert_eq!(cfg.train.embed_dim, 8);
        assert!(
            ExperimentConfig::from_json(
                r#"{"data": {"synth": {}}, "model": {"embed_dim": 8}, "train": {"embed_dim": 16}}"#
            )
            .is_err()
        );
    }

    #[test]
    fn sentence_mode_rejects_selfsup() {
        let text = r#"{"data": {"synth": {}}, "train": {"mode": "sentence"}, "selfsup": {"train_teacher": true}}"#;
        assert!(ExperimentConfig::from_json(text).is_err());
    }

    #[test]
    fn compare_missing_metrics_names_dir() {
        let dir = tempfile::tempdir().unwrap();
        let err = compare_runs(&[dir.path().to_path_buf()]).unwrap_err();
        assert!(err.to_string().contains(&dir.path().display().to_string()));
    }
}
