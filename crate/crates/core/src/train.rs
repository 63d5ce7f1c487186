//! Sentence-level and phrase-level training loops.
//!
//! Sentence mode scores every audio against every caption of a minibatch
//! (audio pooling, then text pooling) and applies the ranking loss. Phrase
//! mode scores each clip against its caption phrases plus sampled negatives
//! and applies clip-level BCE, or the self-supervision loss when a teacher
//! is given. Adam with plateau-based learning-rate decay and early stopping
//! on validation loss; the best-validation parameters are returned.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ClipRecord;
use crate::error::{Error, Result};
use crate::losses::{Margin, bce_loss, ranking_loss, selfsup_loss};
use crate::matrix::Matrix;
use crate::model::{
    Adam, DEFAULT_EMBED_DIM, ModelParams, embed_backward, embed_phrases, encode_frames,
    encoder_backward, similarity_backward, similarity_matrix,
};
use crate::pooling::{
    AudioPoolKind, TextPoolKind, audio_pool, audio_pool_grad, text_pool, text_pool_grad,
};
use crate::rng::Rng;
use crate::sampling::{SampledBatch, Sampler};
use crate::selfsup::{PseudoLabels, teacher_predict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Sentence,
    Phrase,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Sentence => "sentence",
            TrainMode::Phrase => "phrase",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(TrainMode::Sentence),
            "phrase" => Ok(TrainMode::Phrase),
            _ => Err(Error::invalid(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub audio_pool: AudioPoolKind,
    /// Sentence mode only.
    pub text_pool: TextPoolKind,
    pub margin: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub lr: f64,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Phrase,
            audio_pool: AudioPoolKind::LinearSoftmax,
            text_pool: TextPoolKind::Mean,
            margin: crate::losses::DEFAULT_MARGIN,
            batch_size: 32,
            max_epochs: 100,
            early_stop_patience: 10,
            plateau_patience: 3,
            lr: 0.001,
            embed_dim: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("plateau_patience", self.plateau_patience),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        Margin::new(self.margin).map_err(|e| Error::Config(e.to_string()))?;
        if self.mode == TrainMode::Sentence && self.batch_size < 2 {
            return Err(Error::Config(
                "sentence mode needs batch_size >= 2 (negatives come from the batch)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub lr_drops: usize,
}

/// Learning rate after `drops` plateau triggers.
pub fn decayed_lr(initial: f64, drops: usize) -> f64 {
    initial * 10f64.powi(-(drops as i32))
}

/// Reduce-on-plateau and early-stopping bookkeeping.
#[derive(Debug, Clone)]
pub struct Schedule {
    initial_lr: f64,
    plateau_patience: usize,
    early_stop_patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub drops: usize,
    bad_epochs: usize,
    since_drop: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochVerdict {
    Improved,
    Continue,
    Stop,
}

impl Schedule {
    pub fn new(initial_lr: f64, plateau_patience: usize, early_stop_patience: usize) -> Self {
        Schedule {
            initial_lr,
            plateau_patience,
            early_stop_patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            drops: 0,
            bad_epochs: 0,
            since_drop: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        decayed_lr(self.initial_lr, self.drops)
    }

    pub fn observe(&mut self, epoch: usize, valid_loss: f64) -> EpochVerdict {
        if valid_loss < self.best_loss {
            self.best_loss = valid_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            self.since_drop = 0;
            return EpochVerdict::Improved;
        }
        self.bad_epochs += 1;
        self.since_drop += 1;
        if self.bad_epochs >= self.early_stop_patience {
            return EpochVerdict::Stop;
        }
        if self.since_drop >= self.plateau_patience {
            self.drops += 1;
            self.since_drop = 0;
        }
        EpochVerdict::Continue
    }
}

/// Phrase-mode loss of one sampled clip; gradients are added to `grads`
/// scaled by `scale`.
pub fn phrase_loss_and_grad(
    params: &ModelParams,
    clip: &ClipRecord,
    batch: &SampledBatch,
    pool: AudioPoolKind,
    pseudo: Option<&PseudoLabels>,
    grads: Option<(&mut ModelParams, f64)>,
) -> Result<f64> {
    let encoded = encode_frames(params, &clip.frames)?;
    let embs = embed_phrases(params, &batch.phrases)?;
    let s_fp = similarity_matrix(&encoded, &embs)?;
    let (loss, d_sfp) = match pseudo {
        Some(pl) => selfsup_loss(&s_fp, &pl.y_self_frames, &pl.y_refined, pool)?,
        None => {
            let tracks: Vec<Vec<f64>> = (0..s_fp.cols()).map(|n| s_fp.column(n)).collect();
            let pooled = tracks
                .iter()
                .map(|t| audio_pool(pool, t))
                .collect::<Result<Vec<_>>>()?;
            let (loss, d_pooled) = bce_loss(&pooled, &batch.y)?;
            let mut d = Matrix::zeros(s_fp.rows(), s_fp.cols());
            if grads.is_some() {
                for (n, track) in tracks.iter().enumerate() {
                    for (t, g) in audio_pool_grad(pool, track, d_pooled[n])?.into_iter().enumerate() {
                        d.set(t, n, g);
                    }
                }
            }
            (loss, d)
        }
    };
    if let Some((grads, scale)) = grads {
        let mut d_enc = Matrix::zeros(encoded.rows(), encoded.cols());
        let mut d_embs = Matrix::zeros(embs.rows(), embs.cols());
        similarity_backward(&encoded, &embs, &s_fp, &d_sfp, &mut d_enc, &mut d_embs);
        d_enc.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        encoder_backward(&clip.frames, &encoded, &d_enc, grads);
        for (n, phrase) in batch.phrases.iter().enumerate() {
            let d: Vec<f64> = d_embs.row(n).iter().map(|v| v * scale).collect();
            embed_backward(phrase, &d, grads);
        }
    }
    Ok(loss)
}

/// Sentence-mode ranking loss over one minibatch of clips.
pub fn sentence_loss_and_grad(
    params: &ModelParams,
    clips: &[&ClipRecord],
    audio: AudioPoolKind,
    text: TextPoolKind,
    margin: Margin,
    grads: Option<&mut ModelParams>,
) -> Result<f64> {
    let b = clips.len();
    let encoded = clips
        .iter()
        .map(|c| encode_frames(params, &c.frames))
        .collect::<Result<Vec<_>>>()?;
    let embs = clips
        .iter()
        .map(|c| embed_phrases(params, &c.caption))
        .collect::<Result<Vec<_>>>()?;

    let mut grid = Matrix::zeros(b, b);
    let mut sims = Vec::with_capacity(b * b);
    for (i, enc) in encoded.iter().enumerate() {
        for (j, emb) in embs.iter().enumerate() {
            let s = similarity_matrix(enc, emb)?;
            let pooled = (0..s.cols())
                .map(|n| audio_pool(audio, &s.column(n)))
                .collect::<Result<Vec<_>>>()?;
            grid.set(i, j, text_pool(text, &pooled)?);
            sims.push((s, pooled));
        }
    }
    let (loss, d_grid) = ranking_loss(&grid, margin)?;

    if let Some(grads) = grads {
        let mut d_enc: Vec<Matrix> = encoded
            .iter()
            .map(|e| Matrix::zeros(e.rows(), e.cols()))
            .collect();
        let mut d_embs: Vec<Matrix> = embs
            .iter()
            .map(|e| Matrix::zeros(e.rows(), e.cols()))
            .collect();
        for i in 0..b {
            for j in 0..b {
                let g = d_grid.get(i, j);
                if g == 0.0 {
                    continue;
                }
                let (s, pooled) = &sims[i * b + j];
                let d_pooled = text_pool_grad(text, pooled, g)?;
                let mut d_s = Matrix::zeros(s.rows(), s.cols());
                for (n, dp) in d_pooled.iter().enumerate() {
                    for (t, v) in audio_pool_grad(audio, &s.column(n), *dp)?.into_iter().enumerate() {
                        d_s.set(t, n, v);
                    }
                }
                similarity_backward(&encoded[i], &embs[j], s, &d_s, &mut d_enc[i], &mut d_embs[j]);
            }
        }
        for (i, clip) in clips.iter().enumerate() {
            encoder_backward(&clip.frames, &encoded[i], &d_enc[i], grads);
            for (n, phrase) in clip.caption.iter().enumerate() {
                embed_backward(phrase, d_embs[i].row(n), grads);
            }
        }
    }
    Ok(loss)
}

/// Splits `order` into minibatches; a trailing singleton joins the previous
/// batch so sentence mode always has in-batch negatives.
fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() >= 2 && out.last().is_some_and(|c| c.len() == 1) {
        let start = (out.len() - 2) * size;
        out.pop();
        out.pop();
        out.push(&order[start..]);
    }
    out
}

/// One past the largest token id in the captions and the pool.
pub fn vocab_size(sets: &[&[ClipRecord]], sampler: Option<&Sampler>) -> usize {
    let captions = sets.iter().flat_map(|s| s.iter()).flat_map(|c| &c.caption);
    let pool = sampler.into_iter().flat_map(|s| s.pool.phrases());
    captions
        .chain(pool)
        .flat_map(|p| p.tokens.iter().copied())
        .max()
        .map_or(1, |m| m + 1)
}

/// Trains from scratch and returns the best-validation parameters.
///
/// `train` and `valid` must not carry strong labels: the trainer only ever
/// sees weak (clip-level) supervision.
pub fn train(
    train: &[ClipRecord],
    valid: &[ClipRecord],
    config: &TrainConfig,
    sampler: Option<&Sampler>,
    teacher: Option<&ModelParams>,
) -> Result<(ModelParams, TrainLog)> {
    train_with_vocab(train, valid, config, sampler, teacher, 0)
}

/// Like [`train`], with the embedding table sized to at least `min_vocab`
/// rows so phrases outside the training captions can still be embedded.
pub fn train_with_vocab(
    train: &[ClipRecord],
    valid: &[ClipRecord],
    config: &TrainConfig,
    sampler: Option<&Sampler>,
    teacher: Option<&ModelParams>,
    min_vocab: usize,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    match (config.mode, sampler, teacher) {
        (TrainMode::Sentence, Some(_), _) => {
            return Err(Error::Config("sentence mode does not sample negative phrases".into()));
        }
        (TrainMode::Sentence, _, Some(_)) => {
            return Err(Error::Config("self-supervision requires phrase mode".into()));
        }
        (TrainMode::Phrase, None, _) => {
            return Err(Error::Config("phrase mode needs a negative sampler".into()));
        }
        _ => {}
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("training or validation set"));
    }
    if train.iter().chain(valid).any(|c| !c.strong_labels.is_empty()) {
        return Err(Error::invalid(
            "training data carries strong labels; load it with weak label access",
        ));
    }
    if config.mode == TrainMode::Sentence && (train.len() < 2 || valid.len() < 2) {
        return Err(Error::invalid("sentence mode needs at least 2 clips per split"));
    }
    let feature_dim = train[0].frames.feature_dim();
    let vocab = vocab_size(&[train, valid], sampler).max(min_vocab);
    if let Some(t) = teacher {
        if t.feature_dim() != feature_dim || t.vocab_size() < vocab {
            return Err(Error::dim("teacher does not match the data dimensions"));
        }
    }
    let margin = Margin::new(config.margin)?;

    let root = Rng::new(config.seed);
    let mut params = ModelParams::init(vocab, feature_dim, config.embed_dim, &mut root.fork(0));
    let mut shuffle_rng = root.fork(1);
    let mut adam = Adam::new(&params, config.lr);
    let mut schedule = Schedule::new(config.lr, config.plateau_patience, config.early_stop_patience);
    let mut best = params.clone();
    let mut log = TrainLog::default();

    // validation negatives are drawn once and reused every epoch
    let valid_batches = match sampler {
        Some(s) => {
            let mut rng = root.fork(2);
            Some(valid.iter().map(|c| s.sample(c, &mut rng)).collect::<Result<Vec<_>>>()?)
        }
        None => None,
    };
    let mut frozen_train: Option<Vec<SampledBatch>> = None;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = params.zeros_like();
    for epoch in 0..config.max_epochs {
        adam.lr = schedule.lr();
        shuffle_rng.shuffle(&mut order);

        let train_batches: Option<Vec<SampledBatch>> = match sampler {
            Some(s) if s.config.resample_each_epoch || frozen_train.is_none() => {
                let mut rng = root.fork(1000 + epoch as u64);
                let drawn = train
                    .iter()
                    .map(|c| s.sample(c, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                if !s.config.resample_each_epoch {
                    frozen_train = Some(drawn.clone());
                }
                Some(drawn)
            }
            Some(_) => frozen_train.clone(),
            None => None,
        };

        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in minibatches(&order, config.batch_size) {
            grads.fill(0.0);
            let loss = match &train_batches {
                Some(batches) => {
                    let scale = 1.0 / chunk.len() as f64;
                    let mut sum = 0.0;
                    for &i in chunk {
                        let pseudo = match teacher {
                            Some(t) => Some(teacher_predict(t, &train[i].frames, &batches[i], config.audio_pool)?),
                            None => None,
                        };
                        sum += phrase_loss_and_grad(
                            &params,
                            &train[i],
                            &batches[i],
                            config.audio_pool,
                            pseudo.as_ref(),
                            Some((&mut grads, scale)),
                        )?;
                    }
                    sum * scale
                }
                None => {
                    let clips: Vec<&ClipRecord> = chunk.iter().map(|&i| &train[i]).collect();
                    sentence_loss_and_grad(
                        &params,
                        &clips,
                        config.audio_pool,
                        config.text_pool,
                        margin,
                        Some(&mut grads),
                    )?
                }
            };
            adam.update(&mut params, &grads);
            total += loss;
            steps += 1;
        }
        if !params.is_finite() {
            return Err(Error::invalid(format!("parameters diverged in epoch {epoch}")));
        }

        let valid_loss = validation_loss(&params, valid, config, margin, valid_batches.as_deref(), teacher)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: total / steps as f64,
            valid_loss,
            lr: adam.lr,
        });
        match schedule.observe(epoch, valid_loss) {
            EpochVerdict::Improved => best.clone_from(&params),
            EpochVerdict::Continue => {}
            EpochVerdict::Stop => break,
        }
    }
    log.best_epoch = schedule.best_epoch;
    log.best_valid_loss = schedule.best_loss;
    log.lr_drops = schedule.drops;
    Ok((best, log))
}

fn validation_loss(
    params: &ModelParams,
    valid: &[ClipRecord],
    config: &TrainConfig,
    margin: Margin,
    batches: Option<&[SampledBatch]>,
    teacher: Option<&ModelParams>,
) -> Result<f64> {
    match batches {
        Some(batches) => {
            let mut sum = 0.0;
            for (clip, batch) in valid.iter().zip(batches) {
                let pseudo = match teacher {
                    Some(t) => Some(teacher_predict(t, &clip.frames, batch, config.audio_pool)?),
                    None => None,
                };
                sum += phrase_loss_and_grad(params, clip, batch, config.audio_pool, pseudo.as_ref(), None)?;
            }
            Ok(sum / valid.len() as f64)
        }
        None => {
            let order: Vec<usize> = (0..valid.len()).collect();
            let chunks = minibatches(&order, config.batch_size);
            let mut sum = 0.0;
            for chunk in &chunks {
                let clips: Vec<&ClipRecord> = chunk.iter().map(|&i| &valid[i]).collect();
                sum += sentence_loss_and_grad(
                    params,
                    &clips,
                    config.audio_pool,
                    config.text_pool,
                    margin,
                    None,
                )?;
            }
            Ok(sum / chunks.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minibatches_absorb_singletons() {
        let order: Vec<usize> = (0..7).collect();
        let b = minibatches(&order, 3);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], &[3, 4, 5, 6]);
        let b = minibatches(&order[..6], 3);
        assert_eq!(b.len(), 2);
        assert_eq!(minibatches(&order[..1], 3).len(), 1);
    }

    #[test]
    fn lr_decays_by_powers_of_ten() {
        for k in 0..5 {
            assert_eq!(decayed_lr(0.001, k), 0.001 * 10f64.powi(-(k as i32)));
        }
        let mut s = Schedule::new(0.001, 3, 10);
        assert_eq!(s.observe(0, 1.0), EpochVerdict::Improved);
        for e in 1..=3 {
            assert_eq!(s.observe(e, 2.0), EpochVerdict::Continue);
        }
        assert_eq!(s.drops, 1);
        assert_eq!(s.lr(), decayed_lr(0.001, 1));
        for e in 4..=6 {
            s.observe(e, 2.0);
        }
        assert_eq!(s.lr(), decayed_lr(0.001, 2));
    }

    #[test]
    fn early_stop_after_patience() {
        let mut s = Schedule::new(0.001, 3, 10);
        s.observe(0, 1.0);
        s.observe(1, 0.5);
        let mut stopped = None;
        for e in 2..30 {
            if s.observe(e, 0.9) == EpochVerdict::Stop {
                stopped = Some(e);
                break;
            }
        }
        assert_eq!(stopped, Some(11));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig {
            mode: TrainMode::Sentence,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.batch_size = 2;
        assert!(c.validate().is_ok());
        c.lr = 0.0;
        assert!(c.validate().is_err());
    }
}
