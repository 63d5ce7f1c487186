//! Teacher-based self-supervision: a frozen phrase-level model supplies frame
//! targets for the strong loss and raises clip labels via elementwise max.

use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelParams, infer};
use crate::pooling::{AudioPoolKind, audio_pool};
use crate::sampling::SampledBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    /// `T x N` teacher frame probabilities.
    pub y_self_frames: Matrix,
    /// Teacher clip scores, pooled over frames.
    pub y_self_clip: Vec<f64>,
    pub y_refined: Vec<f64>,
}

/// Runs the teacher on a sampled batch and derives all pseudo labels.
pub fn teacher_predict(
    teacher: &ModelParams,
    frames: &FrameSequence,
    batch: &SampledBatch,
    pool: AudioPoolKind,
) -> Result<PseudoLabels> {
    if batch.phrases.is_empty() {
        return Err(Error::Empty("phrase set"));
    }
    let y_self_frames = infer(teacher, frames, &batch.phrases)?.values().clone();
    let y_self_clip = (0..y_self_frames.cols())
        .map(|n| audio_pool(pool, &y_self_frames.column(n)))
        .collect::<Result<Vec<_>>>()?;
    let y_refined = refine_labels(&batch.y, &y_self_clip)?;
    Ok(PseudoLabels {
        y_self_frames,
        y_self_clip,
        y_refined,
    })
}

/// Elementwise `max(y, y_self)`.
pub fn refine_labels(y: &[f64], y_self_clip: &[f64]) -> Result<Vec<f64>> {
    if y.len() != y_self_clip.len() {
        return Err(Error::dim(format!(
            "{} labels vs {} teacher scores",
            y.len(),
            y_self_clip.len()
        )));
    }
    Ok(y.iter().zip(y_self_clip).map(|(a, b)| a.max(*b)).collect())
}
