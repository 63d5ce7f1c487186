//! Domain records shared by every stage, plus dataset I/O.
//!
//! A dataset is a JSONL file with one clip per line. Strong (timestamped)
//! labels live in a sidecar file next to it, `<stem>_labels.jsonl`, and are
//! only read when the caller asks for [`LabelAccess::Strong`]. Training code
//! loads with [`LabelAccess::Weak`] and therefore never opens the sidecar.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Frame hop used throughout: 10 ms.
pub const DEFAULT_HOP_SECONDS: f64 = 0.01;

/// Rounds to 6 significant decimal digits, the precision used in every
/// text file this crate writes.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub clip_id: String,
    /// `T x D` frame features.
    pub features: Matrix,
    pub hop_seconds: f64,
}

impl FrameSequence {
    pub fn new(clip_id: impl Into<String>, features: Matrix, hop_seconds: f64) -> Result<Self> {
        let clip_id = clip_id.into();
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::invalid(format!("clip {clip_id}: empty feature matrix")));
        }
        if !features.is_finite() {
            return Err(Error::invalid(format!("clip {clip_id}: non-finite feature")));
        }
        if !(hop_seconds > 0.0 && hop_seconds.is_finite()) {
            return Err(Error::invalid(format!(
                "clip {clip_id}: hop_seconds must be positive, got {hop_seconds}"
            )));
        }
        Ok(FrameSequence {
            clip_id,
            features,
            hop_seconds,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn duration(&self) -> f64 {
        self.num_frames() as f64 * self.hop_seconds
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhraseQuery {
    pub text: String,
    pub tokens: Vec<usize>,
    /// Ground-truth class of synthetic phrases. Never consulted by training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
}

impl PhraseQuery {
    pub fn new(text: impl Into<String>, tokens: Vec<usize>) -> Self {
        PhraseQuery {
            text: text.into(),
            tokens,
            class_id: None,
        }
    }

    pub fn with_class(mut self, class_id: usize) -> Self {
        self.class_id = Some(class_id);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongLabel {
    pub phrase_index: usize,
    pub onset: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub frames: FrameSequence,
    pub caption: Vec<PhraseQuery>,
    /// Evaluation-only; empty when loaded with [`LabelAccess::Weak`].
    pub strong_labels: Vec<StrongLabel>,
}

impl ClipRecord {
    pub fn new(
        frames: FrameSequence,
        caption: Vec<PhraseQuery>,
        strong_labels: Vec<StrongLabel>,
    ) -> Result<Self> {
        let id = &frames.clip_id;
        if caption.is_empty() {
            return Err(Error::invalid(format!("clip {id}: empty caption")));
        }
        if let Some(p) = caption.iter().find(|p| p.tokens.is_empty()) {
            return Err(Error::invalid(format!(
                "clip {id}: phrase {:?} has no tokens",
                p.text
            )));
        }
        let duration = frames.duration();
        for l in &strong_labels {
            check_label(id, l, caption.len(), duration)?;
        }
        Ok(ClipRecord {
            frames,
            caption,
            strong_labels,
        })
    }

    pub fn clip_id(&self) -> &str {
        &self.frames.clip_id
    }

    /// Copy with the strong labels removed, as seen by the trainer.
    pub fn weak(&self) -> ClipRecord {
        ClipRecord {
            frames: self.frames.clone(),
            caption: self.caption.clone(),
            strong_labels: Vec::new(),
        }
    }

    /// Ground-truth segments of one caption phrase, sorted by onset.
    pub fn events_for(&self, phrase_index: usize) -> EventList {
        let mut segments: Vec<(f64, f64)> = self
            .strong_labels
            .iter()
            .filter(|l| l.phrase_index == phrase_index)
            .map(|l| (l.onset, l.offset))
            .collect();
        segments.sort_by(|a, b| a.0.total_cmp(&b.0));
        EventList { segments }
    }
}

fn check_label(id: &str, l: &StrongLabel, n_phrases: usize, duration: f64) -> Result<()> {
    if l.phrase_index >= n_phrases {
        return Err(Error::invalid(format!(
            "clip {id}: label phrase_index {} out of range ({n_phrases} phrases)",
            l.phrase_index
        )));
    }
    if !(l.onset >= 0.0 && l.onset < l.offset) {
        return Err(Error::invalid(format!(
            "clip {id}: label onset {} must be >= 0 and < offset {}",
            l.onset, l.offset
        )));
    }
    // labels are stored at 6 significant digits
    if l.offset > duration * (1.0 + 1e-6) {
        return Err(Error::invalid(format!(
            "clip {id}: label offset {} beyond clip duration {duration}",
            l.offset
        )));
    }
    Ok(())
}

/// `T x N` frame-phrase probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("similarity entries must lie in [0, 1]"));
        }
        Ok(SimilarityMatrix { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn num_phrases(&self) -> usize {
        self.values.cols()
    }

    /// Frame track of one phrase.
    pub fn track(&self, phrase: usize) -> Vec<f64> {
        self.values.column(phrase)
    }
}

/// Sorted `(onset, offset)` segments in seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventList {
    pub segments: Vec<(f64, f64)>,
}

impl EventList {
    pub fn new(mut segments: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(s) = segments.iter().find(|s| !(s.0 < s.1)) {
            return Err(Error::invalid(format!(
                "segment ({}, {}) has onset >= offset",
                s.0, s.1
            )));
        }
        segments.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(EventList { segments })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|(a, b)| b - a).sum()
    }
}

/// Whether a loader may read the strong-label sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelAccess {
    Weak,
    Strong,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionLine {
    text: String,
    tokens: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipLine {
    clip_id: String,
    features: Vec<Vec<f64>>,
    hop_seconds: f64,
    caption: Vec<CaptionLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelLine {
    clip_id: String,
    labels: Vec<StrongLabel>,
}

/// `dir/train.jsonl` → `dir/train_labels.jsonl`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_labels.jsonl"))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Loads a JSONL dataset. With [`LabelAccess::Strong`] the sidecar label
/// file is attached when it exists.
pub fn load_dataset(path: impl AsRef<Path>, access: LabelAccess) -> Result<Vec<ClipRecord>> {
    let path = path.as_ref();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records = Vec::new();
    let mut feature_dim = None;
    for (line_no, line) in read_lines(path)? {
        let parsed: ClipLine =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let features = Matrix::from_rows(&parsed.features)
            .map_err(|e| parse_err(line_no, format!("clip {}: {e}", parsed.clip_id)))?;
        match feature_dim {
            None => feature_dim = Some(features.cols()),
            Some(d) if d != features.cols() => {
                return Err(parse_err(
                    line_no,
                    format!(
                        "clip {}: feature dimension {} differs from {d}",
                        parsed.clip_id,
                        features.cols()
                    ),
                ));
            }
            Some(_) => {}
        }
        let frames = FrameSequence::new(parsed.clip_id, features, parsed.hop_seconds)
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        let caption = parsed
            .caption
            .into_iter()
            .map(|c| PhraseQuery::new(c.text, c.tokens))
            .collect();
        let record = ClipRecord::new(frames, caption, Vec::new())
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        records.push(record);
    }

    if access == LabelAccess::Strong {
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            attach_labels(&mut records, &sidecar)?;
        }
    }
    Ok(records)
}

fn attach_labels(records: &mut [ClipRecord], sidecar: &Path) -> Result<()> {
    let index: HashMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.clip_id().to_string(), i))
        .collect();
    for (line_no, line) in read_lines(sidecar)? {
        let parse_err = |message: String| Error::Parse {
            path: sidecar.to_path_buf(),
            line: line_no,
            message,
        };
        let parsed: LabelLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let &i = index
            .get(&parsed.clip_id)
            .ok_or_else(|| parse_err(format!("unknown clip {}", parsed.clip_id)))?;
        let rec = &mut records[i];
        for l in &parsed.labels {
            check_label(&parsed.clip_id, l, rec.caption.len(), rec.frames.duration())
                .map_err(|e| parse_err(e.to_string()))?;
        }
        rec.strong_labels.extend(parsed.labels);
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| Error::invalid(e.to_string()))?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes the dataset, and the sidecar when any record carries labels.
pub fn save_dataset(path: impl AsRef<Path>, records: &[ClipRecord]) -> Result<()> {
    let path = path.as_ref();
    write_jsonl(
        path,
        records.iter().map(|r| ClipLine {
            clip_id: r.clip_id().to_string(),
            features: (0..r.frames.num_frames())
                .map(|t| r.frames.features.row(t).iter().map(|v| round6(*v)).collect())
                .collect(),
            hop_seconds: round6(r.frames.hop_seconds),
            caption: r
                .caption
                .iter()
                .map(|p| CaptionLine {
                    text: p.text.clone(),
                    tokens: p.tokens.clone(),
                })
                .collect(),
        }),
    )?;
    if records.iter().any(|r| !r.strong_labels.is_empty()) {
        write_jsonl(
            &sidecar_path(path),
            records.iter().map(|r| LabelLine {
                clip_id: r.clip_id().to_string(),
                labels: r
                    .strong_labels
                    .iter()
                    .map(|l| StrongLabel {
                        phrase_index: l.phrase_index,
                        onset: round6(l.onset),
                        offset: round6(l.offset),
                    })
                    .collect(),
            }),
        )?;
    }
    Ok(())
}

/// Random held-out split. Both halves keep the input order.
pub fn split_dataset<T: Clone>(
    records: &[T],
    validation_count: usize,
    rng: &mut Rng,
) -> Result<(Vec<T>, Vec<T>)> {
    if validation_count >= records.len() {
        return Err(Error::invalid(format!(
            "validation_count {validation_count} must be smaller than the dataset ({} records)",
            records.len()
        )));
    }
    let mut held = vec![false; records.len()];
    for i in rng.sample_indices(records.len(), validation_count) {
        held[i] = true;
    }
    let mut train = Vec::with_capacity(records.len() - validation_count);
    let mut valid = Vec::with_capacity(validation_count);
    for (r, h) in records.iter().zip(held) {
        if h {
            valid.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, valid))
}
