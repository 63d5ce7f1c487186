//! Event decoding, overlap matching, PSDS and Th-AUC.
//!
//! A "class" for FPR summation is a unique phrase text. Since every class
//! shares the same audio duration, summing per-class rates equals the pooled
//! false-positive count divided by the evaluated audio hours.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, EventList, round6};
use crate::error::{Error, Result};
use crate::synth::make_short_subset;

pub const DEFAULT_RHO: f64 = 0.5;
pub const DEFAULT_E_MAX: f64 = 800.0;

// relative slack for overlap ratios on values stored at 6 significant digits
const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rho: f64,
    pub e_max: f64,
    pub thresholds: Vec<f64>,
    pub median_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rho: DEFAULT_RHO,
            e_max: DEFAULT_E_MAX,
            thresholds: default_thresholds(),
            median_window: 1,
        }
    }
}

/// 0.01, 0.02, ..., 0.99
pub fn default_thresholds() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if !(self.e_max > 0.0 && self.e_max.is_finite()) {
            return Err(Error::Config(format!("e_max must be positive, got {}", self.e_max)));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("threshold grid is empty".into()));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "threshold grid must be strictly increasing inside (0, 1)".into(),
            ));
        }
        if self.median_window % 2 == 0 {
            return Err(Error::Config(format!(
                "median_window must be odd, got {}",
                self.median_window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Sliding median with edge replication.
pub fn median_filter(probs: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("median window must be odd and >= 1, got {window}")));
    }
    if window == 1 || probs.is_empty() {
        return Ok(probs.to_vec());
    }
    let half = (window / 2) as isize;
    let last = probs.len() as isize - 1;
    let mut buf = Vec::with_capacity(window);
    Ok((0..probs.len() as isize)
        .map(|i| {
            buf.clear();
            buf.extend((i - half..=i + half).map(|j| probs[j.clamp(0, last) as usize]));
            buf.sort_by(f64::total_cmp);
            buf[window / 2]
        })
        .collect())
}

/// Maximal runs of frames with `prob > theta`, as `[first, last + 1) * hop`.
pub fn decode_events(probs: &[f64], theta: f64, hop_seconds: f64) -> Result<EventList> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::invalid(format!("threshold must be in (0, 1), got {theta}")));
    }
    Ok(EventList {
        segments: runs_above(probs, theta)
            .into_iter()
            .map(|(a, b)| (a as f64 * hop_seconds, b as f64 * hop_seconds))
            .collect(),
    })
}

fn runs_above(probs: &[f64], theta: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &p) in probs.iter().enumerate() {
        match (p > theta, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, probs.len()));
    }
    out
}

/// Greedy one-to-one matching in descending intersection order.
pub fn match_events(pred: &EventList, gt: &EventList, rho: f64) -> MatchCounts {
    let mut cands = Vec::new();
    for (i, p) in pred.segments.iter().enumerate() {
        for (j, g) in gt.segments.iter().enumerate() {
            let inter = p.1.min(g.1) - p.0.max(g.0);
            if inter <= 0.0 {
                continue;
            }
            let ok = |len: f64| inter >= rho * len * (1.0 - RATIO_SLACK);
            if ok(p.1 - p.0) && ok(g.1 - g.0) {
                cands.push((inter, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut tp = 0;
    for (_, i, j) in cands {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            tp += 1;
        }
    }
    MatchCounts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    }
}

/// One evaluated (clip, phrase) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrack {
    pub clip_id: String,
    pub phrase: String,
    pub probs: Vec<f64>,
    pub hop_seconds: f64,
    pub gt: EventList,
}

/// Pooled counts at every grid threshold. Tracks are processed in parallel
/// and reduced in input order.
pub fn sweep(tracks: &[EvalTrack], config: &EvalConfig) -> Result<Vec<MatchCounts>> {
    config.validate()?;
    let per_track = tracks
        .par_iter()
        .map(|tr| {
            let probs = median_filter(&tr.probs, config.median_window)?;
            config
                .thresholds
                .iter()
                .map(|&th| Ok(match_events(&decode_events(&probs, th, tr.hop_seconds)?, &tr.gt, config.rho)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![MatchCounts::default(); config.thresholds.len()];
    for counts in per_track {
        for (t, c) in total.iter_mut().zip(counts) {
            *t += c;
        }
    }
    Ok(total)
}

fn check_gt(tracks: &[EvalTrack]) -> Result<usize> {
    let n: usize = tracks.iter().map(|t| t.gt.len()).sum();
    if n == 0 {
        return Err(Error::invalid("no ground-truth events to evaluate"));
    }
    Ok(n)
}

/// Total duration of the distinct clips in `tracks`, in hours.
pub fn audio_hours(tracks: &[EvalTrack]) -> f64 {
    let mut seen = BTreeMap::new();
    for t in tracks {
        seen.entry(t.clip_id.as_str())
            .or_insert(t.probs.len() as f64 * t.hop_seconds);
    }
    seen.values().sum::<f64>() / 3600.0
}

/// Raw per-threshold points, before the envelope.
pub fn operating_points(tracks: &[EvalTrack], config: &EvalConfig) -> Result<Vec<OperatingPoint>> {
    let n_gt = check_gt(tracks)? as f64;
    let hours = audio_hours(tracks);
    if !(hours > 0.0) {
        return Err(Error::invalid("evaluated audio has zero duration"));
    }
    Ok(sweep(tracks, config)?
        .iter()
        .zip(&config.thresholds)
        .map(|(c, &threshold)| OperatingPoint {
            threshold,
            tpr: c.tp as f64 / n_gt,
            fpr: c.fp as f64 / hours,
        })
        .collect())
}

/// Replaces each TPR by the best TPR reachable at no higher FPR and orders
/// points by FPR.
pub fn envelope(mut points: Vec<OperatingPoint>) -> Vec<OperatingPoint> {
    points.sort_by(|a, b| {
        a.fpr
            .total_cmp(&b.fpr)
            .then(b.tpr.total_cmp(&a.tpr))
            .then(b.threshold.total_cmp(&a.threshold))
    });
    let mut best = 0.0f64;
    for p in &mut points {
        best = best.max(p.tpr);
        p.tpr = best;
    }
    points
}

pub fn roc_points(tracks: &[EvalTrack], config: &EvalConfig) -> Result<Vec<OperatingPoint>> {
    Ok(envelope(operating_points(tracks, config)?))
}

/// Normalized area under the step-interpolated envelope up to `e_max`, ×100.
pub fn psds(points: &[OperatingPoint], e_max: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("operating points"));
    }
    if !(e_max > 0.0) {
        return Err(Error::invalid(format!("e_max must be positive, got {e_max}")));
    }
    let env = envelope(points.to_vec());
    let mut area = 0.0;
    for (k, p) in env.iter().enumerate() {
        let lo = p.fpr.min(e_max);
        let hi = env.get(k + 1).map_or(e_max, |q| q.fpr.min(e_max));
        area += p.tpr * (hi - lo);
    }
    Ok(100.0 * area / e_max)
}

/// Micro-F1 at each grid threshold.
pub fn f1_curve(tracks: &[EvalTrack], config: &EvalConfig) -> Result<Vec<(f64, f64)>> {
    check_gt(tracks)?;
    Ok(sweep(tracks, config)?
        .iter()
        .zip(&config.thresholds)
        .map(|(c, &th)| {
            let denom = 2 * c.tp + c.fp + c.fn_;
            (th, if denom == 0 { 0.0 } else { 2.0 * c.tp as f64 / denom as f64 })
        })
        .collect())
}

/// Trapezoid area of an F1 curve over [0, 1], ×100.
pub fn curve_area(curve: &[(f64, f64)]) -> Result<f64> {
    let (first, last) = match (curve.first(), curve.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Empty("F1 curve")),
    };
    let mut pts = Vec::with_capacity(curve.len() + 2);
    pts.push((0.0, first.1));
    pts.extend_from_slice(curve);
    pts.push((1.0, last.1));
    let area: f64 = pts
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    Ok(100.0 * area)
}

pub fn th_auc(tracks: &[EvalTrack], config: &EvalConfig) -> Result<f64> {
    curve_area(&f1_curve(tracks, config)?)
}

/// Frame probabilities keyed by `(clip_id, phrase text)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    tracks: BTreeMap<(String, String), Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    clip_id: String,
    phrase: String,
    probs: Vec<f64>,
}

impl Predictions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, clip_id: &str, phrase: &str, probs: Vec<f64>) -> Result<()> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!(
                "probabilities for ({clip_id}, {phrase}) must lie in [0, 1]"
            )));
        }
        let key = (clip_id.to_string(), phrase.to_string());
        if self.tracks.contains_key(&key) {
            return Err(Error::invalid(format!("duplicate prediction for ({clip_id}, {phrase})")));
        }
        self.tracks.insert(key, probs);
        Ok(())
    }

    pub fn get(&self, clip_id: &str, phrase: &str) -> Option<&[f64]> {
        self.tracks
            .get(&(clip_id.to_string(), phrase.to_string()))
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &[f64])> {
        self.tracks
            .iter()
            .map(|((c, p), v)| (c.as_str(), p.as_str(), v.as_slice()))
    }
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut preds = Predictions::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let l: PredictionLine = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        preds
            .insert(&l.clip_id, &l.phrase, l.probs)
            .map_err(|e| parse(e.to_string()))?;
    }
    Ok(preds)
}

/// Writes one line per pair in key order, probabilities at 6 significant digits.
pub fn save_predictions(path: impl AsRef<Path>, preds: &Predictions) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (clip_id, phrase, probs) in preds.iter() {
        let line = PredictionLine {
            clip_id: clip_id.to_string(),
            phrase: phrase.to_string(),
            probs: probs.iter().map(|&p| round6(p)).collect(),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::invalid(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub psds_whole: f64,
    pub thauc_whole: f64,
    /// `None` when no pair qualifies for the short subset.
    pub psds_short: Option<f64>,
    pub thauc_short: Option<f64>,
    pub pairs_whole: usize,
    pub pairs_short: usize,
}

impl Report {
    pub const CSV_HEADER: &'static str =
        "psds_whole,thauc_whole,psds_short,thauc_short,pairs_whole,pairs_short";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        format!(
            "{:.4},{:.4},{},{},{},{}",
            self.psds_whole,
            self.thauc_whole,
            opt(self.psds_short),
            opt(self.thauc_short),
            self.pairs_whole,
            self.pairs_short
        )
    }
}

/// Builds one track per (clip, phrase) of a strongly labeled dataset.
pub fn tracks_for(preds: &Predictions, dataset: &[ClipRecord]) -> Result<Vec<EvalTrack>> {
    let mut tracks = Vec::new();
    let mut missing = Vec::new();
    for clip in dataset {
        for (pi, phrase) in clip.caption.iter().enumerate() {
            let Some(probs) = preds.get(clip.clip_id(), &phrase.text) else {
                missing.push(format!("({}, {})", clip.clip_id(), phrase.text));
                continue;
            };
            if probs.len() != clip.frames.num_frames() {
                return Err(Error::dim(format!(
                    "prediction for ({}, {}) has {} frames, clip has {}",
                    clip.clip_id(),
                    phrase.text,
                    probs.len(),
                    clip.frames.num_frames()
                )));
            }
            tracks.push(EvalTrack {
                clip_id: clip.clip_id().to_string(),
                phrase: phrase.text.clone(),
                probs: probs.to_vec(),
                hop_seconds: clip.frames.hop_seconds,
                gt: clip.events_for(pi),
            });
        }
    }
    if !missing.is_empty() {
        let shown = missing.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
        return Err(Error::invalid(format!(
            "{} (clip, phrase) pairs have no prediction: {shown}{}",
            missing.len(),
            if missing.len() > 10 { ", ..." } else { "" }
        )));
    }
    Ok(tracks)
}

pub fn evaluate(preds: &Predictions, dataset: &[ClipRecord], config: &EvalConfig) -> Result<Report> {
    config.validate()?;
    let whole = tracks_for(preds, dataset)?;
    let short_pairs: BTreeSet<(usize, usize)> = make_short_subset(dataset)?.into_iter().collect();
    let mut idx = 0;
    let mut short = Vec::new();
    for (ci, clip) in dataset.iter().enumerate() {
        for pi in 0..clip.caption.len() {
            if short_pairs.contains(&(ci, pi)) {
                short.push(whole[idx].clone());
            }
            idx += 1;
        }
    }
    let metrics = |tracks: &[EvalTrack]| -> Result<(f64, f64)> {
        Ok((psds(&roc_points(tracks, config)?, config.e_max)?, th_auc(tracks, config)?))
    };
    let (psds_whole, thauc_whole) = metrics(&whole)?;
    let (psds_short, thauc_short) = if short.is_empty() {
        (None, None)
    } else {
        let (p, t) = metrics(&short)?;
        (Some(p), Some(t))
    };
    Ok(Report {
        psds_whole,
        thauc_whole,
        psds_short,
        thauc_short,
        pairs_whole: whole.len(),
        pairs_short: short.len(),
    })
}

pub const ROC_CSV: &str = "psd_roc.csv";
pub const F1_CSV: &str = "f1_threshold.csv";

/// Writes both curves as CSV and SVG into `dir`.
pub fn write_curves(
    dir: impl AsRef<Path>,
    roc: &[OperatingPoint],
    f1: &[(f64, f64)],
    e_max: f64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };

    let mut csv = String::from("fpr,tpr,threshold\n");
    for p in roc {
        let _ = writeln!(csv, "{},{},{}", round6(p.fpr), round6(p.tpr), p.threshold);
    }
    write(ROC_CSV, csv)?;
    let mut csv = String::from("threshold,f1\n");
    for (th, f) in f1 {
        let _ = writeln!(csv, "{th},{}", round6(*f));
    }
    write(F1_CSV, csv)?;

    // step plot of the envelope, clipped at e_max
    let mut steps = vec![(0.0, 0.0)];
    let mut cur = 0.0;
    for p in roc.iter().filter(|p| p.fpr <= e_max) {
        steps.push((p.fpr, cur));
        steps.push((p.fpr, p.tpr));
        cur = p.tpr;
    }
    steps.push((e_max, cur));
    write("psd_roc.svg", svg_plot("PSD-ROC", "FPR (per hour)", "TPR", e_max, &steps))?;
    write("f1_threshold.svg", svg_plot("F1 vs threshold", "threshold", "F1", 1.0, f1))
}

fn svg_plot(title: &str, xlabel: &str, ylabel: &str, x_max: f64, pts: &[(f64, f64)]) -> String {
    let (w, h, m) = (480.0, 360.0, 50.0);
    let sx = |x: f64| m + (x / x_max).clamp(0.0, 1.0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let poly = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect::<Vec<_>>()
        .join(" ");
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{ylabel}</text>"#, h / 2.0, h / 2.0);
    for (v, label) in [(0.0, "0".to_string()), (x_max, format!("{x_max}"))] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{label}</text>"#, sx(v), h - m + 16.0);
    }
    for v in [0.0, 1.0] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v}</text>"#, m - 6.0, sy(v) + 4.0);
    }
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{poly}"/>"#);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(segs: &[(f64, f64)]) -> EventList {
        EventList::new(segs.to_vec()).unwrap()
    }

    fn track(id: &str, probs: Vec<f64>, gt: &[(f64, f64)]) -> EvalTrack {
        EvalTrack {
            clip_id: id.into(),
            phrase: "p".into(),
            probs,
            hop_seconds: 0.01,
            gt: ev(gt),
        }
    }

    #[test]
    fn median_examples() {
        let x = [0.3, 0.1, 0.9];
        assert_eq!(median_filter(&x, 1).unwrap(), x);
        assert_eq!(median_filter(&[0.0, 0.0, 1.0, 0.0, 0.0], 3).unwrap(), vec![0.0; 5]);
        assert_eq!(median_filter(&[0.4; 6], 5).unwrap(), vec![0.4; 6]);
        assert!(median_filter(&x, 2).is_err());
        assert!(median_filter(&x, 0).is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(
            decode_events(&[0.2, 0.6, 0.7, 0.3], 0.5, 0.01).unwrap().segments,
            vec![(0.01, 0.03)]
        );
        assert!(decode_events(&[0.1, 0.2], 0.5, 0.01).unwrap().is_empty());
        assert_eq!(decode_events(&[0.9, 0.8], 0.5, 0.5).unwrap().segments, vec![(0.0, 1.0)]);
        assert!(decode_events(&[0.1], 1.0, 0.01).is_err());
    }

    #[test]
    fn match_examples() {
        let g = ev(&[(0.0, 1.0), (2.0, 3.0)]);
        assert_eq!(match_events(&g, &g, 0.5), MatchCounts { tp: 2, fp: 0, fn_: 0 });
        assert_eq!(
            match_events(&ev(&[(0.0, 1.0)]), &ev(&[(0.6, 1.6)]), 0.5),
            MatchCounts { tp: 0, fp: 1, fn_: 1 }
        );
        assert_eq!(
            match_events(&ev(&[(0.1, 1.1)]), &ev(&[(0.0, 1.0)]), 0.5),
            MatchCounts { tp: 1, fp: 0, fn_: 0 }
        );
    }

    #[test]
    fn perfect_and_silent_detectors() {
        let cfg = EvalConfig::default();
        let mut probs = vec![0.0; 20];
        probs[5..12].fill(1.0);
        let perfect = vec![track("a", probs, &[(0.05, 0.12)])];
        let roc = roc_points(&perfect, &cfg).unwrap();
        assert!(roc.iter().all(|p| p.tpr == 1.0 && p.fpr == 0.0));
        assert_eq!(psds(&roc, 800.0).unwrap(), 100.0);
        assert!((th_auc(&perfect, &cfg).unwrap() - 100.0).abs() < 1e-9);

        let silent = vec![track("a", vec![0.0; 20], &[(0.05, 0.12)])];
        let roc = roc_points(&silent, &cfg).unwrap();
        assert!(roc.iter().all(|p| p.tpr == 0.0 && p.fpr == 0.0));
        assert_eq!(psds(&roc, 800.0).unwrap(), 0.0);
        assert_eq!(th_auc(&silent, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn constant_score_on_gt_gives_step_f1() {
        let mut probs = vec![0.0; 30];
        probs[10..20].fill(0.8);
        let t = vec![track("a", probs, &[(0.1, 0.2)])];
        let v = th_auc(&t, &EvalConfig::default()).unwrap();
        // F1 = 1 up to 0.79, 0 from 0.80; one trapezoid straddles the step
        assert!((v - 79.5).abs() < 1e-9, "{v}");
    }

    #[test]
    fn zero_gt_is_an_error() {
        let t = vec![track("a", vec![0.9; 5], &[])];
        assert!(roc_points(&t, &EvalConfig::default()).is_err());
        assert!(th_auc(&t, &EvalConfig::default()).is_err());
        assert!(psds(&[], 800.0).is_err());
    }

    #[test]
    fn psds_holds_last_value() {
        let pts = [
            OperatingPoint { threshold: 0.9, tpr: 0.5, fpr: 0.0 },
            OperatingPoint { threshold: 0.5, tpr: 0.3, fpr: 100.0 },
            OperatingPoint { threshold: 0.1, tpr: 1.0, fpr: 400.0 },
        ];
        // 0.5 over [0, 400), 1.0 over [400, 800]
        assert!((psds(&pts, 800.0).unwrap() - 75.0).abs() < 1e-12);
        let env = envelope(pts.to_vec());
        assert!(env.windows(2).all(|w| w[0].tpr <= w[1].tpr && w[0].fpr <= w[1].fpr));
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        for bad in [
            EvalConfig { rho: 0.0, ..Default::default() },
            EvalConfig { e_max: 0.0, ..Default::default() },
            EvalConfig { median_window: 4, ..Default::default() },
            EvalConfig { thresholds: vec![0.5, 0.4], ..Default::default() },
            EvalConfig { thresholds: vec![1.0], ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn predictions_round_trip() {
        let mut p = Predictions::new();
        p.insert("c1", "a dog", vec![0.1, 0.123456789]).unwrap();
        p.insert("c0", "rain", vec![1.0]).unwrap();
        assert!(p.insert("c0", "rain", vec![0.0]).is_err());
        assert!(p.insert("c0", "x", vec![1.5]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_predictions(&path, &p).unwrap();
        let back = load_predictions(&path).unwrap();
        assert_eq!(back.get("c1", "a dog").unwrap(), &[0.1, 0.123457]);
        assert_eq!(back.len(), 2);
        fs::write(&path, "{\"clip_id\":\"c\",\"phrase\":\"p\"}\n").unwrap();
        assert!(matches!(load_predictions(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn curves_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let roc = [OperatingPoint { threshold: 0.5, tpr: 0.4, fpr: 10.0 }];
        write_curves(dir.path(), &roc, &[(0.5, 0.3)], 800.0).unwrap();
        let csv = fs::read_to_string(dir.path().join(ROC_CSV)).unwrap();
        assert_eq!(csv, "fpr,tpr,threshold\n10,0.4,0.5\n");
        let svg = fs::read_to_string(dir.path().join("psd_roc.svg")).unwrap();
        assert!(svg.contains("<polyline") && svg.contains("FPR (per hour)"));
    }
}
