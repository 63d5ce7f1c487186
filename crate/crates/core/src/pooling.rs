//! Temporal (audio) and text pooling operators with their exact gradients.
//!
//! Audio pooling reduces a frame-phrase probability track to a clip-phrase
//! score; text pooling reduces clip-phrase scores of a caption to a
//! clip-sentence score. Both are used only during training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AudioPoolKind {
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "linsoft")]
    LinearSoftmax,
    #[serde(rename = "expsoft")]
    ExpSoftmax,
}

impl AudioPoolKind {
    pub const ALL: [AudioPoolKind; 4] = [
        AudioPoolKind::Mean,
        AudioPoolKind::Max,
        AudioPoolKind::LinearSoftmax,
        AudioPoolKind::ExpSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AudioPoolKind::Mean => "mean",
            AudioPoolKind::Max => "max",
            AudioPoolKind::LinearSoftmax => "linsoft",
            AudioPoolKind::ExpSoftmax => "expsoft",
        }
    }
}

impl fmt::Display for AudioPoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AudioPoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AudioPoolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown audio pooling {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextPoolKind {
    Mean,
    Sum,
}

impl TextPoolKind {
    pub fn name(self) -> &'static str {
        match self {
            TextPoolKind::Mean => "mean",
            TextPoolKind::Sum => "sum",
        }
    }
}

impl fmt::Display for TextPoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextPoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(TextPoolKind::Mean),
            "sum" => Ok(TextPoolKind::Sum),
            _ => Err(Error::invalid(format!("unknown text pooling {s:?}"))),
        }
    }
}

fn check(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Empty("pooling input"));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pooling input"));
    }
    Ok(())
}

/// Index of the first maximum.
fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in s.iter().enumerate().skip(1) {
        if *v > s[best] {
            best = i;
        }
    }
    best
}

fn bounds(s: &[f64]) -> (f64, f64) {
    s.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        })
}

/// Mean computed around the first element so that constant tracks come back
/// bit-exact.
fn centered_mean(s: &[f64]) -> f64 {
    let base = s[0];
    base + s.iter().map(|v| v - base).sum::<f64>() / s.len() as f64
}

/// Pools a frame track `s` (entries in `[0, 1]`) into one clip score.
///
/// Results are clamped into the interval the exact value is known to lie in
/// (`[min, max]`, and `[mean, max]` for the softmax variants) so that these
/// orderings also hold in floating point.
pub fn audio_pool(kind: AudioPoolKind, s: &[f64]) -> Result<f64> {
    check(s)?;
    let (lo, hi) = bounds(s);
    let mean = centered_mean(s).clamp(lo, hi);
    let value = match kind {
        AudioPoolKind::Mean => return Ok(mean),
        AudioPoolKind::Max => return Ok(hi),
        AudioPoolKind::LinearSoftmax => {
            let total: f64 = s.iter().sum();
            if total == 0.0 {
                return Ok(0.0);
            }
            s.iter().map(|v| v * v).sum::<f64>() / total
        }
        AudioPoolKind::ExpSoftmax => {
            let (num, den) = s.iter().fold((0.0, 0.0), |(num, den), v| {
                let w = (v - hi).exp();
                (num + v * w, den + w)
            });
            num / den
        }
    };
    Ok(value.clamp(mean, hi))
}

/// Gradient of [`audio_pool`] scaled by `upstream`.
///
/// Max pooling routes everything to the first argmax. Linear softmax with an
/// all-zero track has zero gradient.
pub fn audio_pool_grad(kind: AudioPoolKind, s: &[f64], upstream: f64) -> Result<Vec<f64>> {
    check(s)?;
    let n = s.len();
    let grad = match kind {
        AudioPoolKind::Mean => vec![upstream / n as f64; n],
        AudioPoolKind::Max => {
            let mut g = vec![0.0; n];
            g[argmax(s)] = upstream;
            g
        }
        AudioPoolKind::LinearSoftmax => {
            let total: f64 = s.iter().sum();
            if total == 0.0 {
                return Ok(vec![0.0; n]);
            }
            let squares: f64 = s.iter().map(|v| v * v).sum();
            s.iter()
                .map(|v| upstream * (2.0 * v * total - squares) / (total * total))
                .collect()
        }
        AudioPoolKind::ExpSoftmax => {
            let hi = bounds(s).1;
            let weights: Vec<f64> = s.iter().map(|v| (v - hi).exp()).collect();
            let den: f64 = weights.iter().sum();
            let pooled = s.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>() / den;
            s.iter()
                .zip(&weights)
                .map(|(v, w)| upstream * (w / den) * (1.0 + v - pooled))
                .collect()
        }
    };
    Ok(grad)
}

pub fn text_pool(kind: TextPoolKind, s_cp: &[f64]) -> Result<f64> {
    check(s_cp)?;
    let sum: f64 = s_cp.iter().sum();
    Ok(match kind {
        TextPoolKind::Sum => sum,
        TextPoolKind::Mean => sum / s_cp.len() as f64,
    })
}

pub fn text_pool_grad(kind: TextPoolKind, s_cp: &[f64], upstream: f64) -> Result<Vec<f64>> {
    check(s_cp)?;
    let g = match kind {
        TextPoolKind::Sum => upstream,
        TextPoolKind::Mean => upstream / s_cp.len() as f64,
    };
    Ok(vec![g; s_cp.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TRACK: [f64; 3] = [0.2, 0.4, 0.6];

    /// Central differences, independent of the analytic gradients.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn reference_values() {
        let mean = audio_pool(AudioPoolKind::Mean, &TRACK).unwrap();
        assert!((mean - 0.4).abs() < 1e-15);
        // 0.56 / 1.2
        let lin = audio_pool(AudioPoolKind::LinearSoftmax, &TRACK).unwrap();
        assert!((lin - 0.466667).abs() < 1e-6);
        // sum(s * e^s) / sum(e^s), evaluated independently
        let exp = audio_pool(AudioPoolKind::ExpSoftmax, &TRACK).unwrap();
        assert!((exp - 0.426490).abs() < 1e-6, "{exp}");
        assert_eq!(audio_pool(AudioPoolKind::Max, &TRACK).unwrap(), 0.6);
    }

    #[test]
    fn single_frame_is_identity() {
        for kind in AudioPoolKind::ALL {
            assert_eq!(audio_pool(kind, &[0.37]).unwrap(), 0.37);
        }
    }

    #[test]
    fn bad_inputs_rejected() {
        for kind in AudioPoolKind::ALL {
            assert!(matches!(audio_pool(kind, &[]), Err(Error::Empty(_))));
            assert!(matches!(
                audio_pool(kind, &[0.1, f64::NAN]),
                Err(Error::NonFinite(_))
            ));
            assert!(audio_pool_grad(kind, &[], 1.0).is_err());
        }
        assert!(text_pool(TextPoolKind::Sum, &[]).is_err());
        assert!(text_pool_grad(TextPoolKind::Mean, &[], 1.0).is_err());
    }

    #[test]
    fn linear_softmax_all_zero() {
        let s = [0.0; 4];
        assert_eq!(audio_pool(AudioPoolKind::LinearSoftmax, &s).unwrap(), 0.0);
        assert_eq!(
            audio_pool_grad(AudioPoolKind::LinearSoftmax, &s, 1.0).unwrap(),
            vec![0.0; 4]
        );
    }

    #[test]
    fn mean_grad_is_constant() {
        let g = audio_pool_grad(AudioPoolKind::Mean, &[0.1, 0.5, 0.2, 0.9], 1.0).unwrap();
        assert_eq!(g, vec![0.25; 4]);
    }

    #[test]
    fn max_grad_takes_first_argmax() {
        let s = [0.2, 0.9, 0.9];
        let g = audio_pool_grad(AudioPoolKind::Max, &s, 1.0).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
        // one-sided difference at the chosen index agrees
        let h = 1e-6;
        let f = |v: &[f64]| audio_pool(AudioPoolKind::Max, v).unwrap();
        let mut up = s.to_vec();
        up[1] += h;
        assert!(((f(&up) - f(&s)) / h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn linear_softmax_grad_matches_differences() {
        let f = |v: &[f64]| audio_pool(AudioPoolKind::LinearSoftmax, v).unwrap();
        let num = numeric_grad(f, &TRACK, 1e-6);
        let ana = audio_pool_grad(AudioPoolKind::LinearSoftmax, &TRACK, 1.0).unwrap();
        for (a, n) in ana.iter().zip(&num) {
            assert!((a - n).abs() <= 1e-6 * n.abs().max(1.0), "{a} vs {n}");
        }
    }

    #[test]
    fn text_pool_values() {
        assert_eq!(text_pool(TextPoolKind::Mean, &[0.5]).unwrap(), 0.5);
        assert!((text_pool(TextPoolKind::Sum, &[0.2, 0.3]).unwrap() - 0.5).abs() < 1e-15);
        assert!((text_pool(TextPoolKind::Mean, &[0.2, 0.3]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(
            text_pool_grad(TextPoolKind::Sum, &[0.1, 0.2, 0.3], 2.0).unwrap(),
            vec![2.0; 3]
        );
        assert_eq!(
            text_pool_grad(TextPoolKind::Mean, &[0.1, 0.2], 1.0).unwrap(),
            vec![0.5; 2]
        );
    }

    #[test]
    fn names_round_trip() {
        for kind in AudioPoolKind::ALL {
            assert_eq!(kind.name().parse::<AudioPoolKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.name()));
        }
        assert_eq!("sum".parse::<TextPoolKind>().unwrap(), TextPoolKind::Sum);
        assert!("softmax".parse::<AudioPoolKind>().is_err());
    }

    #[test]
    fn linear_softmax_is_not_monotone() {
        // raising a small frame next to a dominant one lowers the pooled score
        let f = |v: &[f64]| audio_pool(AudioPoolKind::LinearSoftmax, v).unwrap();
        assert!(f(&[1.0, 0.1]) < f(&[1.0, 0.0]));
    }

    fn track() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..=1.0, 1..50)
    }

    proptest! {
        #[test]
        fn pooled_value_within_bounds(s in track()) {
            let (lo, hi) = bounds(&s);
            let mean = audio_pool(AudioPoolKind::Mean, &s).unwrap();
            for kind in AudioPoolKind::ALL {
                let v = audio_pool(kind, &s).unwrap();
                prop_assert!(lo <= v && v <= hi);
                prop_assert!(mean <= v);
            }
        }

        #[test]
        fn constant_track_is_exact(c in 0.0f64..=1.0, n in 1usize..60) {
            let s = vec![c; n];
            for kind in AudioPoolKind::ALL {
                prop_assert_eq!(audio_pool(kind, &s).unwrap(), c);
            }
        }

        #[test]
        fn raising_a_frame_never_lowers_score(s in track(), idx in 0usize..50, bump in 0.0f64..0.5) {
            let i = idx % s.len();
            let mut up = s.clone();
            up[i] = (up[i] + bump).min(1.0);
            for kind in [AudioPoolKind::Mean, AudioPoolKind::Max, AudioPoolKind::ExpSoftmax] {
                prop_assert!(audio_pool(kind, &up).unwrap() >= audio_pool(kind, &s).unwrap());
            }
        }

        #[test]
        fn sum_is_n_times_mean(s in track()) {
            let sum = text_pool(TextPoolKind::Sum, &s).unwrap();
            let mean = text_pool(TextPoolKind::Mean, &s).unwrap();
            prop_assert!((sum - s.len() as f64 * mean).abs() < 1e-12);
        }

        #[test]
        fn text_grad_matches_differences(s in prop::collection::vec(-2.0f64..2.0, 1..20), up in -3.0f64..3.0) {
            for kind in [TextPoolKind::Mean, TextPoolKind::Sum] {
                let num = numeric_grad(|v| up * text_pool(kind, v).unwrap(), &s, 1e-6);
                let ana = text_pool_grad(kind, &s, up).unwrap();
                for (a, n) in ana.iter().zip(&num) {
                    prop_assert!((a - n).abs() <= 1e-6 * n.abs().max(1.0));
                }
            }
        }
    }
}
