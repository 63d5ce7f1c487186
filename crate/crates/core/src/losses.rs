//! Training objectives with analytic gradients.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pooling::{AudioPoolKind, audio_pool, audio_pool_grad};

/// Probability clamp applied before every logarithm.
pub const BCE_EPS: f64 = 1e-7;

/// Default hinge margin of the ranking loss.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Non-negative hinge margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin(f64);

impl Margin {
    pub fn new(m: f64) -> Result<Self> {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::invalid(format!("margin must be >= 0, got {m}")));
        }
        Ok(Margin(m))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Margin {
    fn default() -> Self {
        Margin(DEFAULT_MARGIN)
    }
}

/// Bidirectional max-margin ranking loss over a `B x B` grid where
/// `grid[i][j]` is the similarity of audio `i` and sentence `j`.
///
/// Returns the loss averaged over `B` and its gradient with respect to the
/// grid.
pub fn ranking_loss(grid: &Matrix, margin: Margin) -> Result<(f64, Matrix)> {
    let b = grid.rows();
    if grid.cols() != b {
        return Err(Error::dim(format!(
            "similarity grid must be square, got {}x{}",
            b,
            grid.cols()
        )));
    }
    if b < 2 {
        return Err(Error::invalid("ranking loss needs a batch of at least 2"));
    }
    if !grid.is_finite() {
        return Err(Error::NonFinite("similarity grid"));
    }
    let m = margin.value();
    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(b, b);
    for i in 0..b {
        let pos = grid.get(i, i);
        for j in (0..b).filter(|&j| j != i) {
            // wrong sentence for audio i
            let text_hinge = m + grid.get(i, j) - pos;
            if text_hinge > 0.0 {
                loss += text_hinge;
                grad.add_at(i, j, scale);
                grad.add_at(i, i, -scale);
            }
            // wrong audio for sentence i
            let audio_hinge = m + grid.get(j, i) - pos;
            if audio_hinge > 0.0 {
                loss += audio_hinge;
                grad.add_at(j, i, scale);
                grad.add_at(i, i, -scale);
            }
        }
    }
    Ok((loss * scale, grad))
}

fn bce_term(s: f64, y: f64) -> (f64, f64) {
    let p = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = (p - y) / (p * (1.0 - p));
    (loss, grad)
}

/// Mean binary cross entropy between scores `s` and (soft) labels `y`.
pub fn bce_loss(s: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if s.len() != y.len() {
        return Err(Error::dim(format!(
            "{} scores vs {} labels",
            s.len(),
            y.len()
        )));
    }
    if s.is_empty() {
        return Err(Error::Empty("bce input"));
    }
    let scale = 1.0 / s.len() as f64;
    let mut loss = 0.0;
    let grad = s
        .iter()
        .zip(y)
        .map(|(s, y)| {
            let (l, g) = bce_term(*s, *y);
            loss += l;
            g * scale
        })
        .collect();
    Ok((loss * scale, grad))
}

/// Frame-level BCE against teacher frame targets plus clip-level BCE of the
/// pooled scores against refined labels.
///
/// `s_fp` and `y_self` are `T x N`; `y_refined` has length `N`.
pub fn selfsup_loss(
    s_fp: &Matrix,
    y_self: &Matrix,
    y_refined: &[f64],
    pool: AudioPoolKind,
) -> Result<(f64, Matrix)> {
    let (t, n) = (s_fp.rows(), s_fp.cols());
    if y_self.rows() != t || y_self.cols() != n || y_refined.len() != n {
        return Err(Error::dim(format!(
            "scores {t}x{n}, frame targets {}x{}, clip targets {}",
            y_self.rows(),
            y_self.cols(),
            y_refined.len()
        )));
    }
    if t == 0 || n == 0 {
        return Err(Error::Empty("self-supervision input"));
    }

    let strong_scale = 1.0 / (t * n) as f64;
    let weak_scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(t, n);
    for r in 0..t {
        for c in 0..n {
            let (l, g) = bce_term(s_fp.get(r, c), y_self.get(r, c));
            loss += l * strong_scale;
            grad.set(r, c, g * strong_scale);
        }
    }
    for (c, &target) in y_refined.iter().enumerate() {
        let track = s_fp.column(c);
        let pooled = audio_pool(pool, &track)?;
        let (l, g) = bce_term(pooled, target);
        loss += l * weak_scale;
        let frame_grad = audio_pool_grad(pool, &track, g * weak_scale)?;
        for (r, fg) in frame_grad.into_iter().enumerate() {
            grad.add_at(r, c, fg);
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominant_diagonal_has_no_loss() {
        let mut grid = Matrix::zeros(3, 3);
        for i in 0..3 {
            grid.set(i, i, 1.0);
        }
        let (loss, grad) = ranking_loss(&grid, Margin::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|g| *g == 0.0));

        let grid = Matrix::from_rows(&[vec![0.5, 0.4], vec![0.1, 0.6]]).unwrap();
        assert_eq!(ranking_loss(&grid, Margin::new(0.0).unwrap()).unwrap().0, 0.0);
    }

    #[test]
    fn two_by_two_hand_enumeration() {
        // text hinge (0,1) = 0.1, audio hinge for sentence 1 = 0.3, others <= 0
        let grid = Matrix::from_rows(&[vec![0.9, 0.8], vec![0.5, 0.7]]).unwrap();
        let (loss, _) = ranking_loss(&grid, Margin::new(0.2).unwrap()).unwrap();
        assert!((loss - 0.2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn ranking_rejects_bad_shapes() {
        assert!(ranking_loss(&Matrix::zeros(1, 1), Margin::default()).is_err());
        assert!(ranking_loss(&Matrix::zeros(2, 3), Margin::default()).is_err());
        assert!(Margin::new(-0.1).is_err());
    }

    #[test]
    fn bce_reference_values() {
        let (l, _) = bce_loss(&[1.0 - BCE_EPS], &[1.0]).unwrap();
        assert!(l < 1e-6);
        let (l, _) = bce_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap();
        assert!((l - 0.105361).abs() < 1e-6);
        let (l, g) = bce_loss(&[0.5], &[0.5]).unwrap();
        assert!((l - 0.693147).abs() < 1e-6);
        assert_eq!(g, vec![0.0]);
        assert!(bce_loss(&[0.5], &[0.5, 1.0]).is_err());
    }

    #[test]
    fn bce_is_finite_when_saturated() {
        let (l, g) = bce_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn selfsup_single_frame() {
        let s = Matrix::from_rows(&[vec![0.9]]).unwrap();
        let y = Matrix::from_rows(&[vec![1.0]]).unwrap();
        for pool in AudioPoolKind::ALL {
            let (l, _) = selfsup_loss(&s, &y, &[1.0], pool).unwrap();
            assert!((l - 0.210721).abs() < 1e-6, "{pool}: {l}");
        }
    }

    #[test]
    fn selfsup_perfect_agreement() {
        let s = Matrix::from_rows(&[vec![1.0 - BCE_EPS, BCE_EPS], vec![1.0 - BCE_EPS, BCE_EPS]])
            .unwrap();
        let pooled = [
            audio_pool(AudioPoolKind::Mean, &s.column(0)).unwrap(),
            audio_pool(AudioPoolKind::Mean, &s.column(1)).unwrap(),
        ];
        let (l, _) = selfsup_loss(&s, &s, &pooled, AudioPoolKind::Mean).unwrap();
        assert!(l < 1e-5, "{l}");
    }

    #[test]
    fn selfsup_rejects_shape_mismatch() {
        let s = Matrix::zeros(3, 2);
        assert!(selfsup_loss(&s, &Matrix::zeros(2, 2), &[0.0, 0.0], AudioPoolKind::Max).is_err());
        assert!(selfsup_loss(&s, &Matrix::zeros(3, 2), &[0.0], AudioPoolKind::Max).is_err());
    }
}
