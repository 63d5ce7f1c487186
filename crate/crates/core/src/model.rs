//! Toy grounding model: a word-embedding text encoder with mean pooling,
//! a single affine+tanh frame encoder, and sigmoid dot-product similarity
//! between every frame and every phrase. Backward passes are written out by
//! hand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{read_blob, write_blob};
use crate::data::{FrameSequence, PhraseQuery, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, dot, sigmoid};
use crate::rng::Rng;

pub const DEFAULT_EMBED_DIM: usize = 32;
const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `V x E`
    pub word_embeddings: Matrix,
    /// `D x E`
    pub encoder_weights: Matrix,
    /// `E`
    pub encoder_bias: Vec<f64>,
}

impl ModelParams {
    /// Uniform(-0.05, 0.05) weights and embeddings, zero bias.
    pub fn init(vocab_size: usize, feature_dim: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let mut draw = |rows, cols| {
            let data = (0..rows * cols)
                .map(|_| rng.uniform(-INIT_RANGE, INIT_RANGE))
                .collect();
            Matrix::from_vec(rows, cols, data).unwrap()
        };
        let word_embeddings = draw(vocab_size, embed_dim);
        let encoder_weights = draw(feature_dim, embed_dim);
        ModelParams {
            word_embeddings,
            encoder_weights,
            encoder_bias: vec![0.0; embed_dim],
        }
    }

    /// All-zero parameters of the same shape, used as gradient buffers.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            word_embeddings: Matrix::zeros(self.vocab_size(), self.embed_dim()),
            encoder_weights: Matrix::zeros(self.feature_dim(), self.embed_dim()),
            encoder_bias: vec![0.0; self.embed_dim()],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.word_embeddings.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder_weights.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder_bias.len()
    }

    pub fn slices(&self) -> [&[f64]; 3] {
        [
            self.word_embeddings.as_slice(),
            self.encoder_weights.as_slice(),
            &self.encoder_bias,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.word_embeddings.as_mut_slice(),
            self.encoder_weights.as_mut_slice(),
            &mut self.encoder_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            s.fill(value);
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Mean of the phrase's token embedding rows.
pub fn embed_phrase(params: &ModelParams, phrase: &PhraseQuery) -> Result<Vec<f64>> {
    if phrase.tokens.is_empty() {
        return Err(Error::Empty("phrase tokens"));
    }
    let vocab = params.vocab_size();
    let mut out = vec![0.0; params.embed_dim()];
    for &tok in &phrase.tokens {
        if tok >= vocab {
            return Err(Error::OutOfVocabulary { token: tok, vocab });
        }
        for (o, w) in out.iter_mut().zip(params.word_embeddings.row(tok)) {
            *o += w;
        }
    }
    let n = phrase.tokens.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// `tanh(x W + b)` for every frame; returns `T x E`.
pub fn encode_frames(params: &ModelParams, frames: &FrameSequence) -> Result<Matrix> {
    if frames.feature_dim() != params.feature_dim() {
        return Err(Error::dim(format!(
            "clip {} has feature dim {}, model expects {}",
            frames.clip_id,
            frames.feature_dim(),
            params.feature_dim()
        )));
    }
    let (t_len, e) = (frames.num_frames(), params.embed_dim());
    let w = &params.encoder_weights;
    let mut out = Matrix::zeros(t_len, e);
    for t in 0..t_len {
        let row = out.row_mut(t);
        row.copy_from_slice(&params.encoder_bias);
        for (d, x) in frames.features.row(t).iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for (o, wv) in row.iter_mut().zip(w.row(d)) {
                *o += x * wv;
            }
        }
        row.iter_mut().for_each(|v| *v = v.tanh());
    }
    Ok(out)
}

/// `sigmoid(a_t . t)` for every frame embedding row of `a`.
pub fn frame_phrase_similarity(a: &Matrix, t: &[f64]) -> Result<Vec<f64>> {
    if a.cols() != t.len() {
        return Err(Error::dim(format!(
            "frame embeddings have dim {}, phrase embedding {}",
            a.cols(),
            t.len()
        )));
    }
    Ok((0..a.rows()).map(|r| sigmoid(dot(a.row(r), t))).collect())
}

/// Phrase embeddings stacked as rows, `N x E`.
pub fn embed_phrases(params: &ModelParams, phrases: &[PhraseQuery]) -> Result<Matrix> {
    let mut out = Matrix::zeros(phrases.len(), params.embed_dim());
    for (i, p) in phrases.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&embed_phrase(params, p)?);
    }
    Ok(out)
}

/// `T x N` frame-phrase probabilities from encoded frames and phrase rows.
pub fn similarity_matrix(encoded: &Matrix, phrase_embs: &Matrix) -> Result<Matrix> {
    if encoded.cols() != phrase_embs.cols() {
        return Err(Error::dim("frame and phrase embedding sizes differ"));
    }
    let mut out = Matrix::zeros(encoded.rows(), phrase_embs.rows());
    for t in 0..encoded.rows() {
        let a = encoded.row(t);
        for n in 0..phrase_embs.rows() {
            out.set(t, n, sigmoid(dot(a, phrase_embs.row(n))));
        }
    }
    Ok(out)
}

/// Frame-level grounding output. No pooling is applied at inference.
pub fn infer(
    params: &ModelParams,
    frames: &FrameSequence,
    phrases: &[PhraseQuery],
) -> Result<SimilarityMatrix> {
    if phrases.is_empty() {
        return Err(Error::Empty("phrase set"));
    }
    let encoded = encode_frames(params, frames)?;
    let embs = embed_phrases(params, phrases)?;
    SimilarityMatrix::new(similarity_matrix(&encoded, &embs)?)
}

/// Backpropagates `d_sfp` (gradient w.r.t. the `T x N` probabilities) into
/// the frame embeddings and the phrase embedding rows.
pub fn similarity_backward(
    encoded: &Matrix,
    phrase_embs: &Matrix,
    s_fp: &Matrix,
    d_sfp: &Matrix,
    d_encoded: &mut Matrix,
    d_phrase_embs: &mut Matrix,
) {
    let e = encoded.cols();
    for t in 0..encoded.rows() {
        for n in 0..phrase_embs.rows() {
            let s = s_fp.get(t, n);
            let dz = d_sfp.get(t, n) * s * (1.0 - s);
            if dz == 0.0 {
                continue;
            }
            let a = encoded.row(t);
            let p = phrase_embs.row(n);
            let da = d_encoded.row_mut(t);
            for k in 0..e {
                da[k] += dz * p[k];
            }
            let dp = d_phrase_embs.row_mut(n);
            for k in 0..e {
                dp[k] += dz * a[k];
            }
        }
    }
}

/// Accumulates encoder weight/bias gradients from `d_encoded` (`T x E`).
pub fn encoder_backward(
    frames: &FrameSequence,
    encoded: &Matrix,
    d_encoded: &Matrix,
    grads: &mut ModelParams,
) {
    let e = encoded.cols();
    let mut d_pre = vec![0.0; e];
    for t in 0..encoded.rows() {
        let a = encoded.row(t);
        let da = d_encoded.row(t);
        for k in 0..e {
            d_pre[k] = da[k] * (1.0 - a[k] * a[k]);
        }
        for (b, d) in grads.encoder_bias.iter_mut().zip(&d_pre) {
            *b += d;
        }
        for (d, x) in frames.features.row(t).iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for (w, dp) in grads.encoder_weights.row_mut(d).iter_mut().zip(&d_pre) {
                *w += x * dp;
            }
        }
    }
}

/// Spreads a phrase embedding gradient over its tokens.
pub fn embed_backward(phrase: &PhraseQuery, d_emb: &[f64], grads: &mut ModelParams) {
    let scale = 1.0 / phrase.tokens.len() as f64;
    for &tok in &phrase.tokens {
        for (g, d) in grads.word_embeddings.row_mut(tok).iter_mut().zip(d_emb) {
            *g += scale * d;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: ModelParams,
    second: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let parts = params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first.slices_mut())
            .zip(self.second.slices_mut());
        for (((p, g), m), v) in parts {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    vocab_size: usize,
    feature_dim: usize,
    embed_dim: usize,
    config: serde_json::Value,
}

const CHECKPOINT_FORMAT: &str = "tagground-checkpoint";

/// Writes parameters with a JSON header echoing `config`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    config: &serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        vocab_size: params.vocab_size(),
        feature_dim: params.feature_dim(),
        embed_dim: params.embed_dim(),
        config: config.clone(),
    };
    let floats: Vec<f64> = params.slices().concat();
    write_blob(path.as_ref(), &header, &floats)
}

/// Reads a checkpoint; returns the parameters and the echoed config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, serde_json::Value)> {
    let path = path.as_ref();
    let (header, floats): (CheckpointHeader, Vec<f64>) = read_blob(path)?;
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("not a checkpoint (format {:?})", header.format)));
    }
    let (v, d, e) = (header.vocab_size, header.feature_dim, header.embed_dim);
    if floats.len() != v * e + d * e + e {
        return Err(bad(format!(
            "expected {} parameters for V={v} D={d} E={e}, found {}",
            v * e + d * e + e,
            floats.len()
        )));
    }
    let (emb, rest) = floats.split_at(v * e);
    let (w, b) = rest.split_at(d * e);
    let params = ModelParams {
        word_embeddings: Matrix::from_vec(v, e, emb.to_vec())?,
        encoder_weights: Matrix::from_vec(d, e, w.to_vec())?,
        encoder_bias: b.to_vec(),
    };
    Ok((params, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(rows: &[Vec<f64>]) -> FrameSequence {
        FrameSequence::new("c", Matrix::from_rows(rows).unwrap(), 0.01).unwrap()
    }

    fn small_params() -> ModelParams {
        ModelParams::init(6, 3, 4, &mut Rng::new(11))
    }

    #[test]
    fn embedding_is_token_mean() {
        let p = small_params();
        let single = embed_phrase(&p, &PhraseQuery::new("a", vec![2])).unwrap();
        assert_eq!(single, p.word_embeddings.row(2));
        let twice = embed_phrase(&p, &PhraseQuery::new("a a", vec![2, 2])).unwrap();
        for (x, y) in twice.iter().zip(&single) {
            assert!((x - y).abs() < 1e-15);
        }
        let pair = embed_phrase(&p, &PhraseQuery::new("a b", vec![1, 4])).unwrap();
        for k in 0..4 {
            let avg = (p.word_embeddings.get(1, k) + p.word_embeddings.get(4, k)) / 2.0;
            assert!((pair[k] - avg).abs() < 1e-15);
        }
        assert!(matches!(
            embed_phrase(&p, &PhraseQuery::new("oov", vec![6])),
            Err(Error::OutOfVocabulary { token: 6, vocab: 6 })
        ));
    }

    #[test]
    fn encoder_edge_cases() {
        let mut p = small_params();
        p.fill(0.0);
        let f = frames(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.3, 0.3]]);
        let a = encode_frames(&p, &f).unwrap();
        assert!(a.as_slice().iter().all(|v| *v == 0.0));

        p.encoder_bias = vec![0.5, -1.0, 0.0, 2.0];
        for d in 0..3 {
            p.encoder_weights.set(d, d, 1.0);
        }
        let zero = frames(&[vec![0.0; 3]]);
        let a = encode_frames(&p, &zero).unwrap();
        let expect: Vec<f64> = p.encoder_bias.iter().map(|b| b.tanh()).collect();
        assert_eq!(a.row(0), expect.as_slice());

        assert!(encode_frames(&p, &frames(&[vec![0.0; 2]])).is_err());
    }

    #[test]
    fn encoder_matches_reference_matmul() {
        let p = small_params();
        let f = frames(&[vec![0.2, -1.0, 0.7], vec![1.5, 0.0, -0.3]]);
        let a = encode_frames(&p, &f).unwrap();
        for t in 0..2 {
            for e in 0..4 {
                let mut z = p.encoder_bias[e];
                for d in 0..3 {
                    z += f.features.get(t, d) * p.encoder_weights.get(d, e);
                }
                assert!((a.get(t, e) - z.tanh()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn similarity_reference_points() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![3f64.ln(), 0.0], vec![20.0, 0.0]]).unwrap();
        let s = frame_phrase_similarity(&a, &[0.0, 1.0]).unwrap();
        assert_eq!(s, vec![0.5; 3]);
        let s = frame_phrase_similarity(&a, &[1.0, 0.0]).unwrap();
        assert!((s[1] - 0.75).abs() < 1e-15);
        assert!(1.0 - s[2] < 1e-8);
        assert!(frame_phrase_similarity(&a, &[1.0]).is_err());
    }

    #[test]
    fn infer_is_a_composition_and_column_equivariant() {
        let p = small_params();
        let f = frames(&[vec![0.2, -1.0, 0.7], vec![1.5, 0.0, -0.3], vec![0.0, 0.4, 0.4]]);
        let phrases = vec![
            PhraseQuery::new("x", vec![0, 1]),
            PhraseQuery::new("y", vec![5]),
            PhraseQuery::new("z", vec![3, 3, 2]),
        ];
        let sim = infer(&p, &f, &phrases).unwrap();
        let a = encode_frames(&p, &f).unwrap();
        for (n, ph) in phrases.iter().enumerate() {
            let col = frame_phrase_similarity(&a, &embed_phrase(&p, ph).unwrap()).unwrap();
            assert_eq!(sim.track(n), col);
        }
        let reversed: Vec<PhraseQuery> = phrases.iter().rev().cloned().collect();
        let rsim = infer(&p, &f, &reversed).unwrap();
        for n in 0..3 {
            assert_eq!(rsim.track(n), sim.track(2 - n));
        }
        let one = infer(&p, &frames(&[vec![0.1, 0.2, 0.3]]), &phrases[..1]).unwrap();
        assert_eq!((one.num_frames(), one.num_phrases()), (1, 1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = small_params();
        let cfg = serde_json::json!({"mode": "phrase"});
        save_checkpoint(&path, &p, &cfg).unwrap();
        let (q, c) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(c, cfg);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = small_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.fill(0.3);
        let mut opt = Adam::new(&p, 0.001);
        opt.update(&mut p, &g);
        for (a, b) in p.slices().iter().zip(before.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!(((y - x) - 0.001).abs() < 1e-9);
            }
        }
    }
}
