//! Subject-aware attention: plain cross-attention, the masked per-subject text
//! and image branches, the overlap weights that average overlapping subjects,
//! and the final fusion with the global branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::registry::SubjectId;
use crate::tensor::{BinaryMask, LatentTensor, Matrix, TensorError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),
}

/// Token embeddings of shape `(L, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSequence {
    tokens: Matrix,
}

impl EmbeddingSequence {
    pub fn new(tokens: Matrix) -> Result<Self, TensorError> {
        tokens.check_finite()?;
        Ok(Self { tokens })
    }

    /// A single-token sequence.
    pub fn from_vector(v: &[f64]) -> Result<Self, TensorError> {
        Self::new(Matrix::from_vec(1, v.len(), v.to_vec())?)
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionSource {
    TextBranch,
    ImageBranch,
}

/// `W_Q: (c, d_k)`, `W_K: (d, d_k)`, `W_V: (d, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub source: ProjectionSource,
}

impl ProjectionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, source: ProjectionSource) -> Result<Self, TensorError> {
        if w_q.cols() != w_k.cols() || w_k.rows() != w_v.rows() || w_q.cols() == 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "W_Q {}x{}, W_K {}x{}, W_V {}x{} do not compose",
                w_q.rows(),
                w_q.cols(),
                w_k.rows(),
                w_k.cols(),
                w_v.rows(),
                w_v.cols()
            )));
        }
        for m in [&w_q, &w_k, &w_v] {
            m.check_finite()?;
        }
        Ok(Self { w_q, w_k, w_v, source })
    }

    /// Gaussian weights scaled by `1/√fan_in`, reproducible from `seed`.
    pub fn seeded(c: usize, d: usize, d_k: usize, source: ProjectionSource, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
        };
        let w_q = gauss(c, d_k);
        let w_k = gauss(d, d_k);
        let w_v = gauss(d, c);
        Self { w_q, w_k, w_v, source }
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.w_k.rows()
    }

    pub fn key_dim(&self) -> usize {
        self.w_k.cols()
    }
}

fn softmax_rows(m: &mut Matrix) {
    let cols = m.cols();
    for r in 0..m.rows() {
        let max = (0..cols).map(|c| m.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (m.get(r, c) - max).exp();
            m.set(r, c, e);
            sum += e;
        }
        for c in 0..cols {
            m.set(r, c, m.get(r, c) / sum);
        }
    }
}

/// `softmax(Z·W_Q (E·W_K)ᵀ / √d_k) · (E·W_V)`, with `Z` viewed as `(h·w, c)`.
pub fn cross_attention(z: &LatentTensor, e: &EmbeddingSequence, w: &ProjectionWeights) -> Result<LatentTensor, TensorError> {
    let out = attend(&z.to_matrix(), e, w)?;
    LatentTensor::from_matrix(z.height(), z.width(), out)
}

/// Row-wise attention for queries given as a `(n, c)` matrix.
fn attend(queries: &Matrix, e: &EmbeddingSequence, w: &ProjectionWeights) -> Result<Matrix, TensorError> {
    if queries.cols() != w.channels() {
        return Err(TensorError::ShapeMismatch(format!("latent has {} channels, W_Q expects {}", queries.cols(), w.channels())));
    }
    if e.dim() != w.embedding_dim() {
        return Err(TensorError::ShapeMismatch(format!("embedding dim {} but W_K expects {}", e.dim(), w.embedding_dim())));
    }
    if e.is_empty() {
        return Err(TensorError::ShapeMismatch("embedding sequence has no tokens".into()));
    }
    let q = queries.matmul(&w.w_q)?;
    let k = e.tokens().matmul(&w.w_k)?;
    let v = e.tokens().matmul(&w.w_v)?;
    let scores = q.matmul_t(&k)?;
    let scale = 1.0 / (w.key_dim() as f64).sqrt();
    let scaled: Vec<f64> = scores.data().iter().map(|s| s * scale).collect();
    let mut scores = Matrix::from_vec(scores.rows(), scores.cols(), scaled)?;
    softmax_rows(&mut scores);
    scores.matmul(&v)
}

/// `M_s(i, j) = 1 / Σ_k R_k(i, j)` where some mask covers the cell, else 0.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapWeights {
    h: usize,
    w: usize,
    m: Vec<f64>,
}

impl OverlapWeights {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.m[row * self.w + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

pub fn overlap_weight_matrix(masks: &[&BinaryMask], h: usize, w: usize) -> Result<OverlapWeights, TensorError> {
    let mut counts = vec![0u32; h * w];
    for m in masks {
        if m.shape() != (h, w) {
            return Err(TensorError::ShapeMismatch(format!("mask {:?} against latent {:?}", m.shape(), (h, w))));
        }
        for (c, &b) in counts.iter_mut().zip(m.bits()) {
            *c += b as u32;
        }
    }
    let m = counts.iter().map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect();
    Ok(OverlapWeights { h, w, m })
}

/// Per-subject attention inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectContext {
    pub id: SubjectId,
    /// Text embedding `f_i`.
    pub f: EmbeddingSequence,
    /// Image embedding `h_i`; absent until the subject has been drawn once.
    pub h: Option<EmbeddingSequence>,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAttention {
    pub output: LatentTensor,
    /// Set when no subject contributed: no contexts for the branch, or every mask empty.
    pub degenerate: bool,
    /// Subjects that contributed, in summation order.
    pub contributors: Vec<SubjectId>,
}

/// `M_s ⊙ Σ_i cross_attention(Z, E_i, W) ⊙ R_i`, summed in id order. The image branch
/// only includes subjects that have an image embedding, and `M_s` is computed over
/// those subjects' masks.
pub fn masked_subject_attention(
    z: &LatentTensor,
    contexts: &[SubjectContext],
    w: &ProjectionWeights,
    branch: Branch,
) -> Result<MaskedAttention, TensorError> {
    let (h, wd, c) = z.shape();
    for ctx in contexts {
        if ctx.mask.shape() != (h, wd) {
            return Err(TensorError::ShapeMismatch(format!(
                "mask of {} is {:?}, latent is {:?}",
                ctx.id,
                ctx.mask.shape(),
                (h, wd)
            )));
        }
    }
    let mut active: Vec<(&SubjectContext, &EmbeddingSequence)> = contexts
        .iter()
        .filter_map(|ctx| match branch {
            Branch::Text => Some((ctx, &ctx.f)),
            Branch::Image => ctx.h.as_ref().map(|e| (ctx, e)),
        })
        .collect();
    active.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let masks: Vec<&BinaryMask> = active.iter().map(|(ctx, _)| &ctx.mask).collect();
    let weights = overlap_weight_matrix(&masks, h, wd)?;
    let degenerate = active.is_empty() || masks.iter().all(|m| m.is_empty());
    if degenerate {
        return Ok(MaskedAttention { output: LatentTensor::zeros(h, wd, c), degenerate: true, contributors: vec![] });
    }

    // Attention rows are independent, so each subject is evaluated on its own cells only.
    let zm = z.to_matrix();
    let per_subject: Vec<(Vec<usize>, Matrix)> = active
        .par_iter()
        .map(|(ctx, e)| {
            let cells: Vec<usize> = (0..h * wd).filter(|&i| ctx.mask.bits()[i]).collect();
            let rows = Matrix::from_fn(cells.len(), c, |r, ch| zm.get(cells[r], ch));
            let att = if cells.is_empty() { Matrix::zeros(0, c) } else { attend(&rows, e, w)? };
            Ok((cells, att))
        })
        .collect::<Result<_, TensorError>>()?;

    let mut out = LatentTensor::zeros(h, wd, c);
    let data = out.data_mut();
    for (cells, att) in &per_subject {
        for (r, &cell) in cells.iter().enumerate() {
            for (o, s) in data[cell * c..(cell + 1) * c].iter_mut().zip(att.row(r)) {
                *o += s;
            }
        }
    }
    for (cell, m) in weights.values().iter().enumerate() {
        for v in &mut data[cell * c..(cell + 1) * c] {
            *v *= m;
        }
    }
    let contributors = active.iter().map(|(ctx, _)| ctx.id.clone()).collect();
    Ok(MaskedAttention { output: out, degenerate: false, contributors })
}

/// `α·Z_g + (1−α)·(Z_f + β·Z_h)`.
pub fn parallel_fuse(
    z_g: &LatentTensor,
    z_f: &LatentTensor,
    z_h: &LatentTensor,
    alpha: f64,
    beta: f64,
) -> Result<LatentTensor, AttentionError> {
    z_g.ensure_same_shape(z_f)?;
    z_g.ensure_same_shape(z_h)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AttentionError::InvalidWeights(format!("alpha {alpha} is outside [0, 1]")));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(AttentionError::InvalidWeights(format!("beta {beta} must be non-negative")));
    }
    // Exact switches for the ablations.
    if alpha == 1.0 {
        return Ok(z_g.clone());
    }
    if alpha == 0.0 && beta == 0.0 {
        return Ok(z_f.clone());
    }
    let (h, w, c) = z_g.shape();
    let data = z_g
        .data()
        .iter()
        .zip(z_f.data())
        .zip(z_h.data())
        .map(|((g, f), hh)| alpha * g + (1.0 - alpha) * (f + beta * hh))
        .collect();
    Ok(LatentTensor::from_vec(h, w, c, data)?)
}

/// One subject-aware attention layer: global, text and image branches fused.
#[derive(Debug, Clone, PartialEq)]
pub struct PUNetLayer {
    pub text: ProjectionWeights,
    pub image: ProjectionWeights,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub fused: LatentTensor,
    pub z_g: LatentTensor,
    pub z_f: MaskedAttention,
    pub z_h: MaskedAttention,
}

impl PUNetLayer {
    pub fn forward(
        &self,
        z: &LatentTensor,
        global: &EmbeddingSequence,
        contexts: &[SubjectContext],
    ) -> Result<LayerOutput, AttentionError> {
        let z_g = cross_attention(z, global, &self.text)?;
        let z_f = masked_subject_attention(z, contexts, &self.text, Branch::Text)?;
        let z_h = masked_subject_attention(z, contexts, &self.image, Branch::Image)?;
        let fused = parallel_fuse(&z_g, &z_f.output, &z_h.output, self.alpha, self.beta)?;
        Ok(LayerOutput { fused, z_g, z_f, z_h })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight-line evaluation with explicit loops and no shared helpers.
    #[allow(clippy::too_many_arguments)]
    fn naive_attention(z: &[f64], hw: usize, c: usize, e: &[f64], l: usize, d: usize, wq: &[f64], wk: &[f64], wv: &[f64], dk: usize) -> Vec<f64> {
        let mut out = vec![0.0; hw * c];
        for p in 0..hw {
            let mut q = vec![0.0; dk];
            for j in 0..dk {
                for i in 0..c {
                    q[j] += z[p * c + i] * wq[i * dk + j];
                }
            }
            let mut logits = vec![0.0; l];
            for t in 0..l {
                let mut k = vec![0.0; dk];
                for j in 0..dk {
                    for i in 0..d {
                        k[j] += e[t * d + i] * wk[i * dk + j];
                    }
                }
                logits[t] = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            for t in 0..l {
                let a = exps[t] / total;
                for ch in 0..c {
                    let mut v = 0.0;
                    for i in 0..d {
                        v += e[t * d + i] * wv[i * c + ch];
                    }
                    out[p * c + ch] += a * v;
                }
            }
        }
        out
    }

    fn naive_masked(z: &LatentTensor, subjects: &[(Vec<f64>, usize, Vec<bool>)], w: &ProjectionWeights) -> Vec<f64> {
        let (h, wd, c) = z.shape();
        let d = w.embedding_dim();
        let mut sum = vec![0.0; h * wd * c];
        let mut count = vec![0usize; h * wd];
        for (e, l, mask) in subjects {
            let att = naive_attention(z.data(), h * wd, c, e, *l, d, w.w_q.data(), w.w_k.data(), w.w_v.data(), w.key_dim());
            for p in 0..h * wd {
                if mask[p] {
                    count[p] += 1;
                    for ch in 0..c {
                        sum[p * c + ch] += att[p * c + ch];
                    }
                }
            }
        }
        for p in 0..h * wd {
            for ch in 0..c {
                sum[p * c + ch] = if count[p] == 0 { 0.0 } else { sum[p * c + ch] / count[p] as f64 };
            }
        }
        sum
    }

    fn rng_tensor(h: usize, w: usize, c: usize, seed: u64) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        LatentTensor::from_vec(h, w, c, (0..h * w * c).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    fn rng_seq(l: usize, d: usize, seed: u64) -> EmbeddingSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        EmbeddingSequence::new(Matrix::from_fn(l, d, |_, _| n.sample(&mut rng))).unwrap()
    }

    fn ctx(id: u32, f: EmbeddingSequence, h: Option<EmbeddingSequence>, mask: BinaryMask) -> SubjectContext {
        SubjectContext { id: SubjectId::subject(id), f, h, mask }
    }

    #[test]
    fn single_token_ignores_latent() {
        let w = ProjectionWeights::seeded(4, 8, 8, ProjectionSource::TextBranch, 1);
        let e = rng_seq(1, 8, 2);
        let a = cross_attention(&rng_tensor(3, 3, 4, 3), &e, &w).unwrap();
        let b = cross_attention(&rng_tensor(3, 3, 4, 4), &e, &w).unwrap();
        assert_eq!(a, b);
        let v = e.tokens().matmul(&w.w_v).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(a.cell(r, c), v.row(0));
            }
        }
        let twice = EmbeddingSequence::new(Matrix::vstack(&[e.tokens(), e.tokens()]).unwrap()).unwrap();
        let c = cross_attention(&rng_tensor(3, 3, 4, 3), &twice, &w).unwrap();
        assert!(c.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn matches_naive_oracle_fixed_case() {
        let w = ProjectionWeights::seeded(8, 8, 8, ProjectionSource::TextBranch, 11);
        let z = rng_tensor(4, 4, 8, 12);
        let e = rng_seq(3, 8, 13);
        let fast = cross_attention(&z, &e, &w).unwrap();
        let slow = naive_attention(z.data(), 16, 8, e.tokens().data(), 3, 8, w.w_q.data(), w.w_k.data(), w.w_v.data(), 8);
        let diff = fast.data().iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn shape_errors() {
        let w = ProjectionWeights::seeded(4, 8, 8, ProjectionSource::TextBranch, 1);
        assert!(cross_attention(&rng_tensor(2, 2, 3, 1), &rng_seq(1, 8, 1), &w).is_err());
        assert!(cross_attention(&rng_tensor(2, 2, 4, 1), &rng_seq(1, 5, 1), &w).is_err());
        assert!(ProjectionWeights::new(Matrix::zeros(4, 8), Matrix::zeros(8, 7), Matrix::zeros(8, 4), ProjectionSource::TextBranch).is_err());
        let bad = ctx(1, rng_seq(1, 8, 1), None, BinaryMask::full(3, 3));
        assert!(masked_subject_attention(&rng_tensor(2, 2, 4, 1), &[bad], &w, Branch::Text).is_err());
    }

    #[test]
    fn overlap_weights_examples() {
        let none = overlap_weight_matrix(&[], 3, 3).unwrap();
        assert!(none.values().iter().all(|&v| v == 0.0));
        let full = BinaryMask::full(3, 3);
        assert!(overlap_weight_matrix(&[&full], 3, 3).unwrap().values().iter().all(|&v| v == 1.0));
        let left = BinaryMask::from_fn(1, 4, |_, c| c < 3);
        let right = BinaryMask::from_fn(1, 4, |_, c| (1..3).contains(&c));
        let m = overlap_weight_matrix(&[&left, &right], 1, 4).unwrap();
        assert_eq!(m.values(), &[1.0, 0.5, 0.5, 0.0]);
        assert!(overlap_weight_matrix(&[&full], 2, 3).is_err());
    }

    #[test]
    fn single_full_mask_reduces_to_cross_attention() {
        let w = ProjectionWeights::seeded(4, 8, 4, ProjectionSource::TextBranch, 5);
        let z = rng_tensor(4, 5, 4, 6);
        let f = rng_seq(2, 8, 7);
        let out = masked_subject_attention(&z, &[ctx(1, f.clone(), None, BinaryMask::full(4, 5))], &w, Branch::Text).unwrap();
        assert_eq!(out.output, cross_attention(&z, &f, &w).unwrap());
        assert!(!out.degenerate);
    }

    #[test]
    fn disjoint_masks_partition_output() {
        let w = ProjectionWeights::seeded(4, 8, 4, ProjectionSource::TextBranch, 5);
        let z = rng_tensor(4, 4, 4, 6);
        let (f1, f2) = (rng_seq(2, 8, 7), rng_seq(3, 8, 8));
        let m1 = BinaryMask::from_fn(4, 4, |_, c| c < 2);
        let m2 = BinaryMask::from_fn(4, 4, |_, c| c == 3);
        let out = masked_subject_attention(&z, &[ctx(2, f2.clone(), None, m2), ctx(1, f1.clone(), None, m1)], &w, Branch::Text).unwrap();
        let a1 = cross_attention(&z, &f1, &w).unwrap();
        let a2 = cross_attention(&z, &f2, &w).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = match c {
                    0 | 1 => a1.cell(r, c).to_vec(),
                    3 => a2.cell(r, c).to_vec(),
                    _ => vec![0.0; 4],
                };
                assert_eq!(out.output.cell(r, c), expect.as_slice());
            }
        }
        assert_eq!(out.contributors, vec![SubjectId::subject(1), SubjectId::subject(2)]);
    }

    #[test]
    fn identical_subjects_average_to_one() {
        let w = ProjectionWeights::seeded(4, 8, 4, ProjectionSource::TextBranch, 5);
        let z = rng_tensor(3, 3, 4, 6);
        let f = rng_seq(2, 8, 7);
        let mask = BinaryMask::from_fn(3, 3, |r, _| r > 0);
        let one = masked_subject_attention(&z, &[ctx(1, f.clone(), None, mask.clone())], &w, Branch::Text).unwrap();
        let two = masked_subject_attention(&z, &[ctx(1, f.clone(), None, mask.clone()), ctx(2, f, None, mask)], &w, Branch::Text).unwrap();
        assert!(one.output.max_abs_diff(&two.output) < 1e-12);
    }

    #[test]
    fn image_branch_skips_subjects_without_embedding() {
        let w = ProjectionWeights::seeded(4, 8, 4, ProjectionSource::ImageBranch, 5);
        let z = rng_tensor(2, 2, 4, 6);
        let h = rng_seq(1, 8, 9);
        let full = BinaryMask::full(2, 2);
        let with = ctx(1, rng_seq(1, 8, 1), Some(h.clone()), full.clone());
        let without = ctx(2, rng_seq(1, 8, 2), None, full.clone());
        let out = masked_subject_attention(&z, &[with, without.clone()], &w, Branch::Image).unwrap();
        // M_s counts only the subject that has an image embedding.
        assert_eq!(out.output, cross_attention(&z, &h, &w).unwrap());
        let none = masked_subject_attention(&z, &[without], &w, Branch::Image).unwrap();
        assert!(none.degenerate);
        assert!(none.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_masks_are_flagged_not_nan() {
        let w = ProjectionWeights::seeded(4, 8, 4, ProjectionSource::TextBranch, 5);
        let z = rng_tensor(2, 3, 4, 6);
        let out = masked_subject_attention(&z, &[ctx(1, rng_seq(1, 8, 1), None, BinaryMask::empty(2, 3))], &w, Branch::Text).unwrap();
        assert!(out.degenerate);
        assert!(out.output.data().iter().all(|&v| v == 0.0));
        let none = masked_subject_attention(&z, &[], &w, Branch::Text).unwrap();
        assert!(none.degenerate);
    }

    #[test]
    fn fuse_examples() {
        let ones = LatentTensor::filled(2, 2, 3, 1.0);
        let g = rng_tensor(2, 2, 3, 1);
        let f = rng_tensor(2, 2, 3, 2);
        let h = rng_tensor(2, 2, 3, 3);
        assert_eq!(parallel_fuse(&g, &f, &h, 1.0, 0.7).unwrap(), g);
        assert_eq!(parallel_fuse(&g, &f, &h, 0.0, 0.0).unwrap(), f);
        let z = parallel_fuse(&ones, &ones, &ones, 0.2, 0.7).unwrap();
        assert!(z.data().iter().all(|&v| (v - 1.56).abs() < 1e-12));
        assert!(parallel_fuse(&g, &f, &h, 1.5, 0.0).is_err());
        assert!(parallel_fuse(&g, &f, &h, 0.5, -1.0).is_err());
        assert!(parallel_fuse(&g, &f, &LatentTensor::zeros(2, 2, 2), 0.5, 0.5).is_err());
    }

    #[test]
    fn layer_forward_alpha_one_is_global_branch() {
        let layer = PUNetLayer {
            text: ProjectionWeights::seeded(3, 16, 8, ProjectionSource::TextBranch, 1),
            image: ProjectionWeights::seeded(3, 16, 8, ProjectionSource::ImageBranch, 2),
            alpha: 1.0,
            beta: 0.7,
        };
        let z = rng_tensor(4, 4, 3, 3);
        let g = rng_seq(1, 16, 4);
        let contexts = [ctx(1, rng_seq(1, 16, 5), Some(rng_seq(1, 16, 6)), BinaryMask::from_fn(4, 4, |r, _| r < 2))];
        let out = layer.forward(&z, &g, &contexts).unwrap();
        assert_eq!(out.fused, cross_attention(&z, &g, &layer.text).unwrap());
    }

    fn arb_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, u64, Vec<Vec<bool>>)> {
        (1usize..=8, 1usize..=8, 1usize..=8, 1usize..=4, 1usize..=8, 1usize..=8, any::<u64>())
            .prop_flat_map(|(h, w, c, l, d, dk, seed)| {
                let masks = proptest::collection::vec(proptest::collection::vec(any::<bool>(), h * w), 0..4);
                (Just(h), Just(w), Just(c), Just(l), Just(d), Just(dk), Just(seed), masks)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]
        #[test]
        fn oracle_equivalence((h, w, c, l, d, dk, seed, masks) in arb_case()) {
            let weights = ProjectionWeights::seeded(c, d, dk, ProjectionSource::TextBranch, seed);
            let z = rng_tensor(h, w, c, seed ^ 1);
            let e = rng_seq(l, d, seed ^ 2);
            let fast = cross_attention(&z, &e, &weights).unwrap();
            let slow = naive_attention(z.data(), h * w, c, e.tokens().data(), l, d, weights.w_q.data(), weights.w_k.data(), weights.w_v.data(), dk);
            prop_assert!(fast.data().iter().zip(&slow).all(|(a, b)| (a - b).abs() < 1e-6));

            let contexts: Vec<SubjectContext> = masks.iter().enumerate().map(|(i, bits)| {
                ctx(i as u32 + 1, rng_seq(l, d, seed ^ (10 + i as u64)), None, BinaryMask::from_fn(h, w, |r, cc| bits[r * w + cc]))
            }).collect();
            let fast = masked_subject_attention(&z, &contexts, &weights, Branch::Text).unwrap();
            let subjects: Vec<(Vec<f64>, usize, Vec<bool>)> = contexts.iter().zip(&masks)
                .map(|(cx, bits)| (cx.f.tokens().data().to_vec(), l, bits.clone())).collect();
            let slow = naive_masked(&z, &subjects, &weights);
            prop_assert!(fast.output.data().iter().zip(&slow).all(|(a, b)| (a - b).abs() < 1e-6));
            prop_assert!(fast.output.check_finite().is_ok());

            // Zero outside the union of masks.
            for r in 0..h {
                for cc in 0..w {
                    if !masks.iter().any(|m| m[r * w + cc]) {
                        prop_assert!(fast.output.cell(r, cc).iter().all(|&v| v == 0.0));
                    }
                }
            }
        }

        #[test]
        fn overlap_weights_structure(masks in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 30), 0..6)) {
            let ms: Vec<BinaryMask> = masks.iter().map(|b| BinaryMask::from_fn(5, 6, |r, c| b[r * 6 + c])).collect();
            let refs: Vec<&BinaryMask> = ms.iter().collect();
            let m = overlap_weight_matrix(&refs, 5, 6).unwrap();
            for p in 0..30 {
                let k = masks.iter().filter(|b| b[p]).count();
                let v = m.values()[p];
                if k == 0 {
                    prop_assert_eq!(v, 0.0);
                } else {
                    prop_assert_eq!(v, 1.0 / k as f64);
                    prop_assert!((v * k as f64 - 1.0).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn fuse_is_linear(a in -3.0f64..3.0, alpha in 0.0f64..=1.0, beta in 0.0f64..2.0, seed in any::<u64>()) {
            let g1 = rng_tensor(2, 3, 2, seed);
            let g2 = rng_tensor(2, 3, 2, seed ^ 5);
            let f = rng_tensor(2, 3, 2, seed ^ 6);
            let h = rng_tensor(2, 3, 2, seed ^ 7);
            let zero = LatentTensor::zeros(2, 3, 2);
            let combo = LatentTensor::from_vec(2, 3, 2, g1.data().iter().zip(g2.data()).map(|(x, y)| a * x + y).collect()).unwrap();
            let lhs = parallel_fuse(&combo, &f, &h, alpha, beta).unwrap();
            let p1 = parallel_fuse(&g1, &zero, &zero, alpha, beta).unwrap();
            let p2 = parallel_fuse(&g2, &f, &h, alpha, beta).unwrap();
            for i in 0..lhs.data().len() {
                prop_assert!((lhs.data()[i] - (a * p1.data()[i] + p2.data()[i])).abs() < 1e-9);
            }
        }
    }
}
