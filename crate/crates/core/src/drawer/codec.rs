//! Fixed pixel↔latent maps and the toy text and image encoders.
//!
//! A latent cell covers an 8×8 pixel block (the last row and column of cells may
//! cover fewer pixels). Pixel column `x` belongs to cell `⌊x·w / W⌋`, the same
//! partition the layout rasterizer uses.

use rand_distr::{Distribution, StandardNormal};

use super::image::{RgbImage, BLANK_LEVEL};
use crate::attention::EmbeddingSequence;
use crate::layout::FrameSize;
use crate::registry::{EmbeddingVector, Provenance};
use crate::seed::stream;
use crate::tensor::{LatentTensor, Matrix, TensorError};

pub const LATENT_FACTOR: u32 = 8;
pub const LATENT_CHANNELS: usize = 3;
pub const TEXT_DIM: usize = 16;
pub const MAX_TEXT_TOKENS: usize = 12;
/// 4 tokens of [`TEXT_DIM`] features.
pub const IMAGE_EMBED_DIM: usize = 64;

const PIXEL_SCALE: f64 = 48.0;
const COLOR_MAP: [[f64; 3]; 3] = [[1.0, 0.3, 0.0], [0.2, 1.0, 0.2], [0.0, 0.3, 1.0]];

pub fn latent_dims(frame: FrameSize) -> (usize, usize) {
    (frame.height.div_ceil(LATENT_FACTOR) as usize, frame.width.div_ceil(LATENT_FACTOR) as usize)
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

fn apply(m: &[[f64; 3]; 3], v: &[f64]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn cell_of(p: u32, extent: u32, cells: usize) -> usize {
    ((p as u64 * cells as u64) / extent as u64) as usize
}

/// Latent → image: colour map per cell, nearest-neighbour upsampling, clamp to `[0, 255]`.
pub fn decode(z: &LatentTensor, frame: FrameSize) -> RgbImage {
    let (h, w, _) = z.shape();
    let colors: Vec<[f64; 3]> = (0..h * w)
        .map(|i| {
            let rgb = apply(&COLOR_MAP, z.cell(i / w, i % w));
            rgb.map(|v| (BLANK_LEVEL + PIXEL_SCALE * v).clamp(0.0, 255.0))
        })
        .collect();
    let cols: Vec<usize> = (0..frame.width).map(|x| cell_of(x, frame.width, w)).collect();
    RgbImage::from_fn(frame.width, frame.height, |x, y| colors[cell_of(y, frame.height, h) * w + cols[x as usize]])
}

/// Image → latent: mean colour per cell, then the inverse colour map. Inverts
/// [`decode`] wherever the decode did not clamp.
pub fn encode(img: &RgbImage) -> LatentTensor {
    let frame = FrameSize::new(img.width(), img.height());
    let (h, w) = latent_dims(frame);
    let mut sums = vec![[0.0f64; 3]; h * w];
    let mut counts = vec![0u32; h * w];
    for y in 0..img.height() {
        let r = cell_of(y, img.height(), h);
        for x in 0..img.width() {
            let i = r * w + cell_of(x, img.width(), w);
            let p = img.pixel(x, y);
            for k in 0..3 {
                sums[i][k] += p[k];
            }
            counts[i] += 1;
        }
    }
    let inv = invert3(&COLOR_MAP);
    let mut data = Vec::with_capacity(h * w * LATENT_CHANNELS);
    for (s, &n) in sums.iter().zip(&counts) {
        let mean = s.map(|v| (v / n as f64 - BLANK_LEVEL) / PIXEL_SCALE);
        data.extend_from_slice(&apply(&inv, &mean));
    }
    LatentTensor::from_vec(h, w, LATENT_CHANNELS, data).expect("sizes agree")
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .take(MAX_TEXT_TOKENS)
        .collect()
}

fn token_vector(token: &str) -> Vec<f64> {
    let mut rng = stream(0, &format!("token:{token}"));
    (0..TEXT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Bag of hash-seeded word vectors, one token per word (at most
/// [`MAX_TEXT_TOKENS`]). Empty text encodes as a single placeholder token.
pub fn encode_text(text: &str) -> EmbeddingSequence {
    let mut tokens = tokenize(text);
    if tokens.is_empty() {
        tokens.push("<empty>".into());
    }
    let data: Vec<f64> = tokens.iter().flat_map(|t| token_vector(t)).collect();
    EmbeddingSequence::new(Matrix::from_vec(tokens.len(), TEXT_DIM, data).expect("sizes agree"))
        .expect("normal samples are finite")
}

/// Patch statistics on a 16×16 thumbnail: each quadrant is one token, made of
/// mean R, G, B and luminance spread for its four 4×4 blocks.
pub fn encode_image(img: &RgbImage) -> EmbeddingVector {
    let thumb = img.resize(16, 16);
    let mut values = Vec::with_capacity(IMAGE_EMBED_DIM);
    for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        for (by, bx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let (x0, y0) = (qx * 8 + bx * 4, qy * 8 + by * 4);
            let mut mean = [0.0; 3];
            let mut lum = Vec::with_capacity(16);
            for y in y0..y0 + 4 {
                for x in x0..x0 + 4 {
                    let p = thumb.pixel(x, y);
                    for k in 0..3 {
                        mean[k] += p[k] / 16.0;
                    }
                    lum.push(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
                }
            }
            let mu = lum.iter().sum::<f64>() / 16.0;
            let spread = (lum.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / 16.0).sqrt();
            values.extend(mean.map(|m| (m - BLANK_LEVEL) / BLANK_LEVEL));
            values.push(spread / BLANK_LEVEL);
        }
    }
    EmbeddingVector::new(values, Provenance::ToyEncoder)
}

/// View a flat embedding as a token sequence of width [`TEXT_DIM`].
pub fn embedding_tokens(e: &EmbeddingVector) -> Result<EmbeddingSequence, TensorError> {
    if e.values.is_empty() || e.values.len() % TEXT_DIM != 0 || e.dim != e.values.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "embedding of dim {} is not a whole number of {TEXT_DIM}-wide tokens",
            e.values.len()
        )));
    }
    EmbeddingSequence::new(Matrix::from_vec(e.values.len() / TEXT_DIM, TEXT_DIM, e.values.clone())?)
}
