//! Small dense tensor facility used by the attention core and the toy drawer.
//!
//! Everything is row-major `f64`. Latent tensors are `(h, w, c)` and are viewed
//! as `(h*w, c)` matrices when multiplied against projection weights.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != rhs.rows {
            return Err(TensorError::ShapeMismatch(format!(
                "({}x{}) · ({}x{})",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != rhs.cols {
            return Err(TensorError::ShapeMismatch(format!(
                "({}x{}) · ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, rhs.rows, |i, j| {
            self.row(i).iter().zip(rhs.row(j)).map(|(a, b)| a * b).sum()
        }))
    }

    /// Vertically stacks matrices with equal column counts.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix, TensorError> {
        let Some(first) = parts.first() else {
            return Ok(Matrix::zeros(0, 0));
        };
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(TensorError::ShapeMismatch(format!("vstack of {} and {} columns", cols, p.cols)));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        check_finite(&self.data)
    }
}

pub(crate) fn check_finite(data: &[f64]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(TensorError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Latent feature map of shape `(h, w, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        Self { h, w, c, data: vec![v; h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != h * w * c {
            return Err(TensorError::ShapeMismatch(format!(
                "{} values for a {h}x{w}x{c} latent",
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn from_matrix(h: usize, w: usize, m: Matrix) -> Result<Self, TensorError> {
        if m.rows != h * w {
            return Err(TensorError::ShapeMismatch(format!("{} rows for {h}x{w} cells", m.rows)));
        }
        Ok(Self { h, w, c: m.cols, data: m.data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Channel vector of the cell at `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.w + col) * self.c;
        &self.data[start..start + self.c]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.w + col) * self.c;
        &mut self.data[start..start + self.c]
    }

    /// Flattened `(h*w, c)` view as an owned matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix { rows: self.h * self.w, cols: self.c, data: self.data.clone() }
    }

    pub fn same_shape(&self, other: &LatentTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor) -> Result<(), TensorError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch(format!("{:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        check_finite(&self.data)
    }

    /// Sum of squares of all entries.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Binary spatial mask at latent resolution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, bits: vec![false; h * w] }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self { h, w, bits: vec![true; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                bits.push(f(r, c));
            }
        }
        Self { h, w, bits }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.w + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.w + col] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, TensorError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask, TensorError> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask { h: self.h, w: self.w, bits: self.bits.iter().map(|b| !b).collect() }
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(format!("mask {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect(),
        })
    }
}

const BLOB_DTYPE: &str = "f64-le";

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    dtype: String,
    shape: Vec<usize>,
}

/// Writes a flat little-endian `f64` array preceded by a one-line JSON shape header.
pub fn write_blob<W: Write>(mut out: W, shape: &[usize], data: &[f64]) -> io::Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("shape {shape:?} does not hold {} values", data.len()),
        ));
    }
    let header = BlobHeader { dtype: BLOB_DTYPE.to_string(), shape: shape.to_vec() };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

/// Reads a blob written by [`write_blob`].
pub fn read_blob<R: BufRead>(mut input: R) -> io::Result<(Vec<usize>, Vec<f64>)> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: BlobHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("blob header: {e}")))?;
    if header.dtype != BLOB_DTYPE {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("unsupported dtype {}", header.dtype)));
    }
    let n: usize = header.shape.iter().product();
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != n * 8 {
        return Err(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("expected {} bytes of payload, found {}", n * 8, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header.shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let bt = Matrix::from_fn(2, 3, |r, c| b.get(c, r));
        assert_eq!(a.matmul_t(&bt).unwrap(), c);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn blob_round_trip_and_truncation() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mut buf = Vec::new();
        write_blob(&mut buf, &[2, 3, 4], &data).unwrap();
        let (shape, back) = read_blob(&buf[..]).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(back, data);
        let err = read_blob(&buf[..buf.len() - 3]).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::UnexpectedEof);
    }

    #[test]
    fn mask_set_ops() {
        let a = BinaryMask::from_fn(2, 2, |r, _| r == 0);
        let b = BinaryMask::from_fn(2, 2, |_, c| c == 0);
        assert_eq!(a.union(&b).unwrap().count(), 3);
        assert_eq!(a.intersection(&b).unwrap().count(), 1);
        assert_eq!(a.complement().count(), 2);
        assert!(a.union(&BinaryMask::empty(3, 3)).is_err());
    }
}
