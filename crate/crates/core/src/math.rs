//! Numeric primitives shared by the sampling, loss and evaluation code.
//!
//! Everything here works in `f64`, independent of the precision the encoders
//! run at.

use crate::error::{Error, Result};

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

/// Softmax temperature; always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidTemperature(tau))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Key,
    OriginalKey,
}

/// Row-major matrix of `n` feature vectors of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: Vec<f64>,
    n: usize,
    dim: usize,
    role: Role,
}

impl EmbeddingBatch {
    pub fn new(data: Vec<f64>, dim: usize, role: Role) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot be split into rows of width {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("embedding batch has non-finite entries".into()));
        }
        Ok(Self {
            n: data.len() / dim,
            data,
            dim,
            role,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], role: Role) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::new(rows.concat(), dim, role)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy with every row scaled to unit length.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.rows() {
            data.extend(normalize_slice(row)?);
        }
        Ok(Self { data, ..*self })
    }
}

/// Dense `rows × cols` matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    entries: Vec<f64>,
    rows: usize,
    cols: usize,
    pub row_role: Role,
    pub col_role: Role,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn normalize_slice(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    normalize_slice(&v.0).map(FeatureVector)
}

pub fn cosine_sim(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    cosine_slices(&a.0, &b.0)
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na >= ZERO_NORM) {
        return Err(Error::ZeroVector(na));
    }
    if !(nb >= ZERO_NORM) {
        return Err(Error::ZeroVector(nb));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `exp(cos(a, b) / tau)`, evaluated literally.
pub fn psi(a: &FeatureVector, b: &FeatureVector, tau: Temperature) -> Result<f64> {
    Ok((cosine_sim(a, b)? / tau.get()).exp())
}

/// Pairwise cosine similarity of every row of `rows` against every row of `cols`.
pub fn similarity_matrix(rows: &EmbeddingBatch, cols: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    if rows.dim != cols.dim {
        return Err(Error::DimensionMismatch {
            expected: rows.dim,
            got: cols.dim,
        });
    }
    let rn = rows.normalized()?;
    let cn = cols.normalized()?;
    let mut entries = Vec::with_capacity(rows.n * cols.n);
    for r in rn.rows() {
        entries.extend(cn.rows().map(|c| dot(r, c).clamp(-1.0, 1.0)));
    }
    Ok(SimilarityMatrix {
        entries,
        rows: rows.n,
        cols: cols.n,
        row_role: rows.role,
        col_role: cols.role,
    })
}

/// `log Σ exp(x_i)` with the max shifted out. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
