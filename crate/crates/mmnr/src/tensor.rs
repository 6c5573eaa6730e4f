//! Core dense containers shared by every stage: patch-feature grids,
//! organized point clouds, per-pixel score maps, and the two similarity
//! primitives (cosine similarity and Euclidean distance) everything else is
//! built on.
//!
//! All grids are row-major with the origin at the top-left; `(u, v)` indexes
//! row `u` (top to bottom) and column `v` (left to right). Values are `f64`
//! in memory; serialization quantizes to `f32` (see [`crate::bundle`]).

use crate::error::{Error, Result};

/// Cosine similarity between two equal-length vectors.
///
/// Errors with [`Error::DimMismatch`] when lengths differ and
/// [`Error::ZeroNorm`] when either vector has norm below `1e-300` (no
/// direction to compare).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom < 1e-300 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / denom)
}

/// Euclidean (L2) distance between two equal-length vectors.
pub fn l2_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(sq_dist(a, b).sqrt())
}

/// Squared Euclidean distance without length checking; hot-path helper for
/// neighbor searches where dimensions are validated once up front.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// L2 norm of a vector.
#[inline]
pub fn l2_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalizes `a` to unit L2 norm in place; errors on (numerically) zero
/// input.
pub fn normalize(a: &mut [f64]) -> Result<()> {
    let n = l2_norm(a);
    if n < 1e-300 {
        return Err(Error::ZeroNorm);
    }
    for x in a.iter_mut() {
        *x /= n;
    }
    Ok(())
}

/// Dense `height x width` grid of `dim`-dimensional patch features with a
/// per-cell validity mask and an optional grid-level class token.
///
/// Invalid cells always carry an all-zero feature vector; constructors and
/// mutators preserve this.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    /// `height * width * dim` values, row-major, cell-contiguous.
    data: Vec<f64>,
    /// `height * width` validity flags.
    valid: Vec<bool>,
    /// Optional grid-level summary feature (`dim` values when present).
    class_token: Option<Vec<f64>>,
}

impl FeatureGrid {
    /// Creates a grid of all-invalid (zero) cells.
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        FeatureGrid {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
            valid: vec![false; height * width],
            class_token: None,
        }
    }

    /// Builds a grid from raw parts, checking lengths and zeroing any cell
    /// flagged invalid so the all-zero invariant holds.
    pub fn from_parts(
        height: usize,
        width: usize,
        dim: usize,
        mut data: Vec<f64>,
        valid: Vec<bool>,
        class_token: Option<Vec<f64>>,
    ) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::DimMismatch {
                expected: height * width * dim,
                got: data.len(),
            });
        }
        if valid.len() != height * width {
            return Err(Error::DimMismatch {
                expected: height * width,
                got: valid.len(),
            });
        }
        if let Some(ct) = &class_token {
            if ct.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: ct.len(),
                });
            }
        }
        for (cell, ok) in valid.iter().enumerate() {
            if !ok {
                data[cell * dim..(cell + 1) * dim].fill(0.0);
            }
        }
        Ok(FeatureGrid {
            height,
            width,
            dim,
            data,
            valid,
            class_token,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Feature vector at `(u, v)`; all zeros when the cell is invalid.
    pub fn feature(&self, u: usize, v: usize) -> &[f64] {
        let cell = u * self.width + v;
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[u * self.width + v]
    }

    /// Writes a feature at `(u, v)` and marks the cell valid.
    pub fn set_feature(&mut self, u: usize, v: usize, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: feature.len(),
            });
        }
        let cell = u * self.width + v;
        self.data[cell * self.dim..(cell + 1) * self.dim].copy_from_slice(feature);
        self.valid[cell] = true;
        Ok(())
    }

    /// Marks a cell invalid, zeroing its feature.
    pub fn invalidate(&mut self, u: usize, v: usize) {
        let cell = u * self.width + v;
        self.data[cell * self.dim..(cell + 1) * self.dim].fill(0.0);
        self.valid[cell] = false;
    }

    pub fn class_token(&self) -> Option<&[f64]> {
        self.class_token.as_deref()
    }

    pub fn set_class_token(&mut self, token: Vec<f64>) -> Result<()> {
        if token.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: token.len(),
            });
        }
        self.class_token = Some(token);
        Ok(())
    }

    /// Iterates `(u, v, feature)` over valid cells in row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, &[f64])> {
        (0..self.height).flat_map(move |u| {
            (0..self.width).filter_map(move |v| {
                if self.is_valid(u, v) {
                    Some((u, v, self.feature(u, v)))
                } else {
                    None
                }
            })
        })
    }

    /// Number of valid cells.
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Raw row-major value buffer (`height * width * dim`).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw validity buffer (`height * width`).
    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Mean of the valid cells' features, or `None` when no cell is valid.
    pub fn mean_valid_feature(&self) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for (_, _, f) in self.iter_valid() {
            for (a, x) in acc.iter_mut().zip(f) {
                *a += x;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        for a in acc.iter_mut() {
            *a /= n as f64;
        }
        Some(acc)
    }
}

/// Image-aligned point cloud: one 3D position per pixel of an `height x
/// width` grid, with a validity mask (background/removed points are
/// invalid).
#[derive(Debug, Clone, PartialEq)]
pub struct OrganizedPointCloud {
    height: usize,
    width: usize,
    /// `height * width * 3` coordinates, row-major, xyz-contiguous.
    positions: Vec<f64>,
    valid: Vec<bool>,
}

impl OrganizedPointCloud {
    pub fn zeros(height: usize, width: usize) -> Self {
        OrganizedPointCloud {
            height,
            width,
            positions: vec![0.0; height * width * 3],
            valid: vec![false; height * width],
        }
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        positions: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if positions.len() != height * width * 3 {
            return Err(Error::DimMismatch {
                expected: height * width * 3,
                got: positions.len(),
            });
        }
        if valid.len() != height * width {
            return Err(Error::DimMismatch {
                expected: height * width,
                got: valid.len(),
            });
        }
        Ok(OrganizedPointCloud {
            height,
            width,
            positions,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn position(&self, u: usize, v: usize) -> [f64; 3] {
        let cell = (u * self.width + v) * 3;
        [
            self.positions[cell],
            self.positions[cell + 1],
            self.positions[cell + 2],
        ]
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[u * self.width + v]
    }

    pub fn set_position(&mut self, u: usize, v: usize, pos: [f64; 3]) {
        let cell = (u * self.width + v) * 3;
        self.positions[cell..cell + 3].copy_from_slice(&pos);
        self.valid[u * self.width + v] = true;
    }

    pub fn invalidate(&mut self, u: usize, v: usize) {
        self.valid[u * self.width + v] = false;
    }

    /// Iterates `(u, v, position)` over valid pixels in row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, [f64; 3])> + '_ {
        (0..self.height).flat_map(move |u| {
            (0..self.width).filter_map(move |v| {
                if self.is_valid(u, v) {
                    Some((u, v, self.position(u, v)))
                } else {
                    None
                }
            })
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
}

/// Per-pixel anomaly scores produced by the denoising stages and by
/// patch-distance rasterization. Scores are finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl AnomalyMap {
    /// Validating constructor: every score must be finite and `>= 0`.
    pub fn from_scores(height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::DimMismatch {
                expected: height * width,
                got: scores.len(),
            });
        }
        for s in &scores {
            if !s.is_finite() || *s < 0.0 {
                return Err(Error::Numeric(format!(
                    "anomaly map requires finite non-negative scores, got {s}"
                )));
            }
        }
        Ok(AnomalyMap {
            height,
            width,
            scores,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        AnomalyMap {
            height,
            width,
            scores: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.scores[u * self.width + v]
    }

    pub fn set(&mut self, u: usize, v: usize, s: f64) {
        self.scores[u * self.width + v] = s;
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-pixel real-valued score field. Unlike [`AnomalyMap`] the values may
/// be negative: decision-layer outputs are raw offsets from a learned
/// boundary, so the sign carries information.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl ScoreGrid {
    /// Validating constructor: scores must be finite.
    pub fn from_scores(height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::DimMismatch {
                expected: height * width,
                got: scores.len(),
            });
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!(
                "score grid requires finite values, got {bad}"
            )));
        }
        Ok(ScoreGrid {
            height,
            width,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.scores[u * self.width + v]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}
