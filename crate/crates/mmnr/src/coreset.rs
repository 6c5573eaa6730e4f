//! Outlier-aware memory-bank construction.
//!
//! A memory bank is a compact set of reference patch features that inference
//! compares against.  Building one from the denoised training set has three
//! steps, each exposed on its own:
//!
//! 1. [`lof`] scores every patch with the classic local-outlier-factor
//!    statistic η: the ratio of the local density around a patch's neighbors
//!    to the density around the patch itself.  η near 1 means the patch sits
//!    in a region of uniform density; η well above 1 means its neighborhood
//!    is much denser than it is — the signature of an outlier.
//! 2. [`filter_top_tau`] drops the highest-η fraction outright.
//! 3. [`greedy_coreset`] thins the survivors with farthest-point k-center
//!    selection so the bank stays small while still covering feature space.
//!
//! The surviving entries keep their η values as per-entry weights; the
//! decision layer uses those to inflate distances to low-confidence entries.
//! Everything here is deterministic: no sampling, ties broken by index.

use rayon::prelude::*;
use std::path::Path;

use crate::bundle::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

/// Neighbor count for outlier scoring.
pub const DEFAULT_LOF_K: usize = 5;

/// Fraction of filtered patches kept by coreset selection.
pub const DEFAULT_CORESET_FRACTION: f64 = 0.1;

/// Reachability floor: a patch whose neighbors all coincide with it would
/// otherwise have infinite local density.
const REACH_EPSILON: f64 = 1e-12;

const BANK_MAGIC: [u8; 4] = *b"MMNB";

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_uniform_dims(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points[0].len();
    for p in points {
        if p.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: p.len(),
            });
        }
    }
    Ok(dim)
}

// ---------------------------------------------------------------------------
// local outlier factor
// ---------------------------------------------------------------------------

/// Per-patch outlier statistics.
#[derive(Debug, Clone)]
pub struct LofResult {
    /// Neighbor count the scores were computed with.
    pub k: usize,
    /// Local reachability density per patch (inverse mean reachability
    /// distance to the k-neighborhood); positive and finite.
    pub lrd: Vec<f64>,
    /// Relative density per patch: mean neighbor lrd over own lrd.  Values
    /// near 1 are interior points, larger values are outliers.
    pub eta: Vec<f64>,
}

/// Local-outlier-factor scores over a point set.
///
/// For each point, `dist_k` is the distance to its k-th nearest other point
/// and the neighborhood holds *every* other point within `dist_k` — ties
/// make it larger than `k`.  The reachability distance from `i` to a
/// neighbor `b` is `max(dist_k(b), d(i, b))`; `lrd` is the inverse of its
/// neighborhood mean (capped at `1/1e-12` when duplicates collapse the mean
/// to zero), and η is the neighborhood's mean lrd divided by the point's
/// own.
///
/// Runs the per-point neighbor searches in parallel; the result is
/// deterministic regardless of thread count.
pub fn lof(points: &[Vec<f64>], k: usize) -> Result<LofResult> {
    if k == 0 {
        return Err(Error::InvalidConfig("neighbor count k must be >= 1".into()));
    }
    if points.len() <= k {
        return Err(Error::InsufficientData(format!(
            "lof with k = {k} needs at least {} points, got {}",
            k + 1,
            points.len()
        )));
    }
    check_uniform_dims(points)?;
    let n = points.len();

    // Pass 1: k-distance and tie-inclusive neighborhood of every point.
    struct Hood {
        dist_k: f64,
        neighbors: Vec<(usize, f64)>,
    }
    let hoods: Vec<Hood> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut by_dist: Vec<(f64, usize)> = (0..n)
                .filter(|j| *j != i)
                .map(|j| (dist(&points[i], &points[j]), j))
                .collect();
            // Partial selection instead of a full sort: only the k-th order
            // statistic is needed to fix the neighborhood, and the (small)
            // neighborhood is re-sorted afterwards so downstream summation
            // order stays index-deterministic.
            by_dist.select_nth_unstable_by(k - 1, |a, b| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            });
            let dist_k = by_dist[k - 1].0;
            let mut neighbors: Vec<(usize, f64)> = by_dist
                .into_iter()
                .filter(|(d, _)| *d <= dist_k)
                .map(|(d, j)| (j, d))
                .collect();
            neighbors.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            Hood { dist_k, neighbors }
        })
        .collect();

    // Pass 2: local reachability density from the stored neighborhoods.
    let lrd: Vec<f64> = hoods
        .par_iter()
        .map(|hood| {
            let mean_reach = hood
                .neighbors
                .iter()
                .map(|(b, d)| hoods[*b].dist_k.max(*d))
                .sum::<f64>()
                / hood.neighbors.len() as f64;
            if mean_reach < REACH_EPSILON {
                1.0 / REACH_EPSILON
            } else {
                1.0 / mean_reach
            }
        })
        .collect();

    // Pass 3: relative density.
    let eta: Vec<f64> = hoods
        .par_iter()
        .enumerate()
        .map(|(i, hood)| {
            let mean_lrd =
                hood.neighbors.iter().map(|(b, _)| lrd[*b]).sum::<f64>() / hood.neighbors.len() as f64;
            mean_lrd / lrd[i]
        })
        .collect();

    Ok(LofResult { k, lrd, eta })
}

// ---------------------------------------------------------------------------
// top-tau removal
// ---------------------------------------------------------------------------

/// Removes the `ceil(tau * n)` highest-η patches.
///
/// Ties in η resolve by input order (the earlier patch is removed first).
/// Returns the kept patches with their η values as weights, preserving input
/// order.  Fails if the removal would empty the set.
pub fn filter_top_tau(
    points: &[Vec<f64>],
    eta: &[f64],
    tau: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!(
            "tau must lie in [0, 1), got {tau}"
        )));
    }
    if points.len() != eta.len() {
        return Err(Error::DimMismatch {
            expected: points.len(),
            got: eta.len(),
        });
    }
    if points.is_empty() {
        return Err(Error::InsufficientData("no patches to filter".into()));
    }
    let remove = (tau * points.len() as f64).ceil() as usize;
    if remove >= points.len() {
        return Err(Error::InsufficientData(format!(
            "removing {remove} of {} patches would empty the set",
            points.len()
        )));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|a, b| eta[*b].partial_cmp(&eta[*a]).unwrap().then(a.cmp(b)));
    let mut removed = vec![false; points.len()];
    for i in &order[..remove] {
        removed[*i] = true;
    }
    let mut kept_points = Vec::with_capacity(points.len() - remove);
    let mut kept_weights = Vec::with_capacity(points.len() - remove);
    for (i, p) in points.iter().enumerate() {
        if !removed[i] {
            kept_points.push(p.clone());
            kept_weights.push(eta[i]);
        }
    }
    Ok((kept_points, kept_weights))
}

// ---------------------------------------------------------------------------
// greedy k-center coreset
// ---------------------------------------------------------------------------

/// Farthest-point k-center selection of `ceil(fraction * n)` indices.
///
/// Starts from the point nearest the mean and repeatedly adds the point
/// farthest from the current selection; both choices break ties toward the
/// lower index, so the result is fully deterministic.  Returns indices in
/// pick order.  The classic greedy guarantee applies: the coverage radius is
/// at most twice the optimal k-center radius for the same budget.
pub fn greedy_coreset(points: &[Vec<f64>], target_fraction: f64) -> Result<Vec<usize>> {
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "coreset fraction must lie in (0, 1], got {target_fraction}"
        )));
    }
    if points.is_empty() {
        return Err(Error::InsufficientData("no points to select from".into()));
    }
    let dim = check_uniform_dims(points)?;
    let n = points.len();
    let count = ((target_fraction * n as f64).ceil() as usize).clamp(1, n);

    let mut mean = vec![0.0f64; dim];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut first = 0usize;
    let mut best = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist(p, &mean);
        if d < best {
            best = d;
            first = i;
        }
    }

    let mut picked = Vec::with_capacity(count);
    picked.push(first);
    let mut min_dist: Vec<f64> = points.iter().map(|p| dist(p, &points[first])).collect();
    while picked.len() < count {
        let mut next = 0usize;
        let mut far = f64::NEG_INFINITY;
        for (i, d) in min_dist.iter().enumerate() {
            if *d > far {
                far = *d;
                next = i;
            }
        }
        picked.push(next);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = dist(&points[i], &points[next]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(picked)
}

// ---------------------------------------------------------------------------
// memory bank
// ---------------------------------------------------------------------------

/// Immutable reference-feature store with per-entry confidence weights and
/// exact nearest-neighbor lookup.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    entries: Vec<Vec<f64>>,
    weights: Vec<f64>,
    dim: usize,
}

impl MemoryBank {
    /// Assembles a bank from parallel entry and weight lists.
    pub fn from_parts(entries: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InsufficientData(
                "memory bank needs at least one entry".into(),
            ));
        }
        if entries.len() != weights.len() {
            return Err(Error::DimMismatch {
                expected: entries.len(),
                got: weights.len(),
            });
        }
        let dim = check_uniform_dims(&entries)?;
        for w in &weights {
            if !w.is_finite() || *w <= 0.0 {
                return Err(Error::Numeric(format!(
                    "bank weights must be positive and finite, got {w}"
                )));
            }
        }
        Ok(MemoryBank {
            entries,
            weights,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Exact nearest entry to `query`: returns `(index, distance)` from a
    /// full linear scan, ties toward the lower index.
    pub fn nearest(&self, query: &[f64]) -> Result<(usize, f64)> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut best = (0usize, f64::INFINITY);
        for (i, e) in self.entries.iter().enumerate() {
            let d = dist(query, e);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best)
    }

    /// Serializes the bank: entry matrix and weight vector as f32 blobs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(BANK_MAGIC);
        w.u32(self.len() as u32);
        w.u32(self.dim as u32);
        let mut flat = Vec::with_capacity(self.len() * self.dim);
        for e in &self.entries {
            flat.extend_from_slice(e);
        }
        w.f32_blob(&flat);
        w.f32_blob(&self.weights);
        w.into_bytes()
    }

    /// Decodes a bank written by [`to_bytes`](Self::to_bytes).
    pub fn from_bytes(bytes: &[u8], origin: impl AsRef<Path>) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin.as_ref());
        r.magic(BANK_MAGIC)?;
        r.version()?;
        let count = r.u32("entry count")? as usize;
        let dim = r.u32("entry dim")? as usize;
        if count == 0 || dim == 0 {
            return Err(r.malformed(format!("empty bank shape {count}x{dim}")));
        }
        let flat = r.f32_blob(count * dim, "entries")?;
        let weights = r.f32_blob(count, "weights")?;
        r.expect_end()?;
        let entries = flat.chunks_exact(dim).map(|c| c.to_vec()).collect();
        MemoryBank::from_parts(entries, weights)
    }
}

/// Writes a memory bank to disk.
pub fn write_bank(path: impl AsRef<Path>, bank: &MemoryBank) -> Result<()> {
    std::fs::write(path.as_ref(), bank.to_bytes()).map_err(|e| Error::io(path.as_ref(), e))
}

/// Reads a memory bank from disk.
pub fn read_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    MemoryBank::from_bytes(&bytes, path.as_ref())
}

/// Full bank-construction pipeline: outlier scoring, top-τ removal, then
/// greedy coreset selection.
///
/// The bank keeps the η weight of every selected entry, so low-confidence
/// (outlier-adjacent) references stay identifiable at query time.
/// Deterministic for a fixed input order.
pub fn build_bank(
    features: &[Vec<f64>],
    k: usize,
    tau: f64,
    fraction: f64,
) -> Result<MemoryBank> {
    if features.is_empty() {
        return Err(Error::InsufficientData(
            "cannot build a bank from zero patches".into(),
        ));
    }
    let scores = lof(features, k)?;
    let (kept, weights) = filter_top_tau(features, &scores.eta, tau)?;
    let picks = greedy_coreset(&kept, fraction)?;
    let entries = picks.iter().map(|i| kept[*i].clone()).collect();
    let picked_weights = picks.iter().map(|i| weights[*i]).collect();
    MemoryBank::from_parts(entries, picked_weights)
}
