//! Threshold-free evaluation metrics.
//!
//! Three numbers summarize a run:
//!
//! * sample-level AUROC over per-sample anomaly scores,
//! * pixel-level AUROC over pooled per-cell scores, and
//! * AUPRO: the per-region overlap curve — for every threshold, how much of
//!   each ground-truth defect region the binary prediction covers, averaged
//!   over regions — integrated over the false-positive-rate axis up to a
//!   cap and normalized, so large defects cannot drown out small ones.
//!
//! Both implementations are exact, not sampled: AUROC is the tie-aware
//! Mann-Whitney rank statistic, and AUPRO sweeps *every* unique score value
//! with an incremental update (sorting once instead of rescanning per
//! threshold).  Slower reference implementations in the tests pin the
//! results down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ScoreGrid;

/// Cap on the false-positive-rate axis of the AUPRO integral.
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// One run's headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Sample-level AUROC.
    pub i_auroc: f64,
    /// Pooled pixel-level AUROC.
    pub p_auroc: f64,
    /// Normalized per-region overlap area.
    pub aupro: f64,
    /// FPR cap the AUPRO integral used.
    pub fpr_limit: f64,
}

// ---------------------------------------------------------------------------
// AUROC
// ---------------------------------------------------------------------------

/// Tie-aware rank AUROC.
///
/// Equivalent to counting, over every (positive, negative) pair, wins as 1
/// and score ties as 1/2 — the rank formulation just does it in
/// `O(n log n)`.  Invariant under any strictly increasing transform of the
/// scores.  Requires both classes to be present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in auroc input".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InsufficientData(format!(
            "auroc needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());

    // Average ranks across tie groups, then sum the positives' ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for idx in &order[i..j] {
            if labels[*idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Pools every cell of every sample into one pixel-level AUROC.
pub fn pixel_auroc(samples: &[(&ScoreGrid, &[bool])]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, mask) in samples {
        if mask.len() != map.height() * map.width() {
            return Err(Error::DimMismatch {
                expected: map.height() * map.width(),
                got: mask.len(),
            });
        }
        scores.extend_from_slice(map.scores());
        labels.extend_from_slice(mask);
    }
    auroc(&scores, &labels)
}

// ---------------------------------------------------------------------------
// connected components
// ---------------------------------------------------------------------------

/// 8-connected components of a binary mask, in scanline discovery order;
/// each component's pixel indices come back sorted.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Result<Vec<Vec<usize>>> {
    if mask.len() != height * width {
        return Err(Error::DimMismatch {
            expected: height * width,
            got: mask.len(),
        });
    }
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (u, v) = (p / width, p % width);
            for du in -1i64..=1 {
                for dv in -1i64..=1 {
                    if du == 0 && dv == 0 {
                        continue;
                    }
                    let (nu, nv) = (u as i64 + du, v as i64 + dv);
                    if nu < 0 || nu >= height as i64 || nv < 0 || nv >= width as i64 {
                        continue;
                    }
                    let q = nu as usize * width + nv as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        components.push(pixels);
    }
    Ok(components)
}

// ---------------------------------------------------------------------------
// AUPRO
// ---------------------------------------------------------------------------

/// Area under the per-region-overlap vs. false-positive-rate curve.
///
/// Ground-truth defect regions are the 8-connected components of the masks,
/// pooled across samples.  Sweeping a threshold from above the maximum score
/// downward, every unique score value yields one curve point: mean per-region
/// overlap of the binary prediction against the pooled false-positive rate
/// on normal pixels.  The curve is integrated by trapezoid over
/// `FPR ∈ [0, fpr_limit]` (the last span interpolated at the cut) and
/// normalized by `fpr_limit`, so a perfect detector scores 1.
///
/// Needs at least one anomalous and one normal pixel across the pool.
pub fn aupro(samples: &[(&ScoreGrid, &[bool])], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fpr_limit must lie in (0, 1], got {fpr_limit}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData("aupro over zero samples".into()));
    }

    // Pool pixels: score, owning component (or none), component sizes.
    let mut comp_of: Vec<Option<usize>> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    let mut comp_sizes: Vec<usize> = Vec::new();
    for (map, mask) in samples {
        let comps = connected_components(mask, map.height(), map.width())?;
        let offset = comp_sizes.len();
        let mut local = vec![None; mask.len()];
        for (ci, pixels) in comps.iter().enumerate() {
            for p in pixels {
                local[*p] = Some(offset + ci);
            }
            comp_sizes.push(pixels.len());
        }
        scores.extend_from_slice(map.scores());
        comp_of.extend(local);
    }
    if comp_sizes.is_empty() {
        return Err(Error::InsufficientData(
            "aupro needs at least one anomalous component".into(),
        ));
    }
    let total_normal = comp_of.iter().filter(|c| c.is_none()).count();
    if total_normal == 0 {
        return Err(Error::InsufficientData(
            "aupro needs at least one normal pixel for the FPR axis".into(),
        ));
    }

    // Descending sweep with incremental per-component hit counts.  The
    // hits/size ratios are formed fresh at every curve point — a fully
    // recovered component contributes exactly 1, so a perfect prediction
    // integrates to exactly 1.0 instead of drifting by accumulated rounding.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap());
    let n_comps = comp_sizes.len() as f64;
    let mut hits = vec![0usize; comp_sizes.len()];
    let mut false_pos = 0usize;
    let mut points: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            match comp_of[order[j]] {
                Some(c) => hits[c] += 1,
                None => false_pos += 1,
            }
            j += 1;
        }
        let overlap_sum: f64 = hits
            .iter()
            .zip(&comp_sizes)
            .map(|(h, s)| *h as f64 / *s as f64)
            .sum();
        points.push((
            false_pos as f64 / total_normal as f64,
            overlap_sum / n_comps,
        ));
        i = j;
    }

    Ok(integrate_normalized(&points, fpr_limit))
}

/// Trapezoid integral of a piecewise-linear curve over `[0, limit]`, divided
/// by `limit`.
fn integrate_normalized(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0f64;
    for pair in points.windows(2) {
        let (f0, p0) = pair[0];
        let (f1, p1) = pair[1];
        if f0 >= limit {
            break;
        }
        if f1 <= f0 {
            continue; // vertical jump: no width
        }
        let hi = f1.min(limit);
        // Interpolate the right endpoint if the span crosses the cap.
        let p_hi = p0 + (p1 - p0) * (hi - f0) / (f1 - f0);
        area += 0.5 * (p0 + p_hi) * (hi - f0);
    }
    area / limit
}
