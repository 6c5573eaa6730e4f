//! Stage II: multi-modal denoising of the training set.
//!
//! Each training sample is compared against the stage-I references within
//! each modality: window features at every scale score `1 − max cosine`
//! over all reference windows of that scale. Scores are aggregated back to
//! pixels — weighted by the references' mean suspected-anomaly map so that
//! likely-defective regions dominate — and collapsed into one scalar per
//! modality, then combined with modality weights. The highest-scoring
//! `⌈τ·M⌉` samples are dropped from training.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::FeatureBundle;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::patching::{MaskSets, Scale, ScaleMaskSet, WindowMask};
use crate::stage1::{image_windows, point_windows, ReferenceSet, SuspectScore, WindowFeature};
use crate::tensor::{cosine_sim, AnomalyMap};

/// Default image-modality weight in the final combination.
pub const DEFAULT_LAMBDA_IMAGE: f64 = 1.0;
/// Default point-modality weight in the final combination.
pub const DEFAULT_LAMBDA_POINT: f64 = 1.5;

/// Intra-modal scores of the retained windows at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScoreField {
    pub scale: Scale,
    /// `(u, v, score)` per retained window center.
    pub entries: Vec<(usize, usize, f64)>,
}

/// Computes `1 − max cosine` of each query window against every reference
/// window of the same scale (all positions of all references, flattened
/// into `reference_feats`).
pub fn intra_modal_score(
    scale: Scale,
    queries: &[WindowFeature],
    reference_feats: &[Vec<f64>],
) -> Result<PatchScoreField> {
    if reference_feats.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no reference windows at scale {scale:?}"
        )));
    }
    let entries = queries
        .iter()
        .map(|q| {
            let mut best = f64::MIN;
            for r in reference_feats {
                best = best.max(cosine_sim(&q.feature, r)?);
            }
            // A rounding error can nudge the best cosine past 1; the score
            // contract is non-negative.
            Ok((q.center.0, q.center.1, (1.0 - best).max(0.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchScoreField { scale, entries })
}

/// The suspect map restricted to one window, in window-row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowWeight {
    pub center: (usize, usize),
    pub mask: WindowMask,
    pub values: Vec<f64>,
}

impl WindowWeight {
    /// Weight at an absolute pixel; the pixel must lie inside the mask.
    pub fn value_at(&self, u: usize, v: usize) -> f64 {
        let cols = self.mask.cols.1 - self.mask.cols.0;
        self.values[(u - self.mask.rows.0) * cols + (v - self.mask.cols.0)]
    }
}

/// Per-scale window weights derived from one suspect map.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchWeightSet {
    pub l: WindowWeight,
    pub m: Vec<WindowWeight>,
    pub s: Vec<WindowWeight>,
}

/// Restricts the suspect map to every window of every scale; the sole
/// `l`-scale window carries the entire map.
pub fn patch_weights(map: &AnomalyMap, masks: &MaskSets) -> Result<PatchWeightSet> {
    if map.height() != masks.height || map.width() != masks.width {
        return Err(Error::ShapeMismatch {
            expected_h: masks.height,
            expected_w: masks.width,
            got_h: map.height(),
            got_w: map.width(),
        });
    }
    let restrict = |mask: &WindowMask| -> WindowWeight {
        let mut values = Vec::with_capacity(mask.cell_count());
        for u in mask.rows.0..mask.rows.1 {
            for v in mask.cols.0..mask.cols.1 {
                values.push(map.scores()[u * masks.width + v]);
            }
        }
        WindowWeight {
            center: mask.center,
            mask: *mask,
            values,
        }
    };
    Ok(PatchWeightSet {
        l: restrict(&masks.l.masks[0]),
        m: masks.m.masks.iter().map(&restrict).collect(),
        s: masks.s.masks.iter().map(&restrict).collect(),
    })
}

/// Pixel map aggregated from window scores, with a coverage flag per
/// pixel; uncovered pixels hold 0 and are excluded from downstream maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedMap {
    pub map: AnomalyMap,
    pub covered: Vec<bool>,
}

/// Aggregates window scores to pixels: each pixel averages the
/// weight-scaled scores of the windows covering it,
/// `Σ W_pq(u,v)·s̄_pq / |covering|`.
pub fn aggregate_scores(
    field: &PatchScoreField,
    weights: &[WindowWeight],
    set: &ScaleMaskSet,
    h: usize,
    w: usize,
) -> Result<AggregatedMap> {
    if field.scale != set.scale {
        return Err(Error::InvalidConfig(format!(
            "score field scale {:?} does not match mask scale {:?}",
            field.scale, set.scale
        )));
    }
    let mut num = vec![0.0f64; h * w];
    let mut den = vec![0usize; h * w];
    for &(cu, cv, score) in &field.entries {
        let weight = weights
            .iter()
            .find(|ww| ww.center == (cu, cv))
            .ok_or_else(|| {
                Error::InvalidConfig(format!("no window weight at center ({cu},{cv})"))
            })?;
        for u in weight.mask.rows.0..weight.mask.rows.1 {
            for v in weight.mask.cols.0..weight.mask.cols.1 {
                num[u * w + v] += weight.value_at(u, v) * score;
                den[u * w + v] += 1;
            }
        }
    }
    let covered: Vec<bool> = den.iter().map(|&d| d > 0).collect();
    let scores: Vec<f64> = (0..h * w)
        .map(|i| if den[i] > 0 { num[i] / den[i] as f64 } else { 0.0 })
        .collect();
    Ok(AggregatedMap {
        map: AnomalyMap::from_scores(h, w, scores)?,
        covered,
    })
}

/// Collapses one modality into a scalar:
/// `(s_zero + max_uv(s̿^m + s̿^s) + max_uv(s̿^l)) / 3`, where each max
/// runs over pixels covered at the scale(s) involved.
pub fn final_sample_score(
    s_zero: f64,
    l: &AggregatedMap,
    m: &AggregatedMap,
    s: &AggregatedMap,
) -> f64 {
    let mut max_ms = 0.0f64;
    let mut max_l = 0.0f64;
    for i in 0..l.map.scores().len() {
        if m.covered[i] && s.covered[i] {
            max_ms = max_ms.max(m.map.scores()[i] + s.map.scores()[i]);
        }
        if l.covered[i] {
            max_l = max_l.max(l.map.scores()[i]);
        }
    }
    (s_zero + max_ms + max_l) / 3.0
}

/// Final per-sample denoising scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub s_image_final: f64,
    pub s_pc_final: f64,
    pub s_final: f64,
}

/// Outcome of the stage-II pass over one class's training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub samples: Vec<SampleScore>,
    /// The `⌈τ·M⌉` highest-scoring sample ids, in removal (score) order.
    pub removed_ids: Vec<String>,
    pub tau: f64,
    pub lambda_image: f64,
    pub lambda_point: f64,
}

impl DenoiseReport {
    /// Sample ids that survive the filter, in input order.
    pub fn kept_ids(&self) -> Vec<String> {
        self.samples
            .iter()
            .filter(|s| !self.removed_ids.contains(&s.sample_id))
            .map(|s| s.sample_id.clone())
            .collect()
    }
}

fn modality_score(
    s_zero: f64,
    windows: &crate::stage1::ModalityWindows,
    ref_windows: Vec<&crate::stage1::ModalityWindows>,
    weights: &PatchWeightSet,
    masks: &MaskSets,
) -> Result<f64> {
    let (h, w) = (masks.height, masks.width);
    let flatten = |pick: fn(&crate::stage1::ModalityWindows) -> &Vec<WindowFeature>| -> Vec<Vec<f64>> {
        ref_windows
            .iter()
            .flat_map(|r| pick(r).iter().map(|wf| wf.feature.clone()))
            .collect()
    };
    let l_refs: Vec<Vec<f64>> = ref_windows.iter().map(|r| r.l.clone()).collect();
    let l_query = vec![WindowFeature {
        center: masks.l.masks[0].center,
        feature: windows.l.clone(),
    }];
    let l_field = intra_modal_score(Scale::L, &l_query, &l_refs)?;
    let m_field = intra_modal_score(Scale::M, &windows.m, &flatten(|r| &r.m))?;
    let s_field = intra_modal_score(Scale::S, &windows.s, &flatten(|r| &r.s))?;

    let l_agg = aggregate_scores(&l_field, std::slice::from_ref(&weights.l), &masks.l, h, w)?;
    let m_agg = aggregate_scores(&m_field, &weights.m, &masks.m, h, w)?;
    let s_agg = aggregate_scores(&s_field, &weights.s, &masks.s, h, w)?;
    Ok(final_sample_score(s_zero, &l_agg, &m_agg, &s_agg))
}

/// Scores every training sample against the references and removes the
/// top `⌈τ·M⌉` by the weighted two-modality score.
///
/// `scores` are the stage-I zero-shot scores, aligned one-to-one with
/// `bundles`; they provide the `s_zero` terms. Ties in the removal ranking
/// break by sample id so the filter is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn denoise(
    bundles: &[FeatureBundle],
    refs: &ReferenceSet,
    scores: &[SuspectScore],
    masks: &MaskSets,
    theta: usize,
    encoder: &EncoderConfig,
    lambda_image: f64,
    lambda_point: f64,
    tau: f64,
) -> Result<DenoiseReport> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!(
            "removal fraction tau must be in [0, 1), got {tau}"
        )));
    }
    if bundles.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if scores.len() != bundles.len() {
        return Err(Error::DimMismatch {
            expected: bundles.len(),
            got: scores.len(),
        });
    }
    for (b, s) in bundles.iter().zip(scores) {
        if b.sample_id != s.sample_id {
            return Err(Error::InvalidConfig(format!(
                "bundle/score misalignment: {} vs {}",
                b.sample_id, s.sample_id
            )));
        }
    }
    if refs.refs.is_empty() {
        return Err(Error::InsufficientData("reference set is empty".into()));
    }

    let weights = patch_weights(&refs.mean_suspect_map, masks)?;
    let samples: Vec<SampleScore> = bundles
        .par_iter()
        .zip(scores.par_iter())
        .map(|(bundle, score)| {
            let image = image_windows(&bundle.rgb, masks)?;
            let point_token = bundle.pc.class_token().ok_or_else(|| {
                Error::InsufficientData(format!(
                    "{}: missing point class token",
                    bundle.sample_id
                ))
            })?;
            let point = point_windows(point_token, &bundle.cloud, masks, theta, encoder)?;
            let s_image_final = modality_score(
                score.s_image,
                &image,
                refs.refs.iter().map(|r| &r.image).collect(),
                &weights,
                masks,
            )?;
            let s_pc_final = modality_score(
                score.s_pc,
                &point,
                refs.refs.iter().map(|r| &r.point).collect(),
                &weights,
                masks,
            )?;
            Ok(SampleScore {
                sample_id: bundle.sample_id.clone(),
                s_image_final,
                s_pc_final,
                s_final: lambda_image * s_image_final + lambda_point * s_pc_final,
            })
        })
        .collect::<Result<_>>()?;

    let remove_count = (tau * bundles.len() as f64).ceil() as usize;
    if remove_count >= bundles.len() {
        return Err(Error::InsufficientData(format!(
            "tau {tau} would remove all {} samples",
            bundles.len()
        )));
    }
    let mut ranked: Vec<usize> = (0..samples.len()).collect();
    ranked.sort_by(|&a, &b| {
        samples[b]
            .s_final
            .partial_cmp(&samples[a].s_final)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| samples[a].sample_id.cmp(&samples[b].sample_id))
    });
    let removed_ids: Vec<String> = ranked
        .iter()
        .take(remove_count)
        .map(|&i| samples[i].sample_id.clone())
        .collect();

    Ok(DenoiseReport {
        samples,
        removed_ids,
        tau,
        lambda_image,
        lambda_point,
    })
}
