//! Stage I: intra-modal reference selection and suspected-anomaly maps.
//!
//! Every training sample gets a zero-shot suspected score per modality by
//! comparing its class token against the class's normal/anomalous
//! prototypes; the samples with the lowest combined score become the
//! intra-modal references. For each reference, a suspected anomaly map is
//! computed by zero-shot scoring multi-scale windows of its image features
//! and harmonically aggregating the window scores per pixel. Those maps
//! drive the attention weighting of the stage-II denoiser.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::FeatureBundle;
use crate::encoders::{encode_point_patch, EncoderConfig, TextPrototypes};
use crate::error::{Error, Result};
use crate::patching::{segment_cloud_ampcfe, segment_image, MaskSets, ScaleMaskSet};
use crate::tensor::{cosine_sim, AnomalyMap, FeatureGrid, OrganizedPointCloud};

/// Default number of intra-modal reference samples.
pub const DEFAULT_REFERENCE_COUNT: usize = 4;

/// Floor applied to window scores inside the harmonic mean.
pub const HARMONIC_EPSILON: f64 = 1e-6;

/// Per-sample zero-shot suspected scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspectScore {
    pub sample_id: String,
    pub s_image: f64,
    pub s_pc: f64,
    pub s_ref: f64,
}

impl SuspectScore {
    /// Builds a score record; `s_ref` is always the sum of the parts.
    pub fn new(sample_id: String, s_image: f64, s_pc: f64) -> Self {
        SuspectScore {
            sample_id,
            s_image,
            s_pc,
            s_ref: s_image + s_pc,
        }
    }
}

/// Zero-shot suspected-anomaly score of a class token against the
/// normal/anomalous prototype pair.
///
/// Cosines are shifted to [0, 1] before the ratio so a negative similarity
/// cannot flip the sign; the result is `c_ano / (c_ano + c_nor)`, or 0.5
/// when both shifted cosines vanish.
pub fn zero_shot_score(token: &[f64], protos: &TextPrototypes) -> Result<f64> {
    // Clamp guards against |cosine| exceeding 1 by rounding error, which
    // would push the shifted similarity fractionally negative.
    let c_ano = (cosine_sim(token, &protos.anomalous)?.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let c_nor = (cosine_sim(token, &protos.normal)?.clamp(-1.0, 1.0) + 1.0) / 2.0;
    if c_ano + c_nor < 1e-9 {
        return Ok(0.5);
    }
    Ok(c_ano / (c_ano + c_nor))
}

/// Scores every bundle against the per-modality prototypes, in input order.
pub fn score_samples(
    bundles: &[FeatureBundle],
    image_protos: &TextPrototypes,
    point_protos: &TextPrototypes,
) -> Result<Vec<SuspectScore>> {
    bundles
        .par_iter()
        .map(|bundle| {
            let image_token = bundle.rgb.class_token().ok_or_else(|| {
                Error::InsufficientData(format!("{}: missing image class token", bundle.sample_id))
            })?;
            let point_token = bundle.pc.class_token().ok_or_else(|| {
                Error::InsufficientData(format!("{}: missing point class token", bundle.sample_id))
            })?;
            Ok(SuspectScore::new(
                bundle.sample_id.clone(),
                zero_shot_score(image_token, image_protos)?,
                zero_shot_score(point_token, point_protos)?,
            ))
        })
        .collect()
}

/// One window's representative feature at a sliding scale.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFeature {
    pub center: (usize, usize),
    pub feature: Vec<f64>,
}

/// Whole-sample (`l`) plus sliding-scale window features of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityWindows {
    pub l: Vec<f64>,
    pub m: Vec<WindowFeature>,
    pub s: Vec<WindowFeature>,
}

/// Image-modality window features: the class token at `l` and the mean of
/// valid cell features per window at `m`/`s` (empty windows are skipped).
pub fn image_windows(grid: &FeatureGrid, masks: &MaskSets) -> Result<ModalityWindows> {
    let seg = segment_image(grid, masks)?;
    let mean_windows = |windows: &[crate::patching::ImageWindow]| -> Vec<WindowFeature> {
        windows
            .iter()
            .filter(|w| !w.features.is_empty())
            .map(|w| {
                let dim = w.features[0].len();
                let mut mean = vec![0.0; dim];
                for f in &w.features {
                    for d in 0..dim {
                        mean[d] += f[d];
                    }
                }
                for x in mean.iter_mut() {
                    *x /= w.features.len() as f64;
                }
                WindowFeature {
                    center: w.center,
                    feature: mean,
                }
            })
            .collect()
    };
    Ok(ModalityWindows {
        l: seg.class_token,
        m: mean_windows(&seg.m),
        s: mean_windows(&seg.s),
    })
}

/// Point-modality window features: the stored whole-cloud descriptor at
/// `l` and encoded point patches at `m`/`s`; windows with at most `theta`
/// valid points are dropped by the segmentation.
pub fn point_windows(
    class_token: &[f64],
    cloud: &OrganizedPointCloud,
    masks: &MaskSets,
    theta: usize,
    encoder: &EncoderConfig,
) -> Result<ModalityWindows> {
    if class_token.is_empty() {
        return Err(Error::InsufficientData(
            "point class token is missing".into(),
        ));
    }
    let patches = segment_cloud_ampcfe(cloud, masks, theta)?;
    let encode_all = |patches: &[crate::patching::PointPatch]| -> Result<Vec<WindowFeature>> {
        patches
            .iter()
            .map(|p| {
                Ok(WindowFeature {
                    center: p.anchor,
                    feature: encode_point_patch(&p.points, encoder)?,
                })
            })
            .collect()
    };
    Ok(ModalityWindows {
        l: class_token.to_vec(),
        m: encode_all(&patches.m)?,
        s: encode_all(&patches.s)?,
    })
}

/// Per-pixel harmonic aggregation of window scores at one scale: each
/// covered pixel gets `|covering| / Σ 1/max(s_w, ε)` over the windows that
/// cover it; uncovered pixels yield `None`.
pub(crate) fn harmonic_scale(
    scores: &[((usize, usize), f64)],
    set: &ScaleMaskSet,
    h: usize,
    w: usize,
) -> Vec<Option<f64>> {
    let mut inv_sum = vec![0.0f64; h * w];
    let mut cover = vec![0usize; h * w];
    for (center, score) in scores {
        let mask = set
            .masks
            .iter()
            .find(|m| m.center == *center)
            .expect("window score refers to a mask of this scale");
        let inv = 1.0 / score.max(HARMONIC_EPSILON);
        for u in mask.rows.0..mask.rows.1 {
            for v in mask.cols.0..mask.cols.1 {
                inv_sum[u * w + v] += inv;
                cover[u * w + v] += 1;
            }
        }
    }
    (0..h * w)
        .map(|i| {
            if cover[i] == 0 {
                None
            } else {
                Some(cover[i] as f64 / inv_sum[i])
            }
        })
        .collect()
}

/// Suspected anomaly map of one sample from its image features: window
/// zero-shot scores harmonically aggregated per scale, then averaged
/// across the `m` and `s` scales. Pixels covered at neither scale get 0.
pub fn suspected_anomaly_map(
    bundle: &FeatureBundle,
    image_protos: &TextPrototypes,
    masks: &MaskSets,
) -> Result<AnomalyMap> {
    let windows = image_windows(&bundle.rgb, masks)?;
    let score_windows = |items: &[WindowFeature]| -> Result<Vec<((usize, usize), f64)>> {
        items
            .iter()
            .map(|wf| Ok((wf.center, zero_shot_score(&wf.feature, image_protos)?)))
            .collect()
    };
    let (h, w) = (masks.height, masks.width);
    let m_map = harmonic_scale(&score_windows(&windows.m)?, &masks.m, h, w);
    let s_map = harmonic_scale(&score_windows(&windows.s)?, &masks.s, h, w);
    let scores: Vec<f64> = (0..h * w)
        .map(|i| match (m_map[i], s_map[i]) {
            (Some(a), Some(b)) => (a + b) / 2.0,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => 0.0,
        })
        .collect();
    AnomalyMap::from_scores(h, w, scores)
}

/// Window features and suspect map of one selected reference.
#[derive(Debug, Clone)]
pub struct ReferenceFeatures {
    pub sample_id: String,
    pub image: ModalityWindows,
    pub point: ModalityWindows,
}

/// The stage-I output consumed by the denoiser: the N reference feature
/// records, their suspect maps, and the element-wise mean map used as the
/// stage-II attention weight.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub refs: Vec<ReferenceFeatures>,
    pub suspect_maps: Vec<AnomalyMap>,
    pub mean_suspect_map: AnomalyMap,
}

/// Selects the `n` samples with the smallest `s_ref` (ties broken by
/// sample id) and assembles their reference features and suspect maps.
///
/// `scores` must align one-to-one with `bundles` (as produced by
/// [`score_samples`]); selection is therefore independent of input order.
pub fn select_references(
    bundles: &[FeatureBundle],
    scores: &[SuspectScore],
    n: usize,
    image_protos: &TextPrototypes,
    masks: &MaskSets,
    theta: usize,
    encoder: &EncoderConfig,
) -> Result<ReferenceSet> {
    if bundles.is_empty() {
        return Err(Error::InsufficientData(
            "cannot select references from an empty training set".into(),
        ));
    }
    if scores.len() != bundles.len() {
        return Err(Error::DimMismatch {
            expected: bundles.len(),
            got: scores.len(),
        });
    }
    if n == 0 || n > bundles.len() {
        return Err(Error::InvalidConfig(format!(
            "reference count {} must be in 1..={}",
            n,
            bundles.len()
        )));
    }
    let mut order: Vec<usize> = (0..bundles.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .s_ref
            .partial_cmp(&scores[b].s_ref)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| scores[a].sample_id.cmp(&scores[b].sample_id))
    });

    let mut refs = Vec::with_capacity(n);
    let mut suspect_maps = Vec::with_capacity(n);
    for &idx in order.iter().take(n) {
        let bundle = &bundles[idx];
        let point_token = bundle.pc.class_token().ok_or_else(|| {
            Error::InsufficientData(format!("{}: missing point class token", bundle.sample_id))
        })?;
        refs.push(ReferenceFeatures {
            sample_id: bundle.sample_id.clone(),
            image: image_windows(&bundle.rgb, masks)?,
            point: point_windows(point_token, &bundle.cloud, masks, theta, encoder)?,
        });
        suspect_maps.push(suspected_anomaly_map(bundle, image_protos, masks)?);
    }

    let (h, w) = (masks.height, masks.width);
    let mut mean = vec![0.0f64; h * w];
    for map in &suspect_maps {
        for (i, x) in mean.iter_mut().enumerate() {
            *x += map.scores()[i];
        }
    }
    for x in mean.iter_mut() {
        *x /= suspect_maps.len() as f64;
    }
    let mean_suspect_map = AnomalyMap::from_scores(h, w, mean)?;

    Ok(ReferenceSet {
        refs,
        suspect_maps,
        mean_suspect_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::Label;
    use crate::encoders::EncoderKind;
    use crate::patching::build_masks;
    use crate::synth::{generate_synthetic_dataset, DefectModality, SynthSpec};

    fn protos(normal: Vec<f64>, anomalous: Vec<f64>) -> TextPrototypes {
        TextPrototypes {
            class_name: "t".into(),
            normal,
            anomalous,
        }
    }

    #[test]
    fn equidistant_token_scores_half() {
        let p = protos(vec![0.0, 1.0], vec![0.0, 1.0]);
        let s = zero_shot_score(&[1.0, 0.0], &p).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn anomalous_aligned_token_scores_two_thirds() {
        let p = protos(vec![0.0, 1.0], vec![1.0, 0.0]);
        let s = zero_shot_score(&[1.0, 0.0], &p).unwrap();
        // shifted cosines: c_ano = 1, c_nor = 0.5
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn normal_aligned_token_scores_one_third() {
        let p = protos(vec![1.0, 0.0], vec![0.0, 1.0]);
        let s = zero_shot_score(&[1.0, 0.0], &p).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn vanishing_shifted_cosines_fall_back_to_half() {
        let p = protos(vec![-1.0, 0.0], vec![-1.0, 0.0]);
        let s = zero_shot_score(&[1.0, 0.0], &p).unwrap();
        assert_eq!(s, 0.5);
    }

    #[test]
    fn zero_token_is_an_error() {
        let p = protos(vec![1.0, 0.0], vec![0.0, 1.0]);
        assert!(matches!(
            zero_shot_score(&[0.0, 0.0], &p),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn score_is_invariant_to_positive_token_rescaling() {
        let p = protos(vec![0.3, 0.9, 0.1], vec![-0.2, 0.4, 0.7]);
        let token = [0.5, -0.1, 0.8];
        let scaled: Vec<f64> = token.iter().map(|x| x * 37.5).collect();
        let a = zero_shot_score(&token, &p).unwrap();
        let b = zero_shot_score(&scaled, &p).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn suspect_score_sum_invariant_holds_by_construction() {
        let s = SuspectScore::new("x".into(), 0.4, 0.7);
        assert_eq!(s.s_ref, s.s_image + s.s_pc);
    }

    /// Bundle whose image/point class tokens are given; cell features are
    /// copies of the image token so window means equal the token.
    fn token_bundle(id: &str, image_token: Vec<f64>, point_token: Vec<f64>) -> FeatureBundle {
        let dim = image_token.len();
        let (h, w) = (4, 4);
        let mut rgb = FeatureGrid::zeros(h, w, dim);
        for u in 0..h {
            for v in 0..w {
                rgb.set_feature(u, v, &image_token).unwrap();
            }
        }
        rgb.set_class_token(image_token).unwrap();
        let mut pc = FeatureGrid::zeros(h, w, dim);
        pc.set_class_token(point_token).unwrap();
        let mut cloud = OrganizedPointCloud::zeros(h, w);
        for u in 0..h {
            for v in 0..w {
                cloud.set_position(u, v, [u as f64 * 0.1, v as f64 * 0.1, 0.05]);
            }
        }
        FeatureBundle::new(id.into(), Label::Normal, rgb, pc, cloud, None).unwrap()
    }

    fn unit_protos() -> (TextPrototypes, TextPrototypes) {
        (
            protos(vec![1.0, 0.0], vec![0.0, 1.0]),
            protos(vec![1.0, 0.0], vec![0.0, 1.0]),
        )
    }

    #[test]
    fn scoring_preserves_input_order_and_is_deterministic() {
        let bundles = vec![
            token_bundle("a", vec![1.0, 0.0], vec![0.0, 1.0]),
            token_bundle("b", vec![0.0, 1.0], vec![1.0, 0.0]),
        ];
        let (ip, pp) = unit_protos();
        let scores = score_samples(&bundles, &ip, &pp).unwrap();
        let again = score_samples(&bundles, &ip, &pp).unwrap();
        assert_eq!(scores, again);
        assert_eq!(scores[0].sample_id, "a");
        // a: image token normal-aligned (1/3), point token anomalous-aligned (2/3).
        assert!((scores[0].s_image - 1.0 / 3.0).abs() < 1e-12);
        assert!((scores[0].s_pc - 2.0 / 3.0).abs() < 1e-12);
        assert!((scores[0].s_ref - 1.0).abs() < 1e-12);
    }

    fn toy_encoder() -> EncoderConfig {
        EncoderConfig {
            dim: 4,
            seed: 3,
            kind: EncoderKind::Toy,
        }
    }

    #[test]
    fn lowest_score_sample_is_selected_first() {
        let bundles = vec![
            token_bundle("hot", vec![0.0, 1.0], vec![0.0, 1.0]),
            token_bundle("cool", vec![1.0, 0.0], vec![1.0, 0.0]),
            token_bundle("warm", vec![1.0, 1.0], vec![1.0, 1.0]),
        ];
        let (ip, pp) = unit_protos();
        let scores = score_samples(&bundles, &ip, &pp).unwrap();
        let masks = build_masks(4, 4, 3, 2, 1).unwrap();
        let refs =
            select_references(&bundles, &scores, 1, &ip, &masks, 2, &toy_encoder()).unwrap();
        assert_eq!(refs.refs[0].sample_id, "cool");
        assert_eq!(refs.suspect_maps.len(), 1);
    }

    #[test]
    fn selecting_all_samples_keeps_everyone() {
        let bundles = vec![
            token_bundle("a", vec![1.0, 0.2], vec![1.0, 0.0]),
            token_bundle("b", vec![1.0, 0.4], vec![1.0, 0.0]),
        ];
        let (ip, pp) = unit_protos();
        let scores = score_samples(&bundles, &ip, &pp).unwrap();
        let masks = build_masks(4, 4, 3, 2, 1).unwrap();
        let refs =
            select_references(&bundles, &scores, 2, &ip, &masks, 2, &toy_encoder()).unwrap();
        assert_eq!(refs.refs.len(), 2);
    }

    #[test]
    fn ties_break_by_sample_id() {
        let token = vec![0.7, 0.7];
        let bundles = vec![
            token_bundle("zeta", token.clone(), token.clone()),
            token_bundle("alpha", token.clone(), token.clone()),
        ];
        let (ip, pp) = unit_protos();
        let scores = score_samples(&bundles, &ip, &pp).unwrap();
        let masks = build_masks(4, 4, 3, 2, 1).unwrap();
        let refs =
            select_references(&bundles, &scores, 1, &ip, &masks, 2, &toy_encoder()).unwrap();
        assert_eq!(refs.refs[0].sample_id, "alpha");
    }

    #[test]
    fn selection_is_permutation_invariant() {
        let bundles = vec![
            token_bundle("a", vec![1.0, 0.1], vec![1.0, 0.3]),
            token_bundle("b", vec![1.0, 0.6], vec![0.5, 0.5]),
            token_bundle("c", vec![1.0, 0.0], vec![1.0, 0.1]),
        ];
        let (ip, pp) = unit_protos();
        let masks = build_masks(4, 4, 3, 2, 1).unwrap();
        let enc = toy_encoder();
        let scores = score_samples(&bundles, &ip, &pp).unwrap();
        let picked = select_references(&bundles, &scores, 2, &ip, &masks, 2, &enc).unwrap();

        let reversed: Vec<FeatureBundle> = bundles.iter().rev().cloned().collect();
        let scores_rev = score_samples(&reversed, &ip, &pp).unwrap();
        let picked_rev =
            select_references(&reversed, &scores_rev, 2, &ip, &masks, 2, &enc).unwrap();
        let ids: Vec<_> = picked.refs.iter().map(|r| r.sample_id.clone()).collect();
        let ids_rev: Vec<_> = picked_rev.refs.iter().map(|r| r.sample_id.clone()).collect();
        assert_eq!(ids, ids_rev);
    }

    #[test]
    fn degenerate_selection_configs_error() {
        let bundles = vec![token_bundle("a", vec![1.0, 0.0], vec![1.0, 0.0])];
        let (ip, pp) = unit_protos();
        let scores = score_samples(&bundles, &ip, &pp).unwrap();
        let masks = build_masks(4, 4, 3, 2, 1).unwrap();
        let enc = toy_encoder();
        assert!(select_references(&[], &[], 1, &ip, &masks, 2, &enc).is_err());
        assert!(select_references(&bundles, &scores, 0, &ip, &masks, 2, &enc).is_err());
        assert!(select_references(&bundles, &scores, 2, &ip, &masks, 2, &enc).is_err());
    }

    #[test]
    fn harmonic_of_equal_scores_is_that_score() {
        let masks = build_masks(4, 4, 3, 2, 2).unwrap();
        let scores: Vec<((usize, usize), f64)> =
            masks.s.masks.iter().map(|m| (m.center, 0.37)).collect();
        let out = harmonic_scale(&scores, &masks.s, 4, 4);
        for value in out {
            assert!((value.unwrap() - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn harmonic_then_scale_mean_matches_hand_value() {
        // A pixel covered by window scores {0.2, 1.0} at one scale and
        // {0.5} at the other: harmonic 2/(1/0.2 + 1) = 1/3, then the
        // cross-scale mean gives (1/3 + 1/2)/2 = 5/12.
        let masks = build_masks(4, 4, 3, 2, 1).unwrap();
        let m_scores = vec![((1usize, 1usize), 0.2), ((2usize, 2usize), 1.0)];
        let s_scores = vec![((1usize, 1usize), 0.5)];
        let m_map = harmonic_scale(&m_scores, &masks.m, 4, 4);
        let s_map = harmonic_scale(&s_scores, &masks.s, 4, 4);
        // Pixel (1,2) lies in both m-windows and the (1,1) s-window.
        let i = 4 + 2;
        let m = m_map[i].unwrap();
        let s = s_map[i].unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-12);
        assert!((s - 0.5).abs() < 1e-12);
        assert!(((m + s) / 2.0 - 5.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn zero_scores_hit_the_epsilon_floor_without_panicking() {
        let masks = build_masks(4, 4, 3, 2, 2).unwrap();
        let scores: Vec<((usize, usize), f64)> =
            masks.s.masks.iter().map(|m| (m.center, 0.0)).collect();
        let out = harmonic_scale(&scores, &masks.s, 4, 4);
        for value in out {
            let v = value.unwrap();
            assert!(v > 0.0 && v <= HARMONIC_EPSILON + 1e-18);
        }
    }

    #[test]
    fn uncovered_pixels_are_none() {
        let masks = build_masks(4, 4, 3, 2, 2).unwrap();
        let scores = vec![((0usize, 0usize), 0.4)];
        let out = harmonic_scale(&scores, &masks.s, 4, 4);
        assert!(out[0].is_some());
        assert!(out[15].is_none());
    }

    #[test]
    fn uniform_feature_grid_yields_a_constant_suspect_map() {
        let bundle = token_bundle("u", vec![0.8, 0.6], vec![1.0, 0.0]);
        let (ip, _) = unit_protos();
        let expected = zero_shot_score(&[0.8, 0.6], &ip).unwrap();
        let masks = build_masks(4, 4, 3, 2, 1).unwrap();
        let map = suspected_anomaly_map(&bundle, &ip, &masks).unwrap();
        for &v in map.scores() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn defect_cells_outscore_clean_object_cells_in_the_suspect_map() {
        let mut spec = SynthSpec::desk(1, EncoderConfig {
            dim: 8,
            seed: 5,
            kind: EncoderKind::Toy,
        });
        spec.train_per_class = 3;
        spec.test_per_class = 4;
        spec.raster = 24;
        spec.grid = 6;
        spec.ransac_iterations = 120;
        spec.modality = DefectModality::RgbOnly;
        let dir = tempfile::tempdir().unwrap();
        let classes = generate_synthetic_dataset(&spec, 41, dir.path()).unwrap();
        let class = &classes[0];
        let ip = TextPrototypes::from_vector_set(
            &crate::bundle::VectorSet::read(&class.image_protos).unwrap(),
        )
        .unwrap();
        let masks = build_masks(6, 6, 3, 2, 1).unwrap();

        // Pool scores over every anomalous test sample: cells under the
        // ground-truth defect mask should average higher than the rest of
        // the object (background stays at the constant 0 fill).
        let mut defect = (0.0, 0usize);
        let mut object = (0.0, 0usize);
        for path in class.test.resolve(&class.class_dir) {
            let bundle = crate::bundle::read_bundle(&path).unwrap();
            let Some(mask) = bundle.gt_mask.clone() else {
                continue;
            };
            let map = suspected_anomaly_map(&bundle, &ip, &masks).unwrap();
            for (i, &v) in map.scores().iter().enumerate() {
                if v <= 0.0 {
                    continue;
                }
                if mask[i] {
                    defect.0 += v;
                    defect.1 += 1;
                } else {
                    object.0 += v;
                    object.1 += 1;
                }
            }
        }
        assert!(defect.1 > 0 && object.1 > 0);
        let defect_mean = defect.0 / defect.1 as f64;
        let object_mean = object.0 / object.1 as f64;
        assert!(
            defect_mean > object_mean,
            "defect cells {defect_mean} vs clean object cells {object_mean}"
        );
    }
}
