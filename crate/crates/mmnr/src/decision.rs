//! Final scoring against the memory banks.
//!
//! Inference compares a sample's per-cell features — image, point, and fused
//! — against their three memory banks.  Two primitives summarize the
//! comparison:
//!
//! * [`phi`]: a sample-level scalar.  Find the cell whose nearest bank entry
//!   is farthest away, and scale that distance by the matched entry's η
//!   weight.  Binding the weight to the *bank entry* (rather than the query,
//!   which has no training-time η) inflates small distances to
//!   low-confidence entries, so residual noise in the bank cannot mask a
//!   real defect.
//! * [`psi`]: a per-cell map of plain nearest-entry distances, no
//!   re-weighting.
//!
//! A tiny linear one-class SVM ([`Ocsvm`]) then mixes the three per-bank
//! scores into one number; one SVM is trained on sample-level φ triples, a
//! second on cell-level ψ triples.  [`decide`] wires it all together and
//! optionally smooths the pixel map with a 3×3 mean filter.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::coreset::MemoryBank;
use crate::encoders::role_seed;
use crate::error::{Error, Result};
use crate::fusion::FusionHead;
use crate::tensor::{AnomalyMap, FeatureGrid, ScoreGrid};

/// Margin fraction ν of the one-class SVM objective.
pub const DEFAULT_NU: f64 = 0.5;

/// Learning rate for SVM subgradient steps.
pub const DEFAULT_OCSVM_LR: f64 = 1e-4;

/// Subgradient steps per SVM.
pub const DEFAULT_OCSVM_STEPS: usize = 1000;

/// Inputs whose every component sits within this distance of the mean are
/// treated as degenerate (no usable spread) and trained by fallback instead.
const DEGENERATE_SPREAD: f64 = 1e-6;

// ---------------------------------------------------------------------------
// phi / psi
// ---------------------------------------------------------------------------

/// Sample-level bank score: the worst cell's nearest-entry distance, scaled
/// by the η weight of the entry it matched.
///
/// The argmax over cells breaks ties toward the earlier feature, so the
/// result does not depend on thread scheduling.
pub fn phi(bank: &MemoryBank, features: &[Vec<f64>]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::InsufficientData(
            "phi needs at least one patch feature".into(),
        ));
    }
    let hits: Vec<(usize, f64)> = features
        .par_iter()
        .map(|f| bank.nearest(f))
        .collect::<Result<_>>()?;
    let mut best = &hits[0];
    for h in &hits[1..] {
        if h.1 > best.1 {
            best = h;
        }
    }
    Ok(bank.weight(best.0) * best.1)
}

/// Per-cell nearest-entry distances over a feature grid; invalid cells score
/// zero.
pub fn psi(bank: &MemoryBank, grid: &FeatureGrid) -> Result<AnomalyMap> {
    let cells: Vec<(usize, usize, &[f64])> = grid.iter_valid().collect();
    if cells.is_empty() {
        return Err(Error::InsufficientData(
            "psi needs at least one valid cell".into(),
        ));
    }
    let dists: Vec<f64> = cells
        .par_iter()
        .map(|(_, _, f)| bank.nearest(f).map(|(_, d)| d))
        .collect::<Result<_>>()?;
    let mut map = AnomalyMap::zeros(grid.height(), grid.width());
    for ((u, v, _), d) in cells.iter().zip(dists) {
        map.set(*u, *v, d);
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// linear one-class SVM
// ---------------------------------------------------------------------------

/// Linear one-class SVM over the three per-bank scores.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Ocsvm {
    /// One weight per bank score.
    pub w: [f64; 3],
    /// Decision offset.
    pub rho: f64,
    /// Margin fraction the model was trained with.
    pub nu: f64,
    /// Degenerate training input forced the equal-weight fallback.
    pub fallback: bool,
}

impl Ocsvm {
    /// Raw decision value `w . x - rho`; larger means more anomalous.
    pub fn score(&self, x: &[f64; 3]) -> f64 {
        self.w[0] * x[0] + self.w[1] * x[1] + self.w[2] * x[2] - self.rho
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "nu must lie in (0, 1], got {nu}"
        )));
    }
    Ok(())
}

/// Full-batch one-class SVM objective
/// `0.5 ||w||^2 + (1 / (nu n)) sum_i max(0, rho - w . x_i) - rho`.
pub fn ocsvm_objective(w: &[f64; 3], rho: f64, nu: f64, xs: &[[f64; 3]]) -> Result<f64> {
    check_nu(nu)?;
    if xs.is_empty() {
        return Err(Error::InsufficientData("objective over zero samples".into()));
    }
    let hinge: f64 = xs
        .iter()
        .map(|x| (rho - (w[0] * x[0] + w[1] * x[1] + w[2] * x[2])).max(0.0))
        .sum();
    Ok(0.5 * (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]) + hinge / (nu * xs.len() as f64) - rho)
}

/// Full-batch subgradient of [`ocsvm_objective`] with respect to `(w, rho)`.
///
/// At hinge kinks (`rho == w . x_i` exactly) the inactive branch is chosen;
/// everywhere else this is the plain gradient, directly checkable against
/// central finite differences.
pub fn ocsvm_gradient(
    w: &[f64; 3],
    rho: f64,
    nu: f64,
    xs: &[[f64; 3]],
) -> Result<([f64; 3], f64)> {
    check_nu(nu)?;
    if xs.is_empty() {
        return Err(Error::InsufficientData("gradient over zero samples".into()));
    }
    let scale = 1.0 / (nu * xs.len() as f64);
    let mut gw = *w;
    let mut grho = -1.0;
    for x in xs {
        let margin = rho - (w[0] * x[0] + w[1] * x[1] + w[2] * x[2]);
        if margin > 0.0 {
            for d in 0..3 {
                gw[d] -= scale * x[d];
            }
            grho += scale;
        }
    }
    Ok((gw, grho))
}

/// Trains a linear one-class SVM by seeded stochastic subgradient descent.
///
/// Starts from the equal-weight direction `w = (1,1,1)/sqrt(3)`, `rho = 0`,
/// and walks one per-sample subgradient step at a fixed learning rate,
/// reshuffling the visit order every epoch with a stream derived from
/// `seed`.  Inputs with no usable spread (every triple within
/// `1e-6` of the mean) skip training entirely and fall back to the
/// equal-weight boundary through the mean, with the result flagged.
pub fn train_ocsvm(
    xs: &[[f64; 3]],
    nu: f64,
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<Ocsvm> {
    check_nu(nu)?;
    if xs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "ocsvm training needs at least 2 score triples, got {}",
            xs.len()
        )));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    for x in xs {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite training score triple".into()));
        }
    }

    let n = xs.len() as f64;
    let mean = [
        xs.iter().map(|x| x[0]).sum::<f64>() / n,
        xs.iter().map(|x| x[1]).sum::<f64>() / n,
        xs.iter().map(|x| x[2]).sum::<f64>() / n,
    ];
    let equal = 1.0 / 3.0f64.sqrt();
    let spread = xs
        .iter()
        .map(|x| {
            (0..3)
                .map(|d| (x[d] - mean[d]).abs())
                .fold(0.0f64, f64::max)
        })
        .fold(0.0f64, f64::max);
    if spread <= DEGENERATE_SPREAD {
        return Ok(Ocsvm {
            w: [equal; 3],
            rho: equal * (mean[0] + mean[1] + mean[2]),
            nu,
            fallback: true,
        });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(role_seed(seed, "ocsvm-train"));
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut w = [equal; 3];
    let mut rho = 0.0f64;
    let inv_nu = 1.0 / nu;
    for step in 0..steps {
        if step % xs.len() == 0 {
            order.shuffle(&mut rng);
        }
        let x = &xs[order[step % xs.len()]];
        let margin = rho - (w[0] * x[0] + w[1] * x[1] + w[2] * x[2]);
        let active = margin > 0.0;
        for d in 0..3 {
            let g = w[d] + if active { -inv_nu * x[d] } else { 0.0 };
            w[d] -= lr * g;
        }
        rho -= lr * (if active { inv_nu } else { 0.0 } - 1.0);
        if !rho.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "ocsvm parameters became non-finite at step {step}"
            )));
        }
    }
    Ok(Ocsvm {
        w,
        rho,
        nu,
        fallback: false,
    })
}

// ---------------------------------------------------------------------------
// decision
// ---------------------------------------------------------------------------

/// The three memory banks inference scores against.
#[derive(Debug, Clone)]
pub struct BankSet {
    pub image: MemoryBank,
    pub point: MemoryBank,
    pub fusion: MemoryBank,
}

/// Final outputs for one sample.
#[derive(Debug, Clone)]
pub struct DecisionOutput {
    /// Sample-level anomaly score (raw SVM decision value).
    pub s_image: f64,
    /// Per-cell anomaly scores; cells without features in both modalities
    /// carry the SVM's zero-input response.
    pub s_pixel: ScoreGrid,
}

/// Raw per-bank scores for one sample, before any SVM mixing.
///
/// This is the training-time view of a sample: the SVMs are fit on these
/// triples, and [`decide`] applies the fitted SVMs to the same quantities.
#[derive(Debug, Clone)]
pub struct SampleTriples {
    /// Sample-level φ per bank: `[image, point, fused]`.
    pub phis: [f64; 3],
    /// Per-cell ψ distances `(row, col, [image, point, fused])` for every
    /// cell valid in both modalities.
    pub cell_psis: Vec<(usize, usize, [f64; 3])>,
    /// Grid height the cells index into.
    pub height: usize,
    /// Grid width the cells index into.
    pub width: usize,
}

/// Computes the per-bank φ and ψ scores for one sample.
///
/// Cells valid in *both* modality grids form the patch set; each contributes
/// an image, point, and fused feature (the latter through the trained head)
/// scored against its bank.  φ is the weight-scaled distance of the worst
/// cell per bank, with distance ties broken toward the earlier cell; ψ is
/// the plain nearest-entry distance per cell.
pub fn bank_triples(
    rgb: &FeatureGrid,
    pc: &FeatureGrid,
    banks: &BankSet,
    head: &FusionHead,
) -> Result<SampleTriples> {
    if rgb.height() != pc.height() || rgb.width() != pc.width() {
        return Err(Error::ShapeMismatch {
            expected_h: rgb.height(),
            expected_w: rgb.width(),
            got_h: pc.height(),
            got_w: pc.width(),
        });
    }
    if rgb.dim() != banks.image.dim() || rgb.dim() != head.rgb_dim() {
        return Err(Error::DimMismatch {
            expected: banks.image.dim(),
            got: rgb.dim(),
        });
    }
    if pc.dim() != banks.point.dim() || pc.dim() != head.pc_dim() {
        return Err(Error::DimMismatch {
            expected: banks.point.dim(),
            got: pc.dim(),
        });
    }
    if head.fused_dim() != banks.fusion.dim() {
        return Err(Error::DimMismatch {
            expected: banks.fusion.dim(),
            got: head.fused_dim(),
        });
    }

    let mut cells = Vec::new();
    for u in 0..rgb.height() {
        for v in 0..rgb.width() {
            if rgb.is_valid(u, v) && pc.is_valid(u, v) {
                cells.push((u, v));
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::InsufficientData(
            "no cell carries features in both modalities".into(),
        ));
    }

    struct CellScores {
        u: usize,
        v: usize,
        d_image: f64,
        d_point: f64,
        d_fused: f64,
        hit_image: usize,
        hit_point: usize,
        hit_fused: usize,
    }
    let scored: Vec<CellScores> = cells
        .par_iter()
        .map(|(u, v)| -> Result<CellScores> {
            let f_rgb = rgb.feature(*u, *v);
            let f_pc = pc.feature(*u, *v);
            let fused = head.forward(f_rgb, f_pc)?.fused;
            let (hit_image, d_image) = banks.image.nearest(f_rgb)?;
            let (hit_point, d_point) = banks.point.nearest(f_pc)?;
            let (hit_fused, d_fused) = banks.fusion.nearest(&fused)?;
            Ok(CellScores {
                u: *u,
                v: *v,
                d_image,
                d_point,
                d_fused,
                hit_image,
                hit_point,
                hit_fused,
            })
        })
        .collect::<Result<_>>()?;

    let pick = |dist: fn(&CellScores) -> f64| -> &CellScores {
        let mut best = &scored[0];
        for c in &scored[1..] {
            if dist(c) > dist(best) {
                best = c;
            }
        }
        best
    };
    let worst_image = pick(|c| c.d_image);
    let worst_point = pick(|c| c.d_point);
    let worst_fused = pick(|c| c.d_fused);
    let phis = [
        banks.image.weight(worst_image.hit_image) * worst_image.d_image,
        banks.point.weight(worst_point.hit_point) * worst_point.d_point,
        banks.fusion.weight(worst_fused.hit_fused) * worst_fused.d_fused,
    ];
    let cell_psis = scored
        .iter()
        .map(|c| (c.u, c.v, [c.d_image, c.d_point, c.d_fused]))
        .collect();
    Ok(SampleTriples {
        phis,
        cell_psis,
        height: rgb.height(),
        width: rgb.width(),
    })
}

/// 3×3 mean filter; border cells average over their in-bounds neighbors.
pub fn smooth_mean3(grid: &ScoreGrid) -> ScoreGrid {
    let (h, w) = (grid.height(), grid.width());
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let mut sum = 0.0;
            let mut count = 0u32;
            for du in -1i64..=1 {
                for dv in -1i64..=1 {
                    let (nu, nv) = (u as i64 + du, v as i64 + dv);
                    if nu >= 0 && nu < h as i64 && nv >= 0 && nv < w as i64 {
                        sum += grid.get(nu as usize, nv as usize);
                        count += 1;
                    }
                }
            }
            out.push(sum / count as f64);
        }
    }
    ScoreGrid::from_scores(h, w, out).expect("smoothed scores stay finite")
}

/// Scores one sample against the banks.
///
/// Cells valid in *both* modality grids form the patch set; each contributes
/// an image, point, and fused feature (the latter through the trained head).
/// `image_svm` mixes the three sample-level φ scores into `s_image`;
/// `pixel_svm` mixes the per-cell ψ distances into `s_pixel`, optionally
/// smoothed with a 3×3 mean.  Pure function of its inputs: repeated calls
/// return identical results.
pub fn decide(
    rgb: &FeatureGrid,
    pc: &FeatureGrid,
    banks: &BankSet,
    head: &FusionHead,
    image_svm: &Ocsvm,
    pixel_svm: &Ocsvm,
    smooth_pixels: bool,
) -> Result<DecisionOutput> {
    let triples = bank_triples(rgb, pc, banks, head)?;
    let s_image = image_svm.score(&triples.phis);

    // Pixel level: the SVM's zero-input response fills cells without
    // two-modality coverage.
    let background = pixel_svm.score(&[0.0, 0.0, 0.0]);
    let mut pixel = vec![background; triples.height * triples.width];
    for (u, v, psis) in &triples.cell_psis {
        pixel[u * triples.width + v] = pixel_svm.score(psis);
    }
    let mut s_pixel = ScoreGrid::from_scores(triples.height, triples.width, pixel)?;
    if smooth_pixels {
        s_pixel = smooth_mean3(&s_pixel);
    }
    Ok(DecisionOutput { s_image, s_pixel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coreset::MemoryBank;
    use rand::Rng;

    fn unit_bank(entries: Vec<Vec<f64>>) -> MemoryBank {
        let weights = vec![1.0; entries.len()];
        MemoryBank::from_parts(entries, weights).unwrap()
    }

    // --- phi ---------------------------------------------------------------

    #[test]
    fn phi_of_a_bank_member_is_zero() {
        let bank = unit_bank(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let score = phi(&bank, &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn phi_scales_distance_by_the_matched_entry_weight() {
        let bank =
            MemoryBank::from_parts(vec![vec![0.0, 0.0], vec![10.0, 0.0]], vec![2.5, 1.0]).unwrap();
        // Query at distance 3 from the first entry (weight 2.5).
        let score = phi(&bank, &[vec![3.0, 0.0]]).unwrap();
        assert!((score - 7.5).abs() < 1e-12);
    }

    #[test]
    fn phi_takes_the_worst_cell() {
        let bank = unit_bank(vec![vec![0.0]]);
        let feats = vec![vec![0.1], vec![0.5], vec![0.2]];
        let score = phi(&bank, &feats).unwrap();
        assert!((score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn phi_is_permutation_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let bank = unit_bank(
            (0..6)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        );
        let mut feats: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let a = phi(&bank, &feats).unwrap();
        feats.reverse();
        assert_eq!(phi(&bank, &feats).unwrap(), a);
        assert!(phi(&bank, &[]).is_err());
    }

    // --- psi ---------------------------------------------------------------

    #[test]
    fn psi_is_zero_when_every_cell_is_banked() {
        let mut grid = FeatureGrid::zeros(2, 2, 2);
        let mut entries = Vec::new();
        for u in 0..2 {
            for v in 0..2 {
                let f = vec![u as f64, v as f64];
                grid.set_feature(u, v, &f).unwrap();
                entries.push(f);
            }
        }
        let bank = unit_bank(entries);
        let map = psi(&bank, &grid).unwrap();
        assert!(map.scores().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn psi_localizes_a_single_perturbed_cell() {
        let mut grid = FeatureGrid::zeros(2, 3, 1);
        let mut entries = Vec::new();
        for u in 0..2 {
            for v in 0..3 {
                let f = vec![(u * 3 + v) as f64];
                grid.set_feature(u, v, &f).unwrap();
                entries.push(f);
            }
        }
        let bank = unit_bank(entries);
        grid.set_feature(1, 1, &[4.4]).unwrap();
        let map = psi(&bank, &grid).unwrap();
        for u in 0..2 {
            for v in 0..3 {
                if (u, v) == (1, 1) {
                    assert!((map.get(u, v) - 0.4).abs() < 1e-12);
                } else {
                    assert_eq!(map.get(u, v), 0.0);
                }
            }
        }
    }

    #[test]
    fn psi_matches_a_nested_loop_oracle_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut grid = FeatureGrid::zeros(4, 5, 3);
        for u in 0..4 {
            for v in 0..5 {
                if (u + v) % 7 == 3 {
                    continue; // leave a few cells invalid
                }
                let f: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                grid.set_feature(u, v, &f).unwrap();
            }
        }
        let entries: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let bank = unit_bank(entries.clone());
        let map = psi(&bank, &grid).unwrap();
        for u in 0..4 {
            for v in 0..5 {
                if !grid.is_valid(u, v) {
                    assert_eq!(map.get(u, v), 0.0);
                    continue;
                }
                let f = grid.feature(u, v);
                let mut best = f64::INFINITY;
                for e in &entries {
                    let d: f64 = f
                        .iter()
                        .zip(e)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    best = best.min(d);
                }
                assert_eq!(map.get(u, v), best, "cell ({u}, {v})");
            }
        }
    }

    // --- ocsvm -------------------------------------------------------------

    #[test]
    fn objective_gradient_matches_finite_differences_off_the_kinks() {
        let xs = [
            [0.2, 0.3, 0.5],
            [1.0, 0.8, 0.6],
            [0.1, 0.1, 0.1],
            [0.5, 0.5, 0.4],
        ];
        let w = [0.3f64, -0.2, 0.7];
        let rho = 0.25f64;
        let nu = 0.5;
        for x in &xs {
            let margin: f64 = rho - (w[0] * x[0] + w[1] * x[1] + w[2] * x[2]);
            assert!(margin.abs() > 1e-3, "fixture sits on a hinge kink");
        }
        let (gw, grho) = ocsvm_gradient(&w, rho, nu, &xs).unwrap();
        let eps = 1e-6;
        for d in 0..3 {
            let mut wp = w;
            wp[d] += eps;
            let mut wm = w;
            wm[d] -= eps;
            let numeric = (ocsvm_objective(&wp, rho, nu, &xs).unwrap()
                - ocsvm_objective(&wm, rho, nu, &xs).unwrap())
                / (2.0 * eps);
            let rel = (gw[d] - numeric).abs() / gw[d].abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "w[{d}] gradient off by {rel}");
        }
        let numeric = (ocsvm_objective(&w, rho + eps, nu, &xs).unwrap()
            - ocsvm_objective(&w, rho - eps, nu, &xs).unwrap())
            / (2.0 * eps);
        let rel = (grho - numeric).abs() / grho.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-4, "rho gradient off by {rel}");
    }

    #[test]
    fn zero_learning_rate_returns_the_initialization() {
        let xs = [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]];
        let model = train_ocsvm(&xs, 0.5, 0.0, 100, 7).unwrap();
        let equal = 1.0 / 3.0f64.sqrt();
        assert_eq!(model.w, [equal; 3]);
        assert_eq!(model.rho, 0.0);
        assert!(!model.fallback);
    }

    #[test]
    fn near_identical_inputs_fall_back_to_a_boundary_through_the_mean() {
        let v = [0.3, 0.6, 0.2];
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let xs: Vec<[f64; 3]> = (0..20)
            .map(|_| {
                [
                    v[0] + rng.gen_range(-1e-8..1e-8),
                    v[1] + rng.gen_range(-1e-8..1e-8),
                    v[2] + rng.gen_range(-1e-8..1e-8),
                ]
            })
            .collect();
        let model = train_ocsvm(&xs, 0.5, 1e-4, 1000, 11).unwrap();
        assert!(model.fallback);
        let boundary = model.score(&v);
        assert!(
            boundary.abs() < 1e-3,
            "boundary misses the common point by {boundary}"
        );
    }

    #[test]
    fn training_is_deterministic_and_validates_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let xs: Vec<[f64; 3]> = (0..30)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let a = train_ocsvm(&xs, 0.5, 1e-4, 500, 2).unwrap();
        let b = train_ocsvm(&xs, 0.5, 1e-4, 500, 2).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.rho, b.rho);
        assert!(a.w.iter().all(|v| v.is_finite()));

        assert!(train_ocsvm(&xs[..1], 0.5, 1e-4, 10, 0).is_err());
        assert!(train_ocsvm(&xs, 0.0, 1e-4, 10, 0).is_err());
        assert!(train_ocsvm(&xs, 1.5, 1e-4, 10, 0).is_err());
        assert!(train_ocsvm(&xs, 0.5, -1.0, 10, 0).is_err());
        assert!(train_ocsvm(&xs, 0.5, 1e-4, 0, 0).is_err());
        assert!(train_ocsvm(&[[0.0, 0.0, f64::NAN]; 3], 0.5, 1e-4, 10, 0).is_err());
    }

    #[test]
    fn score_is_monotone_in_inputs_under_nonnegative_weights() {
        let model = Ocsvm {
            w: [0.5, 0.3, 0.8],
            rho: 0.4,
            nu: 0.5,
            fallback: false,
        };
        let base = model.score(&[0.2, 0.2, 0.2]);
        for d in 0..3 {
            let mut x = [0.2, 0.2, 0.2];
            x[d] += 0.5;
            assert!(model.score(&x) > base, "raising input {d} lowered the score");
        }
    }

    // --- decide ------------------------------------------------------------

    struct Fixture {
        rgb: FeatureGrid,
        pc: FeatureGrid,
        banks: BankSet,
        head: FusionHead,
    }

    /// 3×3 grids whose every cell feature sits in the banks; the fusion bank
    /// is built with the same head that decide will use.
    fn member_fixture() -> Fixture {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let mut rgb = FeatureGrid::zeros(3, 3, 4);
        let mut pc = FeatureGrid::zeros(3, 3, 4);
        let head = FusionHead::new(4, 4, 4, 0.07, 13).unwrap();
        let mut image_entries = Vec::new();
        let mut point_entries = Vec::new();
        let mut fused_entries = Vec::new();
        for u in 0..3 {
            for v in 0..3 {
                let fr: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let fp: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                rgb.set_feature(u, v, &fr).unwrap();
                pc.set_feature(u, v, &fp).unwrap();
                fused_entries.push(head.forward(&fr, &fp).unwrap().fused);
                image_entries.push(fr);
                point_entries.push(fp);
            }
        }
        let banks = BankSet {
            image: unit_bank(image_entries),
            point: unit_bank(point_entries),
            fusion: unit_bank(fused_entries),
        };
        Fixture {
            rgb,
            pc,
            banks,
            head,
        }
    }

    fn plain_svm(rho: f64) -> Ocsvm {
        Ocsvm {
            w: [0.5, 0.3, 0.8],
            rho,
            nu: 0.5,
            fallback: false,
        }
    }

    #[test]
    fn fully_banked_sample_scores_the_zero_point_everywhere() {
        let fx = member_fixture();
        let out = decide(
            &fx.rgb,
            &fx.pc,
            &fx.banks,
            &fx.head,
            &plain_svm(0.15),
            &plain_svm(0.4),
            true,
        )
        .unwrap();
        assert!((out.s_image - (-0.15)).abs() < 1e-12);
        for s in out.s_pixel.scores() {
            assert!((s - (-0.4)).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_cell_dominates_the_pixel_map() {
        let fx = member_fixture();
        let mut rgb = fx.rgb.clone();
        let mut bumped = rgb.feature(1, 2).to_vec();
        bumped[0] += 2.0;
        rgb.set_feature(1, 2, &bumped).unwrap();
        let out = decide(
            &fx.rgb.clone(),
            &fx.pc,
            &fx.banks,
            &fx.head,
            &plain_svm(0.0),
            &plain_svm(0.0),
            false,
        )
        .unwrap();
        let perturbed = decide(
            &rgb,
            &fx.pc,
            &fx.banks,
            &fx.head,
            &plain_svm(0.0),
            &plain_svm(0.0),
            false,
        )
        .unwrap();
        let mut best = (0, 0);
        let mut best_s = f64::NEG_INFINITY;
        for u in 0..3 {
            for v in 0..3 {
                if perturbed.s_pixel.get(u, v) > best_s {
                    best_s = perturbed.s_pixel.get(u, v);
                    best = (u, v);
                }
            }
        }
        assert_eq!(best, (1, 2));
        assert!(perturbed.s_image > out.s_image);
    }

    #[test]
    fn decide_is_deterministic_and_fills_uncovered_cells_with_the_zero_response() {
        let fx = member_fixture();
        let mut pc = fx.pc.clone();
        pc.invalidate(0, 0);
        let svm = plain_svm(0.25);
        let a = decide(&fx.rgb, &pc, &fx.banks, &fx.head, &svm, &svm, false).unwrap();
        let b = decide(&fx.rgb, &pc, &fx.banks, &fx.head, &svm, &svm, false).unwrap();
        assert_eq!(a.s_image, b.s_image);
        assert_eq!(a.s_pixel.scores(), b.s_pixel.scores());
        assert!((a.s_pixel.get(0, 0) - (-0.25)).abs() < 1e-12);
    }

    #[test]
    fn smoothing_averages_over_in_bounds_neighbors() {
        let mut scores = vec![0.0; 9];
        scores[4] = 9.0;
        let grid = ScoreGrid::from_scores(3, 3, scores).unwrap();
        let sm = smooth_mean3(&grid);
        assert!((sm.get(1, 1) - 1.0).abs() < 1e-12);
        assert!((sm.get(0, 0) - 9.0 / 4.0).abs() < 1e-12);
        assert!((sm.get(0, 1) - 9.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn decide_validates_shapes_and_dimensions() {
        let fx = member_fixture();
        let svm = plain_svm(0.0);
        let small = FeatureGrid::zeros(2, 3, 4);
        assert!(matches!(
            decide(&fx.rgb, &small, &fx.banks, &fx.head, &svm, &svm, false),
            Err(Error::ShapeMismatch { .. })
        ));
        let wrong_dim = FeatureGrid::zeros(3, 3, 5);
        assert!(matches!(
            decide(&wrong_dim, &fx.pc, &fx.banks, &fx.head, &svm, &svm, false),
            Err(Error::DimMismatch { .. })
        ));
        let empty = FeatureGrid::zeros(3, 3, 4);
        assert!(matches!(
            decide(&empty, &fx.pc, &fx.banks, &fx.head, &svm, &svm, false),
            Err(Error::InsufficientData(_))
        ));
    }
}
