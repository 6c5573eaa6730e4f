//! Geometric preprocessing: RANSAC background-plane removal and bilinear
//! resizing of feature grids and organized clouds.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::{FeatureGrid, OrganizedPointCloud};

/// Default point-to-plane distance below which a point counts as background.
pub const DEFAULT_PLANE_THRESHOLD: f64 = 0.005;
/// Default RANSAC hypothesis count.
pub const DEFAULT_RANSAC_ITERATIONS: usize = 1000;
/// A consensus plane must capture at least this fraction of the valid
/// points to be treated as background. The guard makes removal a no-op on
/// its own output: once the plane is gone, no remaining structure is
/// dominant enough to be carved away by a second pass.
pub const MIN_PLANE_INLIER_FRACTION: f64 = 0.2;

/// Fitted plane in Hessian normal form `n·p + d = 0` with `|n| = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub normal: [f64; 3],
    pub offset: f64,
    /// Valid points within threshold of the refit plane.
    pub inlier_count: usize,
    /// Whether a dominant plane was found (and points removed).
    pub found: bool,
}

fn plane_distance(normal: &Vector3<f64>, offset: f64, p: &Vector3<f64>) -> f64 {
    (normal.dot(p) + offset).abs()
}

/// Least-squares plane through `points` (centroid + smallest principal
/// direction of the scatter matrix). Returns `None` for degenerate sets.
fn least_squares_plane(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    // Smallest eigenvalue's eigenvector is the plane normal.
    let mut min_i = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let normal = eig.eigenvectors.column(min_i).into_owned();
    let norm = normal.norm();
    if norm < 1e-12 {
        return None;
    }
    let normal = normal / norm;
    Some((normal, -normal.dot(&centroid)))
}

/// Detects the dominant background plane with RANSAC and invalidates every
/// point within `dist_threshold` of it.
///
/// Hypotheses are 3-point planes scored by inlier count, ties broken by
/// lower mean absolute inlier residual; the winning consensus set gets a
/// final least-squares refit before removal. If no hypothesis captures at
/// least [`MIN_PLANE_INLIER_FRACTION`] of the valid points the cloud is
/// returned unchanged (`fit.found == false`), which makes repeated
/// application a no-op once the background is gone.
pub fn remove_background_plane(
    cloud: &OrganizedPointCloud,
    dist_threshold: f64,
    iterations: usize,
    seed: u64,
) -> Result<(OrganizedPointCloud, PlaneFit)> {
    if dist_threshold <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "plane distance threshold must be positive, got {dist_threshold}"
        )));
    }
    let pixels: Vec<(usize, usize)> = cloud
        .iter_valid()
        .map(|(u, v, _)| (u, v))
        .collect();
    let points: Vec<Vector3<f64>> = cloud
        .iter_valid()
        .map(|(_, _, p)| Vector3::new(p[0], p[1], p[2]))
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "plane estimation needs >= 3 valid points, have {}",
            points.len()
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best: Option<(usize, f64, Vector3<f64>, f64)> = None; // count, mean |res|, n, d
    for _ in 0..iterations {
        let i = rng.gen_range(0..points.len());
        let j = rng.gen_range(0..points.len());
        let k = rng.gen_range(0..points.len());
        if i == j || j == k || i == k {
            continue;
        }
        let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
        let norm = normal.norm();
        if norm < 1e-12 {
            continue; // collinear sample
        }
        let normal = normal / norm;
        let offset = -normal.dot(&points[i]);
        let mut count = 0usize;
        let mut residual_sum = 0.0;
        for p in &points {
            let d = plane_distance(&normal, offset, p);
            if d <= dist_threshold {
                count += 1;
                residual_sum += d;
            }
        }
        if count == 0 {
            continue;
        }
        let mean_res = residual_sum / count as f64;
        let better = match &best {
            None => true,
            Some((bc, br, _, _)) => count > *bc || (count == *bc && mean_res < *br),
        };
        if better {
            best = Some((count, mean_res, normal, offset));
        }
    }

    let no_fit = PlaneFit {
        normal: [0.0, 0.0, 0.0],
        offset: 0.0,
        inlier_count: 0,
        found: false,
    };
    let Some((count, _, normal, offset)) = best else {
        return Ok((cloud.clone(), no_fit));
    };
    if (count as f64) < MIN_PLANE_INLIER_FRACTION * points.len() as f64 {
        return Ok((cloud.clone(), no_fit));
    }

    // Least-squares refit on the consensus set, then remove relative to the
    // refit plane.
    let consensus: Vec<Vector3<f64>> = points
        .iter()
        .filter(|p| plane_distance(&normal, offset, p) <= dist_threshold)
        .cloned()
        .collect();
    let (normal, offset) = least_squares_plane(&consensus).unwrap_or((normal, offset));

    let mut out = cloud.clone();
    let mut removed = 0usize;
    for ((u, v), p) in pixels.iter().zip(&points) {
        if plane_distance(&normal, offset, p) <= dist_threshold {
            out.invalidate(*u, *v);
            removed += 1;
        }
    }
    Ok((
        out,
        PlaneFit {
            normal: [normal.x, normal.y, normal.z],
            offset,
            inlier_count: removed,
            found: true,
        },
    ))
}

/// Axis sample positions for bilinear interpolation with corner alignment:
/// output index `i` maps to input coordinate `i * (in-1)/(out-1)` (or the
/// input midpoint when `out == 1`).
fn axis_springs(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    // (low index, high index, weight of high)
    (0..n_out)
        .map(|i| {
            let x = if n_out == 1 {
                (n_in - 1) as f64 / 2.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (x.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Shared bilinear kernel over a channel. `get(u, v, c)` reads input,
/// `valid(u, v)` its mask; returns per-output-pixel `(values, valid)`.
fn resize_channels(
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    channels: usize,
    get: impl Fn(usize, usize, usize) -> f64,
    valid: impl Fn(usize, usize) -> bool,
) -> (Vec<f64>, Vec<bool>) {
    let rows = axis_springs(h_in, h_out);
    let cols = axis_springs(w_in, w_out);
    let mut values = vec![0.0; h_out * w_out * channels];
    let mut mask = vec![false; h_out * w_out];
    for (uo, &(r0, r1, wr)) in rows.iter().enumerate() {
        for (vo, &(c0, c1, wc)) in cols.iter().enumerate() {
            // Contributing pixels are those with nonzero weight.
            let mut contributors: Vec<(usize, usize, f64)> = Vec::with_capacity(4);
            for (r, weight_r) in [(r0, 1.0 - wr), (r1, wr)] {
                if weight_r == 0.0 {
                    continue;
                }
                for (c, weight_c) in [(c0, 1.0 - wc), (c1, wc)] {
                    if weight_c == 0.0 {
                        continue;
                    }
                    contributors.push((r, c, weight_r * weight_c));
                }
            }
            let all_valid = contributors.iter().all(|&(r, c, _)| valid(r, c));
            mask[uo * w_out + vo] = all_valid;
            if all_valid {
                for ch in 0..channels {
                    let mut acc = 0.0;
                    for &(r, c, w) in &contributors {
                        acc += w * get(r, c, ch);
                    }
                    values[(uo * w_out + vo) * channels + ch] = acc;
                }
            }
        }
    }
    (values, mask)
}

/// Bilinear resize of a feature grid; output validity is the logical AND of
/// the contributing input cells and the class token is carried over.
pub fn resize_grid(grid: &FeatureGrid, target_h: usize, target_w: usize) -> Result<FeatureGrid> {
    if grid.height() == 0 || grid.width() == 0 {
        return Err(Error::InsufficientData("cannot resize an empty grid".into()));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidConfig(format!(
            "resize target must be >= 1x1, got {target_h}x{target_w}"
        )));
    }
    let dim = grid.dim();
    let (values, mask) = resize_channels(
        grid.height(),
        grid.width(),
        target_h,
        target_w,
        dim,
        |u, v, c| grid.feature(u, v)[c],
        |u, v| grid.is_valid(u, v),
    );
    FeatureGrid::from_parts(
        target_h,
        target_w,
        dim,
        values,
        mask,
        grid.class_token().map(|t| t.to_vec()),
    )
}

/// Bilinear resize of an organized cloud (positions are the channels).
pub fn resize_cloud(
    cloud: &OrganizedPointCloud,
    target_h: usize,
    target_w: usize,
) -> Result<OrganizedPointCloud> {
    if cloud.height() == 0 || cloud.width() == 0 {
        return Err(Error::InsufficientData("cannot resize an empty cloud".into()));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidConfig(format!(
            "resize target must be >= 1x1, got {target_h}x{target_w}"
        )));
    }
    let (values, mask) = resize_channels(
        cloud.height(),
        cloud.width(),
        target_h,
        target_w,
        3,
        |u, v, c| cloud.position(u, v)[c],
        |u, v| cloud.is_valid(u, v),
    );
    let mut zeroed = values;
    for (cell, ok) in mask.iter().enumerate() {
        if !ok {
            zeroed[cell * 3..(cell + 1) * 3].fill(0.0);
        }
    }
    OrganizedPointCloud::from_parts(target_h, target_w, zeroed, mask)
}
