//! Multi-scale window masks over the patch grid and the aligned point-cloud
//! segmentation that mirrors image patching granularity.
//!
//! Three scales are used throughout: `L` (one window covering the whole
//! grid), `M` and `S` (square windows tiling the grid at a stride, clipped
//! at the boundary). Point-cloud windows additionally drop patches whose
//! valid-point count is not strictly greater than a threshold, so empty
//! or barely-populated regions never produce features.

use crate::error::{Error, Result};
use crate::tensor::{FeatureGrid, OrganizedPointCloud};

/// Window scale identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    L,
    M,
    S,
}

/// One rectangular window: the nominal center plus the clipped row/column
/// ranges (half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowMask {
    pub center: (usize, usize),
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl WindowMask {
    pub fn contains(&self, u: usize, v: usize) -> bool {
        u >= self.rows.0 && u < self.rows.1 && v >= self.cols.0 && v < self.cols.1
    }

    pub fn cell_count(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }
}

/// All windows of one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMaskSet {
    pub scale: Scale,
    /// Nominal kernel size (grid extent for `L`).
    pub kernel: usize,
    pub masks: Vec<WindowMask>,
}

/// The three per-scale mask sets for one grid shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSets {
    pub height: usize,
    pub width: usize,
    pub l: ScaleMaskSet,
    pub m: ScaleMaskSet,
    pub s: ScaleMaskSet,
}

impl MaskSets {
    pub fn set(&self, scale: Scale) -> &ScaleMaskSet {
        match scale {
            Scale::L => &self.l,
            Scale::M => &self.m,
            Scale::S => &self.s,
        }
    }
}

/// Default medium kernel for a grid height.
pub fn default_kernel_m(h: usize) -> usize {
    h.div_ceil(4)
}

/// Default small kernel for a grid height.
pub fn default_kernel_s(h: usize) -> usize {
    h.div_ceil(8)
}

/// Default stride: half the small kernel (50% overlap), at least 1.
pub fn default_stride(k_s: usize) -> usize {
    (k_s / 2).max(1)
}

/// Centered window rows/cols for kernel `k` at center `c`, clipped to
/// `[0, n)`. The window nominally spans `c - (k-1)/2 .. c + k - (k-1)/2`.
fn clipped_window(c: usize, k: usize, n: usize) -> (usize, usize) {
    let offset = (k - 1) / 2;
    let start = c.saturating_sub(offset);
    let end = (c + (k - offset)).min(n);
    (start, end)
}

fn scale_windows(h: usize, w: usize, k: usize, stride: usize, scale: Scale) -> ScaleMaskSet {
    let mut masks = Vec::new();
    for cu in (0..h).step_by(stride) {
        for cv in (0..w).step_by(stride) {
            masks.push(WindowMask {
                center: (cu, cv),
                rows: clipped_window(cu, k, h),
                cols: clipped_window(cv, k, w),
            });
        }
    }
    ScaleMaskSet {
        scale,
        kernel: k,
        masks,
    }
}

/// Builds the three scale mask sets for an `h x w` grid.
///
/// The stride is bounded by `k_s - (k_s - 1) / 2` so that centered clipped
/// windows cover every cell at both sliding scales — the harmonic window
/// aggregation downstream relies on full coverage.
pub fn build_masks(h: usize, w: usize, k_m: usize, k_s: usize, stride: usize) -> Result<MaskSets> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidConfig("mask grid must be >= 1x1".into()));
    }
    if k_m > h.min(w) {
        return Err(Error::InvalidConfig(format!(
            "medium kernel {k_m} exceeds grid {h}x{w}"
        )));
    }
    if k_s >= k_m {
        return Err(Error::InvalidConfig(format!(
            "small kernel {k_s} must be < medium kernel {k_m}"
        )));
    }
    if k_s == 0 {
        return Err(Error::InvalidConfig("small kernel must be >= 1".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be >= 1".into()));
    }
    let max_stride = k_s - (k_s - 1) / 2;
    if stride > max_stride {
        return Err(Error::InvalidConfig(format!(
            "stride {stride} breaks full coverage; must be <= {max_stride} for small kernel {k_s}"
        )));
    }
    Ok(MaskSets {
        height: h,
        width: w,
        l: ScaleMaskSet {
            scale: Scale::L,
            kernel: h.max(w),
            masks: vec![WindowMask {
                center: (h / 2, w / 2),
                rows: (0, h),
                cols: (0, w),
            }],
        },
        m: scale_windows(h, w, k_m, stride, Scale::M),
        s: scale_windows(h, w, k_s, stride, Scale::S),
    })
}

// ---------------------------------------------------------------------------
// image segmentation
// ---------------------------------------------------------------------------

/// Features collected under one window (invalid cells excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageWindow {
    pub center: (usize, usize),
    pub features: Vec<Vec<f64>>,
}

/// Per-scale window feature sets plus the grid-level class token.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedImage {
    pub class_token: Vec<f64>,
    pub l: Vec<ImageWindow>,
    pub m: Vec<ImageWindow>,
    pub s: Vec<ImageWindow>,
}

/// Collects, per scale and window, the valid patch features under each
/// mask; surfaces the class token as the whole-grid (`L`) feature.
pub fn segment_image(grid: &FeatureGrid, masks: &MaskSets) -> Result<SegmentedImage> {
    if grid.height() != masks.height || grid.width() != masks.width {
        return Err(Error::ShapeMismatch {
            expected_h: masks.height,
            expected_w: masks.width,
            got_h: grid.height(),
            got_w: grid.width(),
        });
    }
    let class_token = grid
        .class_token()
        .ok_or_else(|| Error::InsufficientData("feature grid is missing its class token".into()))?
        .to_vec();
    let collect = |set: &ScaleMaskSet| -> Vec<ImageWindow> {
        set.masks
            .iter()
            .map(|mask| {
                let mut features = Vec::new();
                for u in mask.rows.0..mask.rows.1 {
                    for v in mask.cols.0..mask.cols.1 {
                        if grid.is_valid(u, v) {
                            features.push(grid.feature(u, v).to_vec());
                        }
                    }
                }
                ImageWindow {
                    center: mask.center,
                    features,
                }
            })
            .collect()
    };
    Ok(SegmentedImage {
        class_token,
        l: collect(&masks.l),
        m: collect(&masks.m),
        s: collect(&masks.s),
    })
}

// ---------------------------------------------------------------------------
// point-cloud segmentation
// ---------------------------------------------------------------------------

/// Valid 3D points gathered under one window.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPatch {
    pub anchor: (usize, usize),
    pub scale: Scale,
    pub points: Vec<[f64; 3]>,
}

impl PointPatch {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Per-scale retained point patches.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudPatches {
    pub l: Vec<PointPatch>,
    pub m: Vec<PointPatch>,
    pub s: Vec<PointPatch>,
}

/// Gathers valid points per window and drops every patch whose count is
/// not strictly greater than `theta`, so downstream stages only ever see
/// populated regions.
pub fn segment_cloud_ampcfe(
    cloud: &OrganizedPointCloud,
    masks: &MaskSets,
    theta: usize,
) -> Result<CloudPatches> {
    if theta == 0 {
        return Err(Error::InvalidConfig(
            "minimum point count theta must be >= 1".into(),
        ));
    }
    if cloud.height() != masks.height || cloud.width() != masks.width {
        return Err(Error::ShapeMismatch {
            expected_h: masks.height,
            expected_w: masks.width,
            got_h: cloud.height(),
            got_w: cloud.width(),
        });
    }
    let collect = |set: &ScaleMaskSet| -> Vec<PointPatch> {
        set.masks
            .iter()
            .filter_map(|mask| {
                let mut points = Vec::new();
                for u in mask.rows.0..mask.rows.1 {
                    for v in mask.cols.0..mask.cols.1 {
                        if cloud.is_valid(u, v) {
                            points.push(cloud.position(u, v));
                        }
                    }
                }
                if points.len() > theta {
                    Some(PointPatch {
                        anchor: mask.center,
                        scale: set.scale,
                        points,
                    })
                } else {
                    None
                }
            })
            .collect()
    };
    Ok(CloudPatches {
        l: collect(&masks.l),
        m: collect(&masks.m),
        s: collect(&masks.s),
    })
}
