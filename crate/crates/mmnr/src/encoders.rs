//! The encoder boundary: a deterministic toy feature extractor for images
//! and point patches, plus text-prototype synthesis from a prompt ensemble.
//!
//! The toy encoders turn local statistics into unit-norm feature vectors
//! through a seeded random orthogonal projection. They stand in for large
//! pretrained backbones at desk scale; real deployments ingest
//! externally-computed features through bundles (`kind = ExternalBundle`)
//! and prototype sidecar files instead.
//!
//! Everything here is a pure function of `(input, seed)`. The random
//! number path (hash → ChaCha → sum-of-uniforms Gaussian) and the
//! Gram-Schmidt orthogonalization use only IEEE add/mul/div/sqrt, so
//! results are bit-stable across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::bundle::VectorSet;
use crate::error::{Error, Result};
use crate::tensor::{normalize, FeatureGrid};

/// Which feature source a pipeline stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Deterministic statistics-based encoder defined in this module.
    Toy,
    /// Features and prototypes are read from bundles/sidecars as-is.
    ExternalBundle,
}

/// Encoder parameters; stages I–II and stage III may carry different ones.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Output feature dimension (>= 4).
    pub dim: usize,
    pub seed: u64,
    pub kind: EncoderKind,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::InvalidConfig(format!(
                "encoder dim must be >= 4, got {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Prompt templates and state words used to synthesize text prototypes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptEnsemble {
    /// Each template must contain both `{state}` and `{class}`.
    pub templates: Vec<String>,
    pub normal_states: Vec<String>,
    pub anomalous_states: Vec<String>,
}

impl Default for PromptEnsemble {
    fn default() -> Self {
        PromptEnsemble {
            templates: vec![
                "a photo of a {state} {class}".into(),
                "a cropped photo of a {state} {class}".into(),
                "a close-up photo of a {state} {class}".into(),
            ],
            normal_states: vec!["flawless".into(), "perfect".into()],
            anomalous_states: vec!["damaged".into(), "broken".into(), "with a defect".into()],
        }
    }
}

/// Normal/anomalous text prototype pair for one class and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrototypes {
    pub class_name: String,
    pub normal: Vec<f64>,
    pub anomalous: Vec<f64>,
}

impl TextPrototypes {
    /// Packs into the two-vector sidecar representation (normal first).
    pub fn to_vector_set(&self) -> VectorSet {
        VectorSet {
            name: self.class_name.clone(),
            vectors: vec![self.normal.clone(), self.anomalous.clone()],
        }
    }

    pub fn from_vector_set(set: &VectorSet) -> Result<Self> {
        if set.vectors.len() != 2 {
            return Err(Error::InsufficientData(format!(
                "prototype sidecar must hold exactly 2 vectors, found {}",
                set.vectors.len()
            )));
        }
        Ok(TextPrototypes {
            class_name: set.name.clone(),
            normal: set.vectors[0].clone(),
            anomalous: set.vectors[1].clone(),
        })
    }
}

/// RGB raster aligned with an organized cloud: `height x width` pixels with
/// channels in [0, 1] and a validity mask mirroring removed points.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    height: usize,
    width: usize,
    /// `height * width * 3`, row-major.
    pixels: Vec<f64>,
    valid: Vec<bool>,
}

impl RgbRaster {
    pub fn new(height: usize, width: usize) -> Self {
        RgbRaster {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
            valid: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (u * self.width + v) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (u * self.width + v) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[u * self.width + v]
    }

    /// Marks a pixel invalid and zeroes it (mirrors point removal).
    pub fn invalidate(&mut self, u: usize, v: usize) {
        let i = (u * self.width + v) * 3;
        self.pixels[i..i + 3].fill(0.0);
        self.valid[u * self.width + v] = false;
    }

    fn luma(&self, u: usize, v: usize) -> f64 {
        let [r, g, b] = self.pixel(u, v);
        0.299 * r + 0.587 * g + 0.114 * b
    }
}

// ---------------------------------------------------------------------------
// seeded projection machinery
// ---------------------------------------------------------------------------

/// FNV-1a 64-bit hash; fixed constants, byte-order independent.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a role-specific seed from the global one.
pub(crate) fn role_seed(seed: u64, role: &str) -> u64 {
    seed ^ fnv1a64(role.as_bytes())
}

/// Approximate standard normal from 12 uniforms; avoids log/cos so the
/// stream is identical across libm implementations.
pub(crate) fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..12 {
        acc += rng.gen::<f64>();
    }
    acc - 6.0
}

/// A seeded random linear map from `in_dim` statistics to `out_dim`
/// features with orthonormalized rows (or columns when `out_dim > in_dim`),
/// so the embedding is roughly isometric.
#[derive(Debug, Clone)]
pub(crate) struct Projection {
    out_dim: usize,
    in_dim: usize,
    /// `out_dim x in_dim`, row-major.
    rows: Vec<f64>,
}

/// Modified Gram-Schmidt over `count` vectors of length `len`; re-draws a
/// vector if it degenerates (probability ~0 for Gaussian draws).
fn orthonormal_vectors(rng: &mut ChaCha12Rng, count: usize, len: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| gaussian(rng)).collect();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (x, qx) in v.iter_mut().zip(q) {
                *x -= dot * qx;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        basis.push(v);
    }
    basis
}

impl Projection {
    pub fn new(seed: u64, role: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(role_seed(seed, role));
        let mut rows = vec![0.0; out_dim * in_dim];
        if out_dim <= in_dim {
            let basis = orthonormal_vectors(&mut rng, out_dim, in_dim);
            for (r, v) in basis.iter().enumerate() {
                rows[r * in_dim..(r + 1) * in_dim].copy_from_slice(v);
            }
        } else {
            // Orthonormal columns: generate in_dim vectors of length out_dim
            // and transpose into the row-major map.
            let cols = orthonormal_vectors(&mut rng, in_dim, out_dim);
            for (c, v) in cols.iter().enumerate() {
                for (r, x) in v.iter().enumerate() {
                    rows[r * in_dim + c] = *x;
                }
            }
        }
        Projection {
            out_dim,
            in_dim,
            rows,
        }
    }

    pub fn apply(&self, stats: &[f64]) -> Vec<f64> {
        debug_assert_eq!(stats.len(), self.in_dim);
        let mut out = vec![0.0; self.out_dim];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.rows[r * self.in_dim..(r + 1) * self.in_dim];
            *o = row.iter().zip(stats).map(|(a, b)| a * b).sum();
        }
        out
    }
}

// ---------------------------------------------------------------------------
// image encoder
// ---------------------------------------------------------------------------

/// Number of per-cell image statistics: mean RGB, RGB variance, a 4-bin
/// gradient-orientation histogram and a constant bias term (keeps the
/// vector nonzero for featureless cells).
const IMAGE_STATS: usize = 11;

/// Gradient-orientation bin in [0, π) from comparisons only (no atan2):
/// normalize the sign so gx >= 0, then split by |gy| vs gx and sign of gy.
fn orientation_bin(gx: f64, gy: f64) -> usize {
    let (gx, gy) = if gx < 0.0 { (-gx, -gy) } else { (gx, gy) };
    match (gy.abs() <= gx, gy >= 0.0) {
        (true, true) => 0,   // [0, 45°)
        (false, true) => 1,  // [45°, 90°)
        (false, false) => 2, // [90°, 135°)
        (true, false) => 3,  // [135°, 180°)
    }
}

/// Encodes a cloud-aligned RGB raster into an `grid_h x grid_w` feature
/// grid with a class token.
///
/// Each cell's statistics (mean color, color variance, gradient-orientation
/// histogram over valid pixels) pass through the seeded orthogonal
/// projection and are L2-normalized. Cells without any valid pixel are
/// invalid in the output; the class token is the normalized mean of valid
/// patch features.
pub fn encode_image(
    raster: &RgbRaster,
    grid_h: usize,
    grid_w: usize,
    config: &EncoderConfig,
) -> Result<FeatureGrid> {
    config.validate()?;
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::InvalidConfig("patch grid must be >= 1x1".into()));
    }
    if raster.height % grid_h != 0 || raster.width % grid_w != 0 {
        return Err(Error::InvalidConfig(format!(
            "raster {}x{} not divisible into patch grid {grid_h}x{grid_w}",
            raster.height, raster.width
        )));
    }
    if raster.pixels.iter().all(|p| *p == 0.0) {
        return Err(Error::InsufficientData(
            "cannot encode an all-zero raster".into(),
        ));
    }
    let cell_h = raster.height / grid_h;
    let cell_w = raster.width / grid_w;
    let projection = Projection::new(config.seed, "image", IMAGE_STATS, config.dim);

    let mut grid = FeatureGrid::zeros(grid_h, grid_w, config.dim);
    for cu in 0..grid_h {
        for cv in 0..grid_w {
            let mut mean = [0.0f64; 3];
            let mut mean_sq = [0.0f64; 3];
            let mut hist = [0.0f64; 4];
            let mut count = 0usize;
            for u in cu * cell_h..(cu + 1) * cell_h {
                for v in cv * cell_w..(cv + 1) * cell_w {
                    if !raster.is_valid(u, v) {
                        continue;
                    }
                    count += 1;
                    let px = raster.pixel(u, v);
                    for c in 0..3 {
                        mean[c] += px[c];
                        mean_sq[c] += px[c] * px[c];
                    }
                    // Central differences, clamped at the raster border.
                    let gx = raster.luma(u, (v + 1).min(raster.width - 1))
                        - raster.luma(u, v.saturating_sub(1));
                    let gy = raster.luma((u + 1).min(raster.height - 1), v)
                        - raster.luma(u.saturating_sub(1), v);
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag > 0.0 {
                        hist[orientation_bin(gx, gy)] += mag;
                    }
                }
            }
            if count == 0 {
                continue; // cell stays invalid
            }
            let n = count as f64;
            let mut stats = [0.0f64; IMAGE_STATS];
            for c in 0..3 {
                stats[c] = mean[c] / n;
                stats[3 + c] = (mean_sq[c] / n - stats[c] * stats[c]).max(0.0);
            }
            for b in 0..4 {
                stats[6 + b] = hist[b] / n;
            }
            stats[10] = 1.0;
            let mut feature = projection.apply(&stats);
            normalize(&mut feature)?;
            grid.set_feature(cu, cv, &feature)?;
        }
    }
    let token = grid
        .mean_valid_feature()
        .ok_or_else(|| Error::InsufficientData("raster has no valid pixels".into()))?;
    let mut token = token;
    normalize(&mut token)?;
    grid.set_class_token(token)?;
    Ok(grid)
}

// ---------------------------------------------------------------------------
// point-patch encoder
// ---------------------------------------------------------------------------

/// Number of point-patch statistics: two eigenvalue shape ratios, vertical
/// variance share, relative height range, mean centroid offset, log point
/// count and a bias term.
const POINT_STATS: usize = 7;

/// Eigenvalues of a symmetric 3x3 matrix by cyclic Jacobi rotations; uses
/// only +|-|*|/|sqrt so results are platform-stable. Returned descending.
fn symmetric_eigenvalues_3x3(m: [[f64; 3]; 3]) -> [f64; 3] {
    let mut a = m;
    for _ in 0..32 {
        // Largest off-diagonal element.
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off < 1e-15 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-18 {
                continue;
            }
            // Jacobi rotation annihilating a[p][q].
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = if theta >= 0.0 {
                1.0 / (theta + (1.0 + theta * theta).sqrt())
            } else {
                1.0 / (theta - (1.0 + theta * theta).sqrt())
            };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = t * c;
            let mut b = a;
            for r in 0..3 {
                b[r][p] = c * a[r][p] - s * a[r][q];
                b[r][q] = s * a[r][p] + c * a[r][q];
            }
            let mut out = b;
            for r in 0..3 {
                out[p][r] = c * b[p][r] - s * b[q][r];
                out[q][r] = s * b[p][r] + c * b[q][r];
            }
            a = out;
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Encodes a point patch into a unit-norm feature vector.
///
/// The descriptor is centroid-relative (eigenvalue shape ratios, vertical
/// variance share, relative height range, mean offset, log count), so it is
/// invariant to rigid translation; points are sorted internally, so it is
/// exactly invariant to input ordering.
pub fn encode_point_patch(points: &[[f64; 3]], config: &EncoderConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::InsufficientData(
            "point patch must contain at least one point".into(),
        ));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let n = pts.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in &pts {
        for c in 0..3 {
            centroid[c] += p[c];
        }
    }
    for c in centroid.iter_mut() {
        *c /= n;
    }

    let mut cov = [[0.0f64; 3]; 3];
    let mut offset_sum = 0.0;
    let mut z_min = f64::INFINITY;
    let mut z_max = f64::NEG_INFINITY;
    for p in &pts {
        let d = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
        offset_sum += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
        z_min = z_min.min(p[2]);
        z_max = z_max.max(p[2]);
    }
    for row in cov.iter_mut() {
        for x in row.iter_mut() {
            *x /= n;
        }
    }
    let trace = cov[0][0] + cov[1][1] + cov[2][2];
    let ev = symmetric_eigenvalues_3x3(cov);
    let spread = offset_sum / n;

    // Dimensionless shape ratios keep the descriptor sensitive to local
    // geometry instead of being dominated by patch size or point count.
    let (shape_mid, shape_min, vertical_share) = if ev[0] > 1e-18 {
        (ev[1] / ev[0], ev[2] / ev[0], cov[2][2] / trace)
    } else {
        (0.0, 0.0, 0.0)
    };
    let relative_height = (z_max - z_min) / (spread + 1e-12);

    let stats = [
        shape_mid,
        shape_min,
        vertical_share,
        relative_height,
        spread,
        0.1 * (1.0 + n).ln(),
        0.25,
    ];
    debug_assert_eq!(stats.len(), POINT_STATS);
    let projection = Projection::new(config.seed, "point", POINT_STATS, config.dim);
    let mut feature = projection.apply(&stats);
    normalize(&mut feature)?;
    Ok(feature)
}

// ---------------------------------------------------------------------------
// text prototypes
// ---------------------------------------------------------------------------

/// Pseudo-feature for one filled template: a seeded random unit vector
/// keyed by the string hash.
fn pseudo_feature(filled: &str, config: &EncoderConfig) -> Vec<f64> {
    let seed = role_seed(config.seed, "text") ^ fnv1a64(filled.as_bytes());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..config.dim).map(|_| gaussian(&mut rng)).collect();
    // A 12-uniform sum is zero with probability ~0; normalize defensively.
    if normalize(&mut v).is_err() {
        v[0] = 1.0;
    }
    v
}

/// Synthesizes normal/anomalous prototypes by averaging the pseudo-features
/// of every template filled with every state word.
pub fn text_prototypes(
    ensemble: &PromptEnsemble,
    class_name: &str,
    config: &EncoderConfig,
) -> Result<TextPrototypes> {
    config.validate()?;
    if ensemble.templates.is_empty() {
        return Err(Error::InvalidConfig("prompt ensemble has no templates".into()));
    }
    for t in &ensemble.templates {
        if !t.contains("{state}") || !t.contains("{class}") {
            return Err(Error::InvalidConfig(format!(
                "template '{t}' must contain {{state}} and {{class}}"
            )));
        }
    }
    if ensemble.normal_states.is_empty() || ensemble.anomalous_states.is_empty() {
        return Err(Error::InvalidConfig("prompt state lists must be nonempty".into()));
    }

    let mean_of = |states: &[String]| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; config.dim];
        let mut count = 0usize;
        for template in &ensemble.templates {
            for state in states {
                let filled = template.replace("{state}", state).replace("{class}", class_name);
                let f = pseudo_feature(&filled, config);
                for (a, x) in acc.iter_mut().zip(&f) {
                    *a += x;
                }
                count += 1;
            }
        }
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
        normalize(&mut acc)?;
        Ok(acc)
    };

    Ok(TextPrototypes {
        class_name: class_name.to_string(),
        normal: mean_of(&ensemble.normal_states)?,
        anomalous: mean_of(&ensemble.anomalous_states)?,
    })
}
