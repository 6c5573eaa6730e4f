//! Cross-modal feature alignment and fused-representation training.
//!
//! The raw point-cloud features live on an irregular set of sampled center
//! points while the image features live on a regular grid.  This module
//! closes that gap and then learns a joint embedding:
//!
//! 1. [`farthest_point_sample`] picks well-spread center points from a cloud.
//! 2. [`interpolate_point_features`] spreads per-center features back onto
//!    every valid pixel with inverse-distance weights, and
//!    [`project_to_plane`] packs the result into a [`FeatureGrid`].
//! 3. [`FusionHead`] is a small two-tower network (one MLP per modality plus
//!    a linear projection each) trained with a symmetric contrastive loss so
//!    that image and point features of the same patch embed close together.
//!    Its concatenated MLP outputs are the fused features used downstream.
//!
//! The forward and backward passes are written out by hand: the network is
//! tiny (two hidden layers per tower), and an explicit implementation keeps
//! the gradient available for verification against finite differences.  All
//! randomness (initialization, batch sampling, the train/held-out split) is
//! driven by seeded [`ChaCha12Rng`] streams, so training is reproducible.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::bundle::{ByteReader, ByteWriter};
use crate::encoders::role_seed;
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, FeatureGrid, OrganizedPointCloud};

/// Softmax temperature for the contrastive loss.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Distance offset in inverse-distance weights; keeps the weight of a center
/// that coincides exactly with a query pixel finite.
pub const DEFAULT_INTERP_EPSILON: f64 = 1e-8;

/// At most this many nearest centers contribute to an interpolated pixel.
pub const MAX_INTERP_NEIGHBORS: usize = 8;

/// Hidden width of each modality MLP, as a multiple of its input width.
const HIDDEN_MULTIPLIER: usize = 4;

const HEAD_MAGIC: [u8; 4] = *b"MMNH";

// ---------------------------------------------------------------------------
// center selection and interpolation
// ---------------------------------------------------------------------------

/// Features attached to a set of 3D center points.
#[derive(Debug, Clone)]
pub struct CenterFeatures {
    positions: Vec<[f64; 3]>,
    features: Vec<Vec<f64>>,
}

impl CenterFeatures {
    /// Pairs up center positions with their feature vectors.
    ///
    /// Fails if the set is empty, the two lists disagree in length, the
    /// feature vectors disagree in dimension, or any value is non-finite.
    pub fn new(positions: Vec<[f64; 3]>, features: Vec<Vec<f64>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InsufficientData(
                "center set must contain at least one point".into(),
            ));
        }
        if positions.len() != features.len() {
            return Err(Error::DimMismatch {
                expected: positions.len(),
                got: features.len(),
            });
        }
        let dim = features[0].len();
        for f in &features {
            if f.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: f.len(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite center feature".into()));
            }
        }
        for p in &positions {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite center position".into()));
            }
        }
        Ok(CenterFeatures {
            positions,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Greedy farthest-point sampling over a point list.
///
/// The first pick is the point closest to the centroid; every later pick is
/// the point with the largest distance to its nearest already-picked point.
/// Both argmin and argmax break ties toward the lowest index, which makes the
/// selection deterministic.  Returns indices into `points` in pick order.
pub fn farthest_point_sample(points: &[[f64; 3]], count: usize) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::InvalidConfig("sample count must be >= 1".into()));
    }
    if count > points.len() {
        return Err(Error::InsufficientData(format!(
            "cannot sample {count} centers from {} points",
            points.len()
        )));
    }
    let n = points.len();
    let mut centroid = [0.0f64; 3];
    for p in points {
        centroid[0] += p[0];
        centroid[1] += p[1];
        centroid[2] += p[2];
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let mut first = 0usize;
    let mut best = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist3(*p, centroid);
        if d < best {
            best = d;
            first = i;
        }
    }

    let mut picked = Vec::with_capacity(count);
    picked.push(first);
    // min_dist[i] = distance from point i to its nearest picked point.
    let mut min_dist: Vec<f64> = points.iter().map(|p| dist3(*p, points[first])).collect();
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
            let nd = dist3(points[i], points[next]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(picked)
}

/// Spreads center features onto every valid pixel of an organized cloud.
///
/// Each valid pixel takes a convex combination of the features of its
/// `min(len, MAX_INTERP_NEIGHBORS)` nearest centers, weighted by
/// `1 / (distance + epsilon)` and normalized to sum to one.  Invalid pixels
/// map to `None`.  The result is row-major with `height * width` entries.
///
/// With a single center every valid pixel receives exactly that center's
/// feature, because the lone weight normalizes to 1.
pub fn interpolate_point_features(
    cloud: &OrganizedPointCloud,
    centers: &CenterFeatures,
    epsilon: f64,
) -> Result<Vec<Option<Vec<f64>>>> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "interpolation epsilon must be a positive finite number, got {epsilon}"
        )));
    }
    let k = centers.len().min(MAX_INTERP_NEIGHBORS);
    let dim = centers.dim();
    let mut out = Vec::with_capacity(cloud.height() * cloud.width());
    for u in 0..cloud.height() {
        for v in 0..cloud.width() {
            if !cloud.is_valid(u, v) {
                out.push(None);
                continue;
            }
            let pos = cloud.position(u, v);
            // Nearest-k selection; ties resolve toward the lower center index
            // because the sort key includes it.
            let mut by_dist: Vec<(f64, usize)> = centers
                .positions
                .iter()
                .enumerate()
                .map(|(i, c)| (dist3(pos, *c), i))
                .collect();
            by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            by_dist.truncate(k);

            let weights: Vec<f64> = by_dist.iter().map(|(d, _)| 1.0 / (d + epsilon)).collect();
            let total: f64 = weights.iter().sum();
            let mut feature = vec![0.0f64; dim];
            for ((_, idx), w) in by_dist.iter().zip(&weights) {
                let alpha = w / total;
                for (fj, cj) in feature.iter_mut().zip(&centers.features[*idx]) {
                    *fj += alpha * cj;
                }
            }
            out.push(Some(feature));
        }
    }
    Ok(out)
}

/// Packs per-pixel optional features into a [`FeatureGrid`].
///
/// `cells` must hold exactly `height * width` row-major entries, each `Some`
/// feature with dimension `dim`.  `None` entries become invalid zero cells.
pub fn project_to_plane(
    cells: &[Option<Vec<f64>>],
    height: usize,
    width: usize,
    dim: usize,
) -> Result<FeatureGrid> {
    if cells.len() != height * width {
        return Err(Error::DimMismatch {
            expected: height * width,
            got: cells.len(),
        });
    }
    let mut grid = FeatureGrid::zeros(height, width, dim);
    for (i, cell) in cells.iter().enumerate() {
        if let Some(f) = cell {
            grid.set_feature(i / width, i % width, f)?;
        }
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// linear layers and the fusion head
// ---------------------------------------------------------------------------

/// Dense layer `y = W x + b` with explicit forward/backward passes.
///
/// Weights are row-major (`out_dim` rows of `in_dim`).
#[derive(Debug, Clone)]
struct Linear {
    in_dim: usize,
    out_dim: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Linear {
    /// Uniform init in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]` from `rng`; biases
    /// start at zero.
    fn new_seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Linear {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &self.w[i * self.in_dim..(i + 1) * self.in_dim];
            for (wij, xj) in row.iter().zip(x) {
                *yi += wij * xj;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad[w_off..]` / `grad[b_off..]`
    /// and returns the gradient with respect to the input.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut [f64], w_off: usize, b_off: usize) -> Vec<f64> {
        let mut dx = vec![0.0f64; self.in_dim];
        for (i, dyi) in dy.iter().enumerate() {
            let row = &self.w[i * self.in_dim..(i + 1) * self.in_dim];
            for (j, (wij, xj)) in row.iter().zip(x).enumerate() {
                dx[j] += dyi * wij;
                grad[w_off + i * self.in_dim + j] += dyi * xj;
            }
            grad[b_off + i] += dyi;
        }
        dx
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Two-layer ReLU MLP: `z2 = W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

/// Intermediate activations kept for the backward pass of one tower.
struct TowerTape {
    x: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    norm: f64,
    h: Vec<f64>,
}

impl Mlp {
    fn new_seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let hidden = in_dim * HIDDEN_MULTIPLIER;
        Mlp {
            l1: Linear::new_seeded(in_dim, hidden, rng),
            l2: Linear::new_seeded(hidden, out_dim, rng),
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let z1 = self.l1.forward(x);
        let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let z2 = self.l2.forward(&a1);
        (z1, a1, z2)
    }
}

/// Output of one fusion-head forward pass.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    /// Unit-norm contrastive embedding of the image feature.
    pub h_rgb: Vec<f64>,
    /// Unit-norm contrastive embedding of the point feature.
    pub h_pc: Vec<f64>,
    /// Concatenated MLP outputs `[mlp_rgb(x_rgb), mlp_pc(x_pc)]`; this is the
    /// fused per-patch feature consumed downstream.
    pub fused: Vec<f64>,
}

/// Two-tower network aligning image and point features in a shared space.
///
/// Each modality runs through its own two-layer ReLU MLP (hidden width 4x the
/// input) whose output feeds two places: the concatenated *fused* feature,
/// and a linear projection that is L2-normalized into the contrastive
/// embedding.  Both projections share one output dimension so the two
/// embeddings are comparable.
#[derive(Debug, Clone)]
pub struct FusionHead {
    mlp_rgb: Mlp,
    mlp_pc: Mlp,
    proj_rgb: Linear,
    proj_pc: Linear,
    temperature: f64,
}

/// Floor for the embedding norm before division, so an exactly-zero
/// projection does not produce NaNs.
const NORM_FLOOR: f64 = 1e-12;

impl FusionHead {
    /// Builds a head with seeded uniform initialization.
    ///
    /// `rgb_dim` / `pc_dim` are the two input widths, `proj_dim` the shared
    /// embedding width.  The MLP output width equals its input width, so the
    /// fused feature has dimension `rgb_dim + pc_dim`.
    pub fn new(
        rgb_dim: usize,
        pc_dim: usize,
        proj_dim: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        if rgb_dim == 0 || pc_dim == 0 || proj_dim == 0 {
            return Err(Error::InvalidConfig(
                "fusion head dimensions must all be >= 1".into(),
            ));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be a positive finite number, got {temperature}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(role_seed(seed, "fusion-init"));
        Ok(FusionHead {
            mlp_rgb: Mlp::new_seeded(rgb_dim, rgb_dim, &mut rng),
            mlp_pc: Mlp::new_seeded(pc_dim, pc_dim, &mut rng),
            proj_rgb: Linear::new_seeded(rgb_dim, proj_dim, &mut rng),
            proj_pc: Linear::new_seeded(pc_dim, proj_dim, &mut rng),
            temperature,
        })
    }

    pub fn rgb_dim(&self) -> usize {
        self.mlp_rgb.l1.in_dim
    }

    pub fn pc_dim(&self) -> usize {
        self.mlp_pc.l1.in_dim
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_rgb.out_dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Dimension of the fused (concatenated) feature.
    pub fn fused_dim(&self) -> usize {
        self.mlp_rgb.l2.out_dim + self.mlp_pc.l2.out_dim
    }

    fn tower_forward(mlp: &Mlp, proj: &Linear, x: &[f64]) -> TowerTape {
        let (z1, a1, z2) = mlp.forward(x);
        let p = proj.forward(&z2);
        let norm = l2_norm(&p).max(NORM_FLOOR);
        let h = p.iter().map(|v| v / norm).collect();
        TowerTape {
            x: x.to_vec(),
            z1,
            a1,
            z2,
            norm,
            h,
        }
    }

    /// Runs both towers on one feature pair.
    pub fn forward(&self, rgb: &[f64], pc: &[f64]) -> Result<FusedFeatures> {
        if rgb.len() != self.rgb_dim() {
            return Err(Error::DimMismatch {
                expected: self.rgb_dim(),
                got: rgb.len(),
            });
        }
        if pc.len() != self.pc_dim() {
            return Err(Error::DimMismatch {
                expected: self.pc_dim(),
                got: pc.len(),
            });
        }
        let tr = Self::tower_forward(&self.mlp_rgb, &self.proj_rgb, rgb);
        let tp = Self::tower_forward(&self.mlp_pc, &self.proj_pc, pc);
        let mut fused = tr.z2.clone();
        fused.extend_from_slice(&tp.z2);
        Ok(FusedFeatures {
            h_rgb: tr.h,
            h_pc: tp.h,
            fused,
        })
    }

    /// Layers in canonical parameter order.
    fn layers(&self) -> [&Linear; 6] {
        [
            &self.mlp_rgb.l1,
            &self.mlp_rgb.l2,
            &self.proj_rgb,
            &self.mlp_pc.l1,
            &self.mlp_pc.l2,
            &self.proj_pc,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.mlp_rgb.l1,
            &mut self.mlp_rgb.l2,
            &mut self.proj_rgb,
            &mut self.mlp_pc.l1,
            &mut self.mlp_pc.l2,
            &mut self.proj_pc,
        ]
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// Flattens every layer's weights then biases, in a fixed layer order.
    /// [`set_params_flat`](Self::set_params_flat) reads the same layout, and
    /// the gradient from [`loss_and_grad`] is indexed identically.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in
    /// [`params_flat`](Self::params_flat) order.
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut off = 0;
        for layer in self.layers_mut() {
            let w_len = layer.w.len();
            layer.w.copy_from_slice(&params[off..off + w_len]);
            off += w_len;
            let b_len = layer.b.len();
            layer.b.copy_from_slice(&params[off..off + b_len]);
            off += b_len;
        }
        Ok(())
    }

    /// Serializes the head: a layer manifest (in/out widths in parameter
    /// order) followed by one f32 blob of all parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(HEAD_MAGIC);
        w.u32(self.rgb_dim() as u32);
        w.u32(self.pc_dim() as u32);
        w.u32(self.proj_dim() as u32);
        w.f32_blob(&[self.temperature]);
        let layers = self.layers();
        w.u16(layers.len() as u16);
        for layer in layers {
            w.u32(layer.in_dim as u32);
            w.u32(layer.out_dim as u32);
        }
        w.f32_blob(&self.params_flat());
        w.into_bytes()
    }

    /// Decodes a head written by [`to_bytes`](Self::to_bytes).  `origin` is
    /// only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: impl AsRef<Path>) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin.as_ref());
        r.magic(HEAD_MAGIC)?;
        r.version()?;
        let rgb_dim = r.u32("rgb dim")? as usize;
        let pc_dim = r.u32("pc dim")? as usize;
        let proj_dim = r.u32("proj dim")? as usize;
        let temperature = r.f32_blob(1, "temperature")?[0];
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(r.malformed(format!("non-positive temperature {temperature}")));
        }
        if rgb_dim == 0 || pc_dim == 0 || proj_dim == 0 {
            return Err(r.malformed("zero layer dimension in header"));
        }
        let mut head = FusionHead::new(rgb_dim, pc_dim, proj_dim, temperature, 0)?;
        let declared = r.u16("layer count")? as usize;
        let layers = head.layers();
        if declared != layers.len() {
            return Err(r.malformed(format!(
                "expected {} layers, header declares {declared}",
                layers.len()
            )));
        }
        for layer in layers {
            let in_dim = r.u32("layer in dim")? as usize;
            let out_dim = r.u32("layer out dim")? as usize;
            if in_dim != layer.in_dim || out_dim != layer.out_dim {
                return Err(r.malformed(format!(
                    "layer shape {in_dim}x{out_dim} does not match head dimensions \
                     ({}x{} expected)",
                    layer.in_dim, layer.out_dim
                )));
            }
        }
        let params = r.f32_blob(head.param_count(), "parameters")?;
        r.expect_end()?;
        head.set_params_flat(&params)?;
        Ok(head)
    }
}

/// Writes a fusion head to disk.
pub fn write_fusion_head(path: impl AsRef<Path>, head: &FusionHead) -> Result<()> {
    std::fs::write(path.as_ref(), head.to_bytes()).map_err(|e| Error::io(path.as_ref(), e))
}

/// Reads a fusion head from disk.
pub fn read_fusion_head(path: impl AsRef<Path>) -> Result<FusionHead> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    FusionHead::from_bytes(&bytes, path.as_ref())
}

// ---------------------------------------------------------------------------
// contrastive loss and gradient
// ---------------------------------------------------------------------------

/// Row-wise softmax cross-entropy against the diagonal, plus the softmax
/// matrix itself (needed by the backward pass).
fn softmax_ce_rows(logits: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len();
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(n);
    for (i, row) in logits.iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total -= (exps[i] / sum).ln();
        probs.push(exps.into_iter().map(|e| e / sum).collect());
    }
    (total / n as f64, probs)
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    (0..n).map(|j| (0..n).map(|i| m[i][j]).collect()).collect()
}

/// Symmetric contrastive loss over a batch of unit-norm embedding pairs.
///
/// With similarity logits `S[i][j] = (h_rgb_i . h_pc_j) / temperature`, the
/// loss averages the image-to-point and point-to-image softmax cross-entropy
/// terms, each of which treats the diagonal as the positive match.  When every
/// logit is identical the softmax is uniform and the loss equals `ln B` for a
/// batch of `B` pairs.
pub fn infonce_loss(h_rgb: &[Vec<f64>], h_pc: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if h_rgb.len() != h_pc.len() {
        return Err(Error::DimMismatch {
            expected: h_rgb.len(),
            got: h_pc.len(),
        });
    }
    if h_rgb.len() < 2 {
        return Err(Error::InsufficientData(
            "contrastive loss needs at least 2 pairs".into(),
        ));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "temperature must be a positive finite number, got {temperature}"
        )));
    }
    let n = h_rgb.len();
    let mut logits = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = h_rgb[i].iter().zip(&h_pc[j]).map(|(a, b)| a * b).sum();
            logits[i][j] = dot / temperature;
        }
    }
    let (row_loss, _) = softmax_ce_rows(&logits);
    let (col_loss, _) = softmax_ce_rows(&transpose(&logits));
    Ok(0.5 * (row_loss + col_loss))
}

/// One tower's backward pass from the gradient on its unit embedding.
fn tower_backward(
    mlp: &Mlp,
    proj: &Linear,
    tape: &TowerTape,
    dh: &[f64],
    grad: &mut [f64],
    offsets: &[usize; 6],
) {
    // d/dp of h = p / ||p|| : project out the radial component, divide by the norm.
    let radial: f64 = tape.h.iter().zip(dh).map(|(h, d)| h * d).sum();
    let dp: Vec<f64> = dh
        .iter()
        .zip(&tape.h)
        .map(|(d, h)| (d - h * radial) / tape.norm)
        .collect();
    let dz2 = proj.backward(&tape.z2, &dp, grad, offsets[4], offsets[5]);
    let da1 = mlp.l2.backward(&tape.a1, &dz2, grad, offsets[2], offsets[3]);
    let dz1: Vec<f64> = da1
        .iter()
        .zip(&tape.z1)
        .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
        .collect();
    mlp.l1.backward(&tape.x, &dz1, grad, offsets[0], offsets[1]);
}

/// Contrastive loss and its analytic gradient over a feature batch.
///
/// `rgb` / `pc` are raw (pre-head) feature pairs; index `i` of one slice is
/// the positive match of index `i` in the other.  Returns the loss and a
/// gradient vector indexed exactly like
/// [`FusionHead::params_flat`], which is what makes the head directly
/// checkable against central finite differences.
pub fn loss_and_grad(head: &FusionHead, rgb: &[Vec<f64>], pc: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if rgb.len() != pc.len() {
        return Err(Error::DimMismatch {
            expected: rgb.len(),
            got: pc.len(),
        });
    }
    if rgb.len() < 2 {
        return Err(Error::InsufficientData(
            "contrastive loss needs at least 2 pairs".into(),
        ));
    }
    let n = rgb.len();
    let mut tapes_rgb = Vec::with_capacity(n);
    let mut tapes_pc = Vec::with_capacity(n);
    for (r, p) in rgb.iter().zip(pc) {
        if r.len() != head.rgb_dim() {
            return Err(Error::DimMismatch {
                expected: head.rgb_dim(),
                got: r.len(),
            });
        }
        if p.len() != head.pc_dim() {
            return Err(Error::DimMismatch {
                expected: head.pc_dim(),
                got: p.len(),
            });
        }
        tapes_rgb.push(FusionHead::tower_forward(&head.mlp_rgb, &head.proj_rgb, r));
        tapes_pc.push(FusionHead::tower_forward(&head.mlp_pc, &head.proj_pc, p));
    }

    let mut logits = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = tapes_rgb[i].h.iter().zip(&tapes_pc[j].h).map(|(a, b)| a * b).sum();
            logits[i][j] = dot / head.temperature;
        }
    }
    let (row_loss, row_probs) = softmax_ce_rows(&logits);
    let (col_loss, col_probs_t) = softmax_ce_rows(&transpose(&logits));
    let col_probs = transpose(&col_probs_t);
    let loss = 0.5 * (row_loss + col_loss);

    // dL/dS[i][j]: each cross-entropy term contributes (softmax - identity),
    // averaged over its n rows, and the two terms are averaged again.
    let scale = 1.0 / (2.0 * n as f64);
    let mut dlogits = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 2.0 } else { 0.0 };
            dlogits[i][j] = scale * (row_probs[i][j] + col_probs[i][j] - target);
        }
    }

    // Per-layer (weight, bias) offsets into the flat gradient, in the same
    // order as params_flat.
    let mut offsets = [[0usize; 6]; 2];
    {
        let layers = head.layers();
        let mut off = 0;
        let mut flat = [0usize; 12];
        for (l, layer) in layers.iter().enumerate() {
            flat[2 * l] = off;
            off += layer.w.len();
            flat[2 * l + 1] = off;
            off += layer.b.len();
        }
        offsets[0] = [flat[0], flat[1], flat[2], flat[3], flat[4], flat[5]];
        offsets[1] = [flat[6], flat[7], flat[8], flat[9], flat[10], flat[11]];
    }

    let mut grad = vec![0.0f64; head.param_count()];
    let proj_dim = head.proj_dim();
    for i in 0..n {
        let mut dh_rgb = vec![0.0f64; proj_dim];
        for j in 0..n {
            let c = dlogits[i][j] / head.temperature;
            for (d, hj) in dh_rgb.iter_mut().zip(&tapes_pc[j].h) {
                *d += c * hj;
            }
        }
        tower_backward(
            &head.mlp_rgb,
            &head.proj_rgb,
            &tapes_rgb[i],
            &dh_rgb,
            &mut grad,
            &offsets[0],
        );
    }
    for j in 0..n {
        let mut dh_pc = vec![0.0f64; proj_dim];
        for i in 0..n {
            let c = dlogits[i][j] / head.temperature;
            for (d, hi) in dh_pc.iter_mut().zip(&tapes_rgb[i].h) {
                *d += c * hi;
            }
        }
        tower_backward(
            &head.mlp_pc,
            &head.proj_pc,
            &tapes_pc[j],
            &dh_pc,
            &mut grad,
            &offsets[1],
        );
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// Hyperparameters for fusion-head training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak Adam learning rate (zero is allowed and leaves the head at its
    /// initialization, which is useful for ablations).
    pub learning_rate: f64,
    /// Steps of linear learning-rate ramp from zero to the peak.
    pub warmup_steps: usize,
    /// Total optimization steps, including warmup.
    pub total_steps: usize,
    /// Pairs per mini-batch (also the size of the held-out split).
    pub batch_size: usize,
    /// Seed for initialization, the held-out split, and batch sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.003,
            warmup_steps: 250,
            total_steps: 750,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::InvalidConfig("warmup_steps must be >= 1".into()));
        }
        if self.total_steps < self.warmup_steps {
            return Err(Error::InvalidConfig(format!(
                "total_steps ({}) must be >= warmup_steps ({})",
                self.total_steps, self.warmup_steps
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 2 for the contrastive loss".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based): linear warmup to the peak, then
    /// cosine decay to zero over the remaining steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let tail = self.total_steps - self.warmup_steps;
        if tail == 0 {
            return self.learning_rate;
        }
        let t = (step - self.warmup_steps) as f64 / tail as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// What training observed, for logging and regression checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Contrastive loss on the held-out split before the first step.
    pub initial_held_out_loss: f64,
    /// Contrastive loss on the held-out split after the last step.
    pub final_held_out_loss: f64,
    /// Optimization steps actually run.
    pub steps_run: usize,
    /// Pairs used for optimization (total minus the held-out split).
    pub train_pairs: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

/// Trains a [`FusionHead`] on aligned feature pairs with Adam.
///
/// A seeded shuffle reserves `batch_size` pairs as a held-out split for the
/// before/after loss in the report; every step then samples a fresh batch
/// from the remainder.  The projection width is the smaller of the two input
/// widths.  Training fails with a numeric error if the loss ever becomes
/// non-finite.  Identical inputs, config, and seed reproduce the head
/// bit-for-bit.
pub fn train_uff(
    rgb: &[Vec<f64>],
    pc: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<(FusionHead, TrainReport)> {
    config.validate()?;
    if rgb.len() != pc.len() {
        return Err(Error::DimMismatch {
            expected: rgb.len(),
            got: pc.len(),
        });
    }
    if rgb.len() < 2 * config.batch_size {
        return Err(Error::InsufficientData(format!(
            "need at least {} pairs (2 x batch_size) to train, got {}",
            2 * config.batch_size,
            rgb.len()
        )));
    }
    let rgb_dim = rgb[0].len();
    let pc_dim = pc[0].len();
    for f in rgb {
        if f.len() != rgb_dim {
            return Err(Error::DimMismatch {
                expected: rgb_dim,
                got: f.len(),
            });
        }
    }
    for f in pc {
        if f.len() != pc_dim {
            return Err(Error::DimMismatch {
                expected: pc_dim,
                got: f.len(),
            });
        }
    }

    let mut head = FusionHead::new(
        rgb_dim,
        pc_dim,
        rgb_dim.min(pc_dim),
        DEFAULT_TEMPERATURE,
        config.seed,
    )?;

    let mut rng = ChaCha12Rng::seed_from_u64(role_seed(config.seed, "fusion-train"));
    let mut order: Vec<usize> = (0..rgb.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let (held_out, pool) = order.split_at(config.batch_size);

    let gather = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            idx.iter().map(|i| rgb[*i].clone()).collect(),
            idx.iter().map(|i| pc[*i].clone()).collect(),
        )
    };
    let (ho_rgb, ho_pc) = gather(held_out);
    let eval_held_out = |head: &FusionHead| -> Result<f64> {
        let mut hr = Vec::with_capacity(ho_rgb.len());
        let mut hp = Vec::with_capacity(ho_pc.len());
        for (r, p) in ho_rgb.iter().zip(&ho_pc) {
            let out = head.forward(r, p)?;
            hr.push(out.h_rgb);
            hp.push(out.h_pc);
        }
        infonce_loss(&hr, &hp, head.temperature)
    };
    let initial_held_out_loss = eval_held_out(&head)?;

    let mut params = head.params_flat();
    let mut m = vec![0.0f64; params.len()];
    let mut v = vec![0.0f64; params.len()];
    for step in 0..config.total_steps {
        let picks = rand::seq::index::sample(&mut rng, pool.len(), config.batch_size);
        let batch: Vec<usize> = picks.iter().map(|i| pool[i]).collect();
        let (b_rgb, b_pc) = gather(&batch);
        let (loss, grad) = loss_and_grad(&head, &b_rgb, &b_pc)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss became non-finite at step {step}"
            )));
        }
        let lr = config.lr_at(step);
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32 + 1);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32 + 1);
        for i in 0..params.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
        head.set_params_flat(&params)?;
    }
    let final_held_out_loss = eval_held_out(&head)?;
    if !final_held_out_loss.is_finite() {
        return Err(Error::Numeric(
            "held-out loss became non-finite after training".into(),
        ));
    }

    Ok((
        head,
        TrainReport {
            initial_held_out_loss,
            final_held_out_loss,
            steps_run: config.total_steps,
            train_pairs: pool.len(),
        },
    ))
}
