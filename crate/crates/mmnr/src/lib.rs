//! Noise-resistant multimodal (RGB + point cloud) industrial anomaly
//! detection.
//!
//! The pipeline detects defects from feature bundles — aligned RGB and
//! point-cloud patch features plus the organized cloud itself — while
//! tolerating anomalous samples hidden inside the nominally-normal training
//! set. It runs in three stages:
//!
//! 1. **Reference selection** ([`stage1`]): text-prototype zero-shot scores
//!    pick the most trustworthy training samples per class as intra-modal
//!    references and compute suspected-anomaly weight maps for them.
//! 2. **Denoising** ([`stage2`]): every training sample is compared to the
//!    references with multi-scale window features; the highest-scoring
//!    fraction is dropped from training.
//! 3. **Detection** ([`fusion`], [`coreset`], [`decision`]): point features
//!    are aligned to the pixel grid, a contrastively-trained fusion head
//!    combines the modalities, outlier-weighted coreset memory banks are
//!    built from the denoised training set, and one-class SVMs fuse the
//!    per-bank distances into image- and pixel-level anomaly scores.
//!
//! Supporting modules: [`tensor`] (dense containers and similarity
//! primitives), [`bundle`] (binary serialization), [`manifest`] +
//! [`synth`] (datasets), [`preprocess`] (plane removal, resizing),
//! [`patching`] + [`encoders`] (multi-scale windows and the deterministic
//! toy encoder), [`metrics`] (AUROC / AUPRO), and [`pipeline`] (end-to-end
//! orchestration behind the CLI).

pub mod bundle;
pub mod coreset;
pub mod decision;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod manifest;
pub mod metrics;
pub mod patching;
pub mod pipeline;
pub mod preprocess;
pub mod stage1;
pub mod stage2;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
