//! End-to-end orchestration: dataset intake, reference selection, training-set
//! denoising, fusion training, memory-bank construction, inference, and
//! evaluation.
//!
//! A run is driven by a [`PipelineConfig`] (a TOML document with one table per
//! stage; every default is the standard setting, so a bare config reproduces
//! the reference behavior). [`run_pipeline`] executes all phases;
//! [`run_to_phase`] stops after any prefix, which is what the per-stage CLI
//! subcommands use. Every intermediate artifact lands in a run directory named
//! by a hash of the resolved config:
//!
//! ```text
//! runs/run-<hash>/
//!   config.toml      resolved configuration
//!   stage1.json      per-class zero-shot scores and chosen references
//!   stage2.json      per-class denoising reports
//!   head/            fusion heads (+ training summaries)
//!   banks/           memory banks and decision SVMs
//!   scores/          per-class sample-level test scores
//!   maps/            per-sample pixel score maps
//!   eval.json        the final run report
//!   hashes.json      sha-256 of every other artifact
//! ```
//!
//! Runs are deterministic: the same config and dataset produce byte-identical
//! artifacts, which `hashes.json` makes cheap to check. Training never reads
//! ground-truth labels or masks from training bundles — those exist for
//! evaluation only — so stripping them changes nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::bundle::{read_bundle, write_map, FeatureBundle, Label, VectorSet};
use crate::coreset::{build_bank, write_bank, DEFAULT_CORESET_FRACTION, DEFAULT_LOF_K};
use crate::decision::{
    bank_triples, decide, train_ocsvm, BankSet, Ocsvm, DEFAULT_NU, DEFAULT_OCSVM_LR,
    DEFAULT_OCSVM_STEPS,
};
use crate::encoders::{encode_point_patch, role_seed, EncoderConfig, EncoderKind, TextPrototypes};
use crate::error::{Error, Result};
use crate::fusion::{
    farthest_point_sample, interpolate_point_features, project_to_plane, train_uff,
    write_fusion_head, CenterFeatures, TrainConfig, DEFAULT_INTERP_EPSILON,
};
use crate::manifest::{inject_noise, DatasetManifest, NoiseProtocol};
use crate::metrics::{aupro, auroc, pixel_auroc, EvalResult, DEFAULT_FPR_LIMIT};
use crate::patching::{build_masks, default_kernel_m, default_kernel_s, default_stride, MaskSets};
use crate::stage1::{score_samples, select_references, SuspectScore, DEFAULT_REFERENCE_COUNT};
use crate::stage2::{denoise, DenoiseReport, DEFAULT_LAMBDA_IMAGE, DEFAULT_LAMBDA_POINT};
use crate::synth::proto_file_name;
use crate::tensor::{FeatureGrid, ScoreGrid};

/// Occupancy threshold θ: observation windows keep a point patch only when
/// more than this many valid points fall inside.
pub const DEFAULT_THETA: usize = 128;

/// Fraction of suspect-ranked training samples the denoiser removes.
pub const DEFAULT_DENOISE_TAU: f64 = 0.1;

/// Farthest-point centers sampled per cloud (clamped to the valid-point
/// count of small clouds).
pub const DEFAULT_FPS_CENTERS: usize = 64;

/// Points grouped around each sampled center for patch encoding.
pub const DEFAULT_GROUP_SIZE: usize = 32;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Reference selection and training-set denoising parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    /// Master switch; when off, the noisy training set is used as-is.
    pub enabled: bool,
    /// Number of reference samples selected per class.
    pub n_refs: usize,
    /// Window occupancy threshold θ for point patches.
    pub theta: usize,
    /// Image-modality weight λ_I in the removal score.
    pub lambda_image: f64,
    /// Point-modality weight λ_P in the removal score.
    pub lambda_point: f64,
    /// Fraction of training samples removed (`⌈τ·M⌉` highest-scoring).
    pub tau: f64,
    /// Medium window side; 0 derives it from the grid height.
    pub kernel_m: usize,
    /// Small window side; 0 derives it from the grid height.
    pub kernel_s: usize,
    /// Window stride; 0 derives it from the small kernel.
    pub stride: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            enabled: true,
            n_refs: DEFAULT_REFERENCE_COUNT,
            theta: DEFAULT_THETA,
            lambda_image: DEFAULT_LAMBDA_IMAGE,
            lambda_point: DEFAULT_LAMBDA_POINT,
            tau: DEFAULT_DENOISE_TAU,
            kernel_m: 0,
            kernel_s: 0,
            stride: 0,
        }
    }
}

/// Fusion-head training plus the point-feature extraction that feeds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Farthest-point centers per sample cloud.
    pub fps_centers: usize,
    /// Nearest points encoded around each center.
    pub group_size: usize,
    /// Inverse-distance weighting offset for feature interpolation.
    pub interp_epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        FusionConfig {
            learning_rate: t.learning_rate,
            warmup_steps: t.warmup_steps,
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            fps_centers: DEFAULT_FPS_CENTERS,
            group_size: DEFAULT_GROUP_SIZE,
            interp_epsilon: DEFAULT_INTERP_EPSILON,
        }
    }
}

/// Memory-bank construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankConfig {
    /// Neighbor count for outlier scoring.
    pub lof_k: usize,
    /// Fraction of highest-η patches removed before coreset selection.
    pub patch_tau: f64,
    /// Coreset fraction of the surviving patches.
    pub fraction: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            lof_k: DEFAULT_LOF_K,
            patch_tau: 0.1,
            fraction: DEFAULT_CORESET_FRACTION,
        }
    }
}

/// Decision-layer SVM training parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub nu: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            nu: DEFAULT_NU,
            learning_rate: DEFAULT_OCSVM_LR,
            steps: DEFAULT_OCSVM_STEPS,
        }
    }
}

/// Evaluation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// False-positive-rate cap of the region-overlap curve integral.
    pub fpr_limit: f64,
    /// Apply a 3×3 mean filter to pixel score maps before writing them.
    pub smooth_pixels: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            fpr_limit: DEFAULT_FPR_LIMIT,
            smooth_pixels: true,
        }
    }
}

/// Full pipeline configuration; the TOML document mirrors this struct with
/// one table per stage. Every field has a default, so a partial document
/// (or an empty one) is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Dataset root: one directory per class with `train.json`/`test.json`.
    pub data_dir: PathBuf,
    /// Parent directory for run outputs.
    pub runs_dir: PathBuf,
    /// Classes to process; empty means every class found under `data_dir`.
    pub classes: Vec<String>,
    /// Training-set contamination protocol.
    pub noise: NoiseProtocol,
    /// Encoder used to re-encode point windows during denoising.
    pub encoder_stage12: EncoderConfig,
    /// Encoder used for center-group features in the fusion stage.
    pub encoder_stage3: EncoderConfig,
    pub denoise: DenoiseConfig,
    pub fusion: FusionConfig,
    pub bank: BankConfig,
    pub svm: SvmConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            runs_dir: PathBuf::from("runs"),
            classes: Vec::new(),
            noise: NoiseProtocol::Clean,
            encoder_stage12: EncoderConfig {
                dim: 16,
                seed: 0,
                kind: EncoderKind::Toy,
            },
            encoder_stage3: EncoderConfig {
                dim: 16,
                seed: 1,
                kind: EncoderKind::Toy,
            },
            denoise: DenoiseConfig::default(),
            fusion: FusionConfig::default(),
            bank: BankConfig::default(),
            svm: SvmConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML config document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Loads and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Serializes back to TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("config serialization failed: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_stage12.validate()?;
        self.encoder_stage3.validate()?;
        if self.classes.iter().any(|c| c.is_empty()) {
            return Err(Error::InvalidConfig("class names must be non-empty".into()));
        }
        let d = &self.denoise;
        if d.n_refs == 0 {
            return Err(Error::InvalidConfig("n_refs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&d.tau) {
            return Err(Error::InvalidConfig(format!(
                "denoise tau must be in [0, 1), got {}",
                d.tau
            )));
        }
        for (name, l) in [("lambda_image", d.lambda_image), ("lambda_point", d.lambda_point)] {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {l}"
                )));
            }
        }
        let f = &self.fusion;
        if f.fps_centers == 0 || f.group_size == 0 {
            return Err(Error::InvalidConfig(
                "fps_centers and group_size must be >= 1".into(),
            ));
        }
        if !(f.interp_epsilon > 0.0) || !f.interp_epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "interp_epsilon must be a positive finite number, got {}",
                f.interp_epsilon
            )));
        }
        // The remaining fusion fields are checked by the training config.
        self.train_config(0).validate()?;
        let b = &self.bank;
        if b.lof_k == 0 {
            return Err(Error::InvalidConfig("lof_k must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&b.patch_tau) {
            return Err(Error::InvalidConfig(format!(
                "patch_tau must be in [0, 1), got {}",
                b.patch_tau
            )));
        }
        if !(b.fraction > 0.0 && b.fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "coreset fraction must be in (0, 1], got {}",
                b.fraction
            )));
        }
        let s = &self.svm;
        if !(s.nu > 0.0 && s.nu <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "svm nu must be in (0, 1], got {}",
                s.nu
            )));
        }
        if s.steps == 0 {
            return Err(Error::InvalidConfig("svm steps must be >= 1".into()));
        }
        let m = &self.metrics;
        if !(m.fpr_limit > 0.0 && m.fpr_limit <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "fpr_limit must be in (0, 1], got {}",
                m.fpr_limit
            )));
        }
        Ok(())
    }

    /// Fusion training schedule with the given seed.
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.fusion.learning_rate,
            warmup_steps: self.fusion.warmup_steps,
            total_steps: self.fusion.total_steps,
            batch_size: self.fusion.batch_size,
            seed,
        }
    }
}

/// First 12 hex digits of the sha-256 of the canonical (JSON) config
/// serialization; names the run directory.
pub fn config_hash(config: &PipelineConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(12);
    for byte in digest.iter().take(6) {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

// ---------------------------------------------------------------------------
// run phases and reports
// ---------------------------------------------------------------------------

/// How far through the pipeline a run executes. Phases are ordered; each
/// includes all earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    /// Zero-shot scoring and reference selection.
    Stage1,
    /// Training-set denoising.
    Stage2,
    /// Fusion-head training.
    TrainUff,
    /// Memory banks and decision SVMs.
    BuildBanks,
    /// Test-set scoring.
    Infer,
    /// Metric computation.
    Evaluate,
}

/// Per-class slice of the final report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_name: String,
    pub eval: EvalResult,
    /// Residual contamination: retained injected samples over retained
    /// training-set size.
    pub noise_level: f64,
    /// Samples injected into the training set by the noise protocol.
    pub injected_train: usize,
    /// Samples the denoiser removed.
    pub removed_train: usize,
    /// Training samples that survived denoising.
    pub kept_train: usize,
}

/// The run-level evaluation summary written to `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub classes: Vec<ClassReport>,
    pub mean_i_auroc: f64,
    pub mean_p_auroc: f64,
    pub mean_aupro: f64,
    pub mean_noise_level: f64,
}

/// What a run produced: where it lives, the report (when evaluation ran),
/// and the content hash of every artifact.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: Option<RunReport>,
    /// Relative artifact path → sha-256 hex digest.
    pub hashes: BTreeMap<String, String>,
}

/// `stage1.json` entry for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub scores: Vec<SuspectScore>,
    pub reference_ids: Vec<String>,
}

/// `banks/<class>_svm.json`: the two trained decision SVMs.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SvmPair {
    image: Ocsvm,
    pixel: Ocsvm,
}

/// `scores/<class>.json` entry for one test sample. The label is copied from
/// the test bundle for evaluation; it is never an input to scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScoreRecord {
    sample_id: String,
    label: Label,
    s_image: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassScores {
    samples: Vec<ScoreRecord>,
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn tag<T>(result: Result<T>, stage: &'static str, class: &str) -> Result<T> {
    result.map_err(|e| e.in_stage(stage, class))
}

/// Classes to process: the configured list, or every `data_dir` subdirectory
/// holding both manifests, sorted by name.
fn discover_classes(config: &PipelineConfig) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    if config.classes.is_empty() {
        let entries = fs::read_dir(&config.data_dir).map_err(|e| Error::io(&config.data_dir, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&config.data_dir, e))?;
            let path = entry.path();
            if path.is_dir() && path.join("train.json").is_file() && path.join("test.json").is_file()
            {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        found = names
            .into_iter()
            .map(|n| (n.clone(), config.data_dir.join(n)))
            .collect();
    } else {
        for name in &config.classes {
            let dir = config.data_dir.join(name);
            if !dir.join("train.json").is_file() || !dir.join("test.json").is_file() {
                return Err(Error::InsufficientData(format!(
                    "class {name}: no manifests under {}",
                    dir.display()
                )));
            }
            found.push((name.clone(), dir));
        }
    }
    if found.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no class directories with manifests under {}",
            config.data_dir.display()
        )));
    }
    Ok(found)
}

fn load_bundles(class_dir: &Path, manifest: &DatasetManifest) -> Result<Vec<FeatureBundle>> {
    let paths = manifest.resolve(class_dir);
    if paths.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{}: manifest lists no samples",
            manifest.class_name
        )));
    }
    paths.par_iter().map(|p| read_bundle(p)).collect()
}

fn load_prototypes(class_dir: &Path) -> Result<(TextPrototypes, TextPrototypes)> {
    let image = TextPrototypes::from_vector_set(&VectorSet::read(
        &class_dir.join(proto_file_name("image")),
    )?)?;
    let point = TextPrototypes::from_vector_set(&VectorSet::read(
        &class_dir.join(proto_file_name("point")),
    )?)?;
    Ok((image, point))
}

fn masks_for(config: &DenoiseConfig, h: usize, w: usize) -> Result<MaskSets> {
    let k_m = if config.kernel_m == 0 {
        default_kernel_m(h)
    } else {
        config.kernel_m
    };
    let k_s = if config.kernel_s == 0 {
        default_kernel_s(h)
    } else {
        config.kernel_s
    };
    let stride = if config.stride == 0 {
        default_stride(k_s)
    } else {
        config.stride
    };
    build_masks(h, w, k_m, k_s, stride)
}

/// Per-cloud point features for the fusion stage: farthest-point centers,
/// a patch feature per center from its nearest `group_size` points, spread
/// back over the cloud by inverse-distance interpolation and packed into a
/// grid aligned with the image features.
pub fn stage3_point_grid(
    bundle: &FeatureBundle,
    fusion: &FusionConfig,
    encoder: &EncoderConfig,
) -> Result<FeatureGrid> {
    let points: Vec<[f64; 3]> = bundle.cloud.iter_valid().map(|(_, _, p)| p).collect();
    if points.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{}: cloud has no valid points",
            bundle.sample_id
        )));
    }
    let count = fusion.fps_centers.min(points.len());
    let centers_idx = farthest_point_sample(&points, count)?;

    let mut center_positions = Vec::with_capacity(count);
    let mut center_features = Vec::with_capacity(count);
    for &ci in &centers_idx {
        let center = points[ci];
        // Nearest `group_size` points to this center, ties toward the lower
        // point index.
        let mut by_dist: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = (p[0] - center[0]).powi(2)
                    + (p[1] - center[1]).powi(2)
                    + (p[2] - center[2]).powi(2);
                (d, i)
            })
            .collect();
        by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let group: Vec<[f64; 3]> = by_dist
            .iter()
            .take(fusion.group_size.min(points.len()))
            .map(|&(_, i)| points[i])
            .collect();
        center_positions.push(center);
        center_features.push(encode_point_patch(&group, encoder)?);
    }
    let centers = CenterFeatures::new(center_positions, center_features)?;
    let cells = interpolate_point_features(&bundle.cloud, &centers, fusion.interp_epsilon)?;
    project_to_plane(
        &cells,
        bundle.cloud.height(),
        bundle.cloud.width(),
        encoder.dim,
    )
}

/// Cell features present in both modalities, pooled over samples in input
/// order: `(rgb, point)` pairs.
fn paired_cells(bundles: &[&FeatureBundle], grids: &[FeatureGrid]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rgb = Vec::new();
    let mut point = Vec::new();
    for (bundle, grid) in bundles.iter().zip(grids) {
        for (u, v, f) in bundle.rgb.iter_valid() {
            if grid.is_valid(u, v) {
                rgb.push(f.to_vec());
                point.push(grid.feature(u, v).to_vec());
            }
        }
    }
    (rgb, point)
}

// ---------------------------------------------------------------------------
// the run itself
// ---------------------------------------------------------------------------

struct ClassArtifacts {
    stage1: Option<Stage1Record>,
    stage2: Option<DenoiseReport>,
}

/// Runs the full pipeline: every phase through evaluation.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutcome> {
    run_to_phase(config, Phase::Evaluate)
}

/// Runs the pipeline through `phase` (inclusive), writing the artifacts of
/// every completed phase into the run directory and refreshing
/// `hashes.json`. The report is `Some` only when evaluation ran.
pub fn run_to_phase(config: &PipelineConfig, phase: Phase) -> Result<RunOutcome> {
    config.validate()?;
    let run_dir = config.runs_dir.join(format!("run-{}", config_hash(config)));
    ensure_dir(&run_dir)?;
    let config_text = config.to_toml()?;
    fs::write(run_dir.join("config.toml"), config_text)
        .map_err(|e| Error::io(run_dir.join("config.toml"), e))?;

    let classes = discover_classes(config)?;
    let mut stage1_records = BTreeMap::new();
    let mut stage2_records = BTreeMap::new();
    for (class_name, class_dir) in &classes {
        let arts = run_class(config, phase, class_name, class_dir, &run_dir)?;
        if let Some(record) = arts.stage1 {
            stage1_records.insert(class_name.clone(), record);
        }
        if let Some(report) = arts.stage2 {
            stage2_records.insert(class_name.clone(), report);
        }
    }
    write_json(&run_dir.join("stage1.json"), &stage1_records)?;
    if phase >= Phase::Stage2 {
        write_json(&run_dir.join("stage2.json"), &stage2_records)?;
    }

    let report = if phase >= Phase::Evaluate {
        let report = evaluate_run(config, &run_dir)?;
        write_json(&run_dir.join("eval.json"), &report)?;
        Some(report)
    } else {
        None
    };

    let hashes = hash_run_dir(&run_dir)?;
    write_json(&run_dir.join("hashes.json"), &hashes)?;
    Ok(RunOutcome {
        run_dir,
        report,
        hashes,
    })
}

/// Evaluates an existing run directory (the `eval` subcommand): recomputes
/// metrics from the scored artifacts, rewrites `eval.json` and `hashes.json`.
pub fn evaluate_existing(config: &PipelineConfig) -> Result<RunOutcome> {
    config.validate()?;
    let run_dir = config.runs_dir.join(format!("run-{}", config_hash(config)));
    if !run_dir.is_dir() {
        return Err(Error::io(
            &run_dir,
            io::Error::new(
                io::ErrorKind::NotFound,
                "run directory not found; run the infer phase first",
            ),
        ));
    }
    let report = evaluate_run(config, &run_dir)?;
    write_json(&run_dir.join("eval.json"), &report)?;
    let hashes = hash_run_dir(&run_dir)?;
    write_json(&run_dir.join("hashes.json"), &hashes)?;
    Ok(RunOutcome {
        run_dir,
        report: Some(report),
        hashes,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_class(
    config: &PipelineConfig,
    phase: Phase,
    class_name: &str,
    class_dir: &Path,
    run_dir: &Path,
) -> Result<ClassArtifacts> {
    // Ingest: manifests, contamination, bundles, prototypes.
    let clean_train = tag(
        DatasetManifest::load(&class_dir.join("train.json")),
        "ingest",
        class_name,
    )?;
    let clean_test = tag(
        DatasetManifest::load(&class_dir.join("test.json")),
        "ingest",
        class_name,
    )?;
    let noise_seed = role_seed(config.seed, &format!("noise:{class_name}"));
    let (noisy_train, noisy_test) = tag(
        inject_noise(
            class_dir,
            &clean_train,
            &clean_test,
            config.noise.clone(),
            noise_seed,
        ),
        "ingest",
        class_name,
    )?;
    let train_bundles = tag(load_bundles(class_dir, &noisy_train), "ingest", class_name)?;
    let (image_protos, point_protos) = tag(load_prototypes(class_dir), "ingest", class_name)?;

    let mut arts = ClassArtifacts {
        stage1: None,
        stage2: None,
    };

    // Stages one and two: reference selection and denoising.
    let kept_indices: Vec<usize> = if config.denoise.enabled {
        let (h, w) = (train_bundles[0].rgb.height(), train_bundles[0].rgb.width());
        let masks = tag(masks_for(&config.denoise, h, w), "stage1", class_name)?;
        let scores = tag(
            score_samples(&train_bundles, &image_protos, &point_protos),
            "stage1",
            class_name,
        )?;
        let refs = tag(
            select_references(
                &train_bundles,
                &scores,
                config.denoise.n_refs,
                &image_protos,
                &masks,
                config.denoise.theta,
                &config.encoder_stage12,
            ),
            "stage1",
            class_name,
        )?;
        arts.stage1 = Some(Stage1Record {
            scores: scores.clone(),
            reference_ids: refs.refs.iter().map(|r| r.sample_id.clone()).collect(),
        });
        if phase == Phase::Stage1 {
            return Ok(arts);
        }

        let report = tag(
            denoise(
                &train_bundles,
                &refs,
                &scores,
                &masks,
                config.denoise.theta,
                &config.encoder_stage12,
                config.denoise.lambda_image,
                config.denoise.lambda_point,
                config.denoise.tau,
            ),
            "stage2",
            class_name,
        )?;
        let kept: BTreeSet<String> = report.kept_ids().into_iter().collect();
        arts.stage2 = Some(report);
        (0..train_bundles.len())
            .filter(|&i| kept.contains(&train_bundles[i].sample_id))
            .collect()
    } else {
        (0..train_bundles.len()).collect()
    };
    if phase <= Phase::Stage2 {
        return Ok(arts);
    }

    // Fusion: point features for the kept training samples, then the head.
    let kept_bundles: Vec<&FeatureBundle> = kept_indices.iter().map(|&i| &train_bundles[i]).collect();
    let train_grids: Vec<FeatureGrid> = tag(
        kept_bundles
            .par_iter()
            .map(|b| stage3_point_grid(b, &config.fusion, &config.encoder_stage3))
            .collect(),
        "fusion",
        class_name,
    )?;
    let (rgb_cells, point_cells) = paired_cells(&kept_bundles, &train_grids);
    let uff_seed = role_seed(config.seed, &format!("uff:{class_name}"));
    let (head, train_report) = tag(
        train_uff(&rgb_cells, &point_cells, &config.train_config(uff_seed)),
        "fusion",
        class_name,
    )?;
    let head_dir = run_dir.join("head");
    ensure_dir(&head_dir)?;
    write_fusion_head(head_dir.join(format!("{class_name}.mmnh")), &head)?;
    write_json(
        &head_dir.join(format!("{class_name}_train.json")),
        &train_report,
    )?;
    if phase == Phase::TrainUff {
        return Ok(arts);
    }

    // Banks over the pooled training cells, then the decision SVMs over the
    // per-sample score triples.
    let fused_cells: Vec<Vec<f64>> = tag(
        rgb_cells
            .par_iter()
            .zip(&point_cells)
            .map(|(r, p)| head.forward(r, p).map(|f| f.fused))
            .collect(),
        "banks",
        class_name,
    )?;
    let b = &config.bank;
    let banks = BankSet {
        image: tag(
            build_bank(&rgb_cells, b.lof_k, b.patch_tau, b.fraction),
            "banks",
            class_name,
        )?,
        point: tag(
            build_bank(&point_cells, b.lof_k, b.patch_tau, b.fraction),
            "banks",
            class_name,
        )?,
        fusion: tag(
            build_bank(&fused_cells, b.lof_k, b.patch_tau, b.fraction),
            "banks",
            class_name,
        )?,
    };
    let banks_dir = run_dir.join("banks");
    ensure_dir(&banks_dir)?;
    write_bank(banks_dir.join(format!("{class_name}_image.mmnb")), &banks.image)?;
    write_bank(banks_dir.join(format!("{class_name}_point.mmnb")), &banks.point)?;
    write_bank(banks_dir.join(format!("{class_name}_fusion.mmnb")), &banks.fusion)?;

    let mut phi_rows = Vec::with_capacity(kept_bundles.len());
    let mut psi_rows = Vec::new();
    for (bundle, grid) in kept_bundles.iter().zip(&train_grids) {
        let triples = tag(
            bank_triples(&bundle.rgb, grid, &banks, &head),
            "decision",
            class_name,
        )?;
        phi_rows.push(triples.phis);
        psi_rows.extend(triples.cell_psis.iter().map(|(_, _, p)| *p));
    }
    let svms = SvmPair {
        image: tag(
            train_ocsvm(
                &phi_rows,
                config.svm.nu,
                config.svm.learning_rate,
                config.svm.steps,
                role_seed(config.seed, &format!("svm-image:{class_name}")),
            ),
            "decision",
            class_name,
        )?,
        pixel: tag(
            train_ocsvm(
                &psi_rows,
                config.svm.nu,
                config.svm.learning_rate,
                config.svm.steps,
                role_seed(config.seed, &format!("svm-pixel:{class_name}")),
            ),
            "decision",
            class_name,
        )?,
    };
    write_json(&banks_dir.join(format!("{class_name}_svm.json")), &svms)?;
    if phase == Phase::BuildBanks {
        return Ok(arts);
    }

    // Inference over the (possibly still contaminated) test set.
    let test_bundles = tag(load_bundles(class_dir, &noisy_test), "infer", class_name)?;
    let test_grids: Vec<FeatureGrid> = tag(
        test_bundles
            .par_iter()
            .map(|b| stage3_point_grid(b, &config.fusion, &config.encoder_stage3))
            .collect(),
        "infer",
        class_name,
    )?;
    let maps_dir = run_dir.join("maps").join(class_name);
    ensure_dir(&maps_dir)?;
    let mut records = Vec::with_capacity(test_bundles.len());
    for (bundle, grid) in test_bundles.iter().zip(&test_grids) {
        let output = tag(
            decide(
                &bundle.rgb,
                grid,
                &banks,
                &head,
                &svms.image,
                &svms.pixel,
                config.metrics.smooth_pixels,
            ),
            "infer",
            class_name,
        )?;
        write_map(
            &maps_dir.join(format!("{}.mmnm", bundle.sample_id)),
            output.s_pixel.height(),
            output.s_pixel.width(),
            output.s_pixel.scores(),
        )?;
        records.push(ScoreRecord {
            sample_id: bundle.sample_id.clone(),
            label: bundle.label,
            s_image: output.s_image,
        });
    }
    let scores_dir = run_dir.join("scores");
    ensure_dir(&scores_dir)?;
    write_json(
        &scores_dir.join(format!("{class_name}.json")),
        &ClassScores { samples: records },
    )?;
    Ok(arts)
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Computes the run report from a run directory's scored artifacts plus the
/// dataset: sample-level ranking quality, pixel-level ranking quality, the
/// region-overlap curve area, and the residual training-set contamination.
pub fn evaluate_run(config: &PipelineConfig, run_dir: &Path) -> Result<RunReport> {
    let stage2_path = run_dir.join("stage2.json");
    let stage2_records: BTreeMap<String, DenoiseReport> = if stage2_path.is_file() {
        read_json(&stage2_path)?
    } else {
        BTreeMap::new()
    };

    let classes = discover_classes(config)?;
    let mut reports = Vec::with_capacity(classes.len());
    for (class_name, class_dir) in &classes {
        let report = tag(
            evaluate_class(
                config,
                run_dir,
                class_name,
                class_dir,
                stage2_records.get(class_name),
            ),
            "evaluate",
            class_name,
        )?;
        reports.push(report);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&ClassReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(RunReport {
        seed: config.seed,
        mean_i_auroc: mean(|r| r.eval.i_auroc),
        mean_p_auroc: mean(|r| r.eval.p_auroc),
        mean_aupro: mean(|r| r.eval.aupro),
        mean_noise_level: mean(|r| r.noise_level),
        classes: reports,
    })
}

fn evaluate_class(
    config: &PipelineConfig,
    run_dir: &Path,
    class_name: &str,
    class_dir: &Path,
    denoise_report: Option<&DenoiseReport>,
) -> Result<ClassReport> {
    let clean_train = DatasetManifest::load(&class_dir.join("train.json"))?;
    let clean_test = DatasetManifest::load(&class_dir.join("test.json"))?;
    let noise_seed = role_seed(config.seed, &format!("noise:{class_name}"));
    let (noisy_train, noisy_test) = inject_noise(
        class_dir,
        &clean_train,
        &clean_test,
        config.noise.clone(),
        noise_seed,
    )?;

    // Residual contamination of the retained training set. Injected samples
    // are identified by manifest paths, removals by the denoiser's ids; the
    // stage-2 report is aligned one-to-one with the noisy train manifest.
    let clean_set: BTreeSet<&String> = clean_train.samples.iter().collect();
    let injected: BTreeSet<&String> = noisy_train
        .samples
        .iter()
        .filter(|s| !clean_set.contains(s))
        .collect();
    let (kept_train, retained_injected, removed_train) = match denoise_report {
        Some(report) => {
            if report.samples.len() != noisy_train.samples.len() {
                return Err(Error::InvalidConfig(format!(
                    "stage2 report covers {} samples but the manifest lists {}",
                    report.samples.len(),
                    noisy_train.samples.len()
                )));
            }
            let removed: BTreeSet<&String> = report.removed_ids.iter().collect();
            let mut kept = 0usize;
            let mut retained = 0usize;
            for (path, sample) in noisy_train.samples.iter().zip(&report.samples) {
                if removed.contains(&sample.sample_id) {
                    continue;
                }
                kept += 1;
                if injected.contains(path) {
                    retained += 1;
                }
            }
            (kept, retained, removed.len())
        }
        None => (noisy_train.samples.len(), injected.len(), 0),
    };
    if kept_train == 0 {
        return Err(Error::InsufficientData(
            "denoising removed the entire training set".into(),
        ));
    }
    let noise_level = retained_injected as f64 / kept_train as f64;

    // Sample-level ranking quality from the score records.
    let scores: ClassScores = read_json(&run_dir.join("scores").join(format!("{class_name}.json")))?;
    if scores.samples.len() != noisy_test.samples.len() {
        return Err(Error::InvalidConfig(format!(
            "score file covers {} samples but the test manifest lists {}",
            scores.samples.len(),
            noisy_test.samples.len()
        )));
    }
    let s_image: Vec<f64> = scores.samples.iter().map(|r| r.s_image).collect();
    let labels: Vec<bool> = scores
        .samples
        .iter()
        .map(|r| r.label == Label::Anomalous)
        .collect();
    let i_auroc = auroc(&s_image, &labels)?;

    // Pixel-level metrics from the stored maps and ground-truth masks.
    let maps_dir = run_dir.join("maps").join(class_name);
    let mut grids = Vec::with_capacity(scores.samples.len());
    let mut masks = Vec::with_capacity(scores.samples.len());
    for (record, rel) in scores.samples.iter().zip(&noisy_test.samples) {
        let bundle = read_bundle(&class_dir.join(rel))?;
        if bundle.sample_id != record.sample_id {
            return Err(Error::InvalidConfig(format!(
                "score/manifest misalignment: {} vs {}",
                record.sample_id, bundle.sample_id
            )));
        }
        let (h, w, raw) = crate::bundle::read_map(&maps_dir.join(format!("{}.mmnm", record.sample_id)))?;
        let grid = ScoreGrid::from_scores(h, w, raw)?;
        let mask = match bundle.gt_mask {
            Some(mask) => {
                if mask.len() != h * w {
                    return Err(Error::DimMismatch {
                        expected: h * w,
                        got: mask.len(),
                    });
                }
                mask
            }
            None => vec![false; h * w],
        };
        grids.push(grid);
        masks.push(mask);
    }
    let samples: Vec<(&ScoreGrid, &[bool])> = grids
        .iter()
        .zip(&masks)
        .map(|(g, m)| (g, m.as_slice()))
        .collect();
    let p_auroc = pixel_auroc(&samples)?;
    let aupro_value = aupro(&samples, config.metrics.fpr_limit)?;

    Ok(ClassReport {
        class_name: class_name.to_string(),
        eval: EvalResult {
            i_auroc,
            p_auroc,
            aupro: aupro_value,
            fpr_limit: config.metrics.fpr_limit,
        },
        noise_level,
        injected_train: injected.len(),
        removed_train,
        kept_train,
    })
}

/// One CSV line per class: name, the three metrics, residual noise level.
pub fn report_csv(report: &RunReport) -> String {
    let mut out = String::from("class,i_auroc,p_auroc,aupro,noise_level\n");
    for class in &report.classes {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            class.class_name,
            class.eval.i_auroc,
            class.eval.p_auroc,
            class.eval.aupro,
            class.noise_level
        ));
    }
    out
}

/// Hashes every artifact under the run directory (except `hashes.json`
/// itself): relative path → sha-256 hex.
pub fn hash_run_dir(run_dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    for entry in WalkDir::new(run_dir) {
        let entry = entry.map_err(|e| Error::io(run_dir, e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(run_dir)
            .expect("walker stays under the run directory")
            .to_string_lossy()
            .into_owned();
        if rel == "hashes.json" {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hashes.insert(rel, hex);
    }
    Ok(hashes)
}

// ---------------------------------------------------------------------------
// heatmap rendering
// ---------------------------------------------------------------------------

/// Four-anchor color ramp with strictly increasing brightness, so the
/// brightest rendered pixel always marks the highest score.
fn colormap(t: f64) -> [u8; 3] {
    const ANCHORS: [[f64; 3]; 4] = [
        [0.00, 0.00, 0.15],
        [0.45, 0.05, 0.45],
        [0.90, 0.35, 0.15],
        [0.98, 0.95, 0.30],
    ];
    let t = t.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (t.floor() as usize).min(ANCHORS.len() - 2);
    let frac = t - i as f64;
    let mut rgb = [0u8; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let v = ANCHORS[i][c] + frac * (ANCHORS[i + 1][c] - ANCHORS[i][c]);
        *out = (v * 255.0).round() as u8;
    }
    rgb
}

/// Renders a score grid as a PNG heatmap.
///
/// Scores are min-max normalized (a constant grid maps to the bottom of the
/// palette) and each cell becomes a `scale`×`scale` block. Deterministic:
/// the same grid produces byte-identical files.
pub fn render_heatmap(grid: &ScoreGrid, scale: u32, path: &Path) -> Result<()> {
    if scale == 0 {
        return Err(Error::InvalidConfig("render scale must be >= 1".into()));
    }
    let (h, w) = (grid.height(), grid.width());
    let lo = grid.scores().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid
        .scores()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut img = RgbImage::new(w as u32 * scale, h as u32 * scale);
    for u in 0..h {
        for v in 0..w {
            let t = if range > 0.0 {
                (grid.get(u, v) - lo) / range
            } else {
                0.0
            };
            let color = Rgb(colormap(t));
            for du in 0..scale {
                for dv in 0..scale {
                    img.put_pixel(v as u32 * scale + dv, u as u32 * scale + du, color);
                }
            }
        }
    }
    let mut png = Vec::new();
    PngEncoder::new(&mut png)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::io(path, io::Error::other(e)))?;
    fs::write(path, png).map_err(|e| Error::io(path, e))
}
