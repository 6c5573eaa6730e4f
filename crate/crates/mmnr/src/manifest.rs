//! Dataset manifests and noise injection.
//!
//! A manifest is a JSON document listing one class/split's bundle files
//! (paths relative to the class directory). Noise injection moves a seeded
//! random selection of anomalous test samples into the training list,
//! emulating contaminated training data; the injected IDs are recorded in
//! the manifest for *evaluation only* — no pipeline stage reads them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{read_bundle, Label};
use crate::error::{Error, Result};

/// Which split a manifest describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How training noise is injected from the test pool.
///
/// `Overlap` keeps injected samples in the test split as well;
/// `NonOverlap` removes them from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum NoiseProtocol {
    Clean,
    Overlap { fraction: f64 },
    NonOverlap { fraction: f64 },
}

impl NoiseProtocol {
    pub fn fraction(&self) -> f64 {
        match self {
            NoiseProtocol::Clean => 0.0,
            NoiseProtocol::Overlap { fraction } | NoiseProtocol::NonOverlap { fraction } => {
                *fraction
            }
        }
    }
}

/// JSON description of one class/split: sample paths plus the noise
/// bookkeeping needed to evaluate denoising quality later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_name: String,
    pub split: Split,
    /// Bundle paths relative to the class directory, in listing order.
    pub samples: Vec<String>,
    pub noise: NoiseProtocol,
    pub seed: u64,
    /// Sample IDs injected from the test pool; evaluation bookkeeping only.
    #[serde(default)]
    pub injected_ids: Vec<String>,
}

impl DatasetManifest {
    /// Absolute bundle paths, resolved against the class directory.
    pub fn resolve(&self, class_dir: &Path) -> Vec<PathBuf> {
        self.samples.iter().map(|s| class_dir.join(s)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Moves `⌈fraction · |train|⌉` randomly chosen anomalous test samples into
/// the training list.
///
/// Selection is a seeded shuffle of the anomalous test samples (sorted by
/// path first, so the result is independent of listing order). The same
/// `fraction` and `seed` select the same set under both protocols; they
/// differ only in whether the injected samples stay in the returned test
/// manifest. `Clean` or a zero fraction returns both manifests unchanged.
///
/// `class_dir` is needed to read bundle labels when picking candidates.
pub fn inject_noise(
    class_dir: &Path,
    train: &DatasetManifest,
    test: &DatasetManifest,
    protocol: NoiseProtocol,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let fraction = protocol.fraction();
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "noise fraction must be in [0, 1), got {fraction}"
        )));
    }
    let inject_count = (fraction * train.samples.len() as f64).ceil() as usize;
    if matches!(protocol, NoiseProtocol::Clean) || inject_count == 0 {
        return Ok((train.clone(), test.clone()));
    }

    // Candidates: anomalous test samples, identified by bundle label.
    let mut candidates: Vec<(String, String)> = Vec::new(); // (path, sample_id)
    for rel in &test.samples {
        let bundle = read_bundle(&class_dir.join(rel))?;
        if bundle.label == Label::Anomalous {
            candidates.push((rel.clone(), bundle.sample_id));
        }
    }
    if candidates.len() < inject_count {
        return Err(Error::InsufficientData(format!(
            "need {inject_count} anomalous test samples to inject, found {}",
            candidates.len()
        )));
    }
    candidates.sort();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let injected: Vec<(String, String)> = candidates.into_iter().take(inject_count).collect();

    let mut noisy_train = train.clone();
    noisy_train.noise = protocol;
    noisy_train.seed = seed;
    for (path, id) in &injected {
        noisy_train.samples.push(path.clone());
        noisy_train.injected_ids.push(id.clone());
    }

    let mut test_out = test.clone();
    test_out.noise = protocol;
    if matches!(protocol, NoiseProtocol::NonOverlap { .. }) {
        let removed: Vec<&String> = injected.iter().map(|(p, _)| p).collect();
        test_out.samples.retain(|s| !removed.contains(&&s.clone()));
    }
    Ok((noisy_train, test_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::write_bundle;
    use crate::tensor::{FeatureGrid, OrganizedPointCloud};

    fn tiny_bundle(id: &str, label: Label) -> crate::bundle::FeatureBundle {
        let mut rgb = FeatureGrid::zeros(2, 2, 4);
        rgb.set_feature(0, 0, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut pc = FeatureGrid::zeros(2, 2, 4);
        pc.set_feature(0, 0, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let mut cloud = OrganizedPointCloud::zeros(2, 2);
        cloud.set_position(0, 0, [0.0, 0.0, 1.0]);
        crate::bundle::FeatureBundle::new(id.to_string(), label, rgb, pc, cloud, None).unwrap()
    }

    /// Writes a small on-disk class: `n_train` normal train samples and a
    /// test split with `n_anom` anomalous + `n_norm` normal samples.
    fn write_class(dir: &Path, n_train: usize, n_anom: usize, n_norm: usize) -> (DatasetManifest, DatasetManifest) {
        fs::create_dir_all(dir.join("train")).unwrap();
        fs::create_dir_all(dir.join("test")).unwrap();
        let mut train_samples = Vec::new();
        for i in 0..n_train {
            let rel = format!("train/{i:03}.mmnr");
            write_bundle(
                &dir.join(&rel),
                &tiny_bundle(&format!("tr{i:03}"), Label::Normal),
            )
            .unwrap();
            train_samples.push(rel);
        }
        let mut test_samples = Vec::new();
        for i in 0..n_anom {
            let rel = format!("test/a{i:03}.mmnr");
            write_bundle(
                &dir.join(&rel),
                &tiny_bundle(&format!("te-a{i:03}"), Label::Anomalous),
            )
            .unwrap();
            test_samples.push(rel);
        }
        for i in 0..n_norm {
            let rel = format!("test/n{i:03}.mmnr");
            write_bundle(
                &dir.join(&rel),
                &tiny_bundle(&format!("te-n{i:03}"), Label::Normal),
            )
            .unwrap();
            test_samples.push(rel);
        }
        let train = DatasetManifest {
            class_name: "widget".into(),
            split: Split::Train,
            samples: train_samples,
            noise: NoiseProtocol::Clean,
            seed: 0,
            injected_ids: vec![],
        };
        let test = DatasetManifest {
            class_name: "widget".into(),
            split: Split::Test,
            samples: test_samples,
            noise: NoiseProtocol::Clean,
            seed: 0,
            injected_ids: vec![],
        };
        (train, test)
    }

    #[test]
    fn manifest_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            class_name: "gizmo".into(),
            split: Split::Test,
            samples: vec!["test/a.mmnr".into()],
            noise: NoiseProtocol::Overlap { fraction: 0.1 },
            seed: 42,
            injected_ids: vec!["x".into()],
        };
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn zero_fraction_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_class(dir.path(), 5, 3, 2);
        let (nt, te) = inject_noise(
            dir.path(),
            &train,
            &test,
            NoiseProtocol::Overlap { fraction: 0.0 },
            9,
        )
        .unwrap();
        assert_eq!(nt, train);
        assert_eq!(te, test);
    }

    #[test]
    fn overlap_keeps_injected_in_test() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_class(dir.path(), 10, 4, 4);
        let (nt, te) = inject_noise(
            dir.path(),
            &train,
            &test,
            NoiseProtocol::Overlap { fraction: 0.1 },
            9,
        )
        .unwrap();
        // ⌈0.1 · 10⌉ = 1 injected.
        assert_eq!(nt.samples.len(), 11);
        assert_eq!(nt.injected_ids.len(), 1);
        assert_eq!(te.samples.len(), test.samples.len());
        assert!(nt.samples.iter().any(|s| s.starts_with("test/")));
    }

    #[test]
    fn non_overlap_removes_injected_from_test() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_class(dir.path(), 10, 4, 4);
        let (nt, te) = inject_noise(
            dir.path(),
            &train,
            &test,
            NoiseProtocol::NonOverlap { fraction: 0.2 },
            9,
        )
        .unwrap();
        assert_eq!(nt.samples.len(), 12);
        assert_eq!(te.samples.len(), test.samples.len() - 2);
        for injected in nt.samples.iter().filter(|s| s.starts_with("test/")) {
            assert!(!te.samples.contains(injected));
        }
    }

    #[test]
    fn same_seed_selects_same_set_across_protocols() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_class(dir.path(), 10, 6, 2);
        let (ov, _) = inject_noise(
            dir.path(),
            &train,
            &test,
            NoiseProtocol::Overlap { fraction: 0.2 },
            123,
        )
        .unwrap();
        let (nov, _) = inject_noise(
            dir.path(),
            &train,
            &test,
            NoiseProtocol::NonOverlap { fraction: 0.2 },
            123,
        )
        .unwrap();
        assert_eq!(ov.injected_ids, nov.injected_ids);
        assert_eq!(ov.samples, nov.samples);
    }

    #[test]
    fn insufficient_anomalous_pool_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_class(dir.path(), 10, 1, 5);
        let err = inject_noise(
            dir.path(),
            &train,
            &test,
            NoiseProtocol::Overlap { fraction: 0.2 },
            9,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn listing_order_does_not_change_selection() {
        let dir = tempfile::tempdir().unwrap();
        let (train, mut test) = write_class(dir.path(), 10, 5, 3);
        let (a, _) = inject_noise(
            dir.path(),
            &train,
            &test,
            NoiseProtocol::Overlap { fraction: 0.3 },
            7,
        )
        .unwrap();
        test.samples.reverse();
        let (b, _) = inject_noise(
            dir.path(),
            &train,
            &test,
            NoiseProtocol::Overlap { fraction: 0.3 },
            7,
        )
        .unwrap();
        let mut ia = a.injected_ids.clone();
        let mut ib = b.injected_ids.clone();
        ia.sort();
        ib.sort();
        assert_eq!(ia, ib);
    }
}
