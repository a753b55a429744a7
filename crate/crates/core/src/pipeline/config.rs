use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackKind, AttackSpec};
use crate::classifier::ClassifierConfig;
use crate::combo_vae::VaeConfig;
use crate::datasets::{DatasetId, SplitSizes};
use crate::detector::{parse_grid, MorphSearchConfig, ThresholdMode};
use crate::error::{FmError, Result};

/// Environment variable naming the artifact root. Relative paths in a
/// config resolve against it (or the working directory when unset).
pub const ROOT_ENV: &str = "FMDEFENSE_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub classifier: u64,
    pub vae: u64,
    pub detector: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { split: 0, classifier: 1, vae: 2, detector: 3 }
    }
}

/// Which images fit the target classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierData {
    /// The TRAIN split only.
    TrainSplit,
    /// The whole train partition except VAL.
    TrainPartition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub morph: MorphSearchConfig,
    pub rho: f64,
    pub mode: ThresholdMode,
    /// Selected codes; all codes when absent.
    pub codes: Option<Vec<usize>>,
    /// Unified thresholds for the sweep, `lo:hi:step`.
    pub sweep: String,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            morph: MorphSearchConfig::default(),
            rho: 0.999,
            mode: ThresholdMode::PerCode,
            codes: None,
            sweep: "5:100:5".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurifierSettings {
    /// Distance-threshold fractile for the calibrated operating point.
    pub eta: f64,
    /// Unified resistance threshold for the purification curves.
    pub curve_theta: f64,
    /// Fractiles at which the purification curves are evaluated; the
    /// all-salvageable endpoint is always added.
    pub eta_grid: Vec<f64>,
}

impl Default for PurifierSettings {
    fn default() -> Self {
        PurifierSettings { eta: 90.0, curve_theta: 60.0, eta_grid: (1..=10).map(|k| 10.0 * k as f64).collect() }
    }
}

/// One declarative description of a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    /// Directory holding `<dataset>/` IDX files.
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub splits: SplitSizes,
    pub seeds: Seeds,
    pub classifier_data: ClassifierData,
    pub classifier: ClassifierConfig,
    pub vae: VaeConfig,
    pub attacks: Vec<AttackKind>,
    /// Shared attack parameters; `kind` is ignored.
    pub attack: AttackSpec,
    pub detector: DetectorSettings,
    pub purifier: PurifierSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetId::Mnist,
            data_dir: "data".into(),
            output_dir: "runs/mnist".into(),
            splits: SplitSizes::default(),
            seeds: Seeds::default(),
            classifier_data: ClassifierData::TrainPartition,
            classifier: ClassifierConfig::default(),
            vae: VaeConfig::default(),
            attacks: vec![AttackKind::Fgsm, AttackKind::Deepfool, AttackKind::Cw],
            attack: AttackSpec::default(),
            detector: DetectorSettings::default(),
            purifier: PurifierSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// The 10000/1000/1000/1000 profile.
    pub fn desk(dataset: DatasetId) -> Self {
        let mut c = ExperimentConfig {
            dataset,
            output_dir: format!("runs/{dataset}-desk").into(),
            splits: SplitSizes::desk(),
            ..Default::default()
        };
        c.vae.latent_dim = dataset.default_latent_dim();
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| FmError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FmError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| FmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.morph.validate()?;
        for kind in &self.attacks {
            self.attack_spec(*kind).validate()?;
        }
        if !(self.detector.rho > 0.0 && self.detector.rho < 1.0) {
            return Err(FmError::Config(format!("rho {} outside (0, 1)", self.detector.rho)));
        }
        let etas = std::iter::once(self.purifier.eta).chain(self.purifier.eta_grid.iter().copied());
        if let Some(bad) = etas.into_iter().find(|e| !(*e > 0.0 && *e <= 100.0)) {
            return Err(FmError::Config(format!("eta {bad} outside (0, 100]")));
        }
        if let Some(codes) = &self.detector.codes {
            if codes.is_empty() || codes.iter().any(|&c| c >= self.vae.latent_dim) {
                return Err(FmError::Config(format!("codes {codes:?} invalid for m = {}", self.vae.latent_dim)));
            }
        }
        parse_grid(&self.detector.sweep)?;
        Ok(())
    }

    pub fn attack_spec(&self, kind: AttackKind) -> AttackSpec {
        AttackSpec { kind, ..self.attack.clone() }
    }

    pub fn codes(&self) -> Vec<usize> {
        self.detector.codes.clone().unwrap_or_else(|| (0..self.vae.latent_dim).collect())
    }

    /// SHA-256 of the canonical TOML with the path fields blanked, so
    /// relocating a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = PathBuf::new();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `FMDEFENSE_ROOT`, or the working directory.
pub fn artifact_root() -> PathBuf {
    std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}
