use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::LatentShape;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};

/// One immutable description of a pipeline run. Relative paths resolve
/// against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_root: PathBuf,
    pub curate: CurateSection,
    #[serde(default)]
    pub autoencoder: AutoencoderSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    pub mil: MilSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateSection {
    /// Directory of `.pemb` files, one per cohort.
    pub embeddings: PathBuf,
    /// Rows drawn per cohort before clustering; all rows when absent.
    pub subsample: Option<usize>,
    pub k_min: usize,
    pub k_max: usize,
    /// Fixed k; skips elbow selection.
    pub k: Option<usize>,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for CurateSection {
    fn default() -> Self {
        Self {
            embeddings: PathBuf::new(),
            subsample: Some(10_000),
            k_min: 2,
            k_max: 10,
            k: None,
            restarts: 32,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    pub latent: LatentShape,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub holdout_fraction: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        Self {
            latent: LatentShape::default(),
            hidden: vec![64],
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-5,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub schedule: ScheduleKind,
    pub hidden: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            schedule: ScheduleKind::Linear,
            hidden: 64,
            time_dim: 16,
            steps: 2000,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub hidden: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            time_dim: 16,
            steps: 2000,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    Synthetic,
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub mode: CorpusMode,
    pub n_per: usize,
    /// Real patches per prototype in hybrid mode; defaults to `n_per`.
    pub n_per_real: Option<usize>,
    pub guidance_w: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            mode: CorpusMode::Synthetic,
            n_per: 3000,
            n_per_real: None,
            guidance_w: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilTask {
    Subtype,
    Survival,
}

impl MilTask {
    pub fn name(self) -> &'static str {
        match self {
            MilTask::Subtype => "subtype",
            MilTask::Survival => "survival",
        }
    }
}

/// How slide bags are featurized before ABMIL.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Patch embeddings as ingested.
    Raw,
    /// Encoder of the autoencoder trained on real embeddings.
    Autoencoder,
    /// Encoder of an autoencoder refit on the built corpus.
    CorpusAutoencoder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSet {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilSection {
    /// PEMB directory for slide bags; defaults to the curation input.
    pub embeddings: Option<PathBuf>,
    pub labels: PathBuf,
    pub task: MilTask,
    pub hidden: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub split: [f64; 3],
    pub survival_bins: usize,
    /// Overrides the stage seed derived from the global seed.
    pub seed: Option<u64>,
    /// The first set is the baseline every other set is compared against.
    pub feature_sets: Vec<FeatureSet>,
}

impl Default for MilSection {
    fn default() -> Self {
        Self {
            embeddings: None,
            labels: PathBuf::new(),
            task: MilTask::Subtype,
            hidden: 256,
            dropout: 0.25,
            max_epochs: 20,
            patience: 10,
            lr: 1e-4,
            weight_decay: 1e-5,
            split: [0.7, 0.1, 0.2],
            survival_bins: 4,
            seed: None,
            feature_sets: vec![
                FeatureSet {
                    name: "real".into(),
                    kind: FeatureKind::Raw,
                },
                FeatureSet {
                    name: "corpus".into(),
                    kind: FeatureKind::CorpusAutoencoder,
                },
            ],
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.resolve(&self.output_root)
    }

    pub fn curate_embeddings(&self) -> PathBuf {
        self.resolve(&self.curate.embeddings)
    }

    pub fn mil_embeddings(&self) -> PathBuf {
        self.resolve(self.mil.embeddings.as_ref().unwrap_or(&self.curate.embeddings))
    }

    pub fn mil_labels(&self) -> PathBuf {
        self.resolve(&self.mil.labels)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.curate;
        if c.k_min == 0 || c.k_min > c.k_max {
            return Err(config_err(format!("curate: need 1 <= k_min <= k_max, got {}..{}", c.k_min, c.k_max)));
        }
        if c.k == Some(0) || c.restarts == 0 || c.subsample == Some(0) {
            return Err(config_err("curate: k, restarts and subsample must be positive"));
        }
        let a = &self.autoencoder;
        if a.latent.dim() == 0 || a.batch_size == 0 || !(0.0..1.0).contains(&a.holdout_fraction) {
            return Err(config_err("autoencoder: latent dim and batch size must be positive, holdout in [0, 1)"));
        }
        let d = &self.diffusion;
        if d.timesteps == 0 || !(d.beta_min > 0.0 && d.beta_min <= d.beta_max && d.beta_max < 1.0) {
            return Err(config_err("diffusion: need T >= 1 and 0 < beta_min <= beta_max < 1"));
        }
        if d.batch_size == 0 || self.classifier.batch_size == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        if self.dataset.n_per == 0 || !(self.dataset.guidance_w >= 0.0) {
            return Err(config_err("dataset: n_per must be >= 1 and guidance_w >= 0"));
        }
        let m = &self.mil;
        if m.split.iter().any(|r| *r < 0.0) || (m.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err("mil: split ratios must be non-negative and sum to 1"));
        }
        if m.feature_sets.is_empty() {
            return Err(config_err("mil: at least one feature set is required"));
        }
        let mut names: Vec<&str> = m.feature_sets.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(config_err("mil: feature set names must be unique, non-empty path-safe strings"));
        }
        if m.max_epochs == 0 || m.patience == 0 || m.survival_bins == 0 {
            return Err(config_err("mil: epochs, patience and survival bins must be positive"));
        }
        Ok(())
    }
}
