//! Config-driven orchestration of the full flow:
//! curate → train-ae → train-diffusion → train-classifier → build-dataset →
//! train-mil → evaluate.
//!
//! Every stage writes into its own content-addressed directory
//! `<output_root>/<stage>-<key>`, where the key hashes the stage's config
//! section, the global seed, the crate version, digests of external inputs,
//! and the keys of the stages it depends on. Changing one section therefore
//! re-keys that stage and everything downstream while upstream artifacts stay
//! reusable. The key is written into every artifact header as `config_hash`.

mod config;
mod evaluate;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

pub use config::{
    AutoencoderSection, ClassifierSection, CorpusMode, CurateSection, DatasetSection,
    DiffusionSection, FeatureKind, FeatureSet, MilSection, MilTask, PipelineConfig,
};
pub use evaluate::{evaluate_predictions, read_predictions, write_predictions, EvaluationReport, Predictions};
pub use stages::sample_from_run;

use crate::error::{Error, Result};
use crate::rng::stage_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Curate,
    TrainAe,
    TrainDiffusion,
    TrainClassifier,
    BuildDataset,
    TrainMil,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Curate,
        Stage::TrainAe,
        Stage::TrainDiffusion,
        Stage::TrainClassifier,
        Stage::BuildDataset,
        Stage::TrainMil,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Curate => "curate",
            Stage::TrainAe => "train-ae",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::TrainClassifier => "train-classifier",
            Stage::BuildDataset => "build-dataset",
            Stage::TrainMil => "train-mil",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn deps(self, cfg: &PipelineConfig) -> Vec<Stage> {
        match self {
            Stage::Curate | Stage::TrainAe => vec![],
            Stage::TrainDiffusion => vec![Stage::TrainAe],
            Stage::TrainClassifier => vec![Stage::Curate, Stage::TrainAe, Stage::TrainDiffusion],
            Stage::BuildDataset => vec![
                Stage::Curate,
                Stage::TrainAe,
                Stage::TrainDiffusion,
                Stage::TrainClassifier,
            ],
            Stage::TrainMil => {
                let mut d = Vec::new();
                let kinds: Vec<FeatureKind> = cfg.mil.feature_sets.iter().map(|f| f.kind).collect();
                if kinds.contains(&FeatureKind::Autoencoder) {
                    d.push(Stage::TrainAe);
                }
                if kinds.contains(&FeatureKind::CorpusAutoencoder) {
                    d.push(Stage::BuildDataset);
                }
                d
            }
            Stage::Evaluate => vec![Stage::TrainMil],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Parses a comma-separated stage list.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let mut out: Vec<Stage> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Stage::from_str)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of every regular file in `dir` with the given extension, in
/// sorted order, or of a single file.
fn digest_inputs(path: &Path, ext: Option<&str>) -> Result<Vec<(String, String)>> {
    let missing = |e: std::io::Error| Error::Config(format!("input {} unavailable: {e}", path.display()));
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(missing)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && ext.is_none_or(|x| p.extension().is_some_and(|e| e == x)))
            .collect();
        files.sort();
        files
            .iter()
            .map(|f| {
                let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
                Ok((name, sha256_hex(&fs::read(f)?)))
            })
            .collect()
    } else {
        let bytes = fs::read(path).map_err(missing)?;
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        Ok(vec![(name, sha256_hex(&bytes))])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

/// Written last into each stage directory; its presence marks the stage as
/// complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub upstream: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Collects a stage's outputs and their digests.
pub(crate) struct StageWriter {
    dir: PathBuf,
    outputs: Vec<FileDigest>,
}

impl StageWriter {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        let stale = dir.join(PROVENANCE_FILE);
        if stale.exists() {
            fs::remove_file(stale)?;
        }
        Ok(Self {
            dir,
            outputs: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.outputs.push(FileDigest {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    keys: BTreeMap<Stage, String>,
    external: BTreeMap<Stage, Vec<FileDigest>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut external: BTreeMap<Stage, Vec<FileDigest>> = BTreeMap::new();
        let to_digests = |v: Vec<(String, String)>, prefix: &str| -> Vec<FileDigest> {
            v.into_iter()
                .map(|(f, sha256)| FileDigest {
                    file: format!("{prefix}{f}"),
                    sha256,
                })
                .collect()
        };
        let emb = to_digests(digest_inputs(&config.curate_embeddings(), Some("pemb"))?, "embeddings/");
        if emb.is_empty() {
            return Err(Error::Config(format!(
                "no .pemb files in {}",
                config.curate_embeddings().display()
            )));
        }
        external.insert(Stage::Curate, emb.clone());
        external.insert(Stage::TrainAe, emb);
        let mut mil = to_digests(digest_inputs(&config.mil_embeddings(), Some("pemb"))?, "mil_embeddings/");
        mil.extend(to_digests(digest_inputs(&config.mil_labels(), None)?, "labels/"));
        external.insert(Stage::TrainMil, mil);

        let mut keys = BTreeMap::new();
        for stage in Stage::ALL {
            let upstream: BTreeMap<&str, &String> =
                stage.deps(&config).into_iter().map(|d| (d.name(), &keys[&d])).collect();
            let section = match stage {
                Stage::Curate => {
                    let mut c = config.curate.clone();
                    c.embeddings = PathBuf::new();
                    serde_json::to_value(c)?
                }
                Stage::TrainAe => serde_json::to_value(&config.autoencoder)?,
                Stage::TrainDiffusion => serde_json::to_value(&config.diffusion)?,
                Stage::TrainClassifier => serde_json::to_value(&config.classifier)?,
                Stage::BuildDataset => serde_json::to_value(&config.dataset)?,
                Stage::TrainMil => {
                    let mut m = config.mil.clone();
                    m.embeddings = None;
                    m.labels = PathBuf::new();
                    serde_json::to_value(m)?
                }
                Stage::Evaluate => json!({}),
            };
            let doc = json!({
                "stage": stage.name(),
                "crate_version": env!("CARGO_PKG_VERSION"),
                "seed": config.seed,
                "section": section,
                "inputs": external.get(&stage),
                "upstream": upstream,
            });
            let key = sha256_hex(&serde_json::to_vec(&doc)?);
            keys.insert(stage, key);
        }
        Ok(Self {
            config,
            keys,
            external,
        })
    }

    pub fn key(&self, stage: Stage) -> &str {
        &self.keys[&stage]
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.config
            .output_root()
            .join(format!("{}-{}", stage.name(), &self.keys[&stage][..16]))
    }

    pub fn seed(&self, stage: Stage) -> u64 {
        match (stage, self.config.mil.seed) {
            (Stage::TrainMil, Some(s)) => s,
            _ => stage_seed(self.config.seed, stage.name()),
        }
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stage_dir(stage).join(PROVENANCE_FILE).is_file()
    }

    pub fn provenance(&self, stage: Stage) -> Result<Provenance> {
        let text = fs::read_to_string(self.stage_dir(stage).join(PROVENANCE_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn check_deps(&self, stage: Stage) -> Result<()> {
        for dep in stage.deps(&self.config) {
            if !self.is_complete(dep) {
                return Err(Error::Dependency {
                    stage: stage.name().into(),
                    missing: format!(
                        "completed stage {} (expected {})",
                        dep.name(),
                        self.stage_dir(dep).display()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Runs one stage after checking that its dependencies are complete.
    pub fn run_stage(&self, stage: Stage) -> Result<Provenance> {
        self.check_deps(stage)?;
        info!("stage {stage} -> {}", self.stage_dir(stage).display());
        let mut w = StageWriter::new(self.stage_dir(stage))?;
        match stage {
            Stage::Curate => stages::curate(self, &mut w)?,
            Stage::TrainAe => stages::train_ae(self, &mut w)?,
            Stage::TrainDiffusion => stages::train_diffusion(self, &mut w)?,
            Stage::TrainClassifier => stages::train_classifier(self, &mut w)?,
            Stage::BuildDataset => stages::build_dataset(self, &mut w)?,
            Stage::TrainMil => stages::train_mil(self, &mut w)?,
            Stage::Evaluate => stages::evaluate(self, &mut w)?,
        }
        let prov = Provenance {
            stage,
            config_hash: self.key(stage).to_string(),
            seed: self.seed(stage),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            upstream: stage
                .deps(&self.config)
                .into_iter()
                .map(|d| (d.name().to_string(), self.key(d).to_string()))
                .collect(),
            inputs: self.external.get(&stage).cloned().unwrap_or_default(),
            outputs: w.outputs,
        };
        let mut text = serde_json::to_string_pretty(&prov)?;
        text.push('\n');
        fs::write(w.dir.join(PROVENANCE_FILE), text)?;
        Ok(prov)
    }

    /// Runs the requested stages (all when empty) in dependency order.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<Provenance>> {
        let mut selected = if stages.is_empty() {
            Stage::ALL.to_vec()
        } else {
            stages.to_vec()
        };
        selected.sort();
        selected.dedup();
        selected.into_iter().map(|s| self.run_stage(s)).collect()
    }
}
