//! Small synthetic cohorts for smoke runs: two organ cohorts whose slides
//! mix a few Gaussian tissue clusters, with class-dependent mixing weights
//! and class-dependent survival.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde_json::json;

use crate::error::Result;
use crate::io::EmbeddingCollection;
use crate::rng::stream;

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub dim: usize,
    pub cohorts: Vec<String>,
    pub slides_per_cohort: usize,
    pub patches_per_slide: usize,
    pub clusters: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            dim: 8,
            cohorts: vec!["kidney".into(), "lung".into()],
            slides_per_cohort: 30,
            patches_per_slide: 12,
            clusters: 3,
            noise: 0.4,
            seed: 7,
        }
    }
}

/// A slide's ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySlide {
    pub slide_id: String,
    pub patient_id: String,
    pub class: usize,
    pub duration: f64,
    pub event: bool,
}

pub const TOY_CLASSES: [&str; 2] = ["type_a", "type_b"];

/// Per-cohort embeddings and slide truth. Patch refs are `slide:index`.
pub fn generate(spec: &ToySpec) -> Result<(Vec<EmbeddingCollection>, Vec<ToySlide>)> {
    let mut collections = Vec::new();
    let mut slides = Vec::new();
    let noise = Normal::new(0.0, spec.noise).expect("positive std");
    for (ci, cohort) in spec.cohorts.iter().enumerate() {
        let mut rng = stream(spec.seed, &[ci as u64]);
        let centers: Vec<Vec<f64>> = (0..spec.clusters)
            .map(|_| (0..spec.dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut data = Vec::new();
        let mut refs = Vec::new();
        for s in 0..spec.slides_per_cohort {
            let class = s % 2;
            let slide_id = format!("{cohort}_s{s:02}");
            // Two slides per patient.
            let patient_id = format!("{cohort}_p{:02}", s / 2 * 2 + class);
            // Class 0 leans on cluster 0, class 1 on cluster 1; the rest is shared.
            let lean = class.min(spec.clusters - 1);
            for i in 0..spec.patches_per_slide {
                let c = if rng.random_bool(0.6) {
                    lean
                } else {
                    rng.random_range(0..spec.clusters)
                };
                data.extend(centers[c].iter().map(|m| m + noise.sample(&mut rng)));
                refs.push(format!("{slide_id}:{i}"));
            }
            let scale = if class == 0 { 12.0 } else { 4.0 };
            let duration: f64 = Exp::new(1.0 / scale).expect("positive rate").sample(&mut rng);
            slides.push(ToySlide {
                slide_id,
                patient_id,
                class,
                duration: (duration * 100.0).round() / 100.0,
                event: rng.random_bool(0.7),
            });
        }
        collections.push(EmbeddingCollection::new(cohort.clone(), spec.dim, data, refs)?);
    }
    Ok((collections, slides))
}

pub fn labels_csv(slides: &[ToySlide]) -> String {
    let mut s = String::from("slide_id,patient_id,label\n");
    for t in slides {
        let _ = writeln!(s, "{},{},{}", t.slide_id, t.patient_id, TOY_CLASSES[t.class]);
    }
    s
}

pub fn survival_csv(slides: &[ToySlide]) -> String {
    let mut s = String::from("slide_id,patient_id,duration,event\n");
    for t in slides {
        let _ = writeln!(s, "{},{},{},{}", t.slide_id, t.patient_id, t.duration, t.event as u8);
    }
    s
}

/// Writes `embeddings/*.pemb`, `labels.csv`, `survival.csv` and a fast
/// `config.json` (subtype task, hybrid corpus) under `dir`. Returns the
/// config path.
pub fn write_workspace(dir: &Path, spec: &ToySpec) -> Result<PathBuf> {
    let (collections, slides) = generate(spec)?;
    let emb = dir.join("embeddings");
    fs::create_dir_all(&emb)?;
    for c in &collections {
        c.save(emb.join(format!("{}.pemb", c.cohort_id)))?;
    }
    fs::write(dir.join("labels.csv"), labels_csv(&slides))?;
    fs::write(dir.join("survival.csv"), survival_csv(&slides))?;
    let config = json!({
        "seed": spec.seed,
        "output_root": "runs",
        "curate": {"embeddings": "embeddings", "subsample": 150, "k_min": 1, "k_max": 6, "restarts": 4},
        "autoencoder": {"latent": {"h": 1, "w": 1, "c": 2}, "hidden": [16], "epochs": 40, "batch_size": 32, "lr": 3e-3, "weight_decay": 0.0, "holdout_fraction": 0.1},
        "diffusion": {"timesteps": 50, "beta_min": 1e-3, "beta_max": 0.2, "hidden": 32, "time_dim": 8, "steps": 3000, "batch_size": 64, "lr": 2e-3, "weight_decay": 0.0},
        "classifier": {"hidden": 32, "time_dim": 8, "steps": 1500, "batch_size": 64, "lr": 2e-3, "weight_decay": 0.0},
        "dataset": {"mode": "hybrid", "n_per": 40, "n_per_real": 40, "guidance_w": 1.0},
        "mil": {
            "labels": "labels.csv",
            "task": "subtype",
            "hidden": 16,
            "dropout": 0.1,
            "max_epochs": 8,
            "patience": 4,
            "lr": 1e-3,
            "weight_decay": 1e-4,
            "feature_sets": [
                {"name": "real", "kind": "raw"},
                {"name": "ae_latent", "kind": "autoencoder"},
                {"name": "corpus", "kind": "corpus_autoencoder"}
            ]
        }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config)? + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let spec = ToySpec::default();
        let (a, sa) = generate(&spec).unwrap();
        let (b, sb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].rows(), spec.slides_per_cohort * spec.patches_per_slide);
        assert_eq!(sa.len(), 2 * spec.slides_per_cohort);
    }
}
