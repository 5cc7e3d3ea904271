use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;

use log::{info, warn};
use serde_json::json;

use crate::autoencoder::{train_autoencoder, Autoencoder, AutoencoderConfig};
use crate::checkpoint::Checkpoint;
use crate::dataset::{build_hybrid_corpus, build_synthetic_corpus, feature_stats, fid, CorpusManifest, RealPatch, Source};
use crate::diffusion::{
    build_schedule, sample, train_denoiser, train_guidance_classifier, ClassifierConfig, Denoiser, DenoiserConfig,
    GuidanceClassifier, LatentClassifier, NoiseSchedule, SampleRequest,
};
use crate::error::{contract, Error, Result};
use crate::io::{load_embedding_dir, EmbeddingCollection, SampleSet};
use crate::mil::{
    assemble_bags, read_labels, stratified_split, train_subtyping, train_survival, MilTrainConfig, SlideBag,
    TrainOutcome,
};
use crate::optim::AdamWConfig;
use crate::prototypes::{
    assign_prototypes, kmeans, merge_prototype_sets, select_elbow, subsample_uniform, wcss_curve, KMeansConfig,
    PrototypeSet, PrototypeTable,
};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

use super::config::{CorpusMode, FeatureKind, MilTask, PipelineConfig};
use super::evaluate::{evaluate_predictions, read_predictions, write_predictions, Predictions};
use super::{Pipeline, Stage, StageWriter};

const PROTOTYPE_MANIFEST: &str = "prototypes.csv";
const AE_FILE: &str = "autoencoder.pdck";
const DENOISER_FILE: &str = "denoiser.pdck";
const CLASSIFIER_FILE: &str = "classifier.pdck";
const SAMPLES_FILE: &str = "synthetic.psmp";
const CORPUS_MANIFEST: &str = "manifest.json";

fn stamp(p: &Pipeline, stage: Stage) -> Vec<(String, String)> {
    vec![
        ("config_hash".into(), p.key(stage).to_string()),
        ("seed".into(), p.seed(stage).to_string()),
    ]
}

fn csv_header(p: &Pipeline, stage: Stage) -> String {
    format!("# config_hash={}\n", p.key(stage))
}

fn adamw(lr: f64, wd: f64) -> AdamWConfig {
    AdamWConfig::default().with_lr(lr).with_weight_decay(wd)
}

fn load_ckpt(p: &Pipeline, stage: Stage, file: &str) -> Result<Checkpoint> {
    Checkpoint::load(p.stage_dir(stage).join(file))
}

fn stack(collections: &[EmbeddingCollection]) -> Result<Tensor> {
    let dim = collections.first().map_or(0, EmbeddingCollection::dim);
    if collections.iter().any(|c| c.dim() != dim) {
        return Err(contract("embedding collections disagree on dimension"));
    }
    let rows: usize = collections.iter().map(EmbeddingCollection::rows).sum();
    let mut data = Vec::with_capacity(rows * dim);
    collections.iter().for_each(|c| data.extend_from_slice(c.data()));
    Tensor::matrix(rows, dim, data)
}

fn curate_inputs(cfg: &PipelineConfig) -> Result<Vec<EmbeddingCollection>> {
    let c = load_embedding_dir(cfg.curate_embeddings())?;
    if c.is_empty() {
        return Err(Error::Config("no curation embeddings found".into()));
    }
    Ok(c)
}

fn schedule_of(cfg: &PipelineConfig) -> Result<NoiseSchedule> {
    let d = &cfg.diffusion;
    build_schedule(d.timesteps, d.beta_min, d.beta_max, d.schedule)
}

fn ae_config(cfg: &PipelineConfig, input_dim: usize, seed: u64) -> AutoencoderConfig {
    let a = &cfg.autoencoder;
    AutoencoderConfig {
        input_dim,
        latent: a.latent,
        hidden: a.hidden.clone(),
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: adamw(a.lr, a.weight_decay),
        cosine: true,
        holdout_fraction: a.holdout_fraction,
        seed,
    }
}

pub(super) fn curate(p: &Pipeline, w: &mut StageWriter) -> Result<()> {
    let cfg = &p.config.curate;
    let seed = p.seed(Stage::Curate);
    let cohorts = curate_inputs(&p.config)?;
    let mut sets = Vec::new();
    let mut elbows = Vec::new();
    for (i, coll) in cohorts.iter().enumerate() {
        let pts = match cfg.subsample {
            Some(m) if m < coll.rows() => subsample_uniform(coll, m, derive_seed(seed, &[i as u64, 0]))?,
            _ => coll.clone(),
        };
        let base = KMeansConfig {
            k: cfg.k_min,
            seed: derive_seed(seed, &[i as u64, 1]),
            restarts: cfg.restarts,
            max_iter: cfg.max_iter,
            tol: 1e-10,
        };
        let set = match cfg.k {
            Some(k) => {
                if k > pts.rows() {
                    return Err(Error::Config(format!(
                        "cohort {}: k={k} exceeds {} rows",
                        coll.cohort_id,
                        pts.rows()
                    )));
                }
                elbows.push(json!({"cohort": coll.cohort_id, "k": k, "fixed": true}));
                kmeans(&pts, &KMeansConfig { k, ..base })?
            }
            None => {
                let k_max = cfg.k_max.min(pts.rows());
                if k_max < cfg.k_min + 2 {
                    return Err(Error::Config(format!(
                        "cohort {}: {} rows leave fewer than 3 k values for elbow selection",
                        coll.cohort_id,
                        pts.rows()
                    )));
                }
                let (curve, mut candidates) = wcss_curve(&pts, cfg.k_min, k_max, &base)?;
                let elbow = select_elbow(&curve)?;
                if !elbow.distinct {
                    warn!("cohort {}: WCSS curve has no distinct elbow; using k={}", coll.cohort_id, elbow.k);
                }
                let mut text = csv_header(p, Stage::Curate);
                text.push_str(&curve.to_csv());
                w.write(&format!("wcss_{i}.csv"), text.as_bytes())?;
                elbows.push(json!({
                    "cohort": coll.cohort_id,
                    "k": elbow.k,
                    "distinct": elbow.distinct,
                    "curve": curve.entries,
                }));
                candidates.swap_remove(elbow.k - cfg.k_min)
            }
        };
        info!("cohort {}: {} prototypes, WCSS {:.4e}", coll.cohort_id, set.k, set.wcss);
        let mut ckpt = set.to_checkpoint();
        ckpt.metadata.extend(stamp(p, Stage::Curate));
        w.write(&format!("prototypes_{i}.pdck"), &ckpt.to_bytes()?)?;
        sets.push(set);
    }
    let table = merge_prototype_sets(&sets)?;
    let mut manifest = csv_header(p, Stage::Curate);
    manifest.push_str(&table.manifest());
    w.write(PROTOTYPE_MANIFEST, manifest.as_bytes())?;
    w.write_json(
        "elbow.json",
        &json!({"config_hash": p.key(Stage::Curate), "cohorts": elbows, "prototypes": table.len()}),
    )
}

/// Per-cohort prototype sets and the merged table from a finished curate
/// stage, in manifest order.
fn load_prototypes(p: &Pipeline) -> Result<(Vec<PrototypeSet>, PrototypeTable)> {
    let dir = p.stage_dir(Stage::Curate);
    let entries = PrototypeTable::parse_manifest(&fs::read_to_string(dir.join(PROTOTYPE_MANIFEST))?)?;
    let mut cohorts: Vec<&str> = Vec::new();
    for e in &entries {
        if cohorts.last() != Some(&e.cohort_id.as_str()) {
            cohorts.push(&e.cohort_id);
        }
    }
    let sets = (0..cohorts.len())
        .map(|i| PrototypeSet::from_checkpoint(&Checkpoint::load(dir.join(format!("prototypes_{i}.pdck")))?))
        .collect::<Result<Vec<_>>>()?;
    if sets.iter().zip(&cohorts).any(|(s, c)| s.cohort_id != *c) {
        return Err(Error::Format("prototype checkpoints do not match the manifest".into()));
    }
    let table = merge_prototype_sets(&sets)?;
    Ok((sets, table))
}

/// Global prototype id of every curation row, cohorts concatenated in
/// input order.
fn global_labels(cohorts: &[EmbeddingCollection], sets: &[PrototypeSet], table: &PrototypeTable) -> Result<Vec<u32>> {
    let mut labels = Vec::new();
    for c in cohorts {
        let set = sets
            .iter()
            .find(|s| s.cohort_id == c.cohort_id)
            .ok_or_else(|| contract(format!("no prototypes for cohort {}", c.cohort_id)))?;
        for local in assign_prototypes(c, set)? {
            labels.push(table.global_id(&c.cohort_id, local).expect("merged from the same sets"));
        }
    }
    Ok(labels)
}

pub(super) fn train_ae(p: &Pipeline, w: &mut StageWriter) -> Result<()> {
    let data = stack(&curate_inputs(&p.config)?)?;
    let cfg = ae_config(&p.config, data.last_dim(), p.seed(Stage::TrainAe));
    let (ae, report) = train_autoencoder(&data, &cfg)?;
    info!("autoencoder: train MSE {:.4e}, held-out {:?}", report.train_loss, report.heldout_loss);
    w.write(AE_FILE, &ae.to_checkpoint(stamp(p, Stage::TrainAe)).to_bytes()?)?;
    w.write_json("report.json", &json!({"config_hash": p.key(Stage::TrainAe), "report": report}))
}

fn load_ae(p: &Pipeline) -> Result<Autoencoder> {
    Autoencoder::from_checkpoint(&load_ckpt(p, Stage::TrainAe, AE_FILE)?)
}

fn losses_csv(header: String, losses: &[f64]) -> String {
    let mut s = header;
    s.push_str("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:e}");
    }
    s
}

pub(super) fn train_diffusion(p: &Pipeline, w: &mut StageWriter) -> Result<()> {
    let ae = load_ae(p)?;
    let latents = ae.encode(&stack(&curate_inputs(&p.config)?)?)?;
    let schedule = schedule_of(&p.config)?;
    let d = &p.config.diffusion;
    let cfg = DenoiserConfig {
        hidden: d.hidden,
        time_dim: d.time_dim,
        steps: d.steps,
        batch_size: d.batch_size,
        optimizer: adamw(d.lr, d.weight_decay),
        cosine: true,
        seed: p.seed(Stage::TrainDiffusion),
    };
    let (den, report) = train_denoiser(&latents, &schedule, &cfg)?;
    info!("denoiser: final loss {:?}", report.losses.last());
    w.write(DENOISER_FILE, &den.to_checkpoint(stamp(p, Stage::TrainDiffusion)).to_bytes()?)?;
    w.write_json(
        "schedule.json",
        &json!({"config_hash": p.key(Stage::TrainDiffusion), "schedule": schedule}),
    )?;
    w.write("losses.csv", losses_csv(csv_header(p, Stage::TrainDiffusion), &report.losses).as_bytes())
}

pub(super) fn train_classifier(p: &Pipeline, w: &mut StageWriter) -> Result<()> {
    let cohorts = curate_inputs(&p.config)?;
    let (sets, table) = load_prototypes(p)?;
    let labels = global_labels(&cohorts, &sets, &table)?;
    let latents = load_ae(p)?.encode(&stack(&cohorts)?)?;
    let schedule = schedule_of(&p.config)?;
    let c = &p.config.classifier;
    let cfg = ClassifierConfig {
        hidden: c.hidden,
        time_dim: c.time_dim,
        steps: c.steps,
        batch_size: c.batch_size,
        optimizer: adamw(c.lr, c.weight_decay),
        cosine: true,
        seed: p.seed(Stage::TrainClassifier),
    };
    let (cls, report) = train_guidance_classifier(&latents, &labels, table.len(), &schedule, &cfg)?;
    let noisy_acc = cls.accuracy(&latents, &labels, Some(schedule.timesteps() - 1), &schedule, p.seed(Stage::TrainClassifier))?;
    info!("classifier: clean accuracy {:.3}, at t=T-1 {noisy_acc:.3}", report.clean_accuracy);
    w.write(CLASSIFIER_FILE, &cls.to_checkpoint(stamp(p, Stage::TrainClassifier)).to_bytes()?)?;
    w.write(
        "losses.csv",
        losses_csv(csv_header(p, Stage::TrainClassifier), &report.losses).as_bytes(),
    )?;
    w.write_json(
        "report.json",
        &json!({
            "config_hash": p.key(Stage::TrainClassifier),
            "num_classes": table.len(),
            "clean_accuracy": report.clean_accuracy,
            "final_step_accuracy": noisy_acc,
        }),
    )
}

struct Generator {
    ae: Autoencoder,
    denoiser: Denoiser,
    classifier: GuidanceClassifier,
    schedule: NoiseSchedule,
}

impl Generator {
    fn load(p: &Pipeline) -> Result<Self> {
        Ok(Self {
            ae: load_ae(p)?,
            denoiser: Denoiser::from_checkpoint(&load_ckpt(p, Stage::TrainDiffusion, DENOISER_FILE)?)?,
            classifier: GuidanceClassifier::from_checkpoint(&load_ckpt(p, Stage::TrainClassifier, CLASSIFIER_FILE)?)?,
            schedule: schedule_of(&p.config)?,
        })
    }

    fn draw(&self, prototype: u32, count: usize, guidance_w: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
        let req = SampleRequest {
            prototype,
            guidance_w,
            seed,
            count,
        };
        let out = sample(&req, &self.denoiser, Some(&self.classifier), &self.schedule, &self.ae)?;
        Ok(out.into_iter().map(|g| g.values).collect())
    }
}

/// Draws `count` decoded samples for one prototype from a run whose
/// generator stages have completed.
pub fn sample_from_run(p: &Pipeline, prototype: u32, count: usize, guidance_w: f64, seed: u64) -> Result<SampleSet> {
    for stage in [Stage::TrainAe, Stage::TrainDiffusion, Stage::TrainClassifier] {
        if !p.is_complete(stage) {
            return Err(Error::Dependency {
                stage: "sample".into(),
                missing: format!("completed stage {stage} (expected {})", p.stage_dir(stage).display()),
            });
        }
    }
    let g = Generator::load(p)?;
    if !(guidance_w >= 0.0) {
        return Err(contract("guidance scale must be >= 0"));
    }
    let rows = g.draw(prototype, count, guidance_w, seed)?;
    Ok(SampleSet {
        tag: format!(
            "config_hash={};prototype={prototype};guidance_w={guidance_w};seed={seed}",
            p.key(Stage::TrainClassifier)
        ),
        dim: g.ae.input_dim(),
        data: rows.concat(),
        prototypes: vec![prototype; rows.len()],
    })
}

pub(super) fn build_dataset(p: &Pipeline, w: &mut StageWriter) -> Result<()> {
    let ds = &p.config.dataset;
    let seed = p.seed(Stage::BuildDataset);
    let g = Generator::load(p)?;
    let num_prototypes = g.classifier.num_classes();
    let sampler = |proto: u32, count: usize, s: u64| g.draw(proto, count, ds.guidance_w, s);
    let corpus = build_synthetic_corpus(num_prototypes, ds.n_per, &sampler, derive_seed(seed, &[0]))?;
    let dim = g.ae.input_dim();
    let samples = SampleSet {
        tag: format!("config_hash={}", p.key(Stage::BuildDataset)),
        dim,
        data: corpus.samples.concat(),
        prototypes: corpus.manifest.entries.iter().map(|e| e.prototype).collect(),
    };
    w.write(SAMPLES_FILE, &samples.to_bytes()?)?;

    let cohorts = curate_inputs(&p.config)?;
    let (manifest, deficits) = match ds.mode {
        CorpusMode::Synthetic => (corpus.manifest, Vec::new()),
        CorpusMode::Hybrid => {
            let (sets, table) = load_prototypes(p)?;
            let labels = global_labels(&cohorts, &sets, &table)?;
            let refs = cohorts.iter().flat_map(|c| c.patch_refs().iter());
            let pool: Vec<RealPatch> = refs
                .zip(&labels)
                .map(|(r, &prototype)| RealPatch {
                    patch_ref: r.clone(),
                    prototype,
                })
                .collect();
            let n_real = ds.n_per_real.unwrap_or(ds.n_per);
            let h = build_hybrid_corpus(&corpus.manifest, &pool, n_real, derive_seed(seed, &[1]))?;
            (h.manifest, h.deficits)
        }
    };
    let mut doc = serde_json::to_value(&manifest)?;
    doc["config_hash"] = json!(p.key(Stage::BuildDataset));
    doc["mode"] = json!(ds.mode);
    doc["deficits"] = json!(deficits);
    w.write_json(CORPUS_MANIFEST, &doc)?;

    let real = stack(&cohorts)?;
    let real_stats = feature_stats(real.rows(), dim)?;
    let synth_stats = feature_stats(corpus.samples.iter().map(Vec::as_slice), dim)?;
    let score = fid(&real_stats, &synth_stats)?;
    info!("corpus: {} entries, FID vs real {score:.4}", manifest.len());
    w.write_json(
        "fid.json",
        &json!({
            "config_hash": p.key(Stage::BuildDataset),
            "fid": score,
            "space": "decoded embeddings",
            "real_rows": real.outer_len(),
            "synthetic_rows": corpus.samples.len(),
        }),
    )
}

/// Rows of every corpus entry: synthetic samples by position, real
/// patches looked up by reference in the curation inputs.
fn corpus_rows(p: &Pipeline) -> Result<Tensor> {
    let dir = p.stage_dir(Stage::BuildDataset);
    let manifest = CorpusManifest::from_json(&fs::read_to_string(dir.join(CORPUS_MANIFEST))?)?;
    let samples = SampleSet::load(dir.join(SAMPLES_FILE))?;
    let cohorts = curate_inputs(&p.config)?;
    let by_ref: HashMap<&str, &[f64]> = cohorts
        .iter()
        .flat_map(|c| c.patch_refs().iter().map(String::as_str).zip(c.iter_rows()))
        .collect();
    let mut data = Vec::with_capacity(manifest.len() * samples.dim);
    let mut next_synthetic = 0;
    for e in &manifest.entries {
        match e.source {
            Source::Synthetic => {
                if next_synthetic >= samples.rows() {
                    return Err(Error::Format("manifest lists more synthetic entries than the sample file".into()));
                }
                data.extend_from_slice(samples.row(next_synthetic));
                next_synthetic += 1;
            }
            Source::Real => {
                let row = by_ref
                    .get(e.sample_ref.as_str())
                    .ok_or_else(|| contract(format!("real patch {} not found in inputs", e.sample_ref)))?;
                data.extend_from_slice(row);
            }
        }
    }
    Tensor::matrix(manifest.len(), samples.dim, data)
}

fn encode_bags(bags: &[SlideBag], ae: &Autoencoder) -> Result<Vec<SlideBag>> {
    bags.iter()
        .map(|b| {
            let mut out = b.clone();
            out.embeddings = ae.encode(&b.embeddings)?;
            Ok(out)
        })
        .collect()
}

pub(super) fn train_mil(p: &Pipeline, w: &mut StageWriter) -> Result<()> {
    let m = &p.config.mil;
    let seed = p.seed(Stage::TrainMil);
    let labels = read_labels(p.config.mil_labels())?;
    let (bags, classes) = assemble_bags(&load_embedding_dir(p.config.mil_embeddings())?, &labels)?;
    if bags.is_empty() {
        return Err(contract("no slide has both embeddings and a label"));
    }
    let keys: Vec<(String, usize)> = bags
        .iter()
        .map(|b| {
            let stratum = match m.task {
                MilTask::Subtype => b.label,
                MilTask::Survival => b.survival.map(|r| r.event as usize),
            };
            stratum
                .map(|s| (b.patient_key().to_string(), s))
                .ok_or_else(|| contract(format!("slide {} has no {} target", b.slide_id, m.task.name())))
        })
        .collect::<Result<_>>()?;
    let split = stratified_split(&keys, m.split, derive_seed(seed, &[0]))?;
    if split.test.is_empty() {
        return Err(contract("test split is empty"));
    }
    let ids = |idx: &[usize]| -> Vec<&str> { idx.iter().map(|&i| bags[i].slide_id.as_str()).collect() };
    w.write_json(
        "split.json",
        &json!({
            "config_hash": p.key(Stage::TrainMil),
            "classes": classes,
            "train": ids(&split.train),
            "val": ids(&split.val),
            "test": ids(&split.test),
        }),
    )?;

    let train_cfg = MilTrainConfig {
        hidden: m.hidden,
        dropout: m.dropout,
        max_epochs: m.max_epochs,
        patience: m.patience,
        optimizer: adamw(m.lr, m.weight_decay),
        cosine: true,
        survival_bins: m.survival_bins,
        seed: derive_seed(seed, &[1]),
    };
    let mut summary = Vec::new();
    for fs_ in &m.feature_sets {
        let featurized = match fs_.kind {
            FeatureKind::Raw => bags.clone(),
            FeatureKind::Autoencoder => encode_bags(&bags, &load_ae(p)?)?,
            FeatureKind::CorpusAutoencoder => {
                let data = corpus_rows(p)?;
                let cfg = ae_config(&p.config, data.last_dim(), derive_seed(seed, &[2]));
                let (ae, report) = train_autoencoder(&data, &cfg)?;
                info!("{}: corpus encoder train MSE {:.4e}", fs_.name, report.train_loss);
                w.write(
                    &format!("{}_encoder.pdck", fs_.name),
                    &ae.to_checkpoint(stamp(p, Stage::TrainMil)).to_bytes()?,
                )?;
                encode_bags(&bags, &ae)?
            }
        };
        let pick = |idx: &[usize]| -> Vec<&SlideBag> { idx.iter().map(|&i| &featurized[i]).collect() };
        let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
        let outcome: TrainOutcome = match m.task {
            MilTask::Subtype => train_subtyping(&train, &val, classes.len(), &train_cfg)?,
            MilTask::Survival => train_survival(&train, &val, &train_cfg)?,
        };
        info!(
            "{}: best epoch {} of {}, early stop {}",
            fs_.name,
            outcome.best_epoch,
            outcome.log.len(),
            outcome.stopped_early
        );
        let mut extra = stamp(p, Stage::TrainMil);
        extra.push(("feature_set".into(), fs_.name.clone()));
        if let Some(b) = &outcome.bins {
            extra.push(("time_bins".into(), serde_json::to_string(&b.cuts)?));
        }
        w.write(&format!("{}.pdck", fs_.name), &outcome.model.to_checkpoint(extra).to_bytes()?)?;

        let mut log = csv_header(p, Stage::TrainMil);
        log.push_str("epoch,train_loss,val_loss,lr\n");
        for e in &outcome.log {
            let _ = writeln!(log, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        w.write(&format!("{}_log.csv", fs_.name), log.as_bytes())?;

        let (columns, values) = match m.task {
            MilTask::Subtype => (
                classes.iter().map(|c| format!("p_{c}")).collect(),
                test.iter()
                    .map(|b| outcome.model.class_probabilities(&b.embeddings))
                    .collect::<Result<Vec<_>>>()?,
            ),
            MilTask::Survival => (
                vec!["risk".to_string()],
                test.iter()
                    .map(|b| outcome.model.risk(&b.embeddings).map(|r| vec![r]))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let preds = Predictions {
            name: fs_.name.clone(),
            slides: test.iter().map(|b| b.slide_id.clone()).collect(),
            columns,
            values,
        };
        w.write(
            &format!("{}_predictions.csv", fs_.name),
            &write_predictions(&preds, p.key(Stage::TrainMil))?,
        )?;
        summary.push(json!({
            "feature_set": fs_.name,
            "kind": fs_.kind,
            "best_epoch": outcome.best_epoch,
            "epochs_run": outcome.log.len(),
            "stopped_early": outcome.stopped_early,
            "time_bins": outcome.bins.map(|b| b.cuts),
        }));
    }
    w.write_json(
        "summary.json",
        &json!({"config_hash": p.key(Stage::TrainMil), "task": m.task, "feature_sets": summary}),
    )
}

pub(super) fn evaluate(p: &Pipeline, w: &mut StageWriter) -> Result<()> {
    let dir = p.stage_dir(Stage::TrainMil);
    let preds = p
        .config
        .mil
        .feature_sets
        .iter()
        .map(|f| read_predictions(dir.join(format!("{}_predictions.csv", f.name)), f.name.clone()))
        .collect::<Result<Vec<_>>>()?;
    let truth = read_labels(p.config.mil_labels())?;
    let mut report = evaluate_predictions(p.config.mil.task, &preds, &truth)?;
    report.config_hash = Some(p.key(Stage::Evaluate).to_string());
    w.write_json("report.json", &report)?;
    let mut text = csv_header(p, Stage::Evaluate);
    text.push_str(&report.table());
    w.write("report.txt", text.as_bytes())
}
