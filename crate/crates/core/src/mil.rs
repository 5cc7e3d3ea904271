//! Gated-attention MIL over slide bags, with subtyping and discrete-time
//! survival heads, a patient-level stratified split, and the early-stopping
//! training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_last, softmax_last, softplus, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{contract, Error, Result};
use crate::io::EmbeddingCollection;
use crate::nn::{dropout, Bound, LayerNorm, Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::stream;
use crate::stats::SurvivalRecord;
use crate::tensor::Tensor;

/// Patch embeddings of one slide plus its slide-level target.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub patient_id: Option<String>,
    /// `[n_patches, dim]`.
    pub embeddings: Tensor,
    pub label: Option<usize>,
    pub survival: Option<SurvivalRecord>,
}

impl SlideBag {
    pub fn new(slide_id: impl Into<String>, embeddings: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.outer_len() == 0 {
            return Err(contract("a bag needs at least one patch embedding"));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            patient_id: None,
            embeddings,
            label: None,
            survival: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_survival(mut self, record: SurvivalRecord) -> Self {
        self.survival = Some(record);
        self
    }

    pub fn with_patient(mut self, patient: impl Into<String>) -> Self {
        self.patient_id = Some(patient.into());
        self
    }

    pub fn len(&self) -> usize {
        self.embeddings.outer_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patient key for splitting; slides without a patient id stand alone.
    pub fn patient_key(&self) -> &str {
        self.patient_id.as_deref().unwrap_or(&self.slide_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbmilConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub dropout: f64,
}

impl AbmilConfig {
    pub fn new(in_dim: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            in_dim,
            hidden,
            outputs,
            dropout: 0.25,
        }
    }
}

/// Result of an evaluation-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AbmilOutput {
    pub embedding: Vec<f64>,
    pub attention: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Two-layer pre-attention MLP, gated attention pooling, linear head.
#[derive(Clone, Debug)]
pub struct Abmil {
    pub config: AbmilConfig,
    store: ParamStore,
    fc1: Linear,
    ln1: LayerNorm,
    fc2: Linear,
    ln2: LayerNorm,
    att_tanh: Linear,
    att_gate: Linear,
    att_score: Linear,
    head: Linear,
}

struct Graph {
    instances: Var,
    attention: Var,
    embedding: Var,
    logits: Var,
}

impl Abmil {
    pub fn new(config: AbmilConfig, seed: u64) -> Result<Self> {
        if config.hidden < 2 || config.in_dim == 0 || config.outputs == 0 {
            return Err(contract("ABMIL needs in_dim >= 1, hidden >= 2 and at least one output"));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(contract("dropout rate must lie in [0, 1)"));
        }
        let (d, h, a) = (config.in_dim, config.hidden, config.hidden / 2);
        let mut rng = stream(seed, &[0xab]);
        let mut store = ParamStore::new();
        let fc1 = Linear::new(&mut store, "fc1", d, h, &mut rng);
        let ln1 = LayerNorm::new(&mut store, "ln1", h);
        let fc2 = Linear::new(&mut store, "fc2", h, h, &mut rng);
        let ln2 = LayerNorm::new(&mut store, "ln2", h);
        let att_tanh = Linear::new(&mut store, "att_tanh", h, a, &mut rng);
        let att_gate = Linear::new(&mut store, "att_gate", h, a, &mut rng);
        let att_score = Linear::new(&mut store, "att_score", a, 1, &mut rng);
        let head = Linear::new(&mut store, "head", h, config.outputs, &mut rng);
        Ok(Self {
            config,
            store,
            fc1,
            ln1,
            fc2,
            ln2,
            att_tanh,
            att_gate,
            att_score,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_bag(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.outer_len() == 0 {
            return Err(contract("empty bag"));
        }
        if x.last_dim() != self.config.in_dim {
            return Err(Error::Dimension {
                left: x.shape().to_vec(),
                right: vec![x.outer_len(), self.config.in_dim],
                context: "bag embeddings",
            });
        }
        Ok(())
    }

    /// Dropout is applied only when `rng` is given.
    fn graph(&self, tape: &mut Tape, bound: &Bound, x: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<Graph> {
        let p = self.config.dropout;
        let mut drop = |tape: &mut Tape, v: Var| -> Result<Var> {
            match rng.as_deref_mut() {
                Some(r) => dropout(tape, v, p, r),
                None => Ok(v),
            }
        };
        let mut h = x;
        for (fc, ln) in [(&self.fc1, &self.ln1), (&self.fc2, &self.ln2)] {
            let y = fc.forward(tape, bound, h)?;
            let y = ln.forward(tape, bound, y)?;
            let y = tape.relu(y)?;
            h = drop(tape, y)?;
        }
        let a = self.att_tanh.forward(tape, bound, h)?;
        let a = tape.tanh(a)?;
        let b = self.att_gate.forward(tape, bound, h)?;
        let b = tape.sigmoid(b)?;
        let gated = tape.mul(a, b)?;
        let gated = drop(tape, gated)?;
        let scores = self.att_score.forward(tape, bound, gated)?;
        let attention = tape.pool_weights(scores)?;
        let embedding = tape.weighted_sum(attention, h)?;
        let logits = self.head.forward(tape, bound, embedding)?;
        Ok(Graph {
            instances: h,
            attention,
            embedding,
            logits,
        })
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(&self, bag: &Tensor) -> Result<AbmilOutput> {
        self.check_bag(bag)?;
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape)?;
        let x = tape.constant(bag.clone())?;
        let g = self.graph(&mut tape, &bound, x, None)?;
        Ok(AbmilOutput {
            embedding: tape.value(g.embedding).data().to_vec(),
            attention: tape.value(g.attention).data().to_vec(),
            logits: tape.value(g.logits).data().to_vec(),
        })
    }

    /// Transformed patch features that the attention weights average over.
    pub fn instance_features(&self, bag: &Tensor) -> Result<Tensor> {
        self.check_bag(bag)?;
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape)?;
        let x = tape.constant(bag.clone())?;
        let g = self.graph(&mut tape, &bound, x, None)?;
        Ok(tape.value(g.instances).clone())
    }

    pub fn class_probabilities(&self, bag: &Tensor) -> Result<Vec<f64>> {
        let out = self.forward(bag)?;
        Ok(softmax_last(&Tensor::vector(out.logits)).into_data())
    }

    /// `-sum_b log(1 - h_b)` over the hazard outputs.
    pub fn risk(&self, bag: &Tensor) -> Result<f64> {
        Ok(risk_from_logits(&self.forward(bag)?.logits))
    }

    pub fn to_checkpoint(&self, extra: Vec<(String, String)>) -> Checkpoint {
        let mut meta = vec![
            ("kind".to_string(), "abmil".to_string()),
            ("in_dim".into(), self.config.in_dim.to_string()),
            ("hidden".into(), self.config.hidden.to_string()),
            ("outputs".into(), self.config.outputs.to_string()),
            ("dropout".into(), self.config.dropout.to_string()),
        ];
        meta.extend(extra);
        self.store.to_checkpoint(meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind") != Some("abmil") {
            return Err(Error::Format("not an ABMIL checkpoint".into()));
        }
        let config = AbmilConfig {
            in_dim: ckpt.meta_parse("in_dim")?,
            hidden: ckpt.meta_parse("hidden")?,
            outputs: ckpt.meta_parse("outputs")?,
            dropout: ckpt.meta_parse("dropout")?,
        };
        let mut m = Self::new(config, 0)?;
        m.store.load_checkpoint(ckpt)?;
        Ok(m)
    }
}

/// Hazard `h_b = sigmoid(x_b)`, so `-log(1 - h_b) = softplus(x_b)`.
pub fn risk_from_logits(logits: &[f64]) -> f64 {
    logits.iter().map(|&x| softplus(x)).sum()
}

/// Quantile cut points splitting observed event times into `bins` groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBins {
    pub cuts: Vec<f64>,
}

impl TimeBins {
    pub fn from_events(records: &[SurvivalRecord], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(contract("need at least one survival bin"));
        }
        let mut times: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.duration).collect();
        if times.is_empty() {
            return Err(contract("survival training needs at least one observed event"));
        }
        times.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (times.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            times[lo] + (times[hi] - times[lo]) * (pos - lo as f64)
        };
        let mut cuts: Vec<f64> = (1..bins).map(|k| q(k as f64 / bins as f64)).collect();
        cuts.dedup();
        Ok(Self { cuts })
    }

    pub fn count(&self) -> usize {
        self.cuts.len() + 1
    }

    /// Bin `b` covers `(cuts[b-1], cuts[b]]`.
    pub fn bin(&self, duration: f64) -> usize {
        self.cuts.partition_point(|&c| c < duration)
    }

    /// Masks selecting `log h_b` terms and `log(1 - h_b)` terms. An event in
    /// bin `b` survives every earlier bin; a record censored in bin `b`
    /// survives bins `0..=b`.
    pub fn masks(&self, record: &SurvivalRecord) -> (Vec<f64>, Vec<f64>) {
        let b = self.bin(record.duration);
        let n = self.count();
        let mut hazard = vec![0.0; n];
        let mut survive = vec![0.0; n];
        if record.event {
            hazard[b] = 1.0;
            survive[..b].iter_mut().for_each(|v| *v = 1.0);
        } else {
            survive[..=b].iter_mut().for_each(|v| *v = 1.0);
        }
        (hazard, survive)
    }
}

/// Negative log-likelihood of one record given hazard logits.
pub fn survival_nll(logits: &[f64], record: &SurvivalRecord, bins: &TimeBins) -> f64 {
    let (hz, sv) = bins.masks(record);
    logits
        .iter()
        .zip(hz.iter().zip(&sv))
        .map(|(&x, (&e, &s))| e * softplus(-x) + s * softplus(x))
        .sum()
}

fn survival_loss_var(tape: &mut Tape, logits: Var, record: &SurvivalRecord, bins: &TimeBins) -> Result<Var> {
    let (hz, sv) = bins.masks(record);
    let n = hz.len();
    let neg = tape.scale(logits, -1.0)?;
    let log_h = tape.softplus(neg)?;
    let log_s = tape.softplus(logits)?;
    let hz = tape.constant(Tensor::matrix(1, n, hz)?)?;
    let sv = tape.constant(Tensor::matrix(1, n, sv)?)?;
    let a = tape.mul(log_h, hz)?;
    let b = tape.mul(log_s, sv)?;
    let t = tape.add(a, b)?;
    tape.sum(t)
}

fn cross_entropy_var(tape: &mut Tape, logits: Var, label: usize, classes: usize) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let mut oh = vec![0.0; classes];
    oh[label] = 1.0;
    let oh = tape.constant(Tensor::matrix(1, classes, oh)?)?;
    let picked = tape.mul(logp, oh)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilTrainConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: AdamWConfig,
    pub cosine: bool,
    pub survival_bins: usize,
    pub seed: u64,
}

impl Default for MilTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            dropout: 0.25,
            max_epochs: 20,
            patience: 10,
            optimizer: AdamWConfig::default(),
            cosine: true,
            survival_bins: 4,
            seed: 0,
        }
    }
}

/// Minimum decrease in validation loss that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Abmil,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Present for survival training.
    pub bins: Option<TimeBins>,
}

enum Task<'a> {
    Subtype { classes: usize },
    Survival { bins: &'a TimeBins },
}

impl Task<'_> {
    fn outputs(&self) -> usize {
        match self {
            Task::Subtype { classes } => *classes,
            Task::Survival { bins } => bins.count(),
        }
    }

    fn loss(&self, tape: &mut Tape, logits: Var, bag: &SlideBag) -> Result<Var> {
        match self {
            Task::Subtype { classes } => {
                let y = bag.label.ok_or_else(|| contract(format!("slide {} has no label", bag.slide_id)))?;
                cross_entropy_var(tape, logits, y, *classes)
            }
            Task::Survival { bins } => {
                let r = bag
                    .survival
                    .ok_or_else(|| contract(format!("slide {} has no survival record", bag.slide_id)))?;
                survival_loss_var(tape, logits, &r, bins)
            }
        }
    }

    fn eval_loss(&self, model: &Abmil, bag: &SlideBag) -> Result<f64> {
        let logits = model.forward(&bag.embeddings)?.logits;
        Ok(match self {
            Task::Subtype { .. } => {
                let y = bag.label.ok_or_else(|| contract(format!("slide {} has no label", bag.slide_id)))?;
                -log_softmax_last(&Tensor::vector(logits)).data()[y]
            }
            Task::Survival { bins } => {
                let r = bag
                    .survival
                    .ok_or_else(|| contract(format!("slide {} has no survival record", bag.slide_id)))?;
                survival_nll(&logits, &r, bins)
            }
        })
    }
}

fn mean_eval_loss(task: &Task, model: &Abmil, bags: &[&SlideBag]) -> Result<f64> {
    let mut total = 0.0;
    for b in bags {
        total += task.eval_loss(model, b)?;
    }
    Ok(total / bags.len() as f64)
}

fn fit(task: Task, train: &[&SlideBag], val: &[&SlideBag], cfg: &MilTrainConfig) -> Result<(Abmil, Vec<EpochLog>, usize, bool)> {
    if train.is_empty() || val.is_empty() {
        return Err(contract("training and validation splits must be non-empty"));
    }
    let in_dim = train[0].embeddings.last_dim();
    let mut model = Abmil::new(
        AbmilConfig {
            in_dim,
            hidden: cfg.hidden,
            outputs: task.outputs(),
            dropout: cfg.dropout,
        },
        cfg.seed,
    )?;
    let schedule = if cfg.cosine {
        LrSchedule::Cosine {
            total_steps: (cfg.max_epochs * train.len()) as u64,
        }
    } else {
        LrSchedule::Constant
    };
    let mut opt = AdamW::new(cfg.optimizer, schedule, &model.store);
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = stream(cfg.seed, &[0x311, epoch as u64]);
        order.shuffle(&mut rng);
        let lr = opt.current_lr();
        let mut train_loss = 0.0;
        for &i in &order {
            let bag = train[i];
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape)?;
            let x = tape.constant(bag.embeddings.clone())?;
            let g = model.graph(&mut tape, &bound, x, Some(&mut rng))?;
            let loss = task.loss(&mut tape, g.logits, bag)?;
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape, &bound)?;
            opt.step(&mut model.store)?;
            model.store.zero_grad();
            train_loss += tape.value(loss).item()?;
        }
        let val_loss = mean_eval_loss(&task, &model, val)?;
        log.push(EpochLog {
            epoch,
            train_loss: train_loss / train.len() as f64,
            val_loss,
            lr,
        });
        if val_loss < best.0 - IMPROVEMENT_EPS {
            best = (val_loss, epoch, model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    model.store = best.2;
    Ok((model, log, best.1, stopped_early))
}

/// Cross-entropy training with early stopping on validation loss.
pub fn train_subtyping(train: &[&SlideBag], val: &[&SlideBag], num_classes: usize, cfg: &MilTrainConfig) -> Result<TrainOutcome> {
    let present: BTreeSet<usize> = train.iter().filter_map(|b| b.label).collect();
    if present.len() < 2 {
        return Err(contract("training split needs at least two classes"));
    }
    if let Some(&c) = present.iter().find(|&&c| c >= num_classes) {
        return Err(contract(format!("label {c} outside 0..{num_classes}")));
    }
    let (model, log, best_epoch, stopped_early) = fit(Task::Subtype { classes: num_classes }, train, val, cfg)?;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        stopped_early,
        bins: None,
    })
}

/// Discrete-time hazard NLL training; bins are quantiles of training-split
/// event times.
pub fn train_survival(train: &[&SlideBag], val: &[&SlideBag], cfg: &MilTrainConfig) -> Result<TrainOutcome> {
    let records: Vec<SurvivalRecord> = train.iter().filter_map(|b| b.survival).collect();
    let bins = TimeBins::from_events(&records, cfg.survival_bins)?;
    let (model, log, best_epoch, stopped_early) = fit(Task::Survival { bins: &bins }, train, val, cfg)?;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        stopped_early,
        bins: Some(bins),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `n` over `(train, val, test)` ratios.
/// Leftover units go to the largest fractional parts, ties by train, test,
/// val.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for i in 0..3 {
        counts[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>().min(n);
    // Fractions are compared at 1e-9 resolution so that float noise does
    // not break ties; ties go train, test, val.
    let mut order = vec![0usize, 2, 1];
    order.sort_by_key(|&i| std::cmp::Reverse(((exact[i] - counts[i] as f64) * 1e9).round() as i64));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Patient-level, label-stratified split. Every slide follows its patient.
/// `keys[i]` is `(patient key, label)` for slide `i`; a patient's stratum is
/// the label of its first slide.
pub fn stratified_split(keys: &[(String, usize)], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract("split ratios must be non-negative and sum to 1"));
    }
    let mut patients: BTreeMap<&str, usize> = BTreeMap::new();
    for (p, y) in keys {
        patients.entry(p.as_str()).or_insert(*y);
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (p, y) in &patients {
        by_class.entry(*y).or_default().push(p);
    }
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    for (class, mut members) in by_class {
        if members.len() < 3 {
            warn!("class {class} has {} patient(s); some splits get none", members.len());
        }
        members.shuffle(&mut stream(seed, &[0x5917, class as u64]));
        let [tr, va, _] = apportion(members.len(), ratios);
        for (i, p) in members.into_iter().enumerate() {
            let part = if i < tr {
                0
            } else if i < tr + va {
                1
            } else {
                2
            };
            assignment.insert(p, part);
        }
    }
    let mut split = Split::default();
    for (i, (p, _)) in keys.iter().enumerate() {
        match assignment[p.as_str()] {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    Ok(split)
}

/// Slide target read from the labels CSV.
#[derive(Clone, Debug, PartialEq)]
pub enum SlideTarget {
    Class(String),
    Survival(SurvivalRecord),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub slide_id: String,
    pub patient_id: Option<String>,
    pub target: SlideTarget,
}

#[derive(Debug, Deserialize)]
struct RawLabel {
    slide_id: String,
    #[serde(default)]
    patient_id: Option<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    duration: Option<f64>,
    #[serde(default)]
    event: Option<String>,
}

fn parse_event(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(Error::Format(format!("unrecognized event flag {other:?}"))),
    }
}

/// Reads `slide_id,patient_id,label` or `slide_id,patient_id,duration,event`.
/// Lines starting with `#` are ignored.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let raw: RawLabel = row?;
        let patient_id = raw.patient_id.filter(|p| !p.is_empty());
        let target = match (raw.label.filter(|l| !l.is_empty()), raw.duration, raw.event) {
            (Some(l), _, _) => SlideTarget::Class(l),
            (None, Some(duration), Some(e)) => {
                if !(duration >= 0.0) {
                    return Err(Error::Format(format!("slide {}: negative duration", raw.slide_id)));
                }
                SlideTarget::Survival(SurvivalRecord {
                    duration,
                    event: parse_event(&e)?,
                })
            }
            _ => return Err(Error::Format(format!("slide {}: no label or survival columns", raw.slide_id))),
        };
        out.push(LabelRow {
            slide_id: raw.slide_id,
            patient_id,
            target,
        });
    }
    Ok(out)
}

/// Slide id of a `slide:index` patch reference.
pub fn slide_of(patch_ref: &str) -> &str {
    patch_ref.rsplit_once(':').map_or(patch_ref, |(s, _)| s)
}

/// Groups patches by slide and attaches targets. Class names map to
/// indices in sorted order; the name list is returned alongside the bags.
/// Slides without patches or without a labels row are skipped with a
/// warning.
pub fn assemble_bags(collections: &[EmbeddingCollection], labels: &[LabelRow]) -> Result<(Vec<SlideBag>, Vec<String>)> {
    let mut rows: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    let mut dim = None;
    for c in collections {
        if *dim.get_or_insert(c.dim()) != c.dim() {
            return Err(contract("embedding collections disagree on dimension"));
        }
        for (r, row) in c.patch_refs().iter().zip(c.iter_rows()) {
            let e = rows.entry(slide_of(r)).or_insert((0, Vec::new()));
            e.0 += 1;
            e.1.extend_from_slice(row);
        }
    }
    let dim = dim.ok_or_else(|| contract("no embeddings supplied"))?;
    let classes: Vec<String> = labels
        .iter()
        .filter_map(|l| match &l.target {
            SlideTarget::Class(c) => Some(c.clone()),
            SlideTarget::Survival(_) => None,
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut bags = Vec::new();
    for l in labels {
        let Some((n, data)) = rows.remove(l.slide_id.as_str()) else {
            warn!("slide {} has no embeddings; skipped", l.slide_id);
            continue;
        };
        let mut bag = SlideBag::new(l.slide_id.clone(), Tensor::matrix(n, dim, data)?)?;
        bag.patient_id = l.patient_id.clone();
        match &l.target {
            SlideTarget::Class(c) => bag.label = Some(classes.binary_search(c).expect("collected")),
            SlideTarget::Survival(r) => bag.survival = Some(*r),
        }
        bags.push(bag);
    }
    for slide in rows.keys() {
        warn!("slide {slide} has embeddings but no labels row; skipped");
    }
    Ok((bags, classes))
}
