use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_last, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{contract, Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::stream;
use crate::tensor::Tensor;

use super::denoiser::{noisy_batch, TimeMlp};
use super::schedule::{forward_diffuse, NoiseSchedule};

/// A noisy-latent classifier that can report `grad_z log p(y | z_t, t)`.
pub trait LatentClassifier {
    fn latent_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Row `i` of the result is the gradient of `log p(labels[i] | z_t[i], t)`
    /// with respect to `z_t[i]`.
    fn grad_log_prob(&self, z_t: &Tensor, t: usize, labels: &[u32]) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub cosine: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            time_dim: 16,
            steps: 2000,
            batch_size: 128,
            optimizer: AdamWConfig::default(),
            cosine: true,
            seed: 0,
        }
    }
}

/// Time-conditioned MLP over noisy latents producing one logit per global
/// prototype.
#[derive(Clone, Debug)]
pub struct GuidanceClassifier {
    latent_dim: usize,
    num_classes: usize,
    hidden: usize,
    store: ParamStore,
    trunk: TimeMlp,
    head: Linear,
}

impl GuidanceClassifier {
    pub fn new(latent_dim: usize, num_classes: usize, hidden: usize, time_dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let trunk = TimeMlp::new(&mut store, latent_dim, hidden, time_dim, seed ^ 0xc1a5);
        let mut rng = stream(seed, &[0xc1a5, 1]);
        let head = Linear::new(&mut store, "head", hidden, num_classes, &mut rng);
        Self {
            latent_dim,
            num_classes,
            hidden,
            store,
            trunk,
            head,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, steps: &[usize]) -> Result<Var> {
        let h = self.trunk.forward(tape, bound, z, steps)?;
        self.head.forward(tape, bound, h)
    }

    fn check_input(&self, z: &Tensor) -> Result<()> {
        if z.rank() != 2 || z.shape()[1] != self.latent_dim {
            return Err(Error::Dimension {
                left: z.shape().to_vec(),
                right: vec![z.outer_len(), self.latent_dim],
                context: "classifier input",
            });
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[u32]) -> Result<()> {
        match labels.iter().find(|&&y| y as usize >= self.num_classes) {
            Some(y) => Err(contract(format!(
                "prototype id {y} outside 0..{}",
                self.num_classes
            ))),
            None => Ok(()),
        }
    }

    pub fn logits(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self.check_input(z_t)?;
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape)?;
        let z = tape.constant(z_t.clone())?;
        let out = self.forward(&mut tape, &bound, z, &vec![t; z_t.shape()[0]])?;
        Ok(tape.value(out).clone())
    }

    pub fn log_probs(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        Ok(log_softmax_last(&self.logits(z_t, t)?))
    }

    /// Fraction of rows whose argmax logit equals the label, with inputs
    /// diffused to step `t` (or clean when `t` is `None`).
    pub fn accuracy(
        &self,
        latents: &Tensor,
        labels: &[u32],
        t: Option<usize>,
        schedule: &NoiseSchedule,
        seed: u64,
    ) -> Result<f64> {
        let input = match t {
            None => latents.clone(),
            Some(t) => {
                let mut rng = stream(seed, &[0xacc]);
                let eps = Tensor::randn(latents.shape(), &mut rng);
                forward_diffuse(latents, t, &eps, schedule)?
            }
        };
        let logits = self.logits(&input, t.unwrap_or(0))?;
        let correct = logits
            .rows()
            .zip(labels)
            .filter(|(row, &y)| argmax(row) == y as usize)
            .count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    fn loss(&self, tape: &mut Tape, bound: &Bound, z_t: Tensor, steps: &[usize], labels: &[usize]) -> Result<Var> {
        let z = tape.constant(z_t)?;
        let logits = self.forward(tape, bound, z, steps)?;
        let logp = tape.log_softmax(logits)?;
        let onehot = tape.constant(one_hot(labels, self.num_classes))?;
        let picked = tape.mul(logp, onehot)?;
        let total = tape.sum(picked)?;
        tape.scale(total, -1.0 / labels.len() as f64)
    }

    pub fn to_checkpoint(&self, extra: Vec<(String, String)>) -> Checkpoint {
        let mut meta = vec![
            ("kind".to_string(), "guidance_classifier".to_string()),
            ("latent_dim".into(), self.latent_dim.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("time_dim".into(), self.trunk.time_dim.to_string()),
        ];
        meta.extend(extra);
        self.store.to_checkpoint(meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind") != Some("guidance_classifier") {
            return Err(Error::Format("not a guidance classifier checkpoint".into()));
        }
        let mut c = Self::new(
            ckpt.meta_parse("latent_dim")?,
            ckpt.meta_parse("num_classes")?,
            ckpt.meta_parse("hidden")?,
            ckpt.meta_parse("time_dim")?,
            0,
        );
        c.store.load_checkpoint(ckpt)?;
        Ok(c)
    }
}

impl LatentClassifier for GuidanceClassifier {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn grad_log_prob(&self, z_t: &Tensor, t: usize, labels: &[u32]) -> Result<Tensor> {
        self.check_input(z_t)?;
        self.check_labels(labels)?;
        if labels.len() != z_t.shape()[0] {
            return Err(contract("one label per latent row is required"));
        }
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape)?;
        let z = tape.leaf(z_t.clone())?;
        let logits = self.forward(&mut tape, &bound, z, &vec![t; labels.len()])?;
        let logp = tape.log_softmax(logits)?;
        let idx: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
        let onehot = tape.constant(one_hot(&idx, self.num_classes))?;
        let picked = tape.mul(logp, onehot)?;
        let total = tape.sum(picked)?;
        tape.backward(total)?;
        Ok(tape
            .grad(z)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(z_t.shape())))
    }
}

/// `grad_z log C(y | z_t, t)` for a single latent vector.
pub fn grad_logprob<C: LatentClassifier + ?Sized>(
    z_t: &[f64],
    t: usize,
    y: u32,
    classifier: &C,
) -> Result<Vec<f64>> {
    let z = Tensor::matrix(1, z_t.len(), z_t.to_vec())?;
    Ok(classifier.grad_log_prob(&z, t, &[y])?.into_data())
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("sized")
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub losses: Vec<f64>,
    pub clean_accuracy: f64,
}

/// Cross-entropy training over noisy latents with uniform timesteps.
/// `num_classes` is the size of the global prototype table.
pub fn train_guidance_classifier(
    latents: &Tensor,
    labels: &[u32],
    num_classes: usize,
    schedule: &NoiseSchedule,
    cfg: &ClassifierConfig,
) -> Result<(GuidanceClassifier, ClassifierReport)> {
    if latents.rank() != 2 || latents.outer_len() != labels.len() || labels.is_empty() {
        return Err(contract("classifier training needs one label per latent row"));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(contract("classifier training needs at least two distinct labels"));
    }
    let mut model = GuidanceClassifier::new(latents.last_dim(), num_classes, cfg.hidden, cfg.time_dim, cfg.seed);
    model.check_labels(labels)?;
    let lr_schedule = if cfg.cosine {
        LrSchedule::Cosine {
            total_steps: cfg.steps as u64,
        }
    } else {
        LrSchedule::Constant
    };
    let mut opt = AdamW::new(cfg.optimizer, lr_schedule, &model.store);
    let mut rng = stream(cfg.seed, &[0xc1f]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (rows, z_t, steps, _) = noisy_batch(latents, schedule, cfg.batch_size.max(1), &mut rng)?;
        let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r] as usize).collect();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape)?;
        let loss = model.loss(&mut tape, &bound, z_t, &steps, &batch_labels)?;
        tape.backward(loss)?;
        model.store.accumulate_grads(&tape, &bound)?;
        opt.step(&mut model.store)?;
        model.store.zero_grad();
        losses.push(tape.value(loss).item()?);
    }
    let clean_accuracy = model.accuracy(latents, labels, None, schedule, cfg.seed)?;
    Ok((
        model,
        ClassifierReport {
            losses,
            clean_accuracy,
        },
    ))
}
