use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{contract, Error, Result};
use crate::nn::{timestep_features, Bound, Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::stream;
use crate::tensor::Tensor;

use super::schedule::{forward_diffuse, NoiseSchedule};

/// Anything that predicts the injected noise `eps_hat(z_t, t)`.
pub trait NoisePredictor {
    fn latent_dim(&self) -> usize;
    fn predict_noise(&self, z_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// Shared time-conditioned MLP trunk:
/// `h1 = relu(z W0 + e(t) V0)`, `h2 = relu(h1 W1 + e(t) V1)`.
#[derive(Clone, Debug)]
pub(crate) struct TimeMlp {
    pub input: Linear,
    pub time_in: Linear,
    pub hidden: Linear,
    pub time_hidden: Linear,
    pub time_dim: usize,
}

impl TimeMlp {
    pub fn new(store: &mut ParamStore, in_dim: usize, width: usize, time_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[0x7117]);
        Self {
            input: Linear::new(store, "trunk.input", in_dim, width, &mut rng),
            time_in: Linear::new(store, "trunk.time_in", time_dim, width, &mut rng),
            hidden: Linear::new(store, "trunk.hidden", width, width, &mut rng),
            time_hidden: Linear::new(store, "trunk.time_hidden", time_dim, width, &mut rng),
            time_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, steps: &[usize]) -> Result<Var> {
        let temb = tape.constant(timestep_features(steps, self.time_dim))?;
        let a = self.input.forward(tape, bound, z)?;
        let b = self.time_in.forward(tape, bound, temb)?;
        let h = tape.add(a, b)?;
        let h = tape.relu(h)?;
        let a = self.hidden.forward(tape, bound, h)?;
        let b = self.time_hidden.forward(tape, bound, temb)?;
        let h = tape.add(a, b)?;
        tape.relu(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub cosine: bool,
    pub seed: u64,
}

impl Default for DenoiserConfig {
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

/// Time-conditioned MLP predicting noise. The output layer starts at zero,
/// so an untrained model predicts `eps_hat = 0`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    latent_dim: usize,
    hidden: usize,
    timesteps: usize,
    store: ParamStore,
    trunk: TimeMlp,
    head: Linear,
}

impl Denoiser {
    pub fn new(latent_dim: usize, hidden: usize, time_dim: usize, timesteps: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let trunk = TimeMlp::new(&mut store, latent_dim, hidden, time_dim, seed);
        let head = Linear::zeros(&mut store, "head", hidden, latent_dim);
        Self {
            latent_dim,
            hidden,
            timesteps,
            store,
            trunk,
            head,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
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

    /// Mean squared noise-prediction error on a batch.
    fn loss(&self, tape: &mut Tape, bound: &Bound, z_t: Tensor, steps: &[usize], eps: Tensor) -> Result<Var> {
        let z = tape.constant(z_t)?;
        let target = tape.constant(eps)?;
        let pred = self.forward(tape, bound, z, steps)?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq)?;
        tape.scale(total, 1.0 / steps.len() as f64)
    }

    pub fn to_checkpoint(&self, extra: Vec<(String, String)>) -> Checkpoint {
        let mut meta = vec![
            ("kind".to_string(), "denoiser".to_string()),
            ("latent_dim".into(), self.latent_dim.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("time_dim".into(), self.trunk.time_dim.to_string()),
            ("timesteps".into(), self.timesteps.to_string()),
        ];
        meta.extend(extra);
        self.store.to_checkpoint(meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind") != Some("denoiser") {
            return Err(Error::Format("not a denoiser checkpoint".into()));
        }
        let mut d = Self::new(
            ckpt.meta_parse("latent_dim")?,
            ckpt.meta_parse("hidden")?,
            ckpt.meta_parse("time_dim")?,
            ckpt.meta_parse("timesteps")?,
            0,
        );
        d.store.load_checkpoint(ckpt)?;
        Ok(d)
    }
}

impl NoisePredictor for Denoiser {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn predict_noise(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        if z_t.rank() != 2 || z_t.shape()[1] != self.latent_dim {
            return Err(Error::Dimension {
                left: z_t.shape().to_vec(),
                right: vec![z_t.outer_len(), self.latent_dim],
                context: "denoiser input",
            });
        }
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape)?;
        let z = tape.constant(z_t.clone())?;
        let steps = vec![t; z_t.shape()[0]];
        let out = self.forward(&mut tape, &bound, z, &steps)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    pub losses: Vec<f64>,
}

/// Draws a training batch: rows sampled with replacement, uniform
/// timesteps, Gaussian noise, and the corresponding noisy latents.
pub(crate) fn noisy_batch<R: rand::Rng>(
    latents: &Tensor,
    schedule: &NoiseSchedule,
    batch: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Tensor, Vec<usize>, Tensor)> {
    let n = latents.outer_len();
    let d = latents.last_dim();
    let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
    let steps: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(0..schedule.timesteps()))
        .collect();
    let eps = Tensor::randn(&[batch, d], rng);
    let mut z_t = Vec::with_capacity(batch * d);
    for (i, (&r, &t)) in rows.iter().zip(&steps).enumerate() {
        let z0 = Tensor::vector(latents.row(r).to_vec());
        let e = Tensor::vector(eps.row(i).to_vec());
        z_t.extend_from_slice(forward_diffuse(&z0, t, &e, schedule)?.data());
    }
    Ok((rows, Tensor::matrix(batch, d, z_t)?, steps, eps))
}

/// Fits `eps_hat` by minimizing `E ||eps - eps_hat(z_t, t)||^2` over
/// uniform timesteps and Gaussian noise.
pub fn train_denoiser(
    latents: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &DenoiserConfig,
) -> Result<(Denoiser, DenoiserReport)> {
    if latents.rank() != 2 || latents.outer_len() == 0 {
        return Err(contract("denoiser training needs a non-empty [n, d] latent set"));
    }
    let d = latents.last_dim();
    let mut model = Denoiser::new(d, cfg.hidden, cfg.time_dim, schedule.timesteps(), cfg.seed);
    let schedule_lr = if cfg.cosine {
        LrSchedule::Cosine {
            total_steps: cfg.steps as u64,
        }
    } else {
        LrSchedule::Constant
    };
    let mut opt = AdamW::new(cfg.optimizer, schedule_lr, &model.store);
    let mut rng = stream(cfg.seed, &[0xd1f]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (_, z_t, steps, eps) = noisy_batch(latents, schedule, cfg.batch_size.max(1), &mut rng)?;
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape)?;
        let loss = model.loss(&mut tape, &bound, z_t, &steps, eps)?;
        tape.backward(loss)?;
        model.store.accumulate_grads(&tape, &bound)?;
        opt.step(&mut model.store)?;
        model.store.zero_grad();
        losses.push(tape.value(loss).item()?);
    }
    Ok((model, DenoiserReport { losses }))
}
