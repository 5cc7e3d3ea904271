use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{contract, Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

use super::classifier::LatentClassifier;
use super::denoiser::NoisePredictor;
use super::schedule::NoiseSchedule;

/// Counter-based noise source: the draw for sample `i` at step `t` depends
/// only on `(seed, i, t)`, never on batch layout or thread scheduling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    /// Global index of the first row in the current batch.
    pub first_sample: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            first_sample: 0,
        }
    }

    pub fn offset(self, first_sample: u64) -> Self {
        Self {
            first_sample,
            ..self
        }
    }

    /// Standard normal `[rows, dim]` keyed by `(seed, sample, key)`.
    pub fn normal(&self, rows: usize, dim: usize, key: u64) -> Tensor {
        let mut data = Vec::with_capacity(rows * dim);
        for i in 0..rows {
            let mut rng = stream(self.seed, &[self.first_sample + i as u64, key]);
            data.extend((0..dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        }
        Tensor::new(vec![rows, dim], data).expect("sized")
    }
}

fn check_batch(z: &Tensor, dim: usize) -> Result<()> {
    if z.rank() != 2 || z.shape()[1] != dim {
        return Err(Error::Dimension {
            left: z.shape().to_vec(),
            right: vec![z.outer_len(), dim],
            context: "latent batch",
        });
    }
    Ok(())
}

/// `mu = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta_t)`.
pub fn posterior_mean<P: NoisePredictor + ?Sized>(
    z_t: &Tensor,
    t: usize,
    denoiser: &P,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    check_batch(z_t, denoiser.latent_dim())?;
    let eps = denoiser.predict_noise(z_t, t)?;
    let beta = schedule.beta[t];
    let coef = beta / (1.0 - schedule.alpha_bar[t]).sqrt();
    let scale = 1.0 / (1.0 - beta).sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(z, e)| scale * (z - coef * e))
        .collect();
    Tensor::new(z_t.shape().to_vec(), data)
}

/// Adds `sqrt(beta_t) * xi` to the mean; no noise at `t = 0`.
fn add_step_noise(mut mean: Tensor, t: usize, schedule: &NoiseSchedule, noise: &NoiseStream) -> Tensor {
    if t == 0 {
        return mean;
    }
    let sigma = schedule.beta[t].sqrt();
    let xi = noise.normal(mean.outer_len(), mean.last_dim(), t as u64);
    mean.data_mut()
        .iter_mut()
        .zip(xi.data())
        .for_each(|(m, x)| *m += sigma * x);
    mean
}

/// One ancestral step `z_{t-1} ~ N(mu(z_t, t), beta_t I)`.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    z_t: &Tensor,
    t: usize,
    denoiser: &P,
    schedule: &NoiseSchedule,
    noise: &NoiseStream,
) -> Result<Tensor> {
    let mean = posterior_mean(z_t, t, denoiser, schedule)?;
    Ok(add_step_noise(mean, t, schedule, noise))
}

/// Classifier-guided step: the mean moves by
/// `w * beta_t * grad_z log C(y | z_t, t)` before the same noise is added.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step<P, C>(
    z_t: &Tensor,
    t: usize,
    labels: &[u32],
    denoiser: &P,
    classifier: &C,
    w: f64,
    schedule: &NoiseSchedule,
    noise: &NoiseStream,
) -> Result<Tensor>
where
    P: NoisePredictor + ?Sized,
    C: LatentClassifier + ?Sized,
{
    if !(w >= 0.0) {
        return Err(contract(format!("guidance scale must be >= 0, got {w}")));
    }
    if let Some(y) = labels.iter().find(|&&y| y as usize >= classifier.num_classes()) {
        return Err(contract(format!(
            "prototype id {y} outside 0..{}",
            classifier.num_classes()
        )));
    }
    let mut mean = posterior_mean(z_t, t, denoiser, schedule)?;
    if w != 0.0 {
        let grad = classifier.grad_log_prob(z_t, t, labels)?;
        let shift = w * schedule.beta[t];
        mean.data_mut()
            .iter_mut()
            .zip(grad.data())
            .for_each(|(m, g)| *m += shift * g);
    }
    Ok(add_step_noise(mean, t, schedule, noise))
}

/// Maps final latents back to data space.
pub trait LatentDecoder {
    fn latent_dim(&self) -> usize;
    fn decode_batch(&self, z: &Tensor) -> Result<Tensor>;
}

impl LatentDecoder for Autoencoder {
    fn latent_dim(&self) -> usize {
        Autoencoder::latent_dim(self)
    }

    fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.decode(z)
    }
}

/// Returns latents unchanged; for diffusion directly in data space.
#[derive(Clone, Copy, Debug)]
pub struct IdentityDecoder(pub usize);

impl LatentDecoder for IdentityDecoder {
    fn latent_dim(&self) -> usize {
        self.0
    }

    fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub prototype: u32,
    pub guidance_w: f64,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub prototype: u32,
    pub values: Vec<f64>,
}

/// Rows per batch when sampling; batches run in parallel.
pub const SAMPLE_BATCH: usize = 256;

/// Key used for the initial `z_T` draw, distinct from every step key.
const INITIAL_KEY: u64 = u64::MAX;

/// Runs the full guided chain from `z_T ~ N(0, I)` and decodes each final
/// latent. With `classifier = None` (or `w = 0`) sampling is unguided.
pub fn sample<P, C, D>(
    request: &SampleRequest,
    denoiser: &P,
    classifier: Option<&C>,
    schedule: &NoiseSchedule,
    decoder: &D,
) -> Result<Vec<GeneratedSample>>
where
    P: NoisePredictor + Sync + ?Sized,
    C: LatentClassifier + Sync + ?Sized,
    D: LatentDecoder + Sync + ?Sized,
{
    let dim = denoiser.latent_dim();
    if decoder.latent_dim() != dim {
        return Err(contract(format!(
            "decoder expects {}-d latents, denoiser produces {dim}",
            decoder.latent_dim()
        )));
    }
    if let Some(c) = classifier {
        if c.latent_dim() != dim {
            return Err(contract(format!(
                "classifier expects {}-d latents, denoiser produces {dim}",
                c.latent_dim()
            )));
        }
        if request.prototype as usize >= c.num_classes() {
            return Err(contract(format!(
                "prototype id {} outside 0..{}",
                request.prototype,
                c.num_classes()
            )));
        }
    } else if request.guidance_w != 0.0 {
        return Err(contract("guidance scale set without a classifier"));
    }
    if request.count == 0 {
        return Ok(Vec::new());
    }

    let starts: Vec<usize> = (0..request.count).step_by(SAMPLE_BATCH).collect();
    let batches = starts
        .into_par_iter()
        .map(|start| {
            let rows = SAMPLE_BATCH.min(request.count - start);
            let noise = NoiseStream::new(request.seed).offset(start as u64);
            let labels = vec![request.prototype; rows];
            let mut z = noise.normal(rows, dim, INITIAL_KEY);
            for t in (0..schedule.timesteps()).rev() {
                z = match classifier {
                    Some(c) => guided_reverse_step(
                        &z,
                        t,
                        &labels,
                        denoiser,
                        c,
                        request.guidance_w,
                        schedule,
                        &noise,
                    )?,
                    None => reverse_step(&z, t, denoiser, schedule, &noise)?,
                };
            }
            decoder.decode_batch(&z)
        })
        .collect::<Result<Vec<Tensor>>>()?;

    Ok(batches
        .iter()
        .flat_map(|b| b.rows().map(|r| r.to_vec()).collect::<Vec<_>>())
        .map(|values| GeneratedSample {
            prototype: request.prototype,
            values,
        })
        .collect())
}
