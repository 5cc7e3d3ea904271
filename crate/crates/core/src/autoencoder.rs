//! MLP latent autoencoder: `z = E(x)` into an `h*w*c` latent, `x̂ = D(z)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{contract, Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl LatentShape {
    pub fn flat(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn dim(&self) -> usize {
        self.h * self.w * self.c
    }
}

impl Default for LatentShape {
    fn default() -> Self {
        Self { h: 4, w: 4, c: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub input_dim: usize,
    pub latent: LatentShape,
    /// Hidden widths of the encoder; the decoder mirrors them. Empty means
    /// a purely linear autoencoder.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub cosine: bool,
    /// Fraction of rows held out to report a separate held-out loss.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl AutoencoderConfig {
    pub fn new(input_dim: usize, latent: LatentShape) -> Self {
        Self {
            input_dim,
            latent,
            hidden: vec![64],
            epochs: 50,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            cosine: true,
            holdout_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    input_dim: usize,
    latent: LatentShape,
    hidden: Vec<usize>,
    store: ParamStore,
    encoder: Vec<Linear>,
    decoder: Vec<Linear>,
}

impl Autoencoder {
    pub fn new(input_dim: usize, latent: LatentShape, hidden: &[usize], seed: u64) -> Self {
        let mut rng = stream(seed, &[0xae]);
        let mut store = ParamStore::new();
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(latent.dim());
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("enc{i}"), w[0], w[1], &mut rng))
            .collect();
        widths.reverse();
        let decoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("dec{i}"), w[0], w[1], &mut rng))
            .collect();
        Self {
            input_dim,
            latent,
            hidden: hidden.to_vec(),
            store,
            encoder,
            decoder,
        }
    }

    /// Square linear autoencoder whose encoder and decoder are identities.
    pub fn identity(dim: usize) -> Self {
        let mut ae = Self::new(dim, LatentShape::flat(1, 1, dim), &[], 0);
        for lin in ae.encoder.clone().iter().chain(ae.decoder.clone().iter()) {
            ae.store.set(lin.weight, Tensor::eye(dim)).expect("square");
            ae.store.set(lin.bias, Tensor::zeros(&[dim])).expect("sized");
        }
        ae
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.latent
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.dim()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn run_stack(tape: &mut Tape, bound: &Bound, layers: &[Linear], mut x: Var) -> Result<Var> {
        for (i, lin) in layers.iter().enumerate() {
            x = lin.forward(tape, bound, x)?;
            if i + 1 < layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    fn check_cols(&self, x: &Tensor, want: usize, context: &'static str) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != want {
            return Err(Error::Dimension {
                left: x.shape().to_vec(),
                right: vec![x.outer_len(), want],
                context,
            });
        }
        Ok(())
    }

    /// Encodes a `[n, input_dim]` batch into `[n, latent_dim]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_cols(x, self.input_dim, "encoder input")?;
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let z = Self::run_stack(&mut tape, &bound, &self.encoder, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Decodes a `[n, latent_dim]` batch into `[n, input_dim]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_cols(z, self.latent_dim(), "decoder input")?;
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape)?;
        let zv = tape.constant(z.clone())?;
        let x = Self::run_stack(&mut tape, &bound, &self.decoder, zv)?;
        Ok(tape.value(x).clone())
    }

    /// Mean squared reconstruction error over all elements.
    pub fn reconstruction_mse(&self, x: &Tensor) -> Result<f64> {
        let recon = self.decode(&self.encode(x)?)?;
        let n = x.len() as f64;
        Ok(x.data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    fn batch_loss(&self, tape: &mut Tape, bound: &Bound, batch: Tensor) -> Result<Var> {
        let x = tape.constant(batch)?;
        let z = Self::run_stack(tape, bound, &self.encoder, x)?;
        let recon = Self::run_stack(tape, bound, &self.decoder, z)?;
        let diff = tape.sub(recon, x)?;
        let sq = tape.mul(diff, diff)?;
        tape.mean(sq)
    }

    pub fn to_checkpoint(&self, extra: Vec<(String, String)>) -> Checkpoint {
        let mut meta = vec![
            ("kind".to_string(), "autoencoder".to_string()),
            ("input_dim".into(), self.input_dim.to_string()),
            ("latent_h".into(), self.latent.h.to_string()),
            ("latent_w".into(), self.latent.w.to_string()),
            ("latent_c".into(), self.latent.c.to_string()),
            (
                "hidden".into(),
                self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
        ];
        meta.extend(extra);
        self.store.to_checkpoint(meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let hidden = ckpt
            .meta("hidden")
            .unwrap_or_default()
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Format("bad hidden width".into())))
            .collect::<Result<Vec<usize>>>()?;
        let latent = LatentShape {
            h: ckpt.meta_parse("latent_h")?,
            w: ckpt.meta_parse("latent_w")?,
            c: ckpt.meta_parse("latent_c")?,
        };
        let mut ae = Self::new(ckpt.meta_parse("input_dim")?, latent, &hidden, 0);
        ae.store.load_checkpoint(ckpt)?;
        Ok(ae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss per optimizer step.
    pub step_losses: Vec<f64>,
    /// Final reconstruction MSE on the training rows.
    pub train_loss: f64,
    /// Final reconstruction MSE on held-out rows, if any were held out.
    pub heldout_loss: Option<f64>,
}

/// Trains an autoencoder on `data` (`[n, input_dim]`) by minimizing mean
/// squared reconstruction error.
pub fn train_autoencoder(
    data: &Tensor,
    cfg: &AutoencoderConfig,
) -> Result<(Autoencoder, AutoencoderReport)> {
    let n = data.outer_len();
    if data.is_empty() || n == 0 {
        return Err(contract("autoencoder training needs a non-empty dataset"));
    }
    let mut ae = Autoencoder::new(cfg.input_dim, cfg.latent, &cfg.hidden, cfg.seed);
    ae.check_cols(data, cfg.input_dim, "training data")?;

    let mut rng = stream(cfg.seed, &[0xae, 1]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = ((n as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = n_hold.min(n - 1);
    let (held, train) = order.split_at(n_hold);
    let mut train = train.to_vec();
    train.sort_unstable();
    let gather = |idx: &[usize]| -> Result<Tensor> {
        let d = data.last_dim();
        let mut out = Vec::with_capacity(idx.len() * d);
        idx.iter().for_each(|&i| out.extend_from_slice(data.row(i)));
        Tensor::matrix(idx.len(), d, out)
    };

    let batch = cfg.batch_size.max(1).min(train.len());
    let steps_per_epoch = train.len().div_ceil(batch);
    let schedule = if cfg.cosine {
        LrSchedule::Cosine {
            total_steps: (steps_per_epoch * cfg.epochs) as u64,
        }
    } else {
        LrSchedule::Constant
    };
    let mut opt = AdamW::new(cfg.optimizer, schedule, ae.params());
    let mut report = AutoencoderReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        step_losses: Vec::new(),
        train_loss: f64::NAN,
        heldout_loss: None,
    };

    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train.chunks(batch) {
            let mut tape = Tape::new();
            let bound = ae.store.bind(&mut tape)?;
            let loss = ae.batch_loss(&mut tape, &bound, gather(chunk)?)?;
            tape.backward(loss)?;
            ae.store.accumulate_grads(&tape, &bound)?;
            opt.step(&mut ae.store)?;
            ae.store.zero_grad();
            let l = tape.value(loss).item()?;
            report.step_losses.push(l);
            total += l * chunk.len() as f64;
        }
        report.epoch_losses.push(total / train.len() as f64);
    }

    report.train_loss = ae.reconstruction_mse(&gather(&train)?)?;
    if !held.is_empty() {
        report.heldout_loss = Some(ae.reconstruction_mse(&gather(held)?)?);
    }
    Ok((ae, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_latent() {
        let mut ae = Autoencoder::new(6, LatentShape::flat(1, 1, 3), &[4], 1);
        for p in ae.params_mut().params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::matrix(2, 6, (0..12).map(f64::from).collect()).unwrap();
        let z = ae.encode(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let out = ae.decode(&Tensor::zeros(&[1, 3])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_autoencoder_passes_through() {
        let ae = Autoencoder::identity(5);
        let x = Tensor::matrix(1, 5, vec![0.1, -2.0, 3.0, 0.0, 7.5]).unwrap();
        assert_eq!(ae.encode(&x).unwrap(), x);
    }

    #[test]
    fn default_shape_contract() {
        let img = ImageShape::default();
        let ae = Autoencoder::new(img.dim(), LatentShape::default(), &[32], 0);
        let out = ae.decode(&Tensor::zeros(&[2, 64])).unwrap();
        assert_eq!(out.shape(), &[2, 16 * 16 * 3]);
    }

    #[test]
    fn dimension_mismatch() {
        let ae = Autoencoder::new(4, LatentShape::flat(1, 1, 2), &[], 0);
        assert!(ae.encode(&Tensor::zeros(&[1, 3])).is_err());
        assert!(ae.decode(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = AutoencoderConfig::new(3, LatentShape::flat(1, 1, 1));
        assert!(train_autoencoder(&Tensor::zeros(&[0, 3]), &cfg).is_err());
    }

    #[test]
    fn encode_is_pure() {
        let ae = Autoencoder::new(4, LatentShape::flat(1, 1, 2), &[3], 7);
        let x = Tensor::matrix(1, 4, vec![0.3, 0.2, -0.1, 1.0]).unwrap();
        assert_eq!(ae.encode(&x).unwrap(), ae.encode(&x).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ae = Autoencoder::new(4, LatentShape::flat(1, 1, 2), &[3], 7);
        let back = Autoencoder::from_checkpoint(&ae.to_checkpoint(vec![])).unwrap();
        assert_eq!(back.params(), ae.params());
    }
}
