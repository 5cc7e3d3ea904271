//! Compresses 8-d toy embeddings to a 2-d latent and reports held-out
//! reconstruction error.
//!
//! cargo run --release --example autoencoder_fit

use protodiff::autoencoder::{train_autoencoder, AutoencoderConfig, LatentShape};
use protodiff::toy::{generate, ToySpec};
use protodiff::Tensor;

fn main() -> protodiff::Result<()> {
    let (cohorts, _) = generate(&ToySpec::default())?;
    let c = &cohorts[0];
    let data = Tensor::matrix(c.rows(), c.dim(), c.data().to_vec())?;
    let cfg = AutoencoderConfig {
        hidden: vec![16],
        epochs: 60,
        holdout_fraction: 0.2,
        optimizer: protodiff::optim::AdamWConfig::default().with_lr(3e-3),
        seed: 4,
        ..AutoencoderConfig::new(c.dim(), LatentShape::flat(1, 1, 2))
    };
    let (ae, report) = train_autoencoder(&data, &cfg)?;
    for (e, l) in report.epoch_losses.iter().enumerate().step_by(10) {
        println!("epoch {e:3}  loss {l:.4}");
    }
    println!("train mse {:.4}, held-out mse {:.4}", report.train_loss, report.heldout_loss.unwrap_or(f64::NAN));
    let z = ae.encode(&Tensor::matrix(3, c.dim(), c.data()[..3 * c.dim()].to_vec())?)?;
    for row in z.rows() {
        println!("latent {row:.3?}");
    }
    Ok(())
}
