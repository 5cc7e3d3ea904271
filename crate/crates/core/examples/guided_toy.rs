//! Two-prototype 2-D toy: train a denoiser and a noisy-latent classifier on a
//! mixture at (+2, 0) and (-2, 0), then sample with and without guidance.
//!
//! cargo run --release --example guided_toy

use std::time::Instant;

use protodiff::diffusion::{
    build_schedule, sample, train_denoiser, train_guidance_classifier, ClassifierConfig,
    DenoiserConfig, IdentityDecoder, SampleRequest, ScheduleKind,
};
use protodiff::optim::AdamWConfig;
use protodiff::rng::stream;
use protodiff::Tensor;
use rand_distr::{Distribution, Normal};

fn main() -> protodiff::Result<()> {
    let start = Instant::now();
    let mut rng = stream(7, &[]);
    let spread = Normal::new(0.0, 0.5).unwrap();
    let n = 2000;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 2) as u32;
        let cx = if y == 0 { 2.0 } else { -2.0 };
        data.push(cx + spread.sample(&mut rng));
        data.push(spread.sample(&mut rng));
        labels.push(y);
    }
    let latents = Tensor::matrix(n, 2, data)?;
    let schedule = build_schedule(100, 1e-3, 0.1, ScheduleKind::Linear)?;
    let opt = AdamWConfig::default().with_lr(2e-3);

    let (den, report) = train_denoiser(
        &latents,
        &schedule,
        &DenoiserConfig { steps: 3000, optimizer: opt, seed: 1, ..Default::default() },
    )?;
    let head = &report.losses[..50];
    let tail = &report.losses[report.losses.len() - 50..];
    println!(
        "denoiser loss {:.3} -> {:.3} ({:.1?})",
        head.iter().sum::<f64>() / 50.0,
        tail.iter().sum::<f64>() / 50.0,
        start.elapsed()
    );

    let (clf, creport) = train_guidance_classifier(
        &latents,
        &labels,
        2,
        &schedule,
        &ClassifierConfig { steps: 1500, optimizer: opt, seed: 2, ..Default::default() },
    )?;
    println!("classifier clean accuracy {:.3} ({:.1?})", creport.clean_accuracy, start.elapsed());

    for (prototype, w) in [(0u32, 2.0), (1, 2.0), (0, 0.0)] {
        let req = SampleRequest { prototype, guidance_w: w, seed: 99, count: 1000 };
        let out = sample(&req, &den, Some(&clf), &schedule, &IdentityDecoder(2))?;
        let right = out.iter().filter(|s| s.values[0] > 0.0).count() as f64 / out.len() as f64;
        println!("prototype {prototype}, w={w}: fraction with x > 0 = {right:.3}");
    }
    println!("total {:.1?}", start.elapsed());
    Ok(())
}
