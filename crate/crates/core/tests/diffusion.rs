use protodiff::diffusion::{
    build_schedule, forward_diffuse, forward_step, sample, train_denoiser, DenoiserConfig, GuidanceClassifier,
    IdentityDecoder, SampleRequest, ScheduleKind,
};
use protodiff::optim::AdamWConfig;
use protodiff::rng::stream;
use protodiff::Tensor;

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    let m = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, var, n)
}

#[test]
fn stepwise_chain_matches_closed_form_marginal() {
    let draws = 100_000;
    let x0 = 0.8;
    for t_total in [1usize, 4, 16] {
        let sched = build_schedule(t_total, 0.01, 0.3, ScheduleKind::Linear).unwrap();
        let mut rng = stream(31, &[t_total as u64]);
        let mut z = Tensor::full(&[draws, 1], x0);
        for t in 0..t_total {
            let eps = Tensor::randn(&[draws, 1], &mut rng);
            z = forward_step(&z, t, &eps, &sched).unwrap();
        }
        let eps = Tensor::randn(&[draws, 1], &mut rng);
        let closed = forward_diffuse(&Tensor::full(&[draws, 1], x0), t_total - 1, &eps, &sched).unwrap();
        let ab = sched.alpha_bar[t_total - 1];
        let (want_m, want_v) = (ab.sqrt() * x0, 1.0 - ab);
        for z in [&z, &closed] {
            let (m, v, n) = moments(z.data().iter().copied());
            assert!((m - want_m).abs() <= 3.0 * (want_v / n as f64).sqrt(), "T={t_total} mean {m}");
            assert!((v - want_v).abs() <= 3.0 * want_v * (2.0 / (n - 1) as f64).sqrt(), "T={t_total} var {v}");
        }
    }
}

#[test]
fn unguided_sampling_recovers_unit_gaussian() {
    let mut rng = stream(5, &[]);
    let latents = Tensor::randn(&[4000, 1], &mut rng);
    let sched = build_schedule(50, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
    let (den, _) = train_denoiser(
        &latents,
        &sched,
        &DenoiserConfig {
            hidden: 32,
            time_dim: 8,
            steps: 3000,
            optimizer: AdamWConfig::default().with_lr(2e-3),
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let req = SampleRequest {
        prototype: 0,
        guidance_w: 0.0,
        seed: 17,
        count: 10_000,
    };
    let out = sample(&req, &den, None::<&GuidanceClassifier>, &sched, &IdentityDecoder(1)).unwrap();
    let (m, v, _) = moments(out.iter().map(|s| s.values[0]));
    assert!(m.abs() < 0.05, "mean {m}");
    assert!((v - 1.0).abs() < 0.1, "var {v}");
}

#[test]
fn sampling_is_reproducible_across_batches() {
    let mut rng = stream(6, &[]);
    let latents = Tensor::randn(&[500, 2], &mut rng);
    let sched = build_schedule(20, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
    let (den, _) = train_denoiser(&latents, &sched, &DenoiserConfig { steps: 50, ..Default::default() }).unwrap();
    let draw = |count| {
        let req = SampleRequest {
            prototype: 0,
            guidance_w: 0.0,
            seed: 3,
            count,
        };
        sample(&req, &den, None::<&GuidanceClassifier>, &sched, &IdentityDecoder(2)).unwrap()
    };
    // Sample i depends only on (seed, i), so a longer draw extends a shorter one.
    let (short, long) = (draw(300), draw(700));
    assert_eq!(short[..], long[..300]);
}
