use super::*;
use crate::error::Error;
use crate::rng::stream;
use crate::tensor::Tensor;

struct ZeroNoise(usize);

impl NoisePredictor for ZeroNoise {
    fn latent_dim(&self) -> usize {
        self.0
    }
    fn predict_noise(&self, z_t: &Tensor, _t: usize) -> crate::Result<Tensor> {
        Ok(Tensor::zeros(z_t.shape()))
    }
}

/// Returns a fixed tensor regardless of input.
struct FixedNoise(Tensor);

impl NoisePredictor for FixedNoise {
    fn latent_dim(&self) -> usize {
        self.0.last_dim()
    }
    fn predict_noise(&self, _z: &Tensor, _t: usize) -> crate::Result<Tensor> {
        Ok(self.0.clone())
    }
}

/// `log C(y|z) = -||z - mu_y||^2 / 2 + const`, so the gradient is `mu_y - z`.
struct Quadratic {
    means: Vec<Vec<f64>>,
}

impl LatentClassifier for Quadratic {
    fn latent_dim(&self) -> usize {
        self.means[0].len()
    }
    fn num_classes(&self) -> usize {
        self.means.len()
    }
    fn grad_log_prob(&self, z: &Tensor, _t: usize, labels: &[u32]) -> crate::Result<Tensor> {
        let mut out = Vec::new();
        for (row, &y) in z.rows().zip(labels) {
            out.extend(row.iter().zip(&self.means[y as usize]).map(|(z, m)| m - z));
        }
        Tensor::new(z.shape().to_vec(), out)
    }
}

struct Constant(usize, usize);

impl LatentClassifier for Constant {
    fn latent_dim(&self) -> usize {
        self.0
    }
    fn num_classes(&self) -> usize {
        self.1
    }
    fn grad_log_prob(&self, z: &Tensor, _t: usize, _labels: &[u32]) -> crate::Result<Tensor> {
        Ok(Tensor::zeros(z.shape()))
    }
}

fn toy_schedule(t: usize) -> NoiseSchedule {
    build_schedule(t, 1e-3, 0.1, ScheduleKind::Linear).unwrap()
}

#[test]
fn step_at_zero_is_deterministic() {
    let s = toy_schedule(8);
    let z = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
    let a = reverse_step(&z, 0, &ZeroNoise(2), &s, &NoiseStream::new(1)).unwrap();
    let b = reverse_step(&z, 0, &ZeroNoise(2), &s, &NoiseStream::new(99)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_step_oracle_inverts_marginal() {
    let s = build_schedule(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
    let mut rng = stream(5, &[]);
    let z0 = Tensor::randn(&[4, 3], &mut rng);
    let eps = Tensor::randn(&[4, 3], &mut rng);
    let z1 = forward_diffuse(&z0, 0, &eps, &s).unwrap();
    let back = reverse_step(&z1, 0, &FixedNoise(eps), &s, &NoiseStream::new(0)).unwrap();
    for (a, b) in back.data().iter().zip(z0.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_denoiser_noise_scale() {
    let s = toy_schedule(10);
    let t = 7;
    let n = 20_000;
    let z = Tensor::zeros(&[n, 1]);
    let out = reverse_step(&z, t, &ZeroNoise(1), &s, &NoiseStream::new(3)).unwrap();
    let mean = out.data().iter().sum::<f64>() / n as f64;
    let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = s.beta[t].sqrt();
    assert!(mean.abs() < 4.0 * sd / (n as f64).sqrt());
    assert!((var.sqrt() / sd - 1.0).abs() < 0.03);
}

#[test]
fn zero_guidance_is_bit_identical() {
    let s = toy_schedule(6);
    let den = Denoiser::new(2, 8, 4, 6, 11);
    let clf = GuidanceClassifier::new(2, 3, 8, 4, 12);
    let mut rng = stream(2, &[]);
    let z = Tensor::randn(&[5, 2], &mut rng);
    let noise = NoiseStream::new(44).offset(7);
    for t in 0..6 {
        let plain = reverse_step(&z, t, &den, &s, &noise).unwrap();
        let guided = guided_reverse_step(&z, t, &[0, 1, 2, 0, 1], &den, &clf, 0.0, &s, &noise).unwrap();
        assert_eq!(plain.data(), guided.data());
    }
}

#[test]
fn constant_classifier_matches_unguided() {
    let s = toy_schedule(4);
    let z = Tensor::matrix(1, 2, vec![0.4, -0.2]).unwrap();
    let noise = NoiseStream::new(1);
    let plain = reverse_step(&z, 2, &ZeroNoise(2), &s, &noise).unwrap();
    let guided = guided_reverse_step(&z, 2, &[1], &ZeroNoise(2), &Constant(2, 2), 3.0, &s, &noise).unwrap();
    assert_eq!(plain, guided);
}

#[test]
fn analytic_guidance_shift() {
    let s = toy_schedule(5);
    let clf = Quadratic {
        means: vec![vec![2.0, 0.0], vec![-2.0, 1.0]],
    };
    let z = Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap();
    let noise = NoiseStream::new(9);
    let (t, w) = (3, 1.5);
    let plain = reverse_step(&z, t, &ZeroNoise(2), &s, &noise).unwrap();
    let guided = guided_reverse_step(&z, t, &[1], &ZeroNoise(2), &clf, w, &s, &noise).unwrap();
    let expect = [w * s.beta[t] * (-2.0 - 0.5), w * s.beta[t] * (1.0 - 0.25)];
    for i in 0..2 {
        assert!((guided.data()[i] - plain.data()[i] - expect[i]).abs() < 1e-12);
    }
}

#[test]
fn guidance_rejects_bad_inputs() {
    let s = toy_schedule(3);
    let z = Tensor::zeros(&[1, 2]);
    let noise = NoiseStream::new(0);
    let err = guided_reverse_step(&z, 1, &[5], &ZeroNoise(2), &Constant(2, 2), 1.0, &s, &noise);
    assert!(matches!(err, Err(Error::Contract(_))));
    let err = guided_reverse_step(&z, 1, &[0], &ZeroNoise(2), &Constant(2, 2), -1.0, &s, &noise);
    assert!(matches!(err, Err(Error::Contract(_))));
    assert!(matches!(reverse_step(&z, 3, &ZeroNoise(2), &s, &noise), Err(Error::Bounds(_))));
}

#[test]
fn classifier_gradient_matches_finite_differences() {
    let clf = GuidanceClassifier::new(3, 4, 16, 8, 21);
    let z = vec![0.3, -0.7, 1.1];
    for y in 0..4 {
        let g = grad_logprob(&z, 5, y, &clf).unwrap();
        let h = 1e-6;
        let num: Vec<f64> = (0..3)
            .map(|i| {
                let f = |d: f64| {
                    let mut p = z.clone();
                    p[i] += d;
                    let lp = clf.log_probs(&Tensor::matrix(1, 3, p).unwrap(), 5).unwrap();
                    lp.data()[y as usize]
                };
                (f(h) - f(-h)) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / norm < 1e-6, "class {y}: {g:?} vs {num:?}");
    }
}

#[test]
fn uniform_classifier_has_zero_gradient() {
    let mut clf = GuidanceClassifier::new(2, 3, 8, 4, 0);
    // Zero the head so every logit is identical.
    let ids: Vec<_> = ["head.weight", "head.bias"]
        .iter()
        .map(|n| clf_param(&clf, n))
        .collect();
    for id in ids {
        let shape = clf.params().get(id).shape().to_vec();
        clf.params_mut().set(id, Tensor::zeros(&shape)).unwrap();
    }
    let g = grad_logprob(&[0.2, 1.0], 1, 2, &clf).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    let lp = clf.log_probs(&Tensor::matrix(1, 2, vec![0.2, 1.0]).unwrap(), 1).unwrap();
    let total: f64 = lp.data().iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

fn clf_param(clf: &GuidanceClassifier, name: &str) -> crate::nn::ParamId {
    clf.params().by_name(name).unwrap_or_else(|| panic!("missing {name}"))
}

#[test]
fn saturated_gradient_is_finite() {
    let clf = Quadratic {
        means: vec![vec![1e3, 0.0]],
    };
    let g = grad_logprob(&[1e3, 0.0], 0, 0, &clf).unwrap();
    assert!(g.iter().all(|v| v.is_finite()));
    let real = GuidanceClassifier::new(2, 2, 8, 4, 3);
    let g = grad_logprob(&[80.0, -80.0], 0, 0, &real).unwrap();
    assert!(g.iter().all(|v| v.is_finite()));
}

#[test]
fn untrained_denoiser_loss_is_latent_dim() {
    let s = toy_schedule(20);
    let latents = Tensor::zeros(&[4, 5]);
    let cfg = DenoiserConfig {
        steps: 1,
        batch_size: 4000,
        ..Default::default()
    };
    let (_, report) = train_denoiser(&latents, &s, &cfg).unwrap();
    assert!((report.losses[0] - 5.0).abs() < 0.25, "{}", report.losses[0]);
    assert!(train_denoiser(&Tensor::zeros(&[0, 5]), &s, &cfg).is_err());
}

#[test]
fn single_class_classifier_rejected() {
    let s = toy_schedule(4);
    let latents = Tensor::zeros(&[3, 2]);
    let err = train_guidance_classifier(&latents, &[1, 1, 1], 2, &s, &ClassifierConfig::default());
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn empty_and_repeated_sampling() {
    let s = toy_schedule(5);
    let den = Denoiser::new(2, 8, 4, 5, 1);
    let clf = GuidanceClassifier::new(2, 2, 8, 4, 2);
    let mut req = SampleRequest {
        prototype: 1,
        guidance_w: 2.0,
        seed: 17,
        count: 0,
    };
    assert!(sample(&req, &den, Some(&clf), &s, &IdentityDecoder(2)).unwrap().is_empty());
    req.count = 300;
    let a = sample(&req, &den, Some(&clf), &s, &IdentityDecoder(2)).unwrap();
    let b = sample(&req, &den, Some(&clf), &s, &IdentityDecoder(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 300);
    assert!(a.iter().all(|g| g.prototype == 1));
    req.prototype = 2;
    assert!(sample(&req, &den, Some(&clf), &s, &IdentityDecoder(2)).is_err());
    assert!(sample(&req, &den, Some(&clf), &s, &IdentityDecoder(3)).is_err());
}

#[test]
fn checkpoints_round_trip() {
    let den = Denoiser::new(3, 8, 4, 10, 5);
    let back = Denoiser::from_checkpoint(&den.to_checkpoint(vec![])).unwrap();
    let z = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
    assert_eq!(den.predict_noise(&z, 4).unwrap(), back.predict_noise(&z, 4).unwrap());
    let clf = GuidanceClassifier::new(3, 2, 8, 4, 5);
    let back = GuidanceClassifier::from_checkpoint(&clf.to_checkpoint(vec![])).unwrap();
    assert_eq!(clf.logits(&z, 2).unwrap(), back.logits(&z, 2).unwrap());
}
