//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the summary lines are always printed:
//!
//! cargo test --release --test acceptance

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use protodiff::dataset::{build_hybrid_corpus, build_synthetic_corpus, fid, GaussianStats, RealPatch, Source};
use protodiff::diffusion::{
    build_schedule, forward_diffuse, guided_reverse_step, reverse_step, sample, train_denoiser,
    train_guidance_classifier, ClassifierConfig, Denoiser, DenoiserConfig, GuidanceClassifier, IdentityDecoder,
    NoisePredictor, NoiseStream, SampleRequest, ScheduleKind,
};
use protodiff::mil::{train_subtyping, Abmil, AbmilConfig, MilTrainConfig, SlideBag};
use protodiff::optim::AdamWConfig;
use protodiff::pipeline::{Pipeline, PipelineConfig};
use protodiff::prototypes::{kmeans, kmeans_runs, select_elbow, KMeansConfig, WcssCurve};
use protodiff::rng::stream;
use protodiff::stats::{auroc, c_index, delong_test, wilcoxon_signed_rank, SurvivalRecord, WilcoxonMethod};
use protodiff::toy::{write_workspace, ToySpec};
use protodiff::{EmbeddingCollection, Result, Tape, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    // Keep away from the relu kink so the finite difference never straddles it.
    let data = (0..n)
        .map(|_| loop {
            let v = randn(rng);
            if v.abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------------- 1

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

fn op_case(op: usize, rng: &mut ChaCha8Rng) -> (&'static str, Vec<Vec<usize>>, Build) {
    let m = rng.random_range(1..5);
    let n = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    match op {
        0 => ("matmul", vec![vec![m, k], vec![k, n]], |t, v| t.matmul(v[0], v[1])),
        1 => ("add", vec![vec![m, n], vec![m, n]], |t, v| t.add(v[0], v[1])),
        2 => ("add broadcast", vec![vec![m, n], vec![n]], |t, v| t.add(v[0], v[1])),
        3 => ("sub", vec![vec![m, n], vec![n]], |t, v| t.sub(v[0], v[1])),
        4 => ("mul", vec![vec![m, n], vec![m, n]], |t, v| t.mul(v[0], v[1])),
        5 => ("mul broadcast", vec![vec![m, n], vec![n]], |t, v| t.mul(v[0], v[1])),
        6 => ("scale", vec![vec![m, n]], |t, v| t.scale(v[0], -1.7)),
        7 => ("relu", vec![vec![m, n]], |t, v| t.relu(v[0])),
        8 => ("tanh", vec![vec![m, n]], |t, v| t.tanh(v[0])),
        9 => ("sigmoid", vec![vec![m, n]], |t, v| t.sigmoid(v[0])),
        10 => ("softplus", vec![vec![m, n]], |t, v| t.softplus(v[0])),
        11 => ("softmax", vec![vec![m, n + 1]], |t, v| t.softmax(v[0])),
        12 => ("log_softmax", vec![vec![m, n + 1]], |t, v| t.log_softmax(v[0])),
        13 => ("layer_norm", vec![vec![m, n + 1]], |t, v| t.layer_norm(v[0])),
        14 => ("sum", vec![vec![m, n]], |t, v| t.sum(v[0])),
        15 => ("mean", vec![vec![m, n]], |t, v| t.mean(v[0])),
        16 => ("transpose", vec![vec![m, n]], |t, v| t.transpose(v[0])),
        17 => ("pool_weights", vec![vec![m, 1]], |t, v| t.pool_weights(v[0])),
        _ => ("weighted_sum", vec![vec![1, m], vec![m, n]], |t, v| t.weighted_sum(v[0], v[1])),
    }
}

const OPS: usize = 19;

/// Scalar loss `sum(op(inputs) * r)` for a fixed random `r`.
fn loss_of(build: Build, inputs: &[Tensor], r: &Tensor, leaves: bool) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| if leaves { tape.leaf(x.clone()) } else { tape.constant(x.clone()) })
        .collect::<Result<Vec<_>>>()?;
    let y = build(&mut tape, &vars)?;
    let rv = tape.constant(r.clone())?;
    let prod = tape.mul(y, rv)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Norm-wise relative error with a unit floor. Gradients far below the
/// loss scale (saturated two-column layer_norm rows reach 1e-6) sit under
/// the difference quotient's rounding noise, so they are held to an
/// absolute bound instead.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1.0)
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let h = 1e-6;
    let mut rng = stream(101, &[]);
    let mut worst: (f64, &str) = (0.0, "");
    let mut failures = Vec::new();
    for trial in 0..200 {
        let (name, shapes, build) = op_case(trial % OPS, &mut rng);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let out_shape = {
            let mut t = Tape::new();
            let vars = inputs.iter().map(|x| t.constant(x.clone())).collect::<Result<Vec<_>>>()?;
            let y = build(&mut t, &vars)?;
            t.value(y).shape().to_vec()
        };
        let r = rand_tensor(&out_shape, &mut rng);
        let (mut tape, vars, loss) = loss_of(build, &inputs, &r, true)?;
        tape.backward(loss)?;
        for (i, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).expect("leaf has a gradient").data().to_vec();
            let mut numeric = Vec::with_capacity(analytic.len());
            for j in 0..inputs[i].len() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut xs = inputs.clone();
                    xs[i].data_mut()[j] += delta;
                    let (t, _, l) = loss_of(build, &xs, &r, false)?;
                    t.value(l).item()
                };
                numeric.push((eval(h)? - eval(-h)?) / (2.0 * h));
            }
            let rel = rel_err(&analytic, &numeric);
            if rel > worst.0 {
                worst = (rel, name);
            }
            if !(rel < 1e-6) {
                failures.push(format!("{name} input {i}: {rel:.2e}"));

            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        failures.is_empty() && secs < 30.0,
        format!(
            "200 trials over {OPS} op forms, worst rel err {:.2e} ({}), {secs:.2}s{}",
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failures: {failures:?}") }
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn partition_wcss(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            p.iter()
                .zip(&sums[l])
                .map(|(x, s)| (x - s / counts[l] as f64).powi(2))
                .sum::<f64>()
        })
        .sum()
}

fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.iter().all(|&u| u) {
            best = best.min(partition_wcss(points, &labels, k));
        }
    }
    best
}

fn criterion_2() -> Result<Outcome> {
    let mut rng = stream(202, &[]);
    let (mut matched, mut worst_excess, mut monotone_runs, mut runs) = (0, 0.0f64, 0, 0);
    let mut over_when_matched = false;
    for inst in 0..50 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=3);
        let k = rng.random_range(1..=3usize.min(n));
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| randn(&mut rng) * 2.0).collect()).collect();
        let coll = EmbeddingCollection::from_rows("inst", &points)?;
        let cfg = KMeansConfig::new(k, inst as u64);
        let found = kmeans(&coll, &cfg)?.wcss;
        let opt = exhaustive_optimum(&points, k);
        let tol = 1e-9 * opt.max(1.0);
        if found <= opt + tol {
            matched += 1;
            if found > opt + 1e-9 {
                over_when_matched = true;
            }
        } else {
            worst_excess = worst_excess.max(found - opt);
        }
        for run in kmeans_runs(&coll, &cfg)? {
            runs += 1;
            if run.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].max(1.0)) {
                monotone_runs += 1;
            }
        }
    }
    Ok(outcome(
        matched >= 48 && !over_when_matched && monotone_runs == runs,
        format!(
            "optimum matched {matched}/50 (worst miss {worst_excess:.2e}), monotone Lloyd traces {monotone_runs}/{runs}"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Result<Outcome> {
    let mut rng = stream(303, &[]);
    let mut recovered = 0;
    for _ in 0..20 {
        let k_max = rng.random_range(8..=15usize);
        let knee = rng.random_range(3..=k_max - 2);
        let shallow = rng.random_range(0.2..1.0);
        let steep = shallow * rng.random_range(4.0..20.0);
        let entries = (1..=k_max)
            .map(|k| {
                let w = shallow * (k_max - k) as f64
                    + (steep - shallow) * knee.saturating_sub(k) as f64
                    + rng.random_range(0.0..0.02 * shallow);
                (k, w + 1.0)
            })
            .collect();
        if select_elbow(&WcssCurve { entries })?.k == knee {
            recovered += 1;
        }
    }
    let mut linear_flagged = 0;
    for _ in 0..20 {
        let k_min = rng.random_range(1..4usize);
        let k_max = k_min + rng.random_range(2..15usize);
        let (c, s) = (rng.random_range(10.0..1e4), rng.random_range(0.01..100.0));
        let entries = (k_min..=k_max).map(|k| (k, c + s * (k_max - k) as f64)).collect();
        if !select_elbow(&WcssCurve { entries })?.distinct {
            linear_flagged += 1;
        }
    }
    Ok(outcome(
        recovered >= 19 && linear_flagged == 20,
        format!("planted knees recovered {recovered}/20, linear curves flagged {linear_flagged}/20"),
    ))
}

// ---------------------------------------------------------------- 4

struct OracleNoise(Tensor);

impl NoisePredictor for OracleNoise {
    fn latent_dim(&self) -> usize {
        self.0.last_dim()
    }

    fn predict_noise(&self, _z_t: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

fn criterion_4() -> Result<Outcome> {
    let schedule = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear)?;
    let z0 = [1.5, -0.7];
    let draws = 100_000;
    let mut moment_fail = Vec::new();
    for (i, &t) in [0usize, 10, 100, 500, 999].iter().enumerate() {
        let mut rng = stream(404, &[i as u64]);
        let x0 = Tensor::matrix(draws, 2, z0.repeat(draws))?;
        let eps = Tensor::randn(&[draws, 2], &mut rng);
        let zt = forward_diffuse(&x0, t, &eps, &schedule)?;
        let ab = schedule.alpha_bar[t];
        let var = 1.0 - ab;
        for d in 0..2 {
            let col: Vec<f64> = zt.rows().map(|r| r[d]).collect();
            let m = col.iter().sum::<f64>() / draws as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let mean_z = (m - ab.sqrt() * z0[d]) / (var / draws as f64).sqrt();
            let var_z = (v - var) / (var * (2.0 / (draws - 1) as f64).sqrt());
            if mean_z.abs() > 3.0 || var_z.abs() > 3.0 {
                moment_fail.push(format!("t={t} dim {d}: mean z {mean_z:.2}, var z {var_z:.2}"));
            }
        }
    }

    let mut inversion_err = 0.0f64;
    let mut rng = stream(405, &[]);
    for beta in [1e-4, 0.02, 0.3, 0.9] {
        let one = build_schedule(1, beta, beta, ScheduleKind::Linear)?;
        let x0 = Tensor::randn(&[64, 3], &mut rng);
        let eps = Tensor::randn(&[64, 3], &mut rng);
        let zt = forward_diffuse(&x0, 0, &eps, &one)?;
        let back = reverse_step(&zt, 0, &OracleNoise(eps), &one, &NoiseStream::new(0))?;
        for (a, b) in back.data().iter().zip(x0.data()) {
            inversion_err = inversion_err.max((a - b).abs());
        }
    }

    let small = build_schedule(50, 1e-3, 0.2, ScheduleKind::Linear)?;
    let den = Denoiser::new(2, 16, 8, 50, 11);
    let cls = GuidanceClassifier::new(2, 4, 16, 8, 12);
    let mut equal = 0;
    for s in 0..100u64 {
        let rows = rng.random_range(1..6);
        let z = Tensor::randn(&[rows, 2], &mut rng).map(|v| v * 2.0);
        let t = rng.random_range(0..50);
        let labels: Vec<u32> = (0..rows).map(|_| rng.random_range(0..4)).collect();
        let noise = NoiseStream::new(s).offset(rng.random_range(0..1000));
        let plain = reverse_step(&z, t, &den, &small, &noise)?;
        let guided = guided_reverse_step(&z, t, &labels, &den, &cls, 0.0, &small, &noise)?;
        if plain.data().iter().zip(guided.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            equal += 1;
        }
    }
    Ok(outcome(
        moment_fail.is_empty() && inversion_err < 1e-12 && equal == 100,
        format!(
            "moments within 3 sigma at 5 steps{}, T=1 inversion max err {inversion_err:.2e}, w=0 bit-equal {equal}/100",
            if moment_fail.is_empty() { String::new() } else { format!(" FAILED {moment_fail:?}") }
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = stream(7, &[]);
    let n = 2000;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 2) as u32;
        let cx = if y == 0 { 2.0 } else { -2.0 };
        data.push(cx + 0.5 * randn(&mut rng));
        data.push(0.5 * randn(&mut rng));
        labels.push(y);
    }
    let latents = Tensor::matrix(n, 2, data)?;
    let schedule = build_schedule(100, 1e-3, 0.1, ScheduleKind::Linear)?;
    let opt = AdamWConfig::default().with_lr(2e-3);
    let (den, _) = train_denoiser(
        &latents,
        &schedule,
        &DenoiserConfig {
            steps: 3000,
            optimizer: opt,
            seed: 1,
            ..Default::default()
        },
    )?;
    let (cls, _) = train_guidance_classifier(
        &latents,
        &labels,
        2,
        &schedule,
        &ClassifierConfig {
            steps: 1500,
            optimizer: opt,
            seed: 2,
            ..Default::default()
        },
    )?;
    let train_secs = start.elapsed().as_secs_f64();
    let positive = |prototype: u32, w: f64| -> Result<f64> {
        let req = SampleRequest {
            prototype,
            guidance_w: w,
            seed: 99,
            count: 1000,
        };
        let out = sample(&req, &den, Some(&cls), &schedule, &IdentityDecoder(2))?;
        Ok(out.iter().filter(|s| s.values[0] > 0.0).count() as f64 / out.len() as f64)
    };
    let hit0 = positive(0, 2.0)?;
    let hit1 = 1.0 - positive(1, 2.0)?;
    let free = positive(0, 0.0)?;
    Ok(outcome(
        train_secs <= 120.0 && hit0 >= 0.9 && hit1 >= 0.9 && free >= 0.25 && 1.0 - free >= 0.25,
        format!(
            "w=2 on requested side {hit0:.3} (+2,0) / {hit1:.3} (-2,0), unguided right/left {free:.3}/{:.3}, training {train_secs:.1}s",
            1.0 - free
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Result<Outcome> {
    let tagger = |p: u32, count: usize, _seed: u64| -> Result<Vec<Vec<f64>>> { Ok(vec![vec![p as f64]; count]) };
    let small = build_synthetic_corpus(7, 13, &tagger, 5)?;
    let real: Vec<RealPatch> = (0..7u32)
        .flat_map(|p| {
            (0..20).map(move |i| RealPatch {
                patch_ref: format!("real/{p}/{i}"),
                prototype: p,
            })
        })
        .collect();
    let hybrid = build_hybrid_corpus(&small.manifest, &real, 13, 5)?;
    let small_ok = small.manifest.len() == 7 * 13
        && small.manifest.counts_per_prototype().values().all(|&c| c == 13)
        && hybrid.manifest.len() == 2 * 7 * 13
        && hybrid.manifest.count_source(Source::Real) == 7 * 13
        && hybrid.deficits.is_empty();

    // Published scale: 578 prototypes at 3000 draws each.
    let empty = |_: u32, count: usize, _: u64| -> Result<Vec<Vec<f64>>> { Ok(vec![Vec::new(); count]) };
    let (protos, n_per) = (578usize, 3000usize);
    let full = build_synthetic_corpus(protos, n_per, &empty, 0)?;
    let synthetic_len = full.manifest.len();
    drop(full.samples);
    let pool: Vec<RealPatch> = (0..protos as u32)
        .flat_map(|p| {
            (0..n_per).map(move |i| RealPatch {
                patch_ref: format!("r{p}_{i}"),
                prototype: p,
            })
        })
        .collect();
    let hybrid_full = build_hybrid_corpus(&full.manifest, &pool, n_per, 0)?;
    let hybrid_len = hybrid_full.manifest.len();
    Ok(outcome(
        small_ok && synthetic_len == 1_734_000 && hybrid_len == 3_468_000 && hybrid_full.deficits.is_empty(),
        format!("7 x 13 -> {} / hybrid {}; 578 x 3000 -> {synthetic_len} / hybrid {hybrid_len}", small.manifest.len(), hybrid.manifest.len()),
    ))
}

// ---------------------------------------------------------------- 7

fn stats_of(mean: Vec<f64>, cov: Vec<f64>) -> GaussianStats {
    GaussianStats { mean, cov }
}

fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> GaussianStats {
    let r = rng.random_range(1..=d);
    let m: Vec<f64> = (0..d * r).map(|_| randn(rng)).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = (0..r).map(|k| m[i * r + k] * m[j * r + k]).sum();
        }
    }
    stats_of((0..d).map(|_| randn(rng) * 3.0).collect(), cov)
}

fn criterion_7() -> Result<Outcome> {
    let mut rng = stream(707, &[]);
    let mut identity_err = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(1..6);
        let s = random_psd(d, &mut rng);
        identity_err = identity_err.max(fid(&s, &s)?.abs());
    }
    let eye = vec![1.0, 0.0, 0.0, 1.0];
    let shift = fid(&stats_of(vec![0.0, 0.0], eye.clone()), &stats_of(vec![3.0, 4.0], eye))?;
    let diag = fid(
        &stats_of(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 4.0]),
        &stats_of(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]),
    )?;
    let mut asym = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..7);
        let (a, b) = (random_psd(d, &mut rng), random_psd(d, &mut rng));
        asym = asym.max((fid(&a, &b)? - fid(&b, &a)?).abs());
    }
    Ok(outcome(
        identity_err <= 1e-9 && (shift - 25.0).abs() <= 1e-6 && (diag - 2.0).abs() <= 1e-6 && asym <= 1e-9,
        format!("self distance max {identity_err:.1e}, shifted means {shift:.9}, swapped diagonals {diag:.9}, max asymmetry {asym:.1e}"),
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Result<Outcome> {
    let mut rng = stream(808, &[]);
    let models: Vec<Abmil> = (0..5)
        .map(|i| Abmil::new(AbmilConfig::new(3 + i, 8 + 2 * i, 2 + i % 2), i as u64))
        .collect::<Result<_>>()?;
    let (mut simplex_ok, mut perm_ok) = (0, 0);
    for b in 0..1000 {
        let model = &models[b % models.len()];
        let n = rng.random_range(1..40);
        let bag = Tensor::randn(&[n, model.config.in_dim], &mut rng).map(|v| v * 3.0);
        let out = model.forward(&bag)?;
        let sum: f64 = out.attention.iter().sum();
        if out.attention.len() == n && out.attention.iter().all(|&a| a >= 0.0) && (sum - 1.0).abs() <= 1e-12 {
            simplex_ok += 1;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| bag.row(i).to_vec()).collect();
        let shuffled = model.forward(&Tensor::from_rows(&rows)?)?;
        let att_match = perm.iter().enumerate().all(|(j, &i)| shuffled.attention[j].to_bits() == out.attention[i].to_bits());
        if shuffled.embedding == out.embedding && shuffled.logits == out.logits && att_match {
            perm_ok += 1;
        }
    }

    // Every instance sits on its class side of x0 = 0 with a margin of 0.5.
    let make_bag = |id: usize, label: usize, rng: &mut ChaCha8Rng| -> Result<SlideBag> {
        let n = rng.random_range(4..12);
        let mut t = Tensor::randn(&[n, 4], rng);
        let side = if label == 1 { 1.5 } else { -1.5 };
        for i in 0..n {
            let x = &mut t.data_mut()[i * 4];
            *x = side + x.clamp(-1.0, 1.0);
        }
        Ok(SlideBag::new(format!("s{id}"), t)?.with_label(label))
    };
    let train: Vec<SlideBag> = (0..40).map(|i| make_bag(i, i % 2, &mut rng)).collect::<Result<_>>()?;
    let val: Vec<SlideBag> = (40..52).map(|i| make_bag(i, i % 2, &mut rng)).collect::<Result<_>>()?;
    let (tr, va): (Vec<&SlideBag>, Vec<&SlideBag>) = (train.iter().collect(), val.iter().collect());
    let cfg = MilTrainConfig {
        hidden: 32,
        dropout: 0.0,
        max_epochs: 20,
        optimizer: AdamWConfig::default().with_lr(2e-3),
        seed: 3,
        ..Default::default()
    };
    let fitted = train_subtyping(&tr, &va, 2, &cfg)?;
    let correct = train
        .iter()
        .filter(|b| {
            let p = fitted.model.class_probabilities(&b.embeddings).unwrap();
            usize::from(p[1] > p[0]) == b.label.unwrap()
        })
        .count();

    let frozen_cfg = MilTrainConfig {
        optimizer: AdamWConfig::default().with_lr(0.0),
        hidden: 16,
        ..Default::default()
    };
    let frozen = train_subtyping(&tr, &va, 2, &frozen_cfg)?;
    let stop_epoch = frozen.log.last().map_or(0, |l| l.epoch);

    Ok(outcome(
        simplex_ok == 1000 && perm_ok == 1000 && correct == train.len() && frozen.stopped_early && stop_epoch == 11,
        format!(
            "simplex {simplex_ok}/1000, permutation-exact {perm_ok}/1000, separable train acc {correct}/{} in {} epochs, frozen model stopped at epoch {stop_epoch}",
            train.len(),
            fitted.log.len()
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num2, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                num2 += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    num2 as f64 / (2 * pairs) as f64
}

fn pair_count_cindex(risks: &[f64], rec: &[SurvivalRecord]) -> Option<f64> {
    let (mut num2, mut comparable) = (0u64, 0u64);
    for i in 0..rec.len() {
        for j in 0..rec.len() {
            let earlier = rec[i].duration < rec[j].duration;
            let tied = rec[i].duration == rec[j].duration && !rec[j].event;
            if i != j && rec[i].event && (earlier || tied) {
                comparable += 1;
                num2 += match risks[i].partial_cmp(&risks[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (comparable > 0).then(|| num2 as f64 / (2 * comparable) as f64)
}

fn enumerate_wilcoxon(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    // Doubled midranks of |d| by direct counting.
    let ranks2: Vec<u64> = nz
        .iter()
        .map(|d| {
            let less = nz.iter().filter(|e| e.abs() < d.abs()).count() as u64;
            let equal = nz.iter().filter(|e| e.abs() == d.abs()).count() as u64;
            2 * less + equal + 1
        })
        .collect();
    let observed: u64 = nz.iter().zip(&ranks2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (mut below, mut above) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let w: u64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks2[i]).sum();
        below += (w <= observed) as u64;
        above += (w >= observed) as u64;
    }
    (2.0 * below.min(above) as f64 / (1u64 << n) as f64).min(1.0)
}

fn bootstrap_delong_p(a: &[f64], b: &[f64], labels: &[bool], resamples: usize, seed: u64) -> Result<f64> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let observed = auroc(a, labels)? - auroc(b, labels)?;
    let mut rng = stream(seed, &[]);
    let mut diffs = Vec::with_capacity(resamples);
    let (mut sa, mut sb, mut sl) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..resamples {
        sa.clear();
        sb.clear();
        sl.clear();
        for group in [&pos, &neg] {
            for _ in 0..group.len() {
                let i = group[rng.random_range(0..group.len())];
                sa.push(a[i]);
                sb.push(b[i]);
                sl.push(labels[i]);
            }
        }
        diffs.push(auroc(&sa, &sl)? - auroc(&sb, &sl)?);
    }
    let m = diffs.iter().sum::<f64>() / resamples as f64;
    let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt();
    let z = observed / sd;
    Ok(statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2))
}

fn criterion_9() -> Result<Outcome> {
    let mut rng = stream(909, &[]);
    let mut auc_exact = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let ties = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if ties { rng.random_range(0..6) as f64 } else { randn(&mut rng) })
            .collect();
        if auroc(&scores, &labels)? == pair_count_auroc(&scores, &labels) {
            auc_exact += 1;
        }
    }

    let mut cidx_exact = 0;
    let mut cidx_cases = 0;
    while cidx_cases < 500 {
        let n = rng.random_range(2..60);
        let coarse = rng.random_bool(0.5);
        let rec: Vec<SurvivalRecord> = (0..n)
            .map(|_| SurvivalRecord {
                duration: if coarse { rng.random_range(0..8) as f64 } else { rng.random_range(0.0..10.0) },
                event: rng.random_bool(0.6),
            })
            .collect();
        let risks: Vec<f64> = (0..n)
            .map(|_| if coarse { rng.random_range(0..5) as f64 } else { randn(&mut rng) })
            .collect();
        let Some(expected) = pair_count_cindex(&risks, &rec) else {
            continue;
        };
        cidx_cases += 1;
        if c_index(&risks, &rec)? == expected {
            cidx_exact += 1;
        }
    }

    let mut wilcoxon_exact = 0;
    let mut wilcoxon_cases = 0;
    for n in 1..=12usize {
        for _ in 0..10 {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..7) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..7) as f64).collect();
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            if diffs.iter().all(|d| *d == 0.0) {
                continue;
            }
            wilcoxon_cases += 1;
            let r = wilcoxon_signed_rank(&a, &b)?;
            if r.method == WilcoxonMethod::Exact && r.p_value == enumerate_wilcoxon(&diffs) {
                wilcoxon_exact += 1;
            }
        }
    }

    let mut worst_gap = 0.0f64;
    for f in 0..10u64 {
        let mut frng = stream(910, &[f]);
        let labels: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let truth: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let a: Vec<f64> = truth.iter().map(|t| t + 0.8 * randn(&mut frng)).collect();
        let b: Vec<f64> = truth.iter().zip(&a).map(|(t, x)| 0.5 * t + 0.5 * x + 0.9 * randn(&mut frng)).collect();
        let d = delong_test(&a, &b, &labels)?;
        let boot = bootstrap_delong_p(&a, &b, &labels, 100_000, 911 + f)?;
        worst_gap = worst_gap.max((d.p_value - boot).abs());
    }

    let same: Vec<f64> = (0..20).map(|_| randn(&mut rng)).collect();
    let labels: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
    let identical = delong_test(&same, &same, &labels)?.p_value;

    Ok(outcome(
        auc_exact == 500 && cidx_exact == 500 && wilcoxon_exact == wilcoxon_cases && worst_gap <= 0.02 && identical == 1.0,
        format!(
            "auroc exact {auc_exact}/500, c-index exact {cidx_exact}/500, wilcoxon exact {wilcoxon_exact}/{wilcoxon_cases}, DeLong vs bootstrap max gap {worst_gap:.4}, identical scores p = {identical}"
        ),
    ))
}

// ---------------------------------------------------------------- 10

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&path)?);
        }
    }
    Ok(())
}

fn criterion_10() -> Result<Outcome> {
    let start = Instant::now();
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        let config = write_workspace(dir.path(), &ToySpec::default())?;
        let cfg = PipelineConfig::load(&config)?;
        let root = dir.path().join(&cfg.output_root);
        Pipeline::new(cfg)?.run(&[])?;
        let mut files = BTreeMap::new();
        collect_files(&root, &root, &mut files)?;
        trees.push(files);
    }
    let secs = start.elapsed().as_secs_f64();
    let differing: Vec<&String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let same_set = trees[0].keys().eq(trees[1].keys());
    Ok(outcome(
        same_set && differing.is_empty() && !trees[0].is_empty() && secs < 300.0,
        format!(
            "{} artifacts, {} differ{}, two full runs {secs:.1}s",
            trees[0].len(),
            differing.len(),
            if same_set { "" } else { ", file sets differ" }
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("autodiff gradients", criterion_1),
        ("k-means optimality", criterion_2),
        ("elbow detection", criterion_3),
        ("forward/reverse diffusion", criterion_4),
        ("guided generation toy", criterion_5),
        ("corpus arithmetic", criterion_6),
        ("FID", criterion_7),
        ("ABMIL", criterion_8),
        ("metrics vs brute force", criterion_9),
        ("pipeline determinism", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {id:>2} {:<26} {} ({:.1}s) {detail}",
            name,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
