//! Trains ABMIL on toy slide bags with a patient-level split and scores the
//! held-out slides.
//!
//! cargo run --release --example mil_subtyping

use protodiff::mil::{stratified_split, train_subtyping, MilTrainConfig, SlideBag};
use protodiff::optim::AdamWConfig;
use protodiff::stats::{auroc, macro_f1};
use protodiff::toy::{generate, ToySpec};
use protodiff::Tensor;

fn main() -> protodiff::Result<()> {
    let spec = ToySpec { slides_per_cohort: 60, ..ToySpec::default() };
    let (cohorts, slides) = generate(&spec)?;
    let per = spec.patches_per_slide;
    let mut bags = Vec::new();
    for (c, cohort) in cohorts.iter().enumerate() {
        for s in 0..spec.slides_per_cohort {
            let truth = &slides[c * spec.slides_per_cohort + s];
            let rows = cohort.data()[s * per * spec.dim..(s + 1) * per * spec.dim].to_vec();
            let bag = SlideBag::new(truth.slide_id.clone(), Tensor::matrix(per, spec.dim, rows)?)?
                .with_label(truth.class)
                .with_patient(truth.patient_id.clone());
            bags.push(bag);
        }
    }
    let keys: Vec<(String, usize)> = bags.iter().map(|b| (b.patient_key().to_string(), b.label.unwrap())).collect();
    let split = stratified_split(&keys, [0.7, 0.1, 0.2], 5)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &bags[i]).collect::<Vec<_>>();
    let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    println!("split {}/{}/{} slides", train.len(), val.len(), test.len());

    let cfg = MilTrainConfig {
        hidden: 32,
        optimizer: AdamWConfig::default().with_lr(1e-3),
        seed: 9,
        ..MilTrainConfig::default()
    };
    let out = train_subtyping(&train, &val, 2, &cfg)?;
    for e in &out.log {
        println!("epoch {:2}  train {:.4}  val {:.4}", e.epoch, e.train_loss, e.val_loss);
    }
    println!("best epoch {}, stopped early: {}", out.best_epoch, out.stopped_early);

    let probs: Vec<Vec<f64>> = test.iter().map(|b| out.model.class_probabilities(&b.embeddings)).collect::<Result<_, _>>()?;
    let labels: Vec<usize> = test.iter().map(|b| b.label.unwrap()).collect();
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let predicted: Vec<usize> = probs.iter().map(|p| usize::from(p[1] > p[0])).collect();
    println!("test AUROC {:.3}, macro-F1 {:.3}", auroc(&scores, &truth)?, macro_f1(&predicted, &labels, 2)?);

    let attn = out.model.forward(&test[0].embeddings)?.attention;
    println!("attention on {}: {:.3?}", test[0].slide_id, attn);
    Ok(())
}
