//! Compares two score sets on the same cases with paired tests and prints a
//! results table.
//!
//! cargo run --release --example stats_report

use protodiff::rng::stream;
use protodiff::stats::{
    auroc, c_index, delong_test, render_table, wilcoxon_signed_rank, Comparison, MetricReport, SurvivalRecord,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> protodiff::Result<()> {
    let mut rng = stream(12, &[]);
    let n = 80;
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let noise = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let strong: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l)) * 1.5 + noise(&mut rng)).collect();
    let weak: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l)) * 0.6 + noise(&mut rng)).collect();

    let d = delong_test(&strong, &weak, &labels)?;
    let w = wilcoxon_signed_rank(&strong, &weak)?;
    println!("DeLong z {:.3} p {:.4}; Wilcoxon W {} p {:.4} ({:?})", d.z, d.p_value, w.statistic, w.p_value, w.method);

    let records: Vec<SurvivalRecord> = (0..n)
        .map(|i| SurvivalRecord { duration: rng.random_range(1.0..50.0) / (1.0 + strong[i].max(-0.9)), event: rng.random_bool(0.7) })
        .collect();
    println!("c-index of the strong score as risk: {:.3}", c_index(&strong, &records)?);

    let reports = vec![
        MetricReport {
            task: "toy".into(),
            model: "weak".into(),
            metric: "auroc".into(),
            value: auroc(&weak, &labels)?,
            n,
            comparisons: vec![],
            notes: vec![],
        },
        MetricReport {
            task: "toy".into(),
            model: "strong".into(),
            metric: "auroc".into(),
            value: auroc(&strong, &labels)?,
            n,
            comparisons: vec![Comparison {
                baseline: "weak".into(),
                baseline_value: d.auc_b,
                test: "delong".into(),
                p_value: d.p_value,
            }],
            notes: vec![],
        },
    ];
    print!("{}", render_table(&reports));
    Ok(())
}
