use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::mil::{LabelRow, SlideTarget};
use crate::stats::{
    auroc, c_index, delong_test, macro_f1, render_table, wilcoxon_signed_rank, Comparison, MetricReport,
    SurvivalRecord,
};

use super::config::MilTask;

/// Per-slide model outputs: class probabilities (`p_<class>` columns) or a
/// single `risk` column.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub name: String,
    pub slides: Vec<String>,
    pub columns: Vec<String>,
    /// One row per slide, aligned with `columns`.
    pub values: Vec<Vec<f64>>,
}

impl Predictions {
    fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| contract(format!("predictions {:?} lack column {name:?}", self.name)))
    }

    fn by_slide(&self) -> BTreeMap<&str, &[f64]> {
        self.slides.iter().map(String::as_str).zip(self.values.iter().map(Vec::as_slice)).collect()
    }
}

pub fn write_predictions(preds: &Predictions, config_hash: &str) -> Result<Vec<u8>> {
    let mut out = format!("# config_hash={config_hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["slide_id".to_string()];
        header.extend(preds.columns.iter().cloned());
        w.write_record(&header)?;
        for (s, row) in preds.slides.iter().zip(&preds.values) {
            let mut rec = vec![s.clone()];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(out)
}

pub fn read_predictions(path: impl AsRef<Path>, name: impl Into<String>) -> Result<Predictions> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("slide_id") || header.len() < 2 {
        return Err(Error::Format(format!(
            "{}: expected slide_id followed by score columns",
            path.as_ref().display()
        )));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let (mut slides, mut values) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        slides.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad score {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    Ok(Predictions {
        name: name.into(),
        slides,
        columns,
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: Option<String>,
    pub task: MilTask,
    pub baseline: String,
    pub reports: Vec<MetricReport>,
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        render_table(&self.reports)
    }
}

fn class_scores(p: &Predictions, slides: &[String], classes: &[String]) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = classes.iter().map(|c| p.column(&format!("p_{c}"))).collect::<Result<_>>()?;
    let rows = p.by_slide();
    slides
        .iter()
        .map(|s| {
            let r = rows
                .get(s.as_str())
                .ok_or_else(|| contract(format!("predictions {:?} lack slide {s}", p.name)))?;
            Ok(idx.iter().map(|&i| r[i]).collect())
        })
        .collect()
}

fn risks(p: &Predictions, slides: &[String]) -> Result<Vec<f64>> {
    let i = p.column("risk")?;
    let rows = p.by_slide();
    slides
        .iter()
        .map(|s| {
            rows.get(s.as_str())
                .map(|r| r[i])
                .ok_or_else(|| contract(format!("predictions {:?} lack slide {s}", p.name)))
        })
        .collect()
}

/// Macro one-vs-rest AUROC over the classes that have both positives and
/// negatives among the evaluated slides.
fn ovr_auroc(scores: &[Vec<f64>], labels: &[usize], classes: &[String], notes: &mut Vec<String>) -> Result<f64> {
    if classes.len() == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auroc(&s, &y);
    }
    let mut used = Vec::new();
    for c in 0..classes.len() {
        let y: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if y.iter().all(|&v| v) || !y.iter().any(|&v| v) {
            notes.push(format!("class {} skipped in macro AUROC (single-sided)", classes[c]));
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        used.push(auroc(&s, &y)?);
    }
    if used.is_empty() {
        return Err(Error::UndefinedMetric("no class has both positives and negatives".into()));
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

fn wilcoxon_p(a: &[f64], b: &[f64], notes: &mut Vec<String>, who: &str) -> Result<f64> {
    match wilcoxon_signed_rank(a, b) {
        Ok(r) => Ok(r.p_value),
        Err(Error::Degenerate(_)) => {
            notes.push(format!("{who}: identical paired values, Wilcoxon p set to 1"));
            Ok(1.0)
        }
        Err(e) => Err(e),
    }
}

/// Scores every prediction set against the truth labels. The first set is
/// the baseline; each other set carries paired tests against it.
pub fn evaluate_predictions(task: MilTask, preds: &[Predictions], truth: &[LabelRow]) -> Result<EvaluationReport> {
    let base = preds.first().ok_or_else(|| contract("no predictions to evaluate"))?;
    let slides = base.slides.clone();
    let slide_set: BTreeSet<&String> = slides.iter().collect();
    for p in preds {
        if p.slides.iter().collect::<BTreeSet<_>>() != slide_set {
            return Err(contract(format!("predictions {:?} cover different slides than the baseline", p.name)));
        }
    }
    let targets: BTreeMap<&str, &SlideTarget> = truth.iter().map(|r| (r.slide_id.as_str(), &r.target)).collect();
    let target = |s: &String| {
        targets
            .get(s.as_str())
            .copied()
            .ok_or_else(|| contract(format!("truth has no row for slide {s}")))
    };
    let mut reports = Vec::new();
    match task {
        MilTask::Subtype => {
            let classes: Vec<String> = truth
                .iter()
                .filter_map(|r| match &r.target {
                    SlideTarget::Class(c) => Some(c.clone()),
                    SlideTarget::Survival(_) => None,
                })
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let labels: Vec<usize> = slides
                .iter()
                .map(|s| match target(s)? {
                    SlideTarget::Class(c) => Ok(classes.binary_search(c).expect("collected")),
                    SlideTarget::Survival(_) => Err(contract(format!("slide {s} has no class label"))),
                })
                .collect::<Result<_>>()?;
            let scores: Vec<Vec<Vec<f64>>> =
                preds.iter().map(|p| class_scores(p, &slides, &classes)).collect::<Result<_>>()?;
            let true_prob = |k: usize| -> Vec<f64> { scores[k].iter().zip(&labels).map(|(r, &y)| r[y]).collect() };
            for (k, p) in preds.iter().enumerate() {
                let mut notes = Vec::new();
                let auc = ovr_auroc(&scores[k], &labels, &classes, &mut notes)?;
                let predicted: Vec<usize> = scores[k].iter().map(|r| argmax(r)).collect();
                let f1 = macro_f1(&predicted, &labels, classes.len())?;
                let mut auc_cmp = Vec::new();
                let mut f1_cmp = Vec::new();
                if k > 0 {
                    let w = wilcoxon_p(&true_prob(k), &true_prob(0), &mut notes, &p.name)?;
                    let base_auc = reports[0..2].iter().find(|r: &&MetricReport| r.metric == "auroc").map_or(0.0, |r| r.value);
                    let base_f1 = reports[0..2].iter().find(|r: &&MetricReport| r.metric == "macro_f1").map_or(0.0, |r| r.value);
                    auc_cmp.push(Comparison {
                        baseline: base.name.clone(),
                        baseline_value: base_auc,
                        test: "wilcoxon".into(),
                        p_value: w,
                    });
                    if classes.len() == 2 {
                        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                        let a: Vec<f64> = scores[k].iter().map(|r| r[1]).collect();
                        let b: Vec<f64> = scores[0].iter().map(|r| r[1]).collect();
                        let d = delong_test(&a, &b, &y)?;
                        auc_cmp.push(Comparison {
                            baseline: base.name.clone(),
                            baseline_value: base_auc,
                            test: "delong".into(),
                            p_value: d.p_value,
                        });
                    }
                    f1_cmp.push(Comparison {
                        baseline: base.name.clone(),
                        baseline_value: base_f1,
                        test: "wilcoxon".into(),
                        p_value: w,
                    });
                }
                notes.push("wilcoxon pairs per-slide probability of the true class".into());
                reports.push(MetricReport {
                    task: task.name().into(),
                    model: p.name.clone(),
                    metric: "auroc".into(),
                    value: auc,
                    n: slides.len(),
                    comparisons: auc_cmp,
                    notes: notes.clone(),
                });
                reports.push(MetricReport {
                    task: task.name().into(),
                    model: p.name.clone(),
                    metric: "macro_f1".into(),
                    value: f1,
                    n: slides.len(),
                    comparisons: f1_cmp,
                    notes: vec!["per-class F1 with a zero denominator counts as 0".into()],
                });
            }
        }
        MilTask::Survival => {
            let records: Vec<SurvivalRecord> = slides
                .iter()
                .map(|s| match target(s)? {
                    SlideTarget::Survival(r) => Ok(*r),
                    SlideTarget::Class(_) => Err(contract(format!("slide {s} has no survival record"))),
                })
                .collect::<Result<_>>()?;
            let events: Vec<bool> = records.iter().map(|r| r.event).collect();
            let both = events.iter().any(|&e| e) && events.iter().any(|&e| !e);
            let all_risks: Vec<Vec<f64>> = preds.iter().map(|p| risks(p, &slides)).collect::<Result<_>>()?;
            let mut base_c = 0.0;
            for (k, p) in preds.iter().enumerate() {
                let c = c_index(&all_risks[k], &records)?;
                if k == 0 {
                    base_c = c;
                }
                let mut comparisons = Vec::new();
                let mut notes = Vec::new();
                if k > 0 {
                    if both {
                        let d = delong_test(&all_risks[k], &all_risks[0], &events)?;
                        comparisons.push(Comparison {
                            baseline: base.name.clone(),
                            baseline_value: base_c,
                            test: "delong (event discrimination)".into(),
                            p_value: d.p_value,
                        });
                    } else {
                        notes.push("DeLong skipped: evaluated slides are all events or all censored".into());
                    }
                }
                notes.push(
                    "DeLong compares AUCs of risk scores for event vs censored status, not c-indices directly".into(),
                );
                reports.push(MetricReport {
                    task: task.name().into(),
                    model: p.name.clone(),
                    metric: "c_index".into(),
                    value: c,
                    n: slides.len(),
                    comparisons,
                    notes,
                });
            }
        }
    }
    for r in &reports {
        r.validate()?;
    }
    Ok(EvaluationReport {
        config_hash: None,
        task,
        baseline: base.name.clone(),
        reports,
    })
}
