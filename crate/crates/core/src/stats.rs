//! Discrimination metrics and paired significance tests.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{contract, Error, Result};

fn undefined(msg: impl Into<String>) -> Error {
    Error::UndefinedMetric(msg.into())
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}

/// Average (1-based) ranks, with tied values sharing the mean of their
/// positions. Returned doubled so that every rank is an integer.
fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j, mean (i + 1 + j) / 2
        let r2 = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = r2;
        }
        i = j;
    }
    ranks
}

/// Area under the ROC curve as the normalized Mann-Whitney U statistic;
/// tied scores count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(contract("scores and labels differ in length"));
    }
    check_finite(scores, "scores")?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(undefined("AUROC needs both positive and negative cases"));
    }
    let ranks = doubled_midranks(scores);
    let pos_rank2: u64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(&r, _)| r).sum();
    // 2U = sum(2 r_pos) - P (P + 1)
    let u2 = pos_rank2 - (pos * (pos + 1)) as u64;
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Unweighted mean of one-vs-rest AUROCs. `probs` is row-major
/// `[n, num_classes]`.
pub fn macro_auroc(probs: &[f64], labels: &[usize], num_classes: usize) -> Result<f64> {
    if num_classes < 2 || probs.len() != labels.len() * num_classes {
        return Err(contract("probability matrix does not match labels and class count"));
    }
    if num_classes == 2 {
        let scores: Vec<f64> = probs.chunks(2).map(|r| r[1]).collect();
        let truth: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return auroc(&scores, &truth);
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let scores: Vec<f64> = probs.chunks(num_classes).map(|r| r[c]).collect();
        let truth: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        total += auroc(&scores, &truth).map_err(|_| undefined(format!("class {c} lacks positives or negatives")))?;
    }
    Ok(total / num_classes as f64)
}

/// Unweighted mean of per-class F1 over `0..num_classes`. A class whose F1
/// denominator is zero contributes 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(contract("macro F1 of an empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(contract("predictions and labels differ in length"));
    }
    if let Some(c) = predictions.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(contract(format!("class {c} outside 0..{num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let sum: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / num_classes as f64)
}

/// Time-to-event outcome; `event = false` means censored at `duration`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub duration: f64,
    pub event: bool,
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted indices `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index. A pair is comparable when the shorter
/// duration ends in an event, or when durations tie and only one of the
/// two is an event. Risk ties count one half.
pub fn c_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if risks.len() != records.len() {
        return Err(contract("risks and records differ in length"));
    }
    check_finite(risks, "risks")?;
    if records.iter().any(|r| !(r.duration >= 0.0)) {
        return Err(contract("survival durations must be >= 0"));
    }
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.binary_search_by(|v| v.total_cmp(&r)).expect("present");

    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| records[b].duration.total_cmp(&records[a].duration));

    // Tree holds risks of records with strictly longer durations, plus the
    // censored members of the current duration group.
    let mut tree = Fenwick::new(sorted.len());
    let mut inserted = 0u64;
    let (mut concordant2, mut comparable) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && records[order[j]].duration == records[order[i]].duration {
            j += 1;
        }
        let group = &order[i..j];
        for &k in group.iter().filter(|&&k| !records[k].event) {
            tree.add(rank(risks[k]));
            inserted += 1;
        }
        for &k in group.iter().filter(|&&k| records[k].event) {
            let r = rank(risks[k]);
            let lower = tree.prefix(r);
            let equal = tree.prefix(r + 1) - lower;
            concordant2 += 2 * lower + equal;
            comparable += inserted;
        }
        for &k in group.iter().filter(|&&k| records[k].event) {
            tree.add(rank(risks[k]));
            inserted += 1;
        }
        i = j;
    }
    if comparable == 0 {
        return Err(undefined("no comparable pairs for the concordance index"));
    }
    Ok(concordant2 as f64 / (2 * comparable) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub n_nonzero: usize,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Largest nonzero-difference count for which the exact null distribution
/// is used.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Signed ranks after dropping zero differences: doubled midranks of
/// `|a - b|` and the sign of each difference.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<u64>, Vec<bool>)> {
    if a.len() != b.len() {
        return Err(contract("paired samples differ in length"));
    }
    check_finite(a, "a")?;
    check_finite(b, "b")?;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    Ok((doubled_midranks(&abs), diffs.iter().map(|&d| d > 0.0).collect()))
}

/// Exact two-sided p-value by counting all `2^n` sign assignments over the
/// given doubled ranks (dynamic programming over rank sums).
pub fn wilcoxon_exact_p(ranks2: &[u64], w_plus2: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w = w_plus2 as usize;
    let below: u64 = counts[..=w].iter().sum();
    let above: u64 = counts[w..].iter().sum();
    let all = 2f64.powi(ranks2.len() as i32);
    (2.0 * below.min(above) as f64 / all).min(1.0)
}

/// Normal approximation with tie correction and continuity correction.
pub fn wilcoxon_normal_p(ranks2: &[u64], w_plus2: u64) -> f64 {
    let n = ranks2.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks2.to_vec();
    sorted.sort_unstable();
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let w = w_plus2 as f64 / 2.0;
    let dev = (w - mean).abs() - 0.5;
    if dev <= 0.0 {
        return 1.0;
    }
    erfc(dev / var.sqrt() / std::f64::consts::SQRT_2).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (ranks2, positive) = signed_ranks(a, b)?;
    let w_plus2: u64 = ranks2.iter().zip(&positive).filter(|(_, &p)| p).map(|(&r, _)| r).sum();
    let total2: u64 = ranks2.iter().sum();
    let n = ranks2.len();
    let (p_value, method) = if n <= WILCOXON_EXACT_MAX {
        (wilcoxon_exact_p(&ranks2, w_plus2), WilcoxonMethod::Exact)
    } else {
        (wilcoxon_normal_p(&ranks2, w_plus2), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        w_plus: w_plus2 as f64 / 2.0,
        statistic: w_plus2.min(total2 - w_plus2) as f64 / 2.0,
        n_nonzero: n,
        p_value,
        method,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Placement values: for each positive the fraction of negatives it
/// outranks, for each negative the fraction of positives outranking it.
fn placements(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let all2 = doubled_midranks(scores);
    let pos2 = doubled_midranks(&pos);
    let neg2 = doubled_midranks(&neg);
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut v10, mut v01) = (Vec::new(), Vec::new());
    let (mut ip, mut ineg) = (0, 0);
    for (k, &l) in labels.iter().enumerate() {
        if l {
            v10.push((all2[k] as f64 - pos2[ip] as f64) / 2.0 / nn);
            ip += 1;
        } else {
            v01.push(1.0 - (all2[k] as f64 - neg2[ineg] as f64) / 2.0 / np);
            ineg += 1;
        }
    }
    (v10, v01)
}

fn cov(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}

/// Paired DeLong test for two correlated AUCs on the same cases.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DeLongResult> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(contract("DeLong inputs differ in length"));
    }
    let auc_a = auroc(scores_a, labels)?;
    let auc_b = auroc(scores_b, labels)?;
    let (xa, ya) = placements(scores_a, labels);
    let (xb, yb) = placements(scores_b, labels);
    let (np, nn) = (xa.len() as f64, ya.len() as f64);
    let var_a = cov(&xa, &xa) / np + cov(&ya, &ya) / nn;
    let var_b = cov(&xb, &xb) / np + cov(&yb, &yb) / nn;
    let cov_ab = cov(&xa, &xb) / np + cov(&ya, &yb) / nn;
    let var = var_a + var_b - 2.0 * cov_ab;
    let diff = auc_a - auc_b;
    let (z, p_value) = if diff == 0.0 {
        (0.0, 1.0)
    } else if var <= 0.0 {
        (diff.signum() * f64::INFINITY, 0.0)
    } else {
        let z = diff / var.sqrt();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0))
    };
    Ok(DeLongResult {
        auc_a,
        auc_b,
        z,
        p_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub baseline_value: f64,
    pub test: String,
    pub p_value: f64,
}

/// One model's score on one task, with paired tests against baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub comparisons: Vec<Comparison>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.value) {
            return Err(contract(format!("{} = {} outside [0, 1]", self.metric, self.value)));
        }
        if let Some(c) = self.comparisons.iter().find(|c| !in_unit(c.p_value)) {
            return Err(contract(format!("p-value {} outside [0, 1]", c.p_value)));
        }
        Ok(())
    }
}

/// Aligned plain-text table with one row per report and one column per
/// baseline p-value.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in reports {
        for c in &r.comparisons {
            let k = (c.test.as_str(), c.baseline.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    let mut header = vec!["task".to_string(), "model".into(), "metric".into(), "value".into(), "n".into()];
    header.extend(keys.iter().map(|(t, b)| format!("p {t} vs {b}")));
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.task.clone(), r.model.clone(), r.metric.clone(), format!("{:.4}", r.value), r.n.to_string()];
        for (t, b) in &keys {
            row.push(match r.comparisons.iter().find(|c| c.test == *t && c.baseline == *b) {
                Some(c) => format!("{:.4}", c.p_value),
                None => "-".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c < 3 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::cmp::Ordering;

    use super::*;

    fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
        let s = [0.3, 0.7, 0.7, 0.1, 0.9, 0.3];
        let l = [true, false, true, false, true, false];
        assert_eq!(auroc(&s, &l).unwrap(), pair_auc(&s, &l));
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        // class 2 never predicted nor present
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 2.0 / 3.0);
        // confusion: true 0 -> [0,0,1], true 1 -> [1,1], true 2 -> [2,0]
        let pred = [0, 0, 1, 1, 1, 2, 0];
        let truth = [0, 0, 0, 1, 1, 2, 2];
        let f0 = 2.0 * 2.0 / (4.0 + 1.0 + 1.0);
        let f1 = 2.0 * 2.0 / (4.0 + 1.0);
        let f2 = 2.0 * 1.0 / (2.0 + 1.0);
        let got = macro_f1(&pred, &truth, 3).unwrap();
        assert!((got - (f0 + f1 + f2) / 3.0).abs() < 1e-15);
        assert!(macro_f1(&[], &[], 2).is_err());
    }

    fn rec(duration: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord { duration, event }
    }

    #[test]
    fn c_index_extremes() {
        let recs: Vec<_> = (1..=5).map(|t| rec(t as f64, true)).collect();
        let inverse: Vec<f64> = (1..=5).map(|t| -(t as f64)).collect();
        let aligned: Vec<f64> = (1..=5).map(|t| t as f64).collect();
        assert_eq!(c_index(&inverse, &recs).unwrap(), 1.0);
        assert_eq!(c_index(&aligned, &recs).unwrap(), 0.0);
        let censored = [rec(1.0, false), rec(2.0, false)];
        assert!(matches!(c_index(&[0.1, 0.2], &censored), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn c_index_mixed_case() {
        let recs = [rec(2.0, true), rec(3.0, false), rec(3.0, true), rec(5.0, true), rec(1.0, false)];
        let risks = [0.9, 0.2, 0.5, 0.5, 0.7];
        // comparable (i earlier with event): (0,1),(0,2),(0,3),(2,3),(2,1 tie censored)
        // concordant: 1,1,1,0.5,1
        assert_eq!(c_index(&risks, &recs).unwrap(), 4.5 / 5.0);
    }

    #[test]
    fn wilcoxon_constant_shift() {
        let b = [1.0, 4.0, 2.5, 8.0, 3.0, 0.5];
        let a: Vec<f64> = b.iter().map(|x| x + 0.25).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.p_value, 0.03125);
        assert_eq!(r.method, WilcoxonMethod::Exact);
        assert_eq!(wilcoxon_signed_rank(&b, &a).unwrap().p_value, r.p_value);
        assert!(matches!(wilcoxon_signed_rank(&b, &b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn delong_identical_and_flipped() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.6, 0.2];
        let t = [0.2, 0.3, 0.5, 0.7, 0.4, 0.1];
        let l = [false, false, true, true, true, false];
        let r = delong_test(&s, &s, &l).unwrap();
        assert_eq!((r.z, r.p_value), (0.0, 1.0));
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        let a = delong_test(&s, &t, &l).unwrap();
        let b = delong_test(&s, &t, &flipped).unwrap();
        assert!((a.auc_a - (1.0 - b.auc_a)).abs() < 1e-15);
        assert!((a.auc_b - (1.0 - b.auc_b)).abs() < 1e-15);
        assert!((a.z.abs() - b.z.abs()).abs() < 1e-12);
    }

    #[test]
    fn table_has_one_line_per_report() {
        let r = MetricReport {
            task: "subtype".into(),
            model: "hybrid".into(),
            metric: "auroc".into(),
            value: 0.9,
            n: 10,
            comparisons: vec![Comparison {
                baseline: "real".into(),
                baseline_value: 0.8,
                test: "wilcoxon".into(),
                p_value: 0.04,
            }],
            notes: vec![],
        };
        r.validate().unwrap();
        let t = render_table(&[r.clone(), r]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("p wilcoxon vs real"));
    }
}
