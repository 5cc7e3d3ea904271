//! Histological prototype discovery: uniform subsampling, k-means with
//! k-means++ seeding and restarts, WCSS curves, elbow selection, and
//! nearest-prototype assignment.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{bounds, contract, Error, Result};
use crate::io::EmbeddingCollection;
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

/// Draws `m` distinct rows uniformly without replacement. The row order of
/// the result is itself random.
pub fn subsample_uniform(
    collection: &EmbeddingCollection,
    m: usize,
    seed: u64,
) -> Result<EmbeddingCollection> {
    let n = collection.rows();
    if m == 0 || m > n {
        return Err(bounds(format!("subsample size {m} not in 1..={n}")));
    }
    let mut rng = stream(seed, &[0x5b5a]);
    let picked = index::sample(&mut rng, n, m).into_vec();
    collection.select(&picked)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: 32,
            max_iter: 300,
            tol: 1e-10,
        }
    }
}

/// Cluster centroids of one cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub cohort_id: String,
    pub k: usize,
    pub dim: usize,
    /// `k * dim`, row-major.
    pub centroids: Vec<f64>,
    pub wcss: f64,
    pub seed: u64,
    pub member_counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let counts = self
            .member_counts
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        Checkpoint {
            metadata: vec![
                ("kind".into(), "prototype_set".into()),
                ("cohort_id".into(), self.cohort_id.clone()),
                ("k".into(), self.k.to_string()),
                ("wcss".into(), format!("{:e}", self.wcss)),
                ("seed".into(), self.seed.to_string()),
                ("member_counts".into(), counts),
            ],
            tensors: vec![(
                "centroids".into(),
                Tensor::matrix(self.k, self.dim, self.centroids.clone()).expect("sized"),
            )],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let c = ckpt
            .tensor("centroids")
            .ok_or_else(|| Error::Format("prototype checkpoint lacks centroids".into()))?;
        let (k, dim) = c.as_matrix("centroids")?;
        let member_counts = ckpt
            .meta("member_counts")
            .unwrap_or_default()
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Format("bad member count".into())))
            .collect::<Result<Vec<usize>>>()?;
        Ok(Self {
            cohort_id: ckpt.meta("cohort_id").unwrap_or_default().to_string(),
            k,
            dim,
            centroids: c.data().to_vec(),
            wcss: ckpt.meta_parse("wcss")?,
            seed: ckpt.meta_parse("seed")?,
            member_counts,
        })
    }
}

/// Outcome of a single Lloyd run.
#[derive(Clone, Debug)]
pub struct LloydRun {
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub wcss: f64,
    /// WCSS after each assignment step.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &EmbeddingCollection, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    points
        .iter_rows()
        .map(|p| nearest(p, centroids, points.dim()))
        .unzip()
}

/// Moves centroids of empty clusters onto the point farthest from its own
/// centroid, reassigning until every cluster has a member.
fn repair_empty(
    points: &EmbeddingCollection,
    centroids: &mut [f64],
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let dim = points.dim();
    loop {
        let (labels, dists) = assign(points, centroids);
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return Ok((labels, dists));
        };
        let (far, far_d) = dists
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[labels[*i]] > 1)
            .fold((usize::MAX, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        if far == usize::MAX || far_d <= 0.0 {
            return Err(Error::Degenerate(format!(
                "cannot fill {k} clusters: too few distinct points"
            )));
        }
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(points.row(far));
    }
}

/// Lloyd iterations from the given initial centroids.
pub fn lloyd(
    points: &EmbeddingCollection,
    init: Vec<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<LloydRun> {
    let dim = points.dim();
    if init.is_empty() || init.len() % dim != 0 {
        return Err(contract("initial centroids do not match embedding dimension"));
    }
    let k = init.len() / dim;
    let mut centroids = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut prev_labels: Option<Vec<usize>> = None;
    loop {
        let (labels, dists) = repair_empty(points, &mut centroids, k)?;
        let wcss: f64 = dists.iter().sum();
        let converged = match (&prev_labels, trace.last()) {
            (Some(prev), Some(&prev_wcss)) => {
                *prev == labels || prev_wcss - wcss <= tol * prev_wcss.max(f64::MIN_POSITIVE)
            }
            _ => false,
        };
        trace.push(wcss);
        if converged || trace.len() > max_iter {
            return Ok(LloydRun {
                centroids,
                labels,
                wcss,
                trace,
            });
        }
        // Update step: centroid = mean of members.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter_rows().zip(&labels) {
            counts[l] += 1;
            sums[l * dim..(l + 1) * dim]
                .iter_mut()
                .zip(p)
                .for_each(|(s, v)| *s += v);
        }
        for (j, &c) in counts.iter().enumerate() {
            for v in &mut sums[j * dim..(j + 1) * dim] {
                *v /= c as f64;
            }
        }
        centroids = sums;
        prev_labels = Some(labels);
    }
}

/// k-means++ seeding.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(
    points: &EmbeddingCollection,
    k: usize,
    rng: &mut R,
) -> Vec<f64> {
    let n = points.rows();
    let dim = points.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(points.row(pick));
        let newest = centroids[start..].to_vec();
        for (dd, p) in d2.iter_mut().zip(points.iter_rows()) {
            *dd = dd.min(sq_dist(p, &newest));
        }
    }
    centroids
}

fn validate_k(points: &EmbeddingCollection, k: usize) -> Result<()> {
    if k == 0 {
        return Err(contract("k must be at least 1"));
    }
    if k > points.rows() {
        return Err(bounds(format!("k = {k} exceeds {} rows", points.rows())));
    }
    Ok(())
}

/// Every restart of k-means++ seeded Lloyd, in restart order.
pub fn kmeans_runs(points: &EmbeddingCollection, cfg: &KMeansConfig) -> Result<Vec<LloydRun>> {
    validate_k(points, cfg.k)?;
    if cfg.tol <= 0.0 {
        return Err(contract("tolerance must be positive"));
    }
    (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(derive_seed(cfg.seed, &[cfg.k as u64]), &[r as u64]);
            let init = kmeans_plus_plus(points, cfg.k, &mut rng);
            lloyd(points, init, cfg.max_iter, cfg.tol)
        })
        .collect()
}

fn best_run(runs: Vec<LloydRun>) -> LloydRun {
    // Lowest WCSS; the earliest restart wins exact ties.
    runs.into_iter()
        .reduce(|best, r| if r.wcss < best.wcss { r } else { best })
        .expect("at least one run")
}

fn into_set(points: &EmbeddingCollection, run: LloydRun, k: usize, seed: u64) -> PrototypeSet {
    let mut member_counts = vec![0; k];
    run.labels.iter().for_each(|&l| member_counts[l] += 1);
    PrototypeSet {
        cohort_id: points.cohort_id.clone(),
        k,
        dim: points.dim(),
        centroids: run.centroids,
        wcss: run.wcss,
        seed,
        member_counts,
    }
}

/// Best-of-restarts k-means.
pub fn kmeans(points: &EmbeddingCollection, cfg: &KMeansConfig) -> Result<PrototypeSet> {
    let best = best_run(kmeans_runs(points, cfg)?);
    Ok(into_set(points, best, cfg.k, cfg.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WcssCurve {
    pub entries: Vec<(usize, f64)>,
}

impl WcssCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,wcss\n");
        for (k, w) in &self.entries {
            let _ = writeln!(s, "{k},{w:e}");
        }
        s
    }
}

/// One k-means result per k in `k_min..=k_max`. Each k > k_min also tries
/// the previous solution plus one centroid split off at the worst-fit
/// point, so the curve never increases.
pub fn wcss_curve(
    points: &EmbeddingCollection,
    k_min: usize,
    k_max: usize,
    base: &KMeansConfig,
) -> Result<(WcssCurve, Vec<PrototypeSet>)> {
    if k_min == 0 || k_min > k_max || k_max > points.rows() {
        return Err(bounds(format!(
            "k range {k_min}..={k_max} invalid for {} rows",
            points.rows()
        )));
    }
    let mut sets: Vec<PrototypeSet> = Vec::new();
    for k in k_min..=k_max {
        let cfg = KMeansConfig { k, ..*base };
        let mut best = best_run(kmeans_runs(points, &cfg)?);
        if let Some(prev) = sets.last() {
            let (_, dists) = assign(points, &prev.centroids);
            let worst = dists
                .iter()
                .enumerate()
                .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                .0;
            let mut init = prev.centroids.clone();
            init.extend_from_slice(points.row(worst));
            if let Ok(nested) = lloyd(points, init, cfg.max_iter, cfg.tol) {
                if nested.wcss < best.wcss {
                    best = nested;
                }
            }
        }
        sets.push(into_set(points, best, k, base.seed));
    }
    let entries = sets.iter().map(|s| (s.k, s.wcss)).collect();
    Ok((WcssCurve { entries }, sets))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Elbow {
    pub k: usize,
    /// False when the curve has no positive bend (e.g. a straight line).
    pub distinct: bool,
}

const ELBOW_MIN_BEND: f64 = 1e-9;
const ELBOW_TIE: f64 = 1e-12;

/// Picks the k with the largest slope increase of the range-normalized
/// curve. Ties go to the smaller k; curves without any bend report the
/// smallest k with `distinct = false`.
pub fn select_elbow(curve: &WcssCurve) -> Result<Elbow> {
    let e = &curve.entries;
    if e.len() < 3 {
        return Err(contract("elbow selection needs at least 3 curve entries"));
    }
    if e.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(contract("curve k values must be strictly increasing"));
    }
    let (k_lo, k_hi) = (e[0].0 as f64, e[e.len() - 1].0 as f64);
    let (w_lo, w_hi) = e
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, w)| (lo.min(w), hi.max(w)));
    let flat = Elbow {
        k: e[0].0,
        distinct: false,
    };
    if w_hi - w_lo <= 0.0 {
        return Ok(flat);
    }
    let x = |i: usize| (e[i].0 as f64 - k_lo) / (k_hi - k_lo);
    let y = |i: usize| (e[i].1 - w_lo) / (w_hi - w_lo);
    let mut best: Option<(usize, f64)> = None;
    for i in 1..e.len() - 1 {
        let left = (y(i) - y(i - 1)) / (x(i) - x(i - 1));
        let right = (y(i + 1) - y(i)) / (x(i + 1) - x(i));
        let bend = right - left;
        if best.is_none_or(|(_, b)| bend > b + ELBOW_TIE) {
            best = Some((i, bend));
        }
    }
    match best {
        Some((i, bend)) if bend > ELBOW_MIN_BEND => Ok(Elbow {
            k: e[i].0,
            distinct: true,
        }),
        _ => Ok(flat),
    }
}

/// Nearest-centroid label per row (squared Euclidean; lowest index on ties).
pub fn assign_prototypes(
    collection: &EmbeddingCollection,
    protos: &PrototypeSet,
) -> Result<Vec<usize>> {
    if collection.dim() != protos.dim {
        return Err(Error::Dimension {
            left: vec![collection.dim()],
            right: vec![protos.dim],
            context: "embedding vs prototype dimension",
        });
    }
    Ok(assign(collection, &protos.centroids).0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalPrototype {
    pub global_id: u32,
    pub cohort_id: String,
    pub local_index: usize,
    pub member_count: usize,
}

/// Union of all cohort prototype sets under global ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTable {
    pub dim: usize,
    pub entries: Vec<GlobalPrototype>,
    pub centroids: Vec<f64>,
}

impl PrototypeTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn global_id(&self, cohort_id: &str, local_index: usize) -> Option<u32> {
        self.entries
            .iter()
            .find(|e| e.cohort_id == cohort_id && e.local_index == local_index)
            .map(|e| e.global_id)
    }

    /// One `global_id,cohort_id,local_index,member_count` line per prototype.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.global_id, e.cohort_id, e.local_index, e.member_count
            );
        }
        s
    }

    pub fn parse_manifest(text: &str) -> Result<Vec<GlobalPrototype>> {
        text.lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Format(format!("bad manifest line {l:?}"));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(GlobalPrototype {
                    global_id: f[0].parse().map_err(|_| bad())?,
                    cohort_id: f[1].to_string(),
                    local_index: f[2].parse().map_err(|_| bad())?,
                    member_count: f[3].parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }
}

pub fn merge_prototype_sets(sets: &[PrototypeSet]) -> Result<PrototypeTable> {
    let dim = sets.first().map_or(0, |s| s.dim);
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    let mut centroids = Vec::new();
    for s in sets {
        if s.dim != dim {
            return Err(Error::Dimension {
                left: vec![dim],
                right: vec![s.dim],
                context: "prototype set dimensions",
            });
        }
        if !seen.insert(s.cohort_id.as_str()) {
            return Err(contract(format!("duplicate cohort id {}", s.cohort_id)));
        }
        for local in 0..s.k {
            entries.push(GlobalPrototype {
                global_id: entries.len() as u32,
                cohort_id: s.cohort_id.clone(),
                local_index: local,
                member_count: s.member_counts.get(local).copied().unwrap_or(0),
            });
        }
        centroids.extend_from_slice(&s.centroids);
    }
    Ok(PrototypeTable {
        dim,
        entries,
        centroids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coll(rows: &[Vec<f64>]) -> EmbeddingCollection {
        EmbeddingCollection::from_rows("c", rows).unwrap()
    }

    #[test]
    fn two_points_two_clusters() {
        let pts = coll(&[vec![0.0, 1.0], vec![5.0, -2.0]]);
        let set = kmeans(&pts, &KMeansConfig::new(2, 3)).unwrap();
        assert_eq!(set.wcss, 0.0);
        let mut cs: Vec<Vec<f64>> = (0..2).map(|i| set.centroid(i).to_vec()).collect();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 1.0], vec![5.0, -2.0]]);
    }

    #[test]
    fn unit_square_single_cluster() {
        let pts = coll(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let set = kmeans(&pts, &KMeansConfig::new(1, 0)).unwrap();
        assert_eq!(set.centroid(0), &[0.5, 0.5]);
        assert!((set.wcss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn k_errors() {
        let pts = coll(&[vec![0.0], vec![1.0]]);
        assert!(matches!(kmeans(&pts, &KMeansConfig::new(0, 0)), Err(Error::Contract(_))));
        assert!(matches!(kmeans(&pts, &KMeansConfig::new(3, 0)), Err(Error::Bounds(_))));
    }

    #[test]
    fn subsample_bounds_and_determinism() {
        let pts = coll(&(0..10).map(|i| vec![i as f64]).collect::<Vec<_>>());
        assert!(matches!(subsample_uniform(&pts, 11, 0), Err(Error::Bounds(_))));
        let a = subsample_uniform(&pts, 1, 9).unwrap();
        let b = subsample_uniform(&pts, 1, 9).unwrap();
        assert_eq!(a, b);
        let full = subsample_uniform(&pts, 10, 4).unwrap();
        let mut refs = full.patch_refs().to_vec();
        refs.sort();
        let mut orig = pts.patch_refs().to_vec();
        orig.sort();
        assert_eq!(refs, orig);
    }

    #[test]
    fn assignment_ties_and_identity() {
        let set = PrototypeSet {
            cohort_id: "c".into(),
            k: 2,
            dim: 1,
            centroids: vec![-1.0, 1.0],
            wcss: 0.0,
            seed: 0,
            member_counts: vec![1, 1],
        };
        let pts = coll(&[vec![-1.0], vec![1.0], vec![0.0]]);
        assert_eq!(assign_prototypes(&pts, &set).unwrap(), vec![0, 1, 0]);
        let wrong = coll(&[vec![0.0, 0.0]]);
        assert!(assign_prototypes(&wrong, &set).is_err());
    }

    #[test]
    fn elbow_rules() {
        let knee = WcssCurve {
            entries: (10..=30)
                .map(|k| {
                    let w = if k <= 18 {
                        1000.0 - 50.0 * (k - 10) as f64
                    } else {
                        600.0 - 5.0 * (k - 18) as f64
                    };
                    (k, w)
                })
                .collect(),
        };
        assert_eq!(select_elbow(&knee).unwrap(), Elbow { k: 18, distinct: true });

        let line = WcssCurve {
            entries: (1..=8).map(|k| (k, 100.0 - 7.0 * k as f64)).collect(),
        };
        assert_eq!(select_elbow(&line).unwrap(), Elbow { k: 1, distinct: false });

        // Two equal bends at k=3 and k=6.
        let twin = WcssCurve {
            entries: vec![(1, 10.0), (2, 8.0), (3, 6.0), (4, 5.0), (5, 4.0), (6, 3.0), (7, 3.0)],
        };
        assert_eq!(select_elbow(&twin).unwrap().k, 3);

        let short = WcssCurve { entries: vec![(1, 2.0), (2, 1.0)] };
        assert!(select_elbow(&short).is_err());
    }

    #[test]
    fn merge_counts_and_duplicates() {
        let mk = |id: &str, k: usize| PrototypeSet {
            cohort_id: id.into(),
            k,
            dim: 2,
            centroids: vec![0.0; 2 * k],
            wcss: 0.0,
            seed: 0,
            member_counts: vec![1; k],
        };
        let t = merge_prototype_sets(&[mk("a", 3), mk("b", 5)]).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(t.global_id("b", 0), Some(3));
        assert!(merge_prototype_sets(&[mk("a", 1), mk("a", 2)]).is_err());
        let single = merge_prototype_sets(&[mk("a", 3)]).unwrap();
        assert_eq!(single.centroids, mk("a", 3).centroids);
        let parsed = PrototypeTable::parse_manifest(&t.manifest()).unwrap();
        assert_eq!(parsed, t.entries);
    }

    #[test]
    fn prototype_checkpoint_roundtrip() {
        let pts = coll(&[vec![0.0, 0.0], vec![0.1, 0.0], vec![4.0, 4.0], vec![4.1, 4.0]]);
        let set = kmeans(&pts, &KMeansConfig::new(2, 5)).unwrap();
        let back = PrototypeSet::from_checkpoint(&set.to_checkpoint()).unwrap();
        assert_eq!(back.centroids, set.centroids);
        assert_eq!(back.member_counts, set.member_counts);
        assert_eq!(back.wcss, set.wcss);
    }
}
