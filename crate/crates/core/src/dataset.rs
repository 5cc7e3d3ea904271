//! Synthetic and hybrid corpus assembly, plus Fréchet distance between
//! Gaussian feature statistics.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{contract, numeric, Error, Result};
use crate::rng::{derive_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Real,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    #[serde(rename = "ref")]
    pub sample_ref: String,
    pub prototype: u32,
    pub source: Source,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<CorpusEntry>,
    pub seeds: BTreeMap<String, u64>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts_per_prototype(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.prototype).or_insert(0) += 1;
        }
        counts
    }

    pub fn count_source(&self, source: Source) -> usize {
        self.entries.iter().filter(|e| e.source == source).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Produces `count` decoded samples conditioned on one prototype.
pub trait PrototypeSampler {
    fn sample_prototype(&self, prototype: u32, count: usize, seed: u64) -> Result<Vec<Vec<f64>>>;
}

impl<F> PrototypeSampler for F
where
    F: Fn(u32, usize, u64) -> Result<Vec<Vec<f64>>>,
{
    fn sample_prototype(&self, prototype: u32, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self(prototype, count, seed)
    }
}

/// Manifest plus the sample payloads, aligned with `manifest.entries`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    pub samples: Vec<Vec<f64>>,
}

/// Draws exactly `n_per` samples for every prototype id in
/// `0..num_prototypes`.
pub fn build_synthetic_corpus<S: PrototypeSampler + ?Sized>(
    num_prototypes: usize,
    n_per: usize,
    sampler: &S,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if n_per == 0 {
        return Err(contract("n_per must be at least 1"));
    }
    let mut entries = Vec::with_capacity(num_prototypes * n_per);
    let mut samples = Vec::with_capacity(num_prototypes * n_per);
    for p in 0..num_prototypes as u32 {
        let drawn = sampler.sample_prototype(p, n_per, derive_seed(seed, &[p as u64]))?;
        if drawn.len() != n_per {
            return Err(contract(format!(
                "sampler returned {} samples for prototype {p}, expected {n_per}",
                drawn.len()
            )));
        }
        for (i, s) in drawn.into_iter().enumerate() {
            entries.push(CorpusEntry {
                sample_ref: format!("synthetic/{p}/{i}"),
                prototype: p,
                source: Source::Synthetic,
            });
            samples.push(s);
        }
    }
    let seeds = BTreeMap::from([("synthetic".to_string(), seed)]);
    Ok(SyntheticCorpus {
        manifest: CorpusManifest { entries, seeds },
        samples,
    })
}

/// A real patch available for hybrid mixing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RealPatch {
    pub patch_ref: String,
    pub prototype: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolDeficit {
    pub prototype: u32,
    pub requested: usize,
    pub available: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridCorpus {
    pub manifest: CorpusManifest,
    pub deficits: Vec<PoolDeficit>,
}

/// Appends `n_per_real` uniformly drawn real patches per prototype to a
/// synthetic manifest. Short pools are taken whole and reported.
pub fn build_hybrid_corpus(
    synthetic: &CorpusManifest,
    real: &[RealPatch],
    n_per_real: usize,
    seed: u64,
) -> Result<HybridCorpus> {
    let mut manifest = synthetic.clone();
    let mut deficits = Vec::new();
    if n_per_real == 0 {
        return Ok(HybridCorpus { manifest, deficits });
    }
    let mut pools: BTreeMap<u32, Vec<&RealPatch>> = BTreeMap::new();
    for r in real {
        pools.entry(r.prototype).or_default().push(r);
    }
    let prototypes: Vec<u32> = synthetic.counts_per_prototype().into_keys().collect();
    for p in prototypes {
        let pool = pools.get(&p).map(Vec::as_slice).unwrap_or(&[]);
        let picked: Vec<usize> = if pool.len() >= n_per_real {
            let mut rng = stream(seed, &[p as u64]);
            let mut idx = index::sample(&mut rng, pool.len(), n_per_real).into_vec();
            idx.sort_unstable();
            idx
        } else {
            warn!(
                "prototype {p}: real pool has {} patches, {n_per_real} requested; taking all",
                pool.len()
            );
            deficits.push(PoolDeficit {
                prototype: p,
                requested: n_per_real,
                available: pool.len(),
            });
            (0..pool.len()).collect()
        };
        manifest.entries.extend(picked.into_iter().map(|i| CorpusEntry {
            sample_ref: pool[i].patch_ref.clone(),
            prototype: p,
            source: Source::Real,
        }));
    }
    manifest.seeds.insert("real".into(), seed);
    Ok(HybridCorpus { manifest, deficits })
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim * dim`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased covariance via Welford's streaming update.
pub fn feature_stats<'a, I>(rows: I, dim: usize) -> Result<GaussianStats>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim * dim];
    let mut delta = vec![0.0; dim];
    for row in rows {
        if row.len() != dim {
            return Err(Error::Dimension {
                left: vec![dim],
                right: vec![row.len()],
                context: "feature row",
            });
        }
        n += 1;
        for j in 0..dim {
            delta[j] = row[j] - mean[j];
            mean[j] += delta[j] / n as f64;
        }
        for a in 0..dim {
            let after = row[a] - mean[a];
            for b in 0..dim {
                m2[a * dim + b] += delta[b] * after;
            }
        }
    }
    if n < 2 {
        return Err(contract("feature statistics need at least two rows"));
    }
    // Symmetrize away rounding asymmetry from the streaming update.
    let mut cov = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in 0..dim {
            cov[a * dim + b] = 0.5 * (m2[a * dim + b] + m2[b * dim + a]) / (n - 1) as f64;
        }
    }
    Ok(GaussianStats { mean, cov })
}

const PSD_TOL: f64 = 1e-8;

fn checked_matrix(stats: &GaussianStats, which: &str) -> Result<DMatrix<f64>> {
    let d = stats.dim();
    if stats.cov.len() != d * d {
        return Err(contract(format!("{which} covariance is not {d}x{d}")));
    }
    let m = DMatrix::from_row_slice(d, d, &stats.cov);
    let asym = (&m - m.transpose()).abs().max();
    if asym > PSD_TOL {
        return Err(numeric(format!("{which} covariance asymmetric by {asym:e}")));
    }
    let sym = (&m + m.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(sym.clone()).eigenvalues.min();
    if min_eig < -PSD_TOL {
        return Err(numeric(format!("{which} covariance indefinite (eigenvalue {min_eig:e})")));
    }
    Ok(sym)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`. The trace of
/// the cross term is the nuclear norm of `S_b^{1/2} S_a^{1/2}`; taking
/// singular values directly avoids square roots of rounding-level
/// eigenvalues when a covariance is singular.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            left: vec![a.dim()],
            right: vec![b.dim()],
            context: "FID statistics",
        });
    }
    let sa = checked_matrix(a, "first")?;
    let sb = checked_matrix(b, "second")?;
    let mu = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let cross_factor = psd_sqrt(sb.clone()) * psd_sqrt(sa.clone());
    let cross = cross_factor.singular_values().sum();
    Ok(mu.norm_squared() + sa.trace() + sb.trace() - 2.0 * cross)
}
