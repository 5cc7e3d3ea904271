//! Builds synthetic and hybrid manifests from a stand-in sampler and scores
//! the synthetic features against real ones with FID.
//!
//! cargo run --release --example corpus_fid

use protodiff::dataset::{build_hybrid_corpus, build_synthetic_corpus, feature_stats, fid, RealPatch, Source};
use protodiff::rng::stream;
use rand_distr::{Distribution, Normal};

fn main() -> protodiff::Result<()> {
    let centers = [[2.0, 0.0], [-2.0, 0.0], [0.0, 3.0]];
    // Stands in for the guided sampler: prototype p draws around centers[p].
    let sampler = |p: u32, count: usize, seed: u64| -> protodiff::Result<Vec<Vec<f64>>> {
        let mut rng = stream(seed, &[]);
        let n = Normal::new(0.0, 0.6).unwrap();
        Ok((0..count)
            .map(|_| centers[p as usize].iter().map(|c| c + n.sample(&mut rng)).collect())
            .collect())
    };
    let synthetic = build_synthetic_corpus(centers.len(), 200, &sampler, 1)?;
    println!("synthetic: {} entries {:?}", synthetic.manifest.len(), synthetic.manifest.counts_per_prototype());

    let real: Vec<RealPatch> = (0..centers.len() as u32)
        .flat_map(|p| (0..150).map(move |i| RealPatch { patch_ref: format!("slide{p}:{i}"), prototype: p }))
        .collect();
    let hybrid = build_hybrid_corpus(&synthetic.manifest, &real, 200, 2)?;
    println!(
        "hybrid: {} entries ({} real), {} short pools",
        hybrid.manifest.len(),
        hybrid.manifest.count_source(Source::Real),
        hybrid.deficits.len()
    );

    let real_feats = sampler(0, 600, 50)?
        .into_iter()
        .chain(sampler(1, 600, 51)?)
        .chain(sampler(2, 600, 52)?)
        .collect::<Vec<_>>();
    let a = feature_stats(synthetic.samples.iter().map(Vec::as_slice), 2)?;
    let b = feature_stats(real_feats.iter().map(Vec::as_slice), 2)?;
    let only_two = feature_stats(real_feats[..1200].iter().map(Vec::as_slice), 2)?;
    println!("FID synthetic vs real: {:.4}", fid(&a, &b)?);
    println!("FID synthetic vs real missing a prototype: {:.4}", fid(&a, &only_two)?);
    Ok(())
}
