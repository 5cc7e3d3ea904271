//! Clusters two synthetic cohorts, picks k per cohort from the WCSS elbow and
//! merges the prototypes into one global id table.
//!
//! cargo run --release --example curate_prototypes

use protodiff::prototypes::{merge_prototype_sets, select_elbow, wcss_curve, KMeansConfig};
use protodiff::toy::{generate, ToySpec};

fn main() -> protodiff::Result<()> {
    let spec = ToySpec {
        clusters: 4,
        noise: 0.3,
        ..ToySpec::default()
    };
    let (cohorts, _) = generate(&spec)?;
    let mut chosen = Vec::new();
    for c in &cohorts {
        let (curve, sets) = wcss_curve(c, 1, 8, &KMeansConfig { restarts: 8, ..KMeansConfig::new(1, 11) })?;
        let elbow = select_elbow(&curve)?;
        println!("{}: {} patches", c.cohort_id, c.rows());
        for (k, w) in &curve.entries {
            println!("  k={k}  wcss={w:.2}{}", if *k == elbow.k { "  <- elbow" } else { "" });
        }
        chosen.push(sets.into_iter().find(|s| s.k == elbow.k).expect("k in range"));
    }
    let table = merge_prototype_sets(&chosen)?;
    println!("\n{} global prototypes", table.len());
    print!("{}", table.manifest());
    Ok(())
}
