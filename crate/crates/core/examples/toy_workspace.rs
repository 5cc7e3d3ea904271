//! Writes a small two-cohort workspace (embeddings, labels, config) that the
//! `protodiff` binary can run end to end.
//!
//! cargo run --release --example toy_workspace -- /tmp/toy
//! protodiff run --config /tmp/toy/config.json

use std::path::PathBuf;

use protodiff::toy::{write_workspace, ToySpec};

fn main() -> protodiff::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("toy_workspace"));
    let config = write_workspace(&dir, &ToySpec::default())?;
    println!("{}", config.display());
    Ok(())
}
