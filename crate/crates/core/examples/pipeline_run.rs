//! Writes the toy workspace into a directory, runs every stage and prints
//! the stage directories and the final report.
//!
//! cargo run --release --example pipeline_run [dir]

use protodiff::pipeline::{Pipeline, PipelineConfig, Stage};
use protodiff::toy::{write_workspace, ToySpec};

fn main() -> protodiff::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "toy_run".into());
    let config = write_workspace(dir.as_ref(), &ToySpec::default())?;
    let p = Pipeline::new(PipelineConfig::load(&config)?)?;
    for prov in p.run(&[])? {
        println!("{:<17} seed {:>20}  {}", prov.stage.to_string(), prov.seed, p.stage_dir(prov.stage).display());
    }
    let report = std::fs::read_to_string(p.stage_dir(Stage::Evaluate).join("report.txt"))?;
    println!("\n{report}");
    Ok(())
}
