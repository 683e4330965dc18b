//! Writes a synthetic fixture with its pipeline config, runs every stage,
//! then runs again to show every stage served from the cache.
//!
//! cargo run --release --example cached_pipeline -- /tmp/privlex-demo

use std::path::PathBuf;

use privlex::pipeline::{run_pipeline, RunOptions};
use privlex::synth::{generate, write_fixture, PlantedConfig};

fn main() -> privlex::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "pipeline-example".into()));
    let fixture = generate(&PlantedConfig::default())?;
    let paths = write_fixture(&dir, &fixture, 7, 25)?;
    for run in ["first", "second"] {
        let manifest = run_pipeline(&paths.config, &RunOptions::default())?;
        println!("{run} run ({:.2}s):", manifest.wall_clock_seconds);
        for s in &manifest.stages {
            println!("  {:<10} {:?}", s.stage.name(), s.status);
        }
    }
    let eval = std::fs::read_to_string(dir.join("out/evaluate/evaluation.json")).map_err(|e| privlex::Error::io(&dir, e))?;
    println!("{eval}");
    Ok(())
}
