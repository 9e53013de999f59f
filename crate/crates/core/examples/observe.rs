//! Runs one observation recipe and prints its summary table.
//!
//! `cargo run --example observe -- obs3 5 out/` (recipe, seed count, output dir)

use std::path::PathBuf;

use quantbench::pipeline::{run_and_write, ExperimentSpec, Recipe};

fn main() -> quantbench::Result<()> {
    let mut args = std::env::args().skip(1);
    let recipe: Recipe = args.next().unwrap_or_else(|| "obs1".into()).parse()?;
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "observe_out".into()));
    let spec = ExperimentSpec {
        seeds: (0..seeds).collect(),
        parallel: true,
        ..ExperimentSpec::for_recipe(recipe)
    };
    let t = std::time::Instant::now();
    let out = run_and_write(&spec, &dir)?;
    println!("{recipe}: {} seeds in {:.1?}, written to {}", seeds, t.elapsed(), dir.display());
    for r in &out.summary.rows {
        println!("  {:<34} {:<28} {:>12.5} ± {:.5}", r.config, r.metric, r.mean, r.std);
    }
    Ok(())
}
