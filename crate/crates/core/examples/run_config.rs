//! Resolves a run configuration the way the CLI does: file, then
//! command-line overrides, then the seed environment variable.

use quantbench::cli::RunConfig;

const FILE: &str = r#"
dataset = "spirals"
classes = 3
weight_bits = 4
act_bits = 4
allowed_bits = "2,4,8"
"#;

fn main() -> quantbench::Result<()> {
    let overrides = [("act_bits", "6".to_string()), ("act_observer", "percentile".to_string())];
    let cfg = RunConfig::resolve(Some(FILE), &overrides, Some("42"))?;
    println!("{}", cfg.to_toml()?);
    println!("observer {:?}, allowed {:?}", cfg.observer(), cfg.mpq().allowed_bits);
    Ok(())
}
