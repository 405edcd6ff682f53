//! Full pipeline into a scratch directory, then a replay from the manifest
//! that must reproduce every artifact hash.

use std::path::Path;

use kdlab::config::RunConfig;
use kdlab::pipeline::{cmd_experiment, Manifest};

fn main() -> kdlab::Result<()> {
    let out = std::env::temp_dir().join(format!("kdlab-example-{}", std::process::id()));
    let cfg = RunConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/bikd-classification.cfg"),
        &[("run.out".into(), out.display().to_string()), ("transfer.epochs".into(), "3".into())],
    )?;
    let manifest = cmd_experiment(&cfg)?;
    println!("stages: {}", manifest.stages.join(" -> "));
    for (path, hash) in &manifest.artifacts {
        println!("{}  {path}", &hash[..16]);
    }

    std::fs::remove_file(out.join("pretrain/model0.ckpt"))?;
    let path = out.join("manifest.txt");
    cmd_experiment(&RunConfig::load(&path, &[])?)?;
    let stale = Manifest::read(&path)?.mismatches(&out)?;
    println!("replayed from {}: {} mismatched artifacts", path.display(), stale.len());
    std::fs::remove_dir_all(&out)?;
    Ok(())
}
