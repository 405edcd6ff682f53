//! Ensemble headroom, recovered share, feature alignment and case
//! statistics before and after transfer.

use std::path::Path;

use kdlab::analysis::recovered;
use kdlab::config::{parse_override, RunConfig};
use kdlab::pipeline::{analyze, load_or_generate, pretrain_all};
use kdlab::trainer::run_transfer;

fn main() -> kdlab::Result<()> {
    println!("recovered(81.332, 82.722, 84.332) = {:.1}%", recovered(81.332, 82.722, 84.332)? * 100.0);

    let sets = std::env::args().skip(1).map(|a| parse_override(&a)).collect::<kdlab::Result<Vec<_>>>()?;
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/bikd-classification.cfg"), &sets)?;
    let data = load_or_generate(&cfg)?;
    let (before, _) = pretrain_all(&cfg, &data)?;
    let (after, _) = run_transfer(&cfg.transfer, before.clone(), &data)?;
    let a = analyze(&cfg, &before, &after, &data)?;

    println!("ensemble of pretrained models: {:.2}%", a.ensemble * 100.0);
    for (i, name) in a.models.iter().enumerate() {
        let rec = a.recovered[i].map_or("n/a".into(), |r| format!("{:.1}%", r * 100.0));
        println!("{name}: {:.2}% -> {:.2}%, recovered {rec}", a.before[i]["top1"] * 100.0, a.after[i]["top1"] * 100.0);
    }
    for p in &a.cca {
        println!("cca {}-{}: {:.3} -> {:.3}", p.a, p.b, p.before.mean, p.after.mean);
    }
    if let (Some(b), Some(f)) = (a.case_fractions_before, a.case_fractions_after) {
        println!("case fractions before {b:.3?}");
        println!("case fractions after  {f:.3?}");
    }
    Ok(())
}
