//! Per-pixel segmentation models trained on different images and channels,
//! then transfer with loss-based teacher assignment.

use std::path::Path;

use kdlab::config::{parse_override, RunConfig};
use kdlab::pipeline::{load_or_generate, pretrain_all};
use kdlab::trainer::run_transfer;

fn main() -> kdlab::Result<()> {
    let sets = std::env::args().skip(1).map(|a| parse_override(&a)).collect::<kdlab::Result<Vec<_>>>()?;
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/dense-seg.cfg"), &sets)?;
    let data = load_or_generate(&cfg)?;
    let (models, _) = pretrain_all(&cfg, &data)?;
    let (_, rep) = run_transfer(&cfg.transfer, models, &data)?;
    for (i, name) in rep.models.iter().enumerate() {
        let row: Vec<String> = ["miou", "fwiou", "macc", "pacc"]
            .iter()
            .map(|k| format!("{k} {:.3}->{:.3}", rep.baseline[i][*k], rep.final_metrics[i][*k]))
            .collect();
        println!("{name}: {}", row.join("  "));
    }
    Ok(())
}
