//! Two MLPs pretrained on complementary feature halves, then bidirectional
//! transfer compared with plain fine-tuning.
//!
//! `cargo run --release --example bi_kd_classification -- run.seed=3 transfer.epochs=10`

use std::path::Path;

use kdlab::config::{parse_override, RunConfig};
use kdlab::pipeline::{load_or_generate, pretrain_all};
use kdlab::trainer::{run_transfer, Method, TransferConfig};

fn main() -> kdlab::Result<()> {
    let sets = std::env::args().skip(1).map(|a| parse_override(&a)).collect::<kdlab::Result<Vec<_>>>()?;
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/bikd-classification.cfg"), &sets)?;
    let data = load_or_generate(&cfg)?;
    let (models, _) = pretrain_all(&cfg, &data)?;

    for method in [Method::BiKd, Method::SoloFinetune] {
        let tc = TransferConfig { method, ..cfg.transfer.clone() };
        let (_, rep) = run_transfer(&tc, models.clone(), &data)?;
        print!("{method:>14}:");
        for (name, (b, d)) in rep.models.iter().zip(rep.baseline.iter().zip(&rep.delta)) {
            print!("  {name} {:.2}% {:+.2}", b["top1"] * 100.0, d["top1"] * 100.0);
        }
        if let Some(share) = rep.history.last().and_then(|h| h.teacher_fractions.first()) {
            print!("  | model0 teaches {:.1}% in the last epoch", share * 100.0);
        }
        println!();
    }
    Ok(())
}
