//! Three models on overlapping feature windows learning from each other.

use std::path::Path;

use kdlab::config::{parse_override, RunConfig};
use kdlab::pipeline::{load_or_generate, pretrain_all};
use kdlab::trainer::run_transfer;

fn main() -> kdlab::Result<()> {
    let sets = std::env::args().skip(1).map(|a| parse_override(&a)).collect::<kdlab::Result<Vec<_>>>()?;
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/multikd-classification.cfg"), &sets)?;
    let data = load_or_generate(&cfg)?;
    let (models, _) = pretrain_all(&cfg, &data)?;
    let (_, rep) = run_transfer(&cfg.transfer, models, &data)?;
    for h in rep.history.iter().step_by(5).chain(rep.history.last()) {
        let fr: Vec<String> = h.teacher_fractions.iter().map(|f| format!("{:.2}", f)).collect();
        println!("epoch {:>2}: teacher shares [{}], dist loss {:.4}", h.epoch, fr.join(", "), h.dist_loss);
    }
    for (name, (b, d)) in rep.models.iter().zip(rep.baseline.iter().zip(&rep.delta)) {
        println!("{name}: {:.2}% -> {:+.2} points", b["top1"] * 100.0, d["top1"] * 100.0);
    }
    Ok(())
}
