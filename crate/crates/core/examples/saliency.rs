//! Saliency predictors exchanging knowledge through normalized maps.

use std::path::Path;

use kdlab::config::{parse_override, RunConfig};
use kdlab::pipeline::{load_or_generate, pretrain_all};
use kdlab::trainer::run_transfer;

fn main() -> kdlab::Result<()> {
    let sets = std::env::args().skip(1).map(|a| parse_override(&a)).collect::<kdlab::Result<Vec<_>>>()?;
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/saliency.cfg"), &sets)?;
    let data = load_or_generate(&cfg)?;
    let (models, _) = pretrain_all(&cfg, &data)?;
    let (_, rep) = run_transfer(&cfg.transfer, models, &data)?;
    for (i, name) in rep.models.iter().enumerate() {
        let (b, a) = (&rep.baseline[i], &rep.final_metrics[i]);
        println!("{name}: cc {:.3}->{:.3}  nss {:.3}->{:.3}", b["cc"], a["cc"], b["nss"], a["nss"]);
    }
    Ok(())
}
