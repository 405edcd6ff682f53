//! Dynamic bidirectional transfer against the frozen-teacher baselines.

use std::path::Path;

use kdlab::config::{parse_override, RunConfig};
use kdlab::pipeline::{load_or_generate, pretrain_all};
use kdlab::trainer::{run_transfer, Method, TransferConfig};

fn main() -> kdlab::Result<()> {
    let sets = std::env::args().skip(1).map(|a| parse_override(&a)).collect::<kdlab::Result<Vec<_>>>()?;
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/bikd-classification.cfg"), &sets)?;
    let data = load_or_generate(&cfg)?;
    let (models, _) = pretrain_all(&cfg, &data)?;
    let teacher = models[1].fingerprint();

    for method in [Method::BiKd, Method::FixedPartitionKd, Method::VanillaKd, Method::SoloFinetune] {
        let tc = TransferConfig { method, ..cfg.transfer.clone() };
        let (after, rep) = run_transfer(&tc, models.clone(), &data)?;
        let d: Vec<String> = rep.delta.iter().map(|m| format!("{:+.2}", m["top1"] * 100.0)).collect();
        let flips = rep.mask_flips.map_or("-".into(), |f| f.to_string());
        let frozen = if method == Method::VanillaKd { format!(", teacher unchanged: {}", after[1].fingerprint() == teacher) } else { String::new() };
        println!("{method:>18}: delta {} points, mask flips {flips}{frozen}", d.join(" / "));
    }
    Ok(())
}
