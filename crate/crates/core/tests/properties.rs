use std::path::Path;

use proptest::prelude::*;

use kdlab::analysis::top1;
use kdlab::autodiff::Tape;
use kdlab::config::RunConfig;
use kdlab::data::{DataSpec, Dataset, Split};
use kdlab::models::{ArchDescriptor, ModelBundle};
use kdlab::pipeline::{load_or_generate, pretrain_all};
use kdlab::trainer::*;

#[test]
fn complementary_views_make_different_mistakes() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/bikd-classification.cfg");
    let cfg = RunConfig::load(&path, &[]).unwrap();
    let data = load_or_generate(&cfg).unwrap();
    let (models, _) = pretrain_all(&cfg, &data).unwrap();
    let eval = data.batch(&data.split_indices(Split::Eval));
    let y = eval.labels().unwrap();
    let wrong: Vec<Vec<bool>> = models
        .iter()
        .map(|m| {
            let (z, _) = m.infer(&eval.x).unwrap();
            assert!(top1(&z, y) > 0.3);
            z.rows().zip(y).map(|(r, &t)| kdlab::autodiff::kernels::argmax(r) != t).collect()
        })
        .collect();
    let both = wrong[0].iter().zip(&wrong[1]).filter(|(a, b)| **a && **b).count();
    let either = wrong[0].iter().zip(&wrong[1]).filter(|(a, b)| **a || **b).count();
    let jaccard = both as f64 / either as f64;
    assert!(jaccard < 0.5, "error-set overlap {jaccard}");
}

fn toy() -> Dataset {
    Dataset::generate(&DataSpec { n_train: 48, n_eval: 16, dim: 8, classes: 3, ..DataSpec::classification(9) }).unwrap()
}

fn pair(seed: u64) -> (ModelBundle, ModelBundle) {
    let arch = ArchDescriptor::classifier(8, &[5], 3);
    (ModelBundle::init("a", arch.clone(), seed).unwrap(), ModelBundle::init("b", arch, seed ^ 0xabcd).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn total_is_task_plus_distillation(seed in 0u64..1000, start in 0usize..30, len in 1usize..18) {
        let data = toy();
        let (a, b) = pair(seed);
        let batch = data.batch(&(start..start + len).collect::<Vec<_>>());
        let tape = Tape::new();
        let obj = bi_kd_objective(&tape, &a.bind(&tape, true), &b.bind(&tape, true), &batch, &TransferConfig::default()).unwrap();
        let parts = obj.task.iter().map(|t| t.item().unwrap()).sum::<f64>() + obj.dist.item().unwrap();
        prop_assert!((obj.total.item().unwrap() - parts).abs() < 1e-12);
        let mask = obj.mask.unwrap();
        prop_assert_eq!(mask.assignments().iter().filter(|row| row.iter().filter(|&&m| m).count() == 1).count(), len);
    }

    #[test]
    fn distillation_never_moves_the_sample_teacher(seed in 0u64..1000, idx in 0usize..48) {
        let data = toy();
        let (a, b) = pair(seed);
        let batch = data.batch(&[idx]);
        let tape = Tape::new();
        let (ba, bb) = (a.bind(&tape, true), b.bind(&tape, true));
        let obj = bi_kd_objective(&tape, &ba, &bb, &batch, &TransferConfig::default()).unwrap();
        let (teacher, student) = if obj.mask.as_ref().unwrap().teachers()[0] == 0 { (&ba, &bb) } else { (&bb, &ba) };
        let g = tape.backward(obj.dist).unwrap();
        for p in &teacher.params {
            prop_assert!(g.get(*p).unwrap().iter().all(|&v| v == 0.0));
        }
        prop_assert!(student.params.iter().any(|p| g.get(*p).unwrap().iter().any(|&v| v != 0.0)));
        let g = tape.backward(obj.task[0]).unwrap();
        prop_assert!(ba.params.iter().any(|p| g.get(*p).unwrap().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn transfer_is_deterministic(seed in 0u64..1000, method in prop::sample::select(vec![
        Method::BiKd, Method::MultiKd, Method::VanillaKd, Method::FixedPartitionKd, Method::SoloFinetune,
    ])) {
        let data = toy();
        let (a, b) = pair(seed);
        let cfg = TransferConfig { method, epochs: 2, batch_size: 16, seed, ..TransferConfig::default() };
        let first = run_transfer(&cfg, vec![a.clone(), b.clone()], &data).unwrap();
        let second = run_transfer(&cfg, vec![a, b], &data).unwrap();
        prop_assert_eq!(first, second);
    }
}
