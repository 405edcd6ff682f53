//! End-to-end acceptance checks, one `PASS`/`FAIL` line per criterion.
//!
//! The transfer experiments run the configs under `configs/` for seeds 0..5;
//! the classification runs are shared between several criteria.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kdlab::analysis::recovered;
use kdlab::autodiff::{grad_check, grad_check_many, GradCheckReport, Tape, Tensor};
use kdlab::config::RunConfig;
use kdlab::data::{DataSpec, Dataset, Split};
use kdlab::losses::*;
use kdlab::models::{ArchDescriptor, BoundModel, ModelBundle};
use kdlab::partition::*;
use kdlab::pipeline::{analyze, cmd_experiment, load_or_generate, pretrain_all, AnalysisReport, Manifest};
use kdlab::trainer::*;

const SEEDS: std::ops::Range<u64> = 0..5;

fn config(name: &str, seed: u64) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    RunConfig::load(&path, &[("run.seed".into(), seed.to_string())]).unwrap()
}

static REPORTED: AtomicBool = AtomicBool::new(false);

fn report(n: usize, pass: bool, detail: String) {
    println!("criterion {n:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    REPORTED.store(true, Ordering::SeqCst);
    assert!(pass, "criterion {n} failed: {detail}");
}

fn main() {
    let criteria: [(usize, fn()); 10] = [
        (1, criterion_01_gradient_correctness),
        (2, criterion_02_partition_exactness),
        (3, criterion_03_bi_kd_beats_solo_finetuning),
        (4, criterion_04_bi_kd_beats_fixed_partition),
        (5, criterion_05_case_dynamics),
        (6, criterion_06_cca_alignment),
        (7, criterion_07_recovered_formula),
        (8, criterion_08_multi_model_transfer),
        (9, criterion_09_dense_segmentation),
        (10, criterion_10_manifest_replay),
    ];
    std::panic::set_hook(Box::new(|info| eprintln!("{info}")));
    let mut failed = Vec::new();
    for (n, run) in criteria {
        REPORTED.store(false, Ordering::SeqCst);
        if std::panic::catch_unwind(run).is_err() {
            if !REPORTED.load(Ordering::SeqCst) {
                println!("criterion {n:>2}: FAIL | panicked before reporting");
            }
            failed.push(n);
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed.len(), criteria.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Runs `check` on `n` fresh instances and folds the reports.
fn sweep(name: &str, n: usize, mut check: impl FnMut(&mut ChaCha8Rng) -> GradCheckReport) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let (mut worst, mut pass, mut entries) = (0.0f64, true, 0);
    for _ in 0..n {
        let r = check(&mut rng);
        worst = worst.max(r.max_rel_err);
        pass &= r.pass && r.severed_nonzero.is_empty();
        entries += r.checked;
    }
    (pass, format!("{name}: {n} inst, {entries} entries, max rel {worst:.1e}"))
}

fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let w = LossWeights::default();
    let (step, tol) = (1e-6, 1e-4);
    let mut results = Vec::new();

    results.push(sweep("kl", 100, |rng| {
        let t = rng.random_range(0.5..4.0);
        let dir = if rng.random_bool(0.5) { KlDirection::TeacherStudent } else { KlDirection::StudentTeacher };
        let (s, te) = (random(rng, vec![3, 5], -3.0, 3.0), random(rng, vec![3, 5], -3.0, 3.0));
        let r = grad_check_many(|_, v| kl_distill_mean(v[0], v[1], t, dir), &[s, te], step, tol).unwrap();
        assert_eq!(r.skipped, vec![1], "teacher logits must be severed");
        r
    }));
    results.push(sweep("cross-entropy", 100, |rng| {
        let z = random(rng, vec![4, 5], -4.0, 4.0);
        let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        grad_check(|_, v| cross_entropy_mean(v[0], &y), &z, step, tol).unwrap()
    }));
    results.push(sweep("mask-loss", 100, |rng| {
        let q = random(rng, vec![4, 4], 0.0, 1.0).map(|v| v.round());
        let z = random(rng, vec![4, 4], -2.0, 2.0);
        grad_check(|_, v| mask_loss(v[0].sigmoid()?, &q, &w), &z, step, tol).unwrap()
    }));
    results.push(sweep("semseg", 100, |rng| {
        let q = random(rng, vec![3, 3], 0.0, 1.0).map(|v| v.round());
        let (zc, zm) = (random(rng, vec![4], -2.0, 2.0), random(rng, vec![3, 3], -2.0, 2.0));
        let y = rng.random_range(0..4);
        let a = grad_check_many(|_, v| semseg_loss(v[0], v[1], y, &q, &w), &[zc, zm], step, tol).unwrap();
        let zd = random(rng, vec![2, 2, 3, 3], -2.0, 2.0);
        let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
        let b = grad_check(|_, v| semseg_loss_batch(v[0], &labels, &[labels[0], labels[6]], &w)?.mean(), &zd, step, tol).unwrap();
        GradCheckReport {
            max_rel_err: a.max_rel_err.max(b.max_rel_err),
            pass: a.pass && b.pass,
            checked: a.checked + b.checked,
            skipped: vec![],
            severed_nonzero: [a.severed_nonzero, b.severed_nonzero].concat(),
        }
    }));
    results.push(sweep("saliency", 100, |rng| {
        let q = random(rng, vec![2, 6], 0.05, 1.0);
        let p = random(rng, vec![2, 6], -1.5, 1.5);
        grad_check(|_, v| vsp_loss_rows(v[0].sigmoid()?, &q, &w)?.mean(), &p, step, tol).unwrap()
    }));
    results.push(sweep("map-distill", 100, |rng| {
        let (s, t) = (random(rng, vec![2, 6], -1.5, 1.5), random(rng, vec![2, 6], -1.5, 1.5));
        let r = grad_check_many(
            |_, v| map_distill(v[0].sigmoid()?, v[1].sigmoid()?, KlDirection::TeacherStudent)?.mean(),
            &[s, t],
            step,
            tol,
        )
        .unwrap();
        assert_eq!(r.skipped, vec![1]);
        r
    }));

    // the full two-model objective with respect to every parameter
    let data = Dataset::generate(&DataSpec { n_train: 64, n_eval: 8, dim: 8, classes: 3, ..DataSpec::classification(5) }).unwrap();
    let cfg = TransferConfig::default();
    let mut zero_teacher = true;
    let mut seed = 0;
    results.push(sweep("bi-kd objective", 100, |rng| {
        seed += 1;
        let arch = ArchDescriptor::classifier(8, &[3], 3);
        let (a, b) = (ModelBundle::init("a", arch.clone(), seed).unwrap(), ModelBundle::init("b", arch, seed + 1000).unwrap());
        let n = rng.random_range(1..5);
        let batch = data.batch(&(0..n).map(|_| rng.random_range(0..64)).collect::<Vec<_>>());
        let split = a.params().len();
        let inputs: Vec<Tensor> = a.params().iter().chain(b.params()).map(|(_, t)| t.clone()).collect();
        // library gradient of the full objective
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let ba = BoundModel { model: &a, params: vars[..split].to_vec() };
        let bb = BoundModel { model: &b, params: vars[split..].to_vec() };
        let obj = bi_kd_objective(&tape, &ba, &bb, &batch, &cfg).unwrap();
        let analytic: Vec<Vec<f64>> = {
            let g = tape.backward(obj.total).unwrap();
            vars.iter().map(|v| g.get(*v).unwrap().to_vec()).collect()
        };

        // stop-gradient means the teacher's logits are constants at the
        // current parameters, so difference that surrogate instead
        let y = batch.labels().unwrap();
        let (za, zb) = (a.infer(&batch.x).unwrap().0, b.infer(&batch.x).unwrap().0);
        let mask = confidence_masks(&za, &zb, y).unwrap();
        let surrogate = |w: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<_> = w.iter().map(|t| tape.constant(t.clone())).collect();
            let x = tape.constant(batch.x.clone());
            let ba = BoundModel { model: &a, params: vars[..split].to_vec() };
            let bb = BoundModel { model: &b, params: vars[split..].to_vec() };
            let (la, lb) = (ba.forward_classifier(x).unwrap().output, bb.forward_classifier(x).unwrap().output);
            let (fa, fb) = (tape.constant(za.clone()), tape.constant(zb.clone()));
            let t = cfg.loss.temperature;
            let into_b = kl_distill(lb, fa, t, cfg.kl_direction).unwrap().mul_const(&mask.weights_for(0)).unwrap();
            let into_a = kl_distill(la, fb, t, cfg.kl_direction).unwrap().mul_const(&mask.weights_for(1)).unwrap();
            let dist = into_b.add(into_a).unwrap().mean().unwrap().item().unwrap();
            let ce = |z| cross_entropy_mean(z, y).unwrap().item().unwrap();
            ce(la) + ce(lb) + dist
        };
        assert!((surrogate(&inputs) - obj.total.item().unwrap()).abs() < 1e-12);
        let mut r = GradCheckReport { max_rel_err: 0.0, pass: true, checked: 0, skipped: vec![], severed_nonzero: vec![] };
        let mut work = inputs.clone();
        for i in 0..inputs.len() {
            for (j, &exact) in analytic[i].iter().enumerate() {
                let orig = inputs[i].data()[j];
                work[i].data_mut()[j] = orig + step;
                let plus = surrogate(&work);
                work[i].data_mut()[j] = orig - step;
                let minus = surrogate(&work);
                work[i].data_mut()[j] = orig;
                let err = kdlab::autodiff::relative_error(exact, (plus - minus) / (2.0 * step));
                r.max_rel_err = r.max_rel_err.max(err);
                r.checked += 1;
            }
        }
        r.pass = r.max_rel_err <= tol;

        // a single sample has one teacher, which the distillation term cannot move
        let one = data.batch(&batch.indices[..1]);
        let tape = Tape::new();
        let (ba, bb) = (a.bind(&tape, true), b.bind(&tape, true));
        let obj = bi_kd_objective(&tape, &ba, &bb, &one, &cfg).unwrap();
        let teacher = if obj.mask.as_ref().unwrap().teachers()[0] == 0 { &ba } else { &bb };
        let g = tape.backward(obj.dist).unwrap();
        zero_teacher &= teacher.params.iter().all(|p| g.get(*p).unwrap().iter().all(|&x| x == 0.0));
        r
    }));

    let elapsed = start.elapsed();
    let pass = results.iter().all(|(p, _)| *p) && zero_teacher && elapsed < Duration::from_secs(60);
    let lines: Vec<&str> = results.iter().map(|(_, s)| s.as_str()).collect();
    report(1, pass, format!("{}; teacher grads zero: {zero_teacher}; {:.1}s", lines.join("; "), elapsed.as_secs_f64()));
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn criterion_02_partition_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut mismatches, mut ties) = (0usize, 0usize);
    let instances = 10_000;
    for i in 0..instances {
        let (n, c) = (rng.random_range(1..9), rng.random_range(2..6));
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let z1 = random(&mut rng, vec![n, c], -3.0, 3.0);
        // every fourth instance copies rows across models to force ties
        let z2 = if i % 4 == 0 { z1.clone() } else { random(&mut rng, vec![n, c], -3.0, 3.0) };
        let gt = |z: &Tensor| -> Vec<f64> { (0..n).map(|r| softmax(&z.data()[r * c..(r + 1) * c])[y[r]]).collect() };
        let (g1, g2) = (gt(&z1), gt(&z2));
        ties += g1.iter().zip(&g2).filter(|(a, b)| a == b).count();

        let pair: Vec<usize> = g1.iter().zip(&g2).map(|(a, b)| if a > b { 0 } else { 1 }).collect();
        mismatches += (confidence_masks(&z1, &z2, &y).unwrap().teachers() != pair.as_slice()) as usize;

        let k = rng.random_range(2..6);
        let mut probs: Vec<f64> = (0..n * k).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        if i % 3 == 0 {
            probs = (0..n * k).map(|j| ((j / k) % 3) as f64 / 4.0).collect();
        }
        let table = Tensor::new(vec![n, k], probs.clone()).unwrap();
        let argmax: Vec<usize> = probs
            .chunks(k)
            .map(|r| (0..k).rev().fold(k - 1, |best, j| if r[j] >= r[best] { j } else { best }))
            .collect();
        mismatches += (multi_masks(&table).unwrap().teachers() != argmax.as_slice()) as usize;
        let argmin: Vec<usize> = probs
            .chunks(k)
            .map(|r| (0..k).rev().fold(k - 1, |best, j| if r[j] <= r[best] { j } else { best }))
            .collect();
        mismatches += (multi_loss_masks(&table).unwrap().teachers() != argmin.as_slice()) as usize;

        let losses = Tensor::new(vec![n, 2], probs[..n * 2].to_vec()).unwrap();
        let lower: Vec<usize> = losses.data().chunks(2).map(|r| if r[0] < r[1] { 0 } else { 1 }).collect();
        mismatches += (loss_masks(&losses).unwrap().teachers() != lower.as_slice()) as usize;
    }
    let elapsed = start.elapsed();
    report(
        2,
        mismatches == 0 && ties > 0 && elapsed < Duration::from_secs(10),
        format!("{instances} instances x 4 rules, {mismatches} mismatches, {ties} forced ties, {:.2}s", elapsed.as_secs_f64()),
    );
}

struct SeedRun {
    bi: TransferReport,
    solo: TransferReport,
    fixed: TransferReport,
    analysis: AnalysisReport,
}

struct Classification {
    runs: Vec<SeedRun>,
    elapsed: Duration,
}

fn classification() -> &'static Classification {
    static RUNS: OnceLock<Classification> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = SEEDS
            .map(|seed| {
                let cfg = config("bikd-classification.cfg", seed);
                let data = load_or_generate(&cfg).unwrap();
                let (models, _) = pretrain_all(&cfg, &data).unwrap();
                let with = |method| TransferConfig { method, ..cfg.transfer.clone() };
                let (after, bi) = run_transfer(&with(Method::BiKd), models.clone(), &data).unwrap();
                let (_, solo) = run_transfer(&with(Method::SoloFinetune), models.clone(), &data).unwrap();
                let (_, fixed) = run_transfer(&with(Method::FixedPartitionKd), models.clone(), &data).unwrap();
                let analysis = analyze(&cfg, &models, &after, &data).unwrap();
                SeedRun { bi, solo, fixed, analysis }
            })
            .collect();
        Classification { runs, elapsed: start.elapsed() }
    })
}

fn delta(r: &TransferReport, model: usize) -> f64 {
    r.delta[model]["top1"] * 100.0
}

fn criterion_03_bi_kd_beats_solo_finetuning() {
    let c = classification();
    let mut pass = c.elapsed < Duration::from_secs(300);
    let mut parts = Vec::new();
    for m in 0..2 {
        let bi = mean(c.runs.iter().map(|r| delta(&r.bi, m)));
        let solo = mean(c.runs.iter().map(|r| delta(&r.solo, m)));
        pass &= bi > 0.0 && bi - solo >= 0.5;
        parts.push(format!("model{m} bi {bi:+.3} solo {solo:+.3} margin {:+.3} pts", bi - solo));
    }
    let flips: Vec<usize> = c.runs.iter().map(|r| r.bi.mask_flips.unwrap()).collect();
    pass &= flips.iter().all(|&f| f > 0);
    report(3, pass, format!("{}; mask flips {flips:?}; {:.1}s", parts.join("; "), c.elapsed.as_secs_f64()));
}

fn criterion_04_bi_kd_beats_fixed_partition() {
    let c = classification();
    let wins: Vec<bool> = c
        .runs
        .iter()
        .map(|r| delta(&r.bi, 0) + delta(&r.bi, 1) > delta(&r.fixed, 0) + delta(&r.fixed, 1))
        .collect();
    let n = wins.iter().filter(|&&w| w).count();
    let sums: Vec<String> = c
        .runs
        .iter()
        .map(|r| format!("{:+.2}/{:+.2}", delta(&r.bi, 0) + delta(&r.bi, 1), delta(&r.fixed, 0) + delta(&r.fixed, 1)))
        .collect();
    report(4, n >= 4 && c.elapsed < Duration::from_secs(600), format!("wins {n}/5 (bi/fixed summed pts: {})", sums.join(" ")));
}

fn criterion_05_case_dynamics() {
    let c = classification();
    let frac = |f: fn(&AnalysisReport) -> [f64; 4], i: usize| mean(c.runs.iter().map(|r| f(&r.analysis)[i]));
    let before = |a: &AnalysisReport| a.case_fractions_before.unwrap();
    let after = |a: &AnalysisReport| a.case_fractions_after.unwrap();
    let (c1b, c1a, c2b, c2a) = (frac(before, 0), frac(after, 0), frac(before, 1), frac(after, 1));
    report(5, c1a > c1b && c2a < c2b, format!("case1 {c1b:.3} -> {c1a:.3}; case2 {c2b:.3} -> {c2a:.3}"));
}

fn criterion_06_cca_alignment() {
    let c = classification();
    let before = mean(c.runs.iter().map(|r| r.analysis.cca[0].before.mean));
    let after = mean(c.runs.iter().map(|r| r.analysis.cca[0].after.mean));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&mut rng, vec![500, 6], -1.0, 1.0);
    let own = kdlab::analysis::cca(&a, &a, 6, kdlab::analysis::CCA_RIDGE).unwrap();
    let self_ok = own.correlations.iter().all(|r| (r - 1.0).abs() <= 1e-8);
    let independent = mean(SEEDS.map(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        let normal = rand_distr::StandardNormal;
        let x = Tensor::new(vec![10_000, 8], (0..80_000).map(|_| rng.sample::<f64, _>(normal)).collect()).unwrap();
        let y = Tensor::new(vec![10_000, 8], (0..80_000).map(|_| rng.sample::<f64, _>(normal)).collect()).unwrap();
        kdlab::analysis::cca(&x, &y, 8, kdlab::analysis::CCA_RIDGE).unwrap().mean
    }));
    report(
        6,
        after > before && self_ok && independent < 0.1,
        format!("mean cca {before:.4} -> {after:.4}; self-cca exact: {self_ok}; independent {independent:.4}"),
    );
}

fn criterion_07_recovered_formula() {
    let a = recovered(81.332, 82.722, 84.332).unwrap() * 100.0;
    let b = recovered(79.152, 80.544, 80.274).unwrap() * 100.0;
    let pass = (a - 46.3).abs() <= 0.1 && (b - 124.0).abs() <= 0.1;
    report(7, pass, format!("{a:.2}% (46.3), {b:.2}% (124)"));
}

fn criterion_08_multi_model_transfer() {
    let start = Instant::now();
    let mut deltas = vec![Vec::new(); 3];
    for seed in SEEDS {
        let cfg = config("multikd-classification.cfg", seed);
        let data = load_or_generate(&cfg).unwrap();
        let (models, _) = pretrain_all(&cfg, &data).unwrap();
        let (_, rep) = run_transfer(&cfg.transfer, models, &data).unwrap();
        for (m, d) in deltas.iter_mut().enumerate() {
            d.push(delta(&rep, m));
        }
    }
    let means: Vec<f64> = deltas.iter().map(|d| mean(d.iter().copied())).collect();

    // K = 2 equivalence on pretrained acceptance models
    let cfg = config("bikd-classification.cfg", 0);
    let data = load_or_generate(&cfg).unwrap();
    let (models, _) = pretrain_all(&cfg, &data).unwrap();
    let tc = TransferConfig { method: Method::BiKd, ..cfg.transfer.clone() };
    let train = data.split_indices(Split::Train);
    let mut worst = 0.0f64;
    let mut tie_free = true;
    let (mut a, mut b) = (Learner::new(models[0].clone(), &tc), Learner::new(models[1].clone(), &tc));
    let mut both = vec![Learner::new(models[0].clone(), &tc), Learner::new(models[1].clone(), &tc)];
    for chunk in train.chunks(128).take(10) {
        let batch = data.batch(chunk);
        let y = batch.labels().unwrap();
        let (p1, p2) = (gt_probs(&a.model.infer(&batch.x).unwrap().0, y).unwrap(), gt_probs(&b.model.infer(&batch.x).unwrap().0, y).unwrap());
        tie_free &= p1.iter().zip(&p2).all(|(u, v)| u != v);
        let bi = bi_kd_step(&mut a, &mut b, &batch, &tc).unwrap();
        let multi = multi_kd_step(&mut both, &batch, &tc).unwrap();
        worst = worst.max((bi.total - multi.total).abs());
        for (x, y) in [(&a, &both[0]), (&b, &both[1])] {
            for ((_, p), (_, q)) in x.model.params().iter().zip(y.model.params()) {
                for (u, v) in p.data().iter().zip(q.data()) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        8,
        means.iter().all(|&d| d > 0.0) && tie_free && worst <= 1e-12 && elapsed < Duration::from_secs(600),
        format!(
            "mean deltas {} pts; K=2 max diff {worst:.1e} over 10 steps (tie-free {tie_free}); {:.1}s",
            means.iter().map(|d| format!("{d:+.3}")).collect::<Vec<_>>().join(" "),
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_09_dense_segmentation() {
    let start = Instant::now();
    let keys = ["miou", "fwiou", "macc", "pacc"];
    let mut sums = [[0.0; 4]; 2];
    for seed in SEEDS {
        let cfg = config("dense-seg.cfg", seed);
        let data = load_or_generate(&cfg).unwrap();
        let (models, _) = pretrain_all(&cfg, &data).unwrap();
        let (_, rep) = run_transfer(&cfg.transfer, models, &data).unwrap();
        for (m, s) in sums.iter_mut().enumerate() {
            for (j, k) in keys.iter().enumerate() {
                s[j] += rep.delta[m][*k] / SEEDS.count() as f64;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = sums.iter().all(|s| s.iter().all(|&d| d > 0.0)) && elapsed < Duration::from_secs(600);
    let detail = sums
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let parts: Vec<String> = keys.iter().zip(s).map(|(k, d)| format!("{k} {d:+.4}")).collect();
            format!("model{m} {}", parts.join(" "))
        })
        .collect::<Vec<_>>();
    report(9, pass, format!("{}; {:.1}s", detail.join("; "), elapsed.as_secs_f64()));
}

fn criterion_10_manifest_replay() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = first.display().to_string();
    let cfg = RunConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/bikd-classification.cfg"),
        &[("run.out".into(), out), ("transfer.epochs".into(), "5".into())],
    )
    .unwrap();
    let manifest = cmd_experiment(&cfg).unwrap();
    let path = first.join("manifest.txt");

    // replay into a fresh directory from the manifest alone
    let second: PathBuf = dir.path().join("second");
    let replay = RunConfig::load(&path, &[("run.out".into(), second.display().to_string())]).unwrap();
    let again = cmd_experiment(&replay).unwrap();

    // wipe every artifact of the first run, then replay in place
    for (rel, _) in &manifest.artifacts {
        std::fs::remove_file(first.join(rel)).unwrap();
    }
    cmd_experiment(&RunConfig::load(&path, &[]).unwrap()).unwrap();
    let stale = Manifest::read(&path).unwrap().mismatches(&first).unwrap();

    let pass = again.artifacts == manifest.artifacts && stale.is_empty() && !manifest.artifacts.is_empty();
    report(10, pass, format!("{} artifacts; fresh replay equal: {}; in-place mismatches {stale:?}", manifest.artifacts.len(), again.artifacts == manifest.artifacts));
}
