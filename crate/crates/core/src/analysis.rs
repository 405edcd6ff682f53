//! Post-hoc evaluation: task metrics, ensembles, recovered headroom and
//! canonical correlation between feature sets.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{argmax, softmax};
use crate::autodiff::Tensor;
use crate::data::{Dataset, Split, TargetBatch, Task};
use crate::error::{Error, Result};
use crate::models::{HeadKind, ModelBundle};

/// Named metric values, e.g. `top1`, or `miou`/`fwiou`/`macc`/`pacc`.
pub type Metrics = BTreeMap<String, f64>;

/// The headline metric of a task.
pub fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::Classification => "top1",
        Task::DenseSeg => "miou",
        Task::Saliency => "cc",
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn top1(z: &Tensor, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let hits = z.rows().zip(y).filter(|(row, &label)| argmax(row) == label).count();
    hits as f64 / y.len() as f64
}

pub fn classification_metrics(z: &Tensor, y: &[usize]) -> Metrics {
    Metrics::from([("top1".to_string(), top1(z, y))])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub fwiou: f64,
    pub macc: f64,
    pub pacc: f64,
}

impl SegMetrics {
    pub fn to_metrics(self) -> Metrics {
        Metrics::from([
            ("miou".to_string(), self.miou),
            ("fwiou".to_string(), self.fwiou),
            ("macc".to_string(), self.macc),
            ("pacc".to_string(), self.pacc),
        ])
    }
}

/// `confusion[gt][pred]` pixel counts.
pub fn confusion_matrix(pred: &[usize], gt: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("confusion_matrix", &[pred.len()], &[gt.len()]));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= classes || g >= classes {
            return Err(Error::Data(format!("label {} out of range for {classes} classes", p.max(g))));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// Confusion-matrix metrics; classes absent from `gt` are left out of the
/// per-class means.
pub fn segmentation_metrics(pred: &[usize], gt: &[usize], classes: usize) -> Result<SegMetrics> {
    let m = confusion_matrix(pred, gt, classes)?;
    let total = gt.len().max(1) as f64;
    let (mut iou_sum, mut acc_sum, mut fw, mut present, mut correct) = (0.0, 0.0, 0.0, 0usize, 0u64);
    for c in 0..classes {
        let tp = m[c][c];
        let gt_count: u64 = m[c].iter().sum();
        let pred_count: u64 = m.iter().map(|row| row[c]).sum();
        correct += tp;
        if gt_count == 0 {
            continue;
        }
        present += 1;
        let iou = tp as f64 / (gt_count + pred_count - tp) as f64;
        iou_sum += iou;
        acc_sum += tp as f64 / gt_count as f64;
        fw += gt_count as f64 / total * iou;
    }
    let present = present.max(1) as f64;
    Ok(SegMetrics {
        miou: iou_sum / present,
        fwiou: fw,
        macc: acc_sum / present,
        pacc: correct as f64 / total,
    })
}

fn standardize(pred: &[f64], floor: f64) -> Result<Vec<f64>> {
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let var = pred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > floor) {
        return Err(Error::Degenerate(format!("saliency prediction is constant (variance {var:e})")));
    }
    let sd = var.sqrt();
    Ok(pred.iter().map(|v| (v - mean) / sd).collect())
}

/// Pearson correlation of two maps in plain `f64`.
pub fn pearson(p: &[f64], q: &[f64], floor: f64) -> Result<f64> {
    let (a, b) = (standardize(p, floor)?, standardize(q, floor)?);
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64)
}

/// Mean standardized prediction at fixated pixels (population std).
pub fn nss(pred: &[f64], fixations: &[usize], floor: f64) -> Result<f64> {
    if fixations.is_empty() {
        return Err(Error::Degenerate("no fixations for NSS".into()));
    }
    let z = standardize(pred, floor)?;
    fixations
        .iter()
        .map(|&f| {
            z.get(f)
                .copied()
                .ok_or_else(|| Error::Data(format!("fixation {f} outside the map")))
        })
        .sum::<Result<f64>>()
        .map(|s| s / fixations.len() as f64)
}

pub fn saliency_metrics(pred: &[f64], gt_map: &[f64], fixations: &[usize]) -> Result<Metrics> {
    Ok(Metrics::from([
        ("cc".to_string(), pearson(pred, gt_map, 1e-12)?),
        ("nss".to_string(), nss(pred, fixations, 1e-12)?),
    ]))
}

/// Headroom regained: `(after − before) / (ensemble − before)`.
pub fn recovered(before: f64, after: f64, ensemble: f64) -> Result<f64> {
    let denom = ensemble - before;
    if denom == 0.0 {
        return Err(Error::Degenerate("ensemble equals the pretrained metric".into()));
    }
    Ok((after - before) / denom)
}

/// Metrics of a model output against a batch's targets.
///
/// `output` holds logits for class heads, logits `[N, H, W, C]` for
/// segmentation, or maps `[N, H, W]` (or probabilities averaged by an
/// ensemble) for saliency.
pub fn score(task: Task, output: &Tensor, targets: &TargetBatch, classes: usize) -> Result<Metrics> {
    match (task, targets) {
        (Task::Classification, TargetBatch::Classes(y)) => Ok(classification_metrics(output, y)),
        (Task::DenseSeg, TargetBatch::Segmentation { pixels, .. }) => {
            let pred: Vec<usize> = output.rows().map(argmax).collect();
            Ok(segmentation_metrics(&pred, pixels, classes)?.to_metrics())
        }
        (Task::Saliency, TargetBatch::Saliency { maps, fixations }) => {
            let p = maps.last_dim();
            let mut sums = Metrics::new();
            for ((pred, gt), fix) in output.data().chunks(p).zip(maps.rows()).zip(fixations) {
                for (k, v) in saliency_metrics(pred, gt, fix)? {
                    *sums.entry(k).or_default() += v;
                }
            }
            let n = fixations.len().max(1) as f64;
            Ok(sums.into_iter().map(|(k, v)| (k, v / n)).collect())
        }
        _ => Err(Error::Config(format!("targets do not match task {task}"))),
    }
}

fn check_head(model: &ModelBundle, task: Task) -> Result<()> {
    let want = match task {
        Task::Classification => HeadKind::ClassLogits,
        Task::DenseSeg => HeadKind::DenseLogits,
        Task::Saliency => HeadKind::SaliencyMap,
    };
    if model.arch.head != want {
        return Err(Error::Config(format!(
            "model {} has a {} head, task {task} needs {want}",
            model.name, model.arch.head
        )));
    }
    Ok(())
}

pub fn evaluate(model: &ModelBundle, data: &Dataset, split: Split) -> Result<Metrics> {
    check_head(model, data.task())?;
    let batch = data.split_batch(split);
    let (out, _) = model.infer(&batch.x)?;
    score(data.task(), &out, &batch.targets, data.spec.classes)
}

/// Per-sample mean of the models' softmax outputs (maps for saliency).
pub fn ensemble_output(models: &[ModelBundle], x: &Tensor, task: Task) -> Result<Tensor> {
    if models.len() < 2 {
        return Err(Error::Config("an ensemble needs at least two models".into()));
    }
    let mut acc: Option<Tensor> = None;
    for m in models {
        check_head(m, task)?;
        let (out, _) = m.infer(x)?;
        let probs = match task {
            Task::Saliency => out,
            _ => Tensor::new(out.shape().to_vec(), softmax(out.data(), out.last_dim(), 1.0))?,
        };
        acc = Some(match acc {
            None => probs,
            Some(mut a) => {
                a.data_mut().iter_mut().zip(probs.data()).for_each(|(s, v)| *s += v);
                a
            }
        });
    }
    let k = models.len() as f64;
    Ok(acc.expect("at least two models").map(|v| v / k))
}

pub fn ensemble_eval(models: &[ModelBundle], data: &Dataset, split: Split) -> Result<Metrics> {
    let batch = data.split_batch(split);
    let out = ensemble_output(models, &batch.x, data.task())?;
    score(data.task(), &out, &batch.targets, data.spec.classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub ensemble_metric: f64,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub recovered: Vec<f64>,
}

pub fn ensemble_result(ensemble_metric: f64, before: &[f64], after: &[f64]) -> Result<EnsembleResult> {
    let recovered = before
        .iter()
        .zip(after)
        .map(|(&b, &a)| recovered(b, a, ensemble_metric))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleResult {
        ensemble_metric,
        before: before.to_vec(),
        after: after.to_vec(),
        recovered,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaSummary {
    /// Canonical correlations, descending.
    pub correlations: Vec<f64>,
    /// Mean of the reported correlations.
    pub mean: f64,
}

pub const CCA_RIDGE: f64 = 1e-6;

fn centred(x: &Tensor) -> DMatrix<f64> {
    let (n, f) = (x.shape()[0], x.last_dim());
    let mut m = DMatrix::from_row_slice(n, f, x.data());
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    m
}

/// `C^{-1/2}` with eigenvalues floored at `ridge`.
fn inverse_sqrt(c: DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite covariance eigenvalue".into()));
    }
    if eig.eigenvalues.iter().all(|&v| v <= ridge) {
        return Err(Error::Numeric("feature covariance has no direction above the ridge".into()));
    }
    let scale = eig.eigenvalues.map(|v| 1.0 / v.max(ridge).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose())
}

/// Classic CCA: whiten each covariance, then take singular values of the
/// whitened cross-covariance. Reports the top `k` correlations.
pub fn cca(a: &Tensor, b: &Tensor, k: usize, ridge: f64) -> Result<CcaSummary> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape("cca", a.shape(), b.shape()));
    }
    let (n, fa, fb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if n <= fa.max(fb) {
        return Err(Error::Contract(format!("cca needs more samples ({n}) than features ({})", fa.max(fb))));
    }
    if k == 0 || k > fa.min(fb) {
        return Err(Error::Contract(format!("cca k={k} outside 1..={}", fa.min(fb))));
    }
    let (xa, xb) = (centred(a), centred(b));
    let scale = 1.0 / (n - 1) as f64;
    let caa = xa.tr_mul(&xa) * scale;
    let cbb = xb.tr_mul(&xb) * scale;
    let cab = xa.tr_mul(&xb) * scale;
    let t = inverse_sqrt(caa, ridge)? * cab * inverse_sqrt(cbb, ridge)?;
    let mut corr: Vec<f64> = t
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    if corr.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("cca produced NaN".into()));
    }
    corr.sort_by(|x, y| y.partial_cmp(x).expect("finite"));
    corr.truncate(k);
    let mean = corr.iter().sum::<f64>() / k as f64;
    Ok(CcaSummary {
        correlations: corr,
        mean,
    })
}
