//! Training loops: supervised pretraining, bidirectional and K-model
//! transfer with per-sample teacher assignment, and two frozen-teacher
//! baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate, Metrics};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::data::{apply_view, batches, derive_seed, Batch, Dataset, Split, TargetBatch, Task};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, kl_distill, map_distill, semseg_loss_batch, vsp_loss_rows, KlDirection,
    LossWeights,
};
use crate::models::{BoundModel, HeadKind, ModelBundle};
use crate::partition::{
    loss_masks, multi_loss_masks, multi_masks, pair_cases, pair_masks, stack_gt_probs, CaseStats,
    PartitionMask, PartitionRule, TieRule,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BiKd,
    MultiKd,
    VanillaKd,
    FixedPartitionKd,
    SoloFinetune,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Method::BiKd => "bi-kd",
            Method::MultiKd => "multi-kd",
            Method::VanillaKd => "vanilla-kd",
            Method::FixedPartitionKd => "fixed-partition-kd",
            Method::SoloFinetune => "solo-finetune",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi-kd" => Ok(Method::BiKd),
            "multi-kd" => Ok(Method::MultiKd),
            "vanilla-kd" => Ok(Method::VanillaKd),
            "fixed-partition-kd" => Ok(Method::FixedPartitionKd),
            "solo-finetune" => Ok(Method::SoloFinetune),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Hyperparameters of a training run. Pretraining reads the same fields
/// and ignores the method and partition settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub partition_rule: PartitionRule,
    pub tie_rule: TieRule,
    pub kl_direction: KlDirection,
    pub loss: LossWeights,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            method: Method::BiKd,
            epochs: 20,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-5,
            seed: 0,
            partition_rule: PartitionRule::Confidence,
            tie_rule: TieRule::Second,
            kl_direction: KlDirection::TeacherStudent,
            loss: LossWeights::default(),
        }
    }
}

impl TransferConfig {
    /// Pretraining defaults: a larger step than transfer.
    pub fn pretrain() -> Self {
        TransferConfig {
            lr: 1e-3,
            ..TransferConfig::default()
        }
    }

    /// Checks that apply to every run, pretraining included.
    pub fn validate_common(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be positive, weight decay non-negative".into()));
        }
        Ok(())
    }

    pub fn validate(&self, models: usize, task: Task) -> Result<()> {
        self.validate_common()?;
        let need = match self.method {
            Method::SoloFinetune => 1,
            _ => 2,
        };
        if models < need {
            return Err(Error::Config(format!("{} needs at least {need} models", self.method)));
        }
        if matches!(self.method, Method::BiKd | Method::VanillaKd | Method::FixedPartitionKd) && models != 2 {
            return Err(Error::Config(format!("{} runs on exactly 2 models", self.method)));
        }
        if task != Task::Classification && self.partition_rule == PartitionRule::Confidence
            && self.method != Method::SoloFinetune
        {
            return Err(Error::Config(format!(
                "task {task} has no class confidence; use partition rule 'loss'"
            )));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay; one instance per model.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &ModelBundle, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn update(&mut self, model: &mut ModelBundle, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", &[self.m.len()], &[grads.len()]));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = model.param_data_mut(i);
            if g.len() != p.len() {
                return Err(Error::shape("adam", &[p.len()], &[g.len()]));
            }
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] -= self.lr * (step + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// A model with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub model: ModelBundle,
    pub optim: Adam,
}

impl Learner {
    pub fn new(model: ModelBundle, cfg: &TransferConfig) -> Self {
        let optim = Adam::new(&model, cfg.lr, cfg.weight_decay);
        Learner { model, optim }
    }
}

/// Loss terms of one step, as variables on the step's tape.
pub struct Objective<'t> {
    pub total: Var<'t>,
    /// Batch-mean task loss per model.
    pub task: Vec<Var<'t>>,
    pub dist: Var<'t>,
    pub mask: Option<PartitionMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub task: Vec<f64>,
    pub dist: f64,
    pub total: f64,
    pub mask: Option<PartitionMask>,
}

struct Forward<'t> {
    /// Logits `[N, C]`, `[N, H, W, C]` or maps `[N, P]`.
    output: Var<'t>,
    /// Per-sample task loss `[N]`.
    task: Var<'t>,
}

fn head_for(task: Task) -> HeadKind {
    match task {
        Task::Classification => HeadKind::ClassLogits,
        Task::DenseSeg => HeadKind::DenseLogits,
        Task::Saliency => HeadKind::SaliencyMap,
    }
}

fn task_of(batch: &Batch) -> Task {
    match batch.targets {
        TargetBatch::Classes(_) => Task::Classification,
        TargetBatch::Segmentation { .. } => Task::DenseSeg,
        TargetBatch::Saliency { .. } => Task::Saliency,
    }
}

fn forward<'t>(
    bound: &BoundModel<'_, 't>,
    x: Var<'t>,
    batch: &Batch,
    w: &LossWeights,
) -> Result<Forward<'t>> {
    let task = task_of(batch);
    if bound.model.arch.head != head_for(task) {
        return Err(Error::Config(format!(
            "model {} has a {} head, batch is {task}",
            bound.model.name, bound.model.arch.head
        )));
    }
    match &batch.targets {
        TargetBatch::Classes(y) => {
            let output = bound.forward_classifier(x)?.output;
            Ok(Forward {
                output,
                task: cross_entropy(output, y)?,
            })
        }
        TargetBatch::Segmentation { pixels, dominant } => {
            let output = bound.forward_dense(x)?.output;
            Ok(Forward {
                output,
                task: semseg_loss_batch(output, pixels, dominant, w)?,
            })
        }
        TargetBatch::Saliency { maps, .. } => {
            let n = batch.len();
            let output = bound.forward_dense(x)?.output.reshape(vec![n, maps.last_dim()])?;
            Ok(Forward {
                output,
                task: vsp_loss_rows(output, maps, w)?,
            })
        }
    }
}

/// Per-sample distillation from `teacher` into `student` outputs, `[N]`.
fn distill<'t>(student: Var<'t>, teacher: Var<'t>, task: Task, cfg: &TransferConfig) -> Result<Var<'t>> {
    match task {
        Task::Classification => kl_distill(student, teacher, cfg.loss.temperature, cfg.kl_direction),
        Task::DenseSeg => {
            let s = student.shape();
            kl_distill(student, teacher, cfg.loss.temperature, cfg.kl_direction)?
                .reshape(vec![s[0], s[1] * s[2]])?
                .mean_last()
        }
        Task::Saliency => map_distill(student, teacher, cfg.kl_direction),
    }
}

fn stack_columns(cols: &[Tensor]) -> Result<Tensor> {
    let n = cols.first().map_or(0, Tensor::numel);
    let k = cols.len();
    let mut data = vec![0.0; n * k];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.data().iter().enumerate() {
            data[i * k + j] = v;
        }
    }
    Tensor::new(vec![n, k], data)
}

/// Teacher assignment for a batch from the models' current outputs.
fn assign(
    outputs: &[Tensor],
    task_losses: &[Tensor],
    batch: &Batch,
    cfg: &TransferConfig,
    tie: TieRule,
) -> Result<PartitionMask> {
    match cfg.partition_rule {
        PartitionRule::Confidence => {
            let y = batch.labels()?;
            if outputs.len() == 2 {
                pair_masks(&outputs[0], &outputs[1], y, tie)
            } else {
                multi_masks(&stack_gt_probs(outputs, y)?)
            }
        }
        PartitionRule::Loss => {
            let losses = stack_columns(task_losses)?;
            if outputs.len() == 2 && tie == TieRule::Second {
                loss_masks(&losses)
            } else {
                multi_loss_masks(&losses)
            }
        }
    }
}

/// Task losses of both models plus the mask-weighted two-way distillation.
pub fn bi_kd_objective<'t>(
    tape: &'t Tape,
    a: &BoundModel<'_, 't>,
    b: &BoundModel<'_, 't>,
    batch: &Batch,
    cfg: &TransferConfig,
) -> Result<Objective<'t>> {
    let task = task_of(batch);
    let x = tape.constant(batch.x.clone());
    let fa = forward(a, x, batch, &cfg.loss)?;
    let fb = forward(b, x, batch, &cfg.loss)?;
    let mask = assign(
        &[fa.output.value(), fb.output.value()],
        &[fa.task.value(), fb.task.value()],
        batch,
        cfg,
        TieRule::Second,
    )?;
    // model a teaches b where m_a = 1, and the reverse where m_b = 1
    let a_teaches = distill(fb.output, fa.output, task, cfg)?.mul_const(&mask.weights_for(0))?;
    let b_teaches = distill(fa.output, fb.output, task, cfg)?.mul_const(&mask.weights_for(1))?;
    let dist = a_teaches.add(b_teaches)?.mean()?;
    let (ta, tb) = (fa.task.mean()?, fb.task.mean()?);
    let total = ta.add(tb)?.add(dist)?;
    Ok(Objective {
        total,
        task: vec![ta, tb],
        dist,
        mask: Some(mask),
    })
}

/// K-model objective: each sample's teacher distills into every other model.
pub fn multi_kd_objective<'t>(
    tape: &'t Tape,
    bound: &[BoundModel<'_, 't>],
    batch: &Batch,
    cfg: &TransferConfig,
) -> Result<Objective<'t>> {
    let task = task_of(batch);
    let x = tape.constant(batch.x.clone());
    let fwd = bound
        .iter()
        .map(|m| forward(m, x, batch, &cfg.loss))
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<Tensor> = fwd.iter().map(|f| f.output.value()).collect();
    let losses: Vec<Tensor> = fwd.iter().map(|f| f.task.value()).collect();
    let mask = assign(&outputs, &losses, batch, cfg, TieRule::Lowest)?;
    let mut per_sample: Option<Var<'t>> = None;
    for (i, teacher) in fwd.iter().enumerate() {
        let m = mask.weights_for(i);
        for (j, student) in fwd.iter().enumerate() {
            if i == j {
                continue;
            }
            let term = distill(student.output, teacher.output, task, cfg)?.mul_const(&m)?;
            per_sample = Some(match per_sample {
                None => term,
                Some(acc) => acc.add(term)?,
            });
        }
    }
    let dist = per_sample.expect("at least two models").mean()?;
    let task_means = fwd.iter().map(|f| f.task.mean()).collect::<Result<Vec<_>>>()?;
    let mut total = task_means[0];
    for t in &task_means[1..] {
        total = total.add(*t)?;
    }
    let total = total.add(dist)?;
    Ok(Objective {
        total,
        task: task_means,
        dist,
        mask: Some(mask),
    })
}

/// Task loss plus distillation from a frozen teacher on every sample.
pub fn vanilla_kd_objective<'t>(
    tape: &'t Tape,
    student: &BoundModel<'_, 't>,
    teacher: &BoundModel<'_, 't>,
    batch: &Batch,
    cfg: &TransferConfig,
) -> Result<Objective<'t>> {
    let x = tape.constant(batch.x.clone());
    let fs = forward(student, x, batch, &cfg.loss)?;
    let ft = forward(teacher, x, batch, &cfg.loss)?;
    let dist = distill(fs.output, ft.output, task_of(batch), cfg)?.mean()?;
    let task = fs.task.mean()?;
    Ok(Objective {
        total: task.add(dist)?,
        task: vec![task],
        dist,
        mask: None,
    })
}

/// Distillation only, from whichever frozen guide (teacher or the student's
/// own starting snapshot) wins the per-sample assignment.
pub fn fixed_partition_objective<'t>(
    tape: &'t Tape,
    student: &BoundModel<'_, 't>,
    teacher: &BoundModel<'_, 't>,
    snapshot: &BoundModel<'_, 't>,
    batch: &Batch,
    cfg: &TransferConfig,
) -> Result<Objective<'t>> {
    let task = task_of(batch);
    let x = tape.constant(batch.x.clone());
    let fs = forward(student, x, batch, &cfg.loss)?;
    let ft = forward(teacher, x, batch, &cfg.loss)?;
    let fo = forward(snapshot, x, batch, &cfg.loss)?;
    let mask = assign(
        &[ft.output.value(), fo.output.value()],
        &[ft.task.value(), fo.task.value()],
        batch,
        cfg,
        TieRule::Second,
    )?;
    let from_teacher = distill(fs.output, ft.output, task, cfg)?.mul_const(&mask.weights_for(0))?;
    let from_snapshot = distill(fs.output, fo.output, task, cfg)?.mul_const(&mask.weights_for(1))?;
    let dist = from_teacher.add(from_snapshot)?.mean()?;
    Ok(Objective {
        total: dist,
        task: vec![fs.task.mean()?],
        dist,
        mask: Some(mask),
    })
}

pub fn supervised_objective<'t>(
    tape: &'t Tape,
    model: &BoundModel<'_, 't>,
    batch: &Batch,
    cfg: &TransferConfig,
) -> Result<Objective<'t>> {
    let x = tape.constant(batch.x.clone());
    let task = forward(model, x, batch, &cfg.loss)?.task.mean()?;
    Ok(Objective {
        total: task,
        task: vec![task],
        dist: tape.constant(Tensor::scalar(0.0)),
        mask: None,
    })
}

/// Gradients of every parameter of a bound model, in parameter order.
pub fn param_grads(grads: &Gradients, bound: &BoundModel<'_, '_>) -> Result<Vec<Vec<f64>>> {
    bound
        .params
        .iter()
        .map(|p| {
            grads
                .get(*p)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Contract("parameter was not recorded as trainable".into()))
        })
        .collect()
}

fn outcome(obj: &Objective<'_>) -> Result<StepOutcome> {
    let total = obj.total.item()?;
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok(StepOutcome {
        task: obj.task.iter().map(|t| t.item()).collect::<Result<_>>()?,
        dist: obj.dist.item()?,
        total,
        mask: obj.mask.clone(),
    })
}

/// One update of a single model on its task loss.
pub fn supervised_step(learner: &mut Learner, batch: &Batch, cfg: &TransferConfig) -> Result<StepOutcome> {
    let (out, grads) = {
        let tape = Tape::new();
        let bound = learner.model.bind(&tape, true);
        let obj = supervised_objective(&tape, &bound, batch, cfg)?;
        let out = outcome(&obj)?;
        let g = tape.backward(obj.total)?;
        (out, param_grads(&g, &bound)?)
    };
    learner.optim.update(&mut learner.model, &grads)?;
    Ok(out)
}

/// One joint update of both models.
pub fn bi_kd_step(a: &mut Learner, b: &mut Learner, batch: &Batch, cfg: &TransferConfig) -> Result<StepOutcome> {
    let (out, ga, gb) = {
        let tape = Tape::new();
        let ba = a.model.bind(&tape, true);
        let bb = b.model.bind(&tape, true);
        let obj = bi_kd_objective(&tape, &ba, &bb, batch, cfg)?;
        let out = outcome(&obj)?;
        let g = tape.backward(obj.total)?;
        (out, param_grads(&g, &ba)?, param_grads(&g, &bb)?)
    };
    a.optim.update(&mut a.model, &ga)?;
    b.optim.update(&mut b.model, &gb)?;
    Ok(out)
}

/// One joint update of all K models.
pub fn multi_kd_step(learners: &mut [Learner], batch: &Batch, cfg: &TransferConfig) -> Result<StepOutcome> {
    let (out, grads) = {
        let tape = Tape::new();
        let bound: Vec<BoundModel<'_, '_>> = learners.iter().map(|l| l.model.bind(&tape, true)).collect();
        let obj = multi_kd_objective(&tape, &bound, batch, cfg)?;
        let out = outcome(&obj)?;
        let g = tape.backward(obj.total)?;
        let grads = bound.iter().map(|b| param_grads(&g, b)).collect::<Result<Vec<_>>>()?;
        (out, grads)
    };
    for (l, g) in learners.iter_mut().zip(&grads) {
        l.optim.update(&mut l.model, g)?;
    }
    Ok(out)
}

pub fn vanilla_kd_step(
    student: &mut Learner,
    teacher: &ModelBundle,
    batch: &Batch,
    cfg: &TransferConfig,
) -> Result<StepOutcome> {
    let (out, grads) = {
        let tape = Tape::new();
        let bs = student.model.bind(&tape, true);
        let bt = teacher.bind(&tape, false);
        let obj = vanilla_kd_objective(&tape, &bs, &bt, batch, cfg)?;
        let out = outcome(&obj)?;
        let g = tape.backward(obj.total)?;
        (out, param_grads(&g, &bs)?)
    };
    student.optim.update(&mut student.model, &grads)?;
    Ok(out)
}

pub fn fixed_partition_kd_step(
    student: &mut Learner,
    teacher: &ModelBundle,
    snapshot: &ModelBundle,
    batch: &Batch,
    cfg: &TransferConfig,
) -> Result<StepOutcome> {
    let (out, grads) = {
        let tape = Tape::new();
        let bs = student.model.bind(&tape, true);
        let bt = teacher.bind(&tape, false);
        let bo = snapshot.bind(&tape, false);
        let obj = fixed_partition_objective(&tape, &bs, &bt, &bo, batch, cfg)?;
        let out = outcome(&obj)?;
        let g = tape.backward(obj.total)?;
        (out, param_grads(&g, &bs)?)
    };
    student.optim.update(&mut student.model, &grads)?;
    Ok(out)
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::Domain { .. } => Error::Training {
            epoch,
            detail: e.to_string(),
        },
        other => other,
    }
}

fn view_batch(batch: Batch, visible: Option<&[bool]>) -> Result<Batch> {
    match visible {
        Some(v) if v.iter().any(|&b| !b) => Ok(Batch {
            x: apply_view(&batch.x, v)?,
            ..batch
        }),
        _ => Ok(batch),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub model: String,
    pub epochs: Vec<PretrainEpoch>,
    pub final_metrics: Metrics,
}

/// Supervised training on `train` indices, inputs restricted to `visible`.
///
/// Evaluation after each epoch uses the eval split under the same view.
pub fn pretrain(
    model: &mut ModelBundle,
    data: &Dataset,
    train: &[usize],
    visible: Option<&[bool]>,
    cfg: &TransferConfig,
) -> Result<PretrainReport> {
    cfg.validate_common()?;
    if model.arch.head != head_for(data.task()) {
        return Err(Error::Config(format!(
            "model {} has a {} head, task {} needs {}",
            model.name,
            model.arch.head,
            data.task(),
            head_for(data.task())
        )));
    }
    let eval = view_batch(data.split_batch(Split::Eval), visible)?;
    let mut learner = Learner::new(model.clone(), cfg);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let order = batches(train, cfg.batch_size, derive_seed(cfg.seed, epoch as u64))?;
        for idx in &order {
            let batch = view_batch(data.batch(idx), visible)?;
            let out = supervised_step(&mut learner, &batch, cfg).map_err(diverged(epoch))?;
            loss_sum += out.total;
        }
        let (pred, _) = learner.model.infer(&eval.x)?;
        let metrics = crate::analysis::score(data.task(), &pred, &eval.targets, data.spec.classes)?;
        epochs.push(PretrainEpoch {
            epoch,
            train_loss: loss_sum / order.len().max(1) as f64,
            metrics,
        });
    }
    *model = learner.model;
    let (pred, _) = model.infer(&eval.x)?;
    let final_metrics = crate::analysis::score(data.task(), &pred, &eval.targets, data.spec.classes)?;
    Ok(PretrainReport {
        model: model.name.clone(),
        epochs,
        final_metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Eval-split metrics per model.
    pub metrics: Vec<Metrics>,
    /// Mean batch task loss per model.
    pub task_loss: Vec<f64>,
    pub dist_loss: f64,
    /// Share of training samples taught by each model. For the
    /// fixed-partition baseline: `[partner, own snapshot]`, pooled over
    /// both students.
    pub teacher_fractions: Vec<f64>,
    /// Eval-split case counts (two-model classification runs only).
    pub cases: Option<CaseStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub method: Method,
    pub task: Task,
    pub models: Vec<String>,
    pub baseline: Vec<Metrics>,
    pub baseline_cases: Option<CaseStats>,
    pub history: Vec<EpochRecord>,
    pub final_metrics: Vec<Metrics>,
    /// Final minus baseline, per model and metric.
    pub delta: Vec<Metrics>,
    /// Training samples whose teacher differs between the first and the
    /// last epoch.
    pub mask_flips: Option<usize>,
}

fn eval_cases(models: &[ModelBundle], data: &Dataset) -> Result<Option<CaseStats>> {
    if models.len() != 2 || data.task() != Task::Classification {
        return Ok(None);
    }
    let batch = data.split_batch(Split::Eval);
    let (z1, _) = models[0].infer(&batch.x)?;
    let (z2, _) = models[1].infer(&batch.x)?;
    Ok(Some(pair_cases(&z1, &z2, batch.labels()?)?))
}

fn eval_all(models: &[ModelBundle], data: &Dataset) -> Result<Vec<Metrics>> {
    models.iter().map(|m| evaluate(m, data, Split::Eval)).collect()
}

/// Trains `models` with `cfg.method` and reports per-epoch progress.
///
/// Vanilla KD trains model 0 from a frozen model 1. The fixed-partition
/// baseline trains each model in turn against frozen copies of its partner
/// and of itself taken at the start.
pub fn run_transfer(
    cfg: &TransferConfig,
    models: Vec<ModelBundle>,
    data: &Dataset,
) -> Result<(Vec<ModelBundle>, TransferReport)> {
    cfg.validate(models.len(), data.task())?;
    let task = data.task();
    for m in &models {
        if m.arch.head != head_for(task) {
            return Err(Error::Config(format!(
                "model {} has a {} head, task {task} needs {}",
                m.name,
                m.arch.head,
                head_for(task)
            )));
        }
    }
    let k = models.len();
    let names = models.iter().map(|m| m.name.clone()).collect();
    let baseline = eval_all(&models, data)?;
    let baseline_cases = eval_cases(&models, data)?;
    let frozen = models.clone();
    let mut learners: Vec<Learner> = models.into_iter().map(|m| Learner::new(m, cfg)).collect();
    let train = data.split_indices(Split::Train);
    let n_train = train.len();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut first_assign: Option<Vec<usize>> = None;
    let mut last_assign: Option<Vec<usize>> = None;
    for epoch in 1..=cfg.epochs {
        let order = batches(&train, cfg.batch_size, derive_seed(cfg.seed, epoch as u64))?;
        let mut task_sum = vec![0.0; k];
        let mut dist_sum = 0.0;
        let mut steps = 0usize;
        let mut taught = vec![0usize; if cfg.method == Method::FixedPartitionKd { 2 } else { k }];
        let mut assigned = vec![usize::MAX; data.len()];
        let mut record = |mask: &Option<PartitionMask>, idx: &[usize], track: bool, taught: &mut Vec<usize>| {
            if let Some(m) = mask {
                for (&i, &t) in idx.iter().zip(m.teachers()) {
                    taught[t] += 1;
                    if track {
                        assigned[i] = t;
                    }
                }
            }
        };
        for idx in &order {
            let batch = data.batch(idx);
            let err = diverged(epoch);
            match cfg.method {
                Method::BiKd => {
                    let (a, b) = learners.split_at_mut(1);
                    let out = bi_kd_step(&mut a[0], &mut b[0], &batch, cfg).map_err(err)?;
                    task_sum.iter_mut().zip(&out.task).for_each(|(s, v)| *s += v);
                    dist_sum += out.dist;
                    record(&out.mask, idx, true, &mut taught);
                }
                Method::MultiKd => {
                    let out = multi_kd_step(&mut learners, &batch, cfg).map_err(err)?;
                    task_sum.iter_mut().zip(&out.task).for_each(|(s, v)| *s += v);
                    dist_sum += out.dist;
                    record(&out.mask, idx, true, &mut taught);
                }
                Method::VanillaKd => {
                    let out = vanilla_kd_step(&mut learners[0], &frozen[1], &batch, cfg).map_err(err)?;
                    task_sum[0] += out.task[0];
                    dist_sum += out.dist;
                }
                Method::FixedPartitionKd => {
                    for s in 0..2 {
                        let out = fixed_partition_kd_step(&mut learners[s], &frozen[1 - s], &frozen[s], &batch, cfg)
                            .map_err(diverged(epoch))?;
                        task_sum[s] += out.task[0];
                        dist_sum += out.dist / 2.0;
                        record(&out.mask, idx, s == 0, &mut taught);
                    }
                }
                Method::SoloFinetune => {
                    for (s, l) in learners.iter_mut().enumerate() {
                        let out = supervised_step(l, &batch, cfg).map_err(diverged(epoch))?;
                        task_sum[s] += out.task[0];
                    }
                }
            }
            steps += 1;
        }
        if matches!(cfg.method, Method::BiKd | Method::MultiKd | Method::FixedPartitionKd) {
            let snapshot: Vec<usize> = train.iter().map(|&i| assigned[i]).collect();
            if first_assign.is_none() {
                first_assign = Some(snapshot.clone());
            }
            last_assign = Some(snapshot);
        }
        let current: Vec<ModelBundle> = learners.iter().map(|l| l.model.clone()).collect();
        let total_taught = taught.iter().sum::<usize>().max(1) as f64;
        history.push(EpochRecord {
            epoch,
            metrics: eval_all(&current, data)?,
            task_loss: task_sum.iter().map(|s| s / steps.max(1) as f64).collect(),
            dist_loss: dist_sum / steps.max(1) as f64,
            teacher_fractions: if taught.iter().sum::<usize>() == 0 {
                Vec::new()
            } else {
                taught.iter().map(|&t| t as f64 / total_taught).collect()
            },
            cases: eval_cases(&current, data)?,
        });
        debug_assert!(n_train > 0);
    }

    let models: Vec<ModelBundle> = learners.into_iter().map(|l| l.model).collect();
    let final_metrics = eval_all(&models, data)?;
    let delta = final_metrics
        .iter()
        .zip(&baseline)
        .map(|(after, before)| {
            after
                .iter()
                .map(|(key, v)| (key.clone(), v - before.get(key).copied().unwrap_or(0.0)))
                .collect::<BTreeMap<_, _>>()
        })
        .collect();
    let mask_flips = match (first_assign, last_assign) {
        (Some(a), Some(b)) => Some(a.iter().zip(&b).filter(|(x, y)| x != y).count()),
        _ => None,
    };
    Ok((
        models,
        TransferReport {
            method: cfg.method,
            task,
            models: names,
            baseline,
            baseline_cases,
            history,
            final_metrics,
            delta,
            mask_flips,
        },
    ))
}
