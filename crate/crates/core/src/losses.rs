//! Training objectives.
//!
//! Every loss has a per-sample form returning a `[N]` variable, which the
//! partition-weighted distillation terms need, and a batch-mean form.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::argmax;
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Argument order of the distillation KL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`, the usual soft-label direction.
    #[default]
    TeacherStudent,
    /// `KL(student ‖ teacher)`.
    StudentTeacher,
}

impl std::str::FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher-student" => Ok(KlDirection::TeacherStudent),
            "student-teacher" => Ok(KlDirection::StudentTeacher),
            other => Err(Error::Config(format!("unknown kl direction '{other}'"))),
        }
    }
}

impl std::fmt::Display for KlDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KlDirection::TeacherStudent => "teacher-student",
            KlDirection::StudentTeacher => "student-teacher",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub temperature: f64,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_cls_correct: f64,
    pub lambda_cls_incorrect: f64,
    pub dice_eps: f64,
    pub cc_floor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            temperature: 1.0,
            lambda_ce: 5.0,
            lambda_dice: 5.0,
            lambda_cls_correct: 2.0,
            lambda_cls_incorrect: 0.1,
            dice_eps: 1.0,
            cc_floor: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        let lambdas = [
            self.lambda_ce,
            self.lambda_dice,
            self.lambda_cls_correct,
            self.lambda_cls_incorrect,
        ];
        if lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.dice_eps > 0.0) || !(self.cc_floor > 0.0) {
            return Err(Error::Config("dice smoothing and cc floor must be positive".into()));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {t}")))
    }
}

/// Per-sample `T² · KL` between softened distributions over the last axis.
///
/// The teacher passes through stop-gradient. Inputs of rank > 2 give one
/// value per leading index, e.g. per pixel for `[N, H, W, C]` logits.
pub fn kl_distill<'t>(
    z_student: Var<'t>,
    z_teacher: Var<'t>,
    temperature: f64,
    direction: KlDirection,
) -> Result<Var<'t>> {
    check_temperature(temperature)?;
    if z_student.shape() != z_teacher.shape() {
        return Err(Error::shape("kl_distill", &z_student.shape(), &z_teacher.shape()));
    }
    let teacher = z_teacher.stop_gradient();
    let log_t = teacher.log_softmax(temperature)?;
    let log_s = z_student.log_softmax(temperature)?;
    let terms = match direction {
        KlDirection::TeacherStudent => {
            let p_t = teacher.softmax(temperature)?;
            p_t.mul(log_t.sub(log_s)?)?
        }
        KlDirection::StudentTeacher => {
            let p_s = z_student.softmax(temperature)?;
            p_s.mul(log_s.sub(log_t)?)?
        }
    };
    terms.sum_last()?.scale(temperature * temperature)
}

/// Batch mean of [`kl_distill`].
pub fn kl_distill_mean<'t>(
    z_student: Var<'t>,
    z_teacher: Var<'t>,
    temperature: f64,
    direction: KlDirection,
) -> Result<Var<'t>> {
    kl_distill(z_student, z_teacher, temperature, direction)?.mean()
}

/// Per-sample `-log softmax(z)[y]`.
pub fn cross_entropy<'t>(z: Var<'t>, y: &[usize]) -> Result<Var<'t>> {
    z.log_softmax(1.0)?.gather(y)?.neg()
}

pub fn cross_entropy_mean<'t>(z: Var<'t>, y: &[usize]) -> Result<Var<'t>> {
    cross_entropy(z, y)?.mean()
}

/// `λ_ce · mean BCE + λ_dice · (1 − (2Σpq + ε)/(Σp + Σq + ε))` for one map.
pub fn mask_loss<'t>(p: Var<'t>, q: &Tensor, w: &LossWeights) -> Result<Var<'t>> {
    let bce = p.bce(q)?.mean()?;
    let dice = dice_loss(p, q, w.dice_eps)?;
    bce.scale(w.lambda_ce)?.add(dice.scale(w.lambda_dice)?)
}

pub fn dice_loss<'t>(p: Var<'t>, q: &Tensor, eps: f64) -> Result<Var<'t>> {
    let q_sum: f64 = q.data().iter().sum();
    let overlap = p.mul_const(q)?.sum()?.scale(2.0)?.add_scalar(eps)?;
    let total = p.sum()?.add_scalar(q_sum + eps)?;
    overlap.div(total)?.neg()?.add_scalar(1.0)
}

fn class_weight(z_cls: &[f64], y: usize, w: &LossWeights) -> f64 {
    if argmax(z_cls) == y {
        w.lambda_cls_correct
    } else {
        w.lambda_cls_incorrect
    }
}

/// Mask loss on `σ(z_mask)` plus a classification term whose weight
/// depends on whether `z_cls` already predicts `y_cls`.
pub fn semseg_loss<'t>(
    z_cls: Var<'t>,
    z_mask: Var<'t>,
    y_cls: usize,
    y_mask: &Tensor,
    w: &LossWeights,
) -> Result<Var<'t>> {
    let c = z_cls.numel();
    if y_cls >= c {
        return Err(Error::Data(format!("class {y_cls} out of range for {c} classes")));
    }
    let lambda = class_weight(z_cls.value().data(), y_cls, w);
    let ce = cross_entropy(z_cls.reshape(vec![1, c])?, &[y_cls])?.sum()?;
    mask_loss(z_mask.sigmoid()?, y_mask, w)?.add(ce.scale(lambda)?)
}

/// Per-image segmentation loss for dense logits `[N, H, W, C]`.
///
/// Each class contributes a one-vs-rest mask loss on its sigmoid channel;
/// the image-level class term uses spatially pooled logits against the
/// dominant class.
pub fn semseg_loss_batch<'t>(
    z: Var<'t>,
    pixel_labels: &[usize],
    dominant: &[usize],
    w: &LossWeights,
) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 4 {
        return Err(Error::shape("semseg_loss_batch", &shape, &[0, 0, 0, 0]));
    }
    let (n, p, c) = (shape[0], shape[1] * shape[2], shape[3]);
    if pixel_labels.len() != n * p || dominant.len() != n {
        return Err(Error::shape("semseg_loss_batch", &[n, p], &[pixel_labels.len()]));
    }
    if let Some(&bad) = pixel_labels.iter().chain(dominant).find(|&&y| y >= c) {
        return Err(Error::Data(format!("class {bad} out of range for {c} classes")));
    }
    let z = z.reshape(vec![n, p, c])?;

    let mut onehot = vec![0.0; n * p * c];
    for (i, &y) in pixel_labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let onehot = Tensor::new(vec![n, p, c], onehot)?;
    let mut q_sum = vec![0.0; n * c];
    for (i, &y) in pixel_labels.iter().enumerate() {
        q_sum[(i / p) * c + y] += 1.0;
    }
    let tape = z.tape();
    let q_sum = tape.constant(Tensor::new(vec![n, c], q_sum)?);

    let probs = z.sigmoid()?;
    let bce = probs.bce(&onehot)?.sum_axis(1)?.scale(1.0 / p as f64)?;
    let overlap = probs
        .mul_const(&onehot)?
        .sum_axis(1)?
        .scale(2.0)?
        .add_scalar(w.dice_eps)?;
    let total = probs.sum_axis(1)?.add(q_sum)?.add_scalar(w.dice_eps)?;
    let dice = overlap.div(total)?.neg()?.add_scalar(1.0)?;
    let masks = bce
        .scale(w.lambda_ce)?
        .add(dice.scale(w.lambda_dice)?)?
        .mean_last()?;

    let pooled = z.sum_axis(1)?.scale(1.0 / p as f64)?;
    let pooled_value = pooled.value();
    let lambdas: Vec<f64> = pooled_value
        .rows()
        .zip(dominant)
        .map(|(row, &y)| class_weight(row, y, w))
        .collect();
    let cls = cross_entropy(pooled, dominant)?.mul_const(&Tensor::vector(lambdas))?;
    masks.add(cls)
}

/// Row-wise Pearson correlation of `[N, P]` inputs, giving `[N]`.
///
/// Rows whose variance falls below `floor` are rejected.
pub fn cc_rows<'t>(p: Var<'t>, q: Var<'t>, floor: f64) -> Result<Var<'t>> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(Error::shape("cc", &p.shape(), &q.shape()));
    }
    let width = p.shape()[1];
    for (name, v) in [("p", &p), ("q", &q)] {
        for row in v.value().rows() {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
            if !(var >= floor) {
                return Err(Error::Degenerate(format!(
                    "cc argument {name} has variance {var:e} below floor {floor:e}"
                )));
            }
        }
    }
    let centre = |v: Var<'t>| -> Result<Var<'t>> { v.sub(v.mean_last()?.expand_last(width)?) };
    let (pc, qc) = (centre(p)?, centre(q)?);
    let cov = pc.mul(qc)?.sum_last()?;
    let vp = pc.mul(pc)?.sum_last()?;
    let vq = qc.mul(qc)?.sum_last()?;
    cov.div(vp.mul(vq)?.sqrt()?)
}

/// Pearson correlation between two maps of any equal shape.
pub fn cc<'t>(p: Var<'t>, q: Var<'t>, floor: f64) -> Result<Var<'t>> {
    let n = p.numel();
    if q.numel() != n {
        return Err(Error::shape("cc", &p.shape(), &q.shape()));
    }
    cc_rows(p.reshape(vec![1, n])?, q.reshape(vec![1, n])?, floor)?.sum()
}

fn normalized_rows(q: &Tensor, width: usize) -> Result<Vec<f64>> {
    let mut out = q.data().to_vec();
    for row in out.chunks_mut(width) {
        let s: f64 = row.iter().sum();
        if !(s > 0.0) || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Degenerate(
                "saliency map must be non-negative with positive sum".into(),
            ));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Row-wise `KL(q̂ ‖ p̂) − cc(p, q)` for predicted maps `p: [N, P]` and fixed
/// targets `q`, where `x̂` is `x` divided by its row sum.
pub fn vsp_loss_rows<'t>(p: Var<'t>, q: &Tensor, w: &LossWeights) -> Result<Var<'t>> {
    let shape = p.shape();
    if shape.len() != 2 || shape.as_slice() != q.shape() {
        return Err(Error::shape("vsp_loss", &shape, q.shape()));
    }
    let width = shape[1];
    if p.value().data().iter().any(|&v| v < 0.0) {
        return Err(Error::Degenerate("predicted saliency map is negative".into()));
    }
    let q_hat = normalized_rows(q, width)?;
    let entropy: Vec<f64> = q_hat
        .chunks(width)
        .map(|row| row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum())
        .collect();
    let p_sum = p.sum_last()?;
    if p_sum.value().data().contains(&0.0) {
        return Err(Error::Degenerate("predicted saliency map sums to zero".into()));
    }
    // Σ q̂ log p̂ = Σ q̂ log p − log Σp, because q̂ sums to one
    let cross = p
        .log()?
        .mul_const(&Tensor::new(shape.clone(), q_hat)?)?
        .sum_last()?
        .sub(p_sum.log()?)?;
    let kl = cross.neg()?.add(p.tape().constant(Tensor::vector(entropy)))?;
    let q_var = p.tape().constant(q.clone());
    kl.sub(cc_rows(p, q_var, w.cc_floor)?)
}

/// [`vsp_loss_rows`] for a single map of any shape.
pub fn vsp_loss<'t>(p: Var<'t>, q: &Tensor, w: &LossWeights) -> Result<Var<'t>> {
    let n = p.numel();
    if q.numel() != n {
        return Err(Error::shape("vsp_loss", &p.shape(), q.shape()));
    }
    let q = q.clone().reshape(vec![1, n])?;
    vsp_loss_rows(p.reshape(vec![1, n])?, &q, w)?.sum()
}

/// Row-wise KL between sum-normalized maps `[N, P]`, teacher detached.
pub fn map_distill<'t>(
    student: Var<'t>,
    teacher: Var<'t>,
    direction: KlDirection,
) -> Result<Var<'t>> {
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(Error::shape("map_distill", &student.shape(), &teacher.shape()));
    }
    let width = student.shape()[1];
    let normalize = |v: Var<'t>| -> Result<Var<'t>> { v.div(v.sum_last()?.expand_last(width)?) };
    let t = normalize(teacher.stop_gradient())?;
    let s = normalize(student)?;
    let (a, b) = match direction {
        KlDirection::TeacherStudent => (t, s),
        KlDirection::StudentTeacher => (s, t),
    };
    a.mul(a.log()?.sub(b.log()?)?)?.sum_last()
}
