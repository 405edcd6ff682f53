//! Per-sample teacher assignment.
//!
//! Two models compare ground-truth confidence (ties go to the second model)
//! or per-sample task loss (again ties to the second model). With K models
//! the teacher is the argmax of ground-truth confidence, ties going to the
//! lowest index. At K = 2 the two confidence rules differ only on ties.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{argmax, softmax_row};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionRule {
    Confidence,
    Loss,
}

impl std::str::FromStr for PartitionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(PartitionRule::Confidence),
            "loss" => Ok(PartitionRule::Loss),
            other => Err(Error::Config(format!("unknown partition rule '{other}'"))),
        }
    }
}

/// How exact ties between two models are broken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    /// Pairwise rule: the second model teaches.
    #[default]
    Second,
    /// Argmax rule: the lowest model index teaches.
    Lowest,
}

impl std::str::FromStr for TieRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second" => Ok(TieRule::Second),
            "lowest" => Ok(TieRule::Lowest),
            other => Err(Error::Config(format!("unknown tie rule '{other}'"))),
        }
    }
}

impl TieRule {
    pub fn note(self) -> &'static str {
        match self {
            TieRule::Second => "ties to second model",
            TieRule::Lowest => "ties to lowest index",
        }
    }
}

/// One teacher per sample over `k` models.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMask {
    teacher: Vec<usize>,
    k: usize,
    pub rule: PartitionRule,
    pub tie_note: String,
}

impl PartitionMask {
    pub fn from_teachers(
        teacher: Vec<usize>,
        k: usize,
        rule: PartitionRule,
        tie: TieRule,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::Contract(format!("partition needs at least 2 models, got {k}")));
        }
        if let Some(&bad) = teacher.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("teacher index {bad} out of range for {k} models")));
        }
        Ok(PartitionMask {
            teacher,
            k,
            rule,
            tie_note: tie.note().to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.teacher.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teacher.is_empty()
    }

    pub fn models(&self) -> usize {
        self.k
    }

    pub fn teachers(&self) -> &[usize] {
        &self.teacher
    }

    /// The N×K indicator grid.
    pub fn assignments(&self) -> Vec<Vec<bool>> {
        self.teacher
            .iter()
            .map(|&t| (0..self.k).map(|k| k == t).collect())
            .collect()
    }

    /// Indicator vector `m_k` as a `[N]` tensor.
    pub fn weights_for(&self, k: usize) -> Tensor {
        Tensor::vector(
            self.teacher
                .iter()
                .map(|&t| if t == k { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &t in &self.teacher {
            c[t] += 1;
        }
        c
    }

    /// Share of samples each model teaches; zeros for an empty batch.
    pub fn teacher_fractions(&self) -> Vec<f64> {
        let n = self.teacher.len().max(1) as f64;
        self.counts().into_iter().map(|c| c as f64 / n).collect()
    }
}

/// Softmax probability of each row's ground-truth class.
pub fn gt_probs(z: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let c = z.last_dim();
    if z.rank() != 2 || y.len() != z.shape()[0] {
        return Err(Error::shape("gt_probs", z.shape(), &[y.len(), c]));
    }
    let mut buf = vec![0.0; c];
    z.rows()
        .zip(y)
        .map(|(row, &label)| {
            if label >= c {
                return Err(Error::Data(format!("label {label} out of range for {c} classes")));
            }
            softmax_row(row, 1.0, &mut buf);
            Ok(buf[label])
        })
        .collect()
}

/// Model 1 teaches where its ground-truth probability is strictly higher.
pub fn confidence_masks(z1: &Tensor, z2: &Tensor, y: &[usize]) -> Result<PartitionMask> {
    if z1.shape() != z2.shape() {
        return Err(Error::shape("confidence_masks", z1.shape(), z2.shape()));
    }
    let (p1, p2) = (gt_probs(z1, y)?, gt_probs(z2, y)?);
    let teacher = p1
        .iter()
        .zip(&p2)
        .map(|(a, b)| if a > b { 0 } else { 1 })
        .collect();
    PartitionMask::from_teachers(teacher, 2, PartitionRule::Confidence, TieRule::Second)
}

/// Model 1 teaches where its task loss is strictly lower. `losses` is `[N, 2]`.
pub fn loss_masks(losses: &Tensor) -> Result<PartitionMask> {
    if losses.rank() != 2 || losses.shape()[1] != 2 {
        return Err(Error::Contract(format!(
            "loss masks compare exactly two models, got shape {:?}",
            losses.shape()
        )));
    }
    if losses.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN task loss in partition".into()));
    }
    let teacher = losses
        .rows()
        .map(|r| if r[0] < r[1] { 0 } else { 1 })
        .collect();
    PartitionMask::from_teachers(teacher, 2, PartitionRule::Loss, TieRule::Second)
}

/// Argmax of ground-truth probabilities `[N, K]`; ties to the lowest index.
pub fn multi_masks(gt: &Tensor) -> Result<PartitionMask> {
    if gt.rank() != 2 {
        return Err(Error::shape("multi_masks", gt.shape(), &[0, 0]));
    }
    let k = gt.shape()[1];
    if gt.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Data("ground-truth probabilities must lie in [0, 1]".into()));
    }
    let teacher = gt.rows().map(argmax).collect();
    PartitionMask::from_teachers(teacher, k, PartitionRule::Confidence, TieRule::Lowest)
}

/// Lowest per-sample loss over `[N, K]` losses; ties to the lowest index.
pub fn multi_loss_masks(losses: &Tensor) -> Result<PartitionMask> {
    if losses.rank() != 2 {
        return Err(Error::shape("multi_loss_masks", losses.shape(), &[0, 0]));
    }
    if losses.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN task loss in partition".into()));
    }
    let teacher = losses
        .rows()
        .map(|r| (0..r.len()).fold(0, |best, j| if r[j] < r[best] { j } else { best }))
        .collect();
    PartitionMask::from_teachers(teacher, losses.last_dim(), PartitionRule::Loss, TieRule::Lowest)
}

/// Stacks per-model ground-truth probabilities into `[N, K]`.
pub fn stack_gt_probs(logits: &[Tensor], y: &[usize]) -> Result<Tensor> {
    let cols = logits
        .iter()
        .map(|z| gt_probs(z, y))
        .collect::<Result<Vec<_>>>()?;
    let (n, k) = (y.len(), cols.len());
    let mut data = vec![0.0; n * k];
    for (j, col) in cols.iter().enumerate() {
        for (i, &p) in col.iter().enumerate() {
            data[i * k + j] = p;
        }
    }
    Tensor::new(vec![n, k], data)
}

/// Two-model confidence partition under either tie rule.
pub fn pair_masks(z1: &Tensor, z2: &Tensor, y: &[usize], tie: TieRule) -> Result<PartitionMask> {
    match tie {
        TieRule::Second => confidence_masks(z1, z2, y),
        TieRule::Lowest => multi_masks(&stack_gt_probs(&[z1.clone(), z2.clone()], y)?),
    }
}

/// Correctness taxonomy of teacher/student pairs.
///
/// `case1` both right, `case2` teacher right and student wrong, `case3` both
/// wrong. `case4` (teacher wrong, student right) is possible with three or
/// more classes; it is counted so the fractions cover every sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseStats {
    pub case1: usize,
    pub case2: usize,
    pub case3: usize,
    pub case4: usize,
}

impl CaseStats {
    pub fn total(&self) -> usize {
        self.case1 + self.case2 + self.case3 + self.case4
    }

    /// `[case1, case2, case3, case4]` as fractions of the total.
    pub fn fractions(&self) -> [f64; 4] {
        let n = self.total().max(1) as f64;
        [
            self.case1 as f64 / n,
            self.case2 as f64 / n,
            self.case3 as f64 / n,
            self.case4 as f64 / n,
        ]
    }
}

/// Per-sample case label in `1..=4`.
pub fn case_of(teacher_right: bool, student_right: bool) -> u8 {
    match (teacher_right, student_right) {
        (true, true) => 1,
        (true, false) => 2,
        (false, false) => 3,
        (false, true) => 4,
    }
}

/// Counts cases for rows already oriented so the teacher is at least as
/// confident on the ground truth as the student.
pub fn classify_cases(z_teacher: &Tensor, z_student: &Tensor, y: &[usize]) -> Result<CaseStats> {
    if z_teacher.shape() != z_student.shape() {
        return Err(Error::shape("classify_cases", z_teacher.shape(), z_student.shape()));
    }
    let (pt, ps) = (gt_probs(z_teacher, y)?, gt_probs(z_student, y)?);
    let mut stats = CaseStats::default();
    for (i, ((rt, rs), &label)) in z_teacher.rows().zip(z_student.rows()).zip(y).enumerate() {
        if pt[i] < ps[i] {
            return Err(Error::Contract(format!(
                "sample {i}: teacher confidence {} below student {}",
                pt[i], ps[i]
            )));
        }
        match case_of(argmax(rt) == label, argmax(rs) == label) {
            1 => stats.case1 += 1,
            2 => stats.case2 += 1,
            3 => stats.case3 += 1,
            _ => stats.case4 += 1,
        }
    }
    Ok(stats)
}

/// Orients each sample by the confidence partition, then counts cases.
pub fn pair_cases(z1: &Tensor, z2: &Tensor, y: &[usize]) -> Result<CaseStats> {
    let mask = confidence_masks(z1, z2, y)?;
    let width = z1.last_dim();
    let mut teacher = Vec::with_capacity(z1.numel());
    let mut student = Vec::with_capacity(z1.numel());
    for ((r1, r2), &t) in z1.rows().zip(z2.rows()).zip(mask.teachers()) {
        let (a, b) = if t == 0 { (r1, r2) } else { (r2, r1) };
        teacher.extend_from_slice(a);
        student.extend_from_slice(b);
    }
    let shape = vec![y.len(), width];
    classify_cases(&Tensor::new(shape.clone(), teacher)?, &Tensor::new(shape, student)?, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_with_gt(p: f64) -> Vec<f64> {
        // two classes, class 0 is ground truth with probability p
        vec![(p / (1.0 - p)).ln(), 0.0]
    }

    #[test]
    fn confidence_examples() {
        let z1 = Tensor::matrix(&[logits_with_gt(0.7), vec![1.0, 2.0]]).unwrap();
        let z2 = Tensor::matrix(&[logits_with_gt(0.4), vec![1.0, 2.0]]).unwrap();
        let m = confidence_masks(&z1, &z2, &[0, 1]).unwrap();
        assert_eq!(m.assignments(), vec![vec![true, false], vec![false, true]]);
        assert!(matches!(confidence_masks(&z1, &z2, &[0, 2]), Err(Error::Data(_))));
    }

    #[test]
    fn loss_examples() {
        let m = loss_masks(&Tensor::matrix(&[vec![0.2, 0.9], vec![0.5, 0.5]]).unwrap()).unwrap();
        assert_eq!(m.teachers(), &[0, 1]);
        assert_eq!(m.rule, PartitionRule::Loss);
        let nan = Tensor::matrix(&[vec![f64::NAN, 0.1]]).unwrap();
        assert!(matches!(loss_masks(&nan), Err(Error::Data(_))));
        let three = Tensor::matrix(&[vec![0.1, 0.2, 0.3]]).unwrap();
        assert!(loss_masks(&three).is_err());
    }

    #[test]
    fn multi_examples() {
        let m = multi_masks(&Tensor::matrix(&[vec![0.2, 0.9, 0.5]]).unwrap()).unwrap();
        assert_eq!(m.teachers(), &[1]);
        let tie = multi_masks(&Tensor::matrix(&[vec![0.5, 0.5]]).unwrap()).unwrap();
        assert_eq!(tie.teachers(), &[0]);
        let empty = multi_masks(&Tensor::new(vec![0, 3], vec![]).unwrap()).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.teacher_fractions(), vec![0.0; 3]);
    }

    #[test]
    fn pair_tie_rules_diverge_only_on_ties() {
        let z = Tensor::matrix(&[vec![0.3, 0.1], vec![2.0, -1.0]]).unwrap();
        let second = pair_masks(&z, &z, &[0, 1], TieRule::Second).unwrap();
        let lowest = pair_masks(&z, &z, &[0, 1], TieRule::Lowest).unwrap();
        assert_eq!(second.teachers(), &[1, 1]);
        assert_eq!(lowest.teachers(), &[0, 0]);
    }

    #[test]
    fn case_examples() {
        let right = vec![3.0, 0.0, 0.0];
        let wrong = vec![0.0, 3.0, 0.0];
        let y = [0];
        let one = |a: &Vec<f64>, b: &Vec<f64>| {
            classify_cases(&Tensor::matrix(std::slice::from_ref(a)).unwrap(), &Tensor::matrix(std::slice::from_ref(b)).unwrap(), &y)
        };
        assert_eq!(one(&right, &right).unwrap().case1, 1);
        assert_eq!(one(&right, &wrong).unwrap().case2, 1);
        let wrong_but_closer = vec![1.0, 3.0, 0.0];
        assert_eq!(one(&wrong_but_closer, &wrong).unwrap().case3, 1);
        assert!(matches!(one(&wrong, &right), Err(Error::Contract(_))));
        // teacher more confident on the ground truth yet not its argmax
        let t = vec![0.45f64.ln(), 0.55f64.ln(), -50.0];
        let s = vec![0.4f64.ln(), 0.3f64.ln(), 0.3f64.ln()];
        assert_eq!(one(&t, &s).unwrap().case4, 1);
    }

    #[test]
    fn case_fractions_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 500;
        let gen = |rng: &mut ChaCha8Rng| {
            Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
        };
        let (z1, z2) = (gen(&mut rng), gen(&mut rng));
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let stats = pair_cases(&z1, &z2, &y).unwrap();
        assert_eq!(stats.total(), n);
        assert!((stats.fractions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn every_row_has_one_teacher(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..40),
            k in 2usize..6,
        ) {
            let n = probs.len() / k;
            prop_assume!(n > 0);
            let gt = Tensor::new(vec![n, k], probs[..n * k].to_vec()).unwrap();
            let m = multi_masks(&gt).unwrap();
            for row in m.assignments() {
                prop_assert_eq!(row.iter().filter(|&&b| b).count(), 1);
            }
            prop_assert!((m.teacher_fractions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn confidence_masks_invariant_to_monotone_transform(
            p1 in proptest::collection::vec(0.01f64..0.99, 1..30),
            p2 in proptest::collection::vec(0.01f64..0.99, 1..30),
        ) {
            let n = p1.len().min(p2.len());
            let raw = |a: &[f64], b: &[f64]| {
                let gt = Tensor::new(vec![n, 2], a.iter().zip(b).flat_map(|(x, y)| [*x, *y]).collect()).unwrap();
                multi_masks(&gt).unwrap().teachers().to_vec()
            };
            let f = |v: &[f64]| v.iter().map(|x| x.powi(3) * 0.5 + 0.1).collect::<Vec<_>>();
            prop_assert_eq!(raw(&p1[..n], &p2[..n]), raw(&f(&p1[..n]), &f(&p2[..n])));
        }
    }
}
