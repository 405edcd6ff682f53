//! Teacher assignment on a hand-made batch under each partition rule.

use kdlab::autodiff::Tensor;
use kdlab::partition::*;

fn main() -> kdlab::Result<()> {
    let y = [0, 1, 2, 1];
    let z1 = Tensor::matrix(&[vec![3.0, 0.0, 0.0], vec![0.0, 0.5, 0.0], vec![1.0, 1.0, 1.0], vec![0.0, 2.0, 0.0]])?;
    let z2 = Tensor::matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.5, 0.0], vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 2.0]])?;

    let pair = confidence_masks(&z1, &z2, &y)?;
    println!("confidence rule, ties to the second model: {:?}", pair.teachers());
    let lowest = pair_masks(&z1, &z2, &y, TieRule::Lowest)?;
    println!("confidence rule, ties to the lowest index:  {:?}", lowest.teachers());

    let losses = Tensor::matrix(&[vec![0.2, 0.9], vec![1.1, 0.4], vec![0.7, 0.7], vec![0.1, 3.0]])?;
    println!("loss rule: {:?}", loss_masks(&losses)?.teachers());

    let z3 = Tensor::matrix(&[vec![0.0, 0.0, 4.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 3.0], vec![0.0, 1.0, 0.0]])?;
    let gt = stack_gt_probs(&[z1.clone(), z2.clone(), z3], &y)?;
    let multi = multi_masks(&gt)?;
    println!("three models: {:?}, fractions {:?}", multi.teachers(), multi.teacher_fractions());

    let cases = pair_cases(&z1, &z2, &y)?;
    println!("cases (both right, teacher right, both wrong, student right): {:?}", cases.fractions());
    Ok(())
}
