//! Reverse-mode gradients on a small expression, checked against central
//! differences, plus stop-gradient severing a branch.

use kdlab::autodiff::{grad_check_many, Tape, Tensor};

fn main() -> kdlab::Result<()> {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -0.5]])?);
    let w = tape.leaf(Tensor::matrix(&[vec![0.3, -0.2], vec![0.1, 0.4], vec![-0.6, 0.2]])?);

    // mean log-softmax of a linear map
    let loss = x.matmul(w)?.log_softmax(1.0)?.mean()?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", loss.item()?);
    println!("dL/dw {:?}", grads.wrt(w)?.data());

    // the detached branch contributes to the value but not the gradient
    let y = x.stop_gradient().mul(x)?.sum()?;
    let g = tape.backward(y)?;
    println!("d(stop(x)*x)/dx {:?}", g.wrt(x)?.data());

    let report = grad_check_many(
        |_, v| v[0].matmul(v[1])?.sigmoid()?.sum(),
        &[x.value().clone(), w.value().clone()],
        1e-6,
        1e-4,
    )?;
    println!("grad check: pass={} max rel err {:.2e} over {} entries", report.pass, report.max_rel_err, report.checked);
    Ok(())
}
