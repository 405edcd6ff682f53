use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Inputs reachable only through stop-gradient; not differenced.
    pub skipped: Vec<usize>,
    /// Severed inputs whose reverse-mode gradient was not exactly zero.
    pub severed_nonzero: Vec<usize>,
}

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks `f` at a single input.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_many(f, std::slice::from_ref(x), step, tol)
}

/// Checks `f` with respect to every input tensor.
///
/// Inputs with no live path to the output (all routes pass through
/// stop-gradient) are skipped for differencing; instead their reverse-mode
/// gradient must be exactly zero.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        skipped: Vec::new(),
        severed_nonzero: Vec::new(),
    };
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map_or_else(|| vec![0.0; inputs[i].numel()], <[f64]>::to_vec);
        if grads.is_severed(*var) {
            report.skipped.push(i);
            if analytic.iter().any(|&g| g != 0.0) {
                report.severed_nonzero.push(i);
                report.pass = false;
            }
            continue;
        }
        for (j, &exact) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(exact, numeric);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    report.pass &= report.max_rel_err <= tol;
    Ok(report)
}
