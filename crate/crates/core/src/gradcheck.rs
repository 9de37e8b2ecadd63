//! Central finite-difference gradient checking.

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked elements.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements where the one-sided differences disagree: the function has a
    /// kink inside `[x - eps, x + eps]` and the element was not compared.
    pub kinks: Vec<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative disagreement between one-sided slopes above which an element is
/// treated as sitting on a kink. An undetected kink biases the central
/// difference by at most half this, so it stays below the 1e-4 tolerances
/// used throughout.
const KINK_THRESHOLD: f64 = 1e-4;

/// Compares `analytic` with central differences of the scalar function
/// `eval` around `x`. Only the elements listed in `indices` are probed
/// (all of them when `None`).
pub fn compare_with_central_differences(
    mut eval: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &Tensor,
    eps: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let f0 = eval(x)?;
    let mut probe = x.clone();
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinks: Vec::new(),
    };
    for &i in indices {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let central = (fp - fm) / (2.0 * eps);
        let forward = (fp - f0) / eps;
        let backward = (f0 - fm) / eps;
        if (forward - backward).abs() > KINK_THRESHOLD * central.abs().max(1.0) {
            report.kinks.push(i);
            continue;
        }
        let a = analytic.data()[i];
        let err = (a - central).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to its input at `x`.
///
/// `f` records a computation on a fresh tape; non-scalar outputs are summed
/// to form the loss.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let scalar_loss = |tape: &mut Tape, input: Var| -> Result<Var> {
        let out = f(tape, input)?;
        Ok(if tape.value(out).is_scalar() {
            out
        } else {
            tape.sum(out)
        })
    };
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let loss = scalar_loss(&mut tape, input)?;
    tape.backward(loss, &mut store)?;
    let analytic = tape
        .grad(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    compare_with_central_differences(
        |probe| {
            let mut t = Tape::new();
            let v = t.input(probe.clone());
            let l = scalar_loss(&mut t, v)?;
            Ok(t.value(l).item())
        },
        x,
        &analytic,
        eps,
        None,
    )
}
