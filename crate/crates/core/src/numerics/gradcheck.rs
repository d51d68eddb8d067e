use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that coordinates whose true
/// gradient is ~0 are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    /// Coordinates whose `±step` perturbation flipped a ReLU.
    pub skipped_kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the tape gradient of `loss_fn` against central differences on
/// every coordinate of `params` (or on `coords` when given).
///
/// `loss_fn` receives a fresh tape and the parameter leaf, and must be
/// deterministic: any randomness has to be frozen before the call.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &Tensor,
    tolerance: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: Tensor| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let leaf = tape.param(p);
        let root = loss_fn(&mut tape, leaf)?;
        Ok((tape.value(root).as_slice()[0], tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let leaf = tape.param(params.clone());
    let root = loss_fn(&mut tape, leaf)?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(leaf)
        .map(Tensor::to_vec)
        .unwrap_or_else(|| vec![0.0; params.len()]);
    let base_pattern = tape.relu_pattern();

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        checked: 0,
        skipped_kinks: 0,
        tolerance,
        passed: true,
    };
    for &i in coords {
        let mut plus = params.clone();
        plus.make_mut()[i] += FD_STEP;
        let mut minus = params.clone();
        minus.make_mut()[i] -= FD_STEP;
        let (fp, pat_p) = eval(plus)?;
        let (fm, pat_m) = eval(minus)?;
        if pat_p != base_pattern || pat_m != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_coordinate.is_none() {
            report.max_rel_error = err;
            report.worst_coordinate = Some(i);
        }
    }
    report.passed = report.max_rel_error <= tolerance && report.checked > 0;
    Ok(report)
}
