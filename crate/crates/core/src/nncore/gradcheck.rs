use super::{Gradients, ParameterSet};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Loss value plus a signature of the discrete choices (max-pool winners,
/// etc.) made while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub branch: Vec<usize>,
}

impl Evaluation {
    /// A loss that is smooth everywhere.
    pub fn smooth(loss: f64) -> Self {
        Evaluation { loss, branch: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-6)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed the branch.
    pub excluded: usize,
}

/// Compares `analytic` against central differences of `eval` for every
/// scalar parameter. Parameters are restored before returning.
pub fn finite_difference_check<F>(params: &mut ParameterSet, analytic: &Gradients, mut eval: F) -> GradCheckReport
where
    F: FnMut(&ParameterSet) -> Evaluation,
{
    let base = eval(params).branch;
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, excluded: 0 };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(params);
            params.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(params);
            params.get_mut(id).data_mut()[i] = orig;
            if plus.branch != base || minus.branch != base {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
            let a = analytic.get(id).data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report
}
