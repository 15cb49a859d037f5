//! Central finite-difference checks of tape gradients.

use super::{Bound, Graph, ParamSet, Var};
use crate::error::TensorError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Scalar entries compared.
    pub checked: usize,
    /// Entries outside both tolerances.
    pub failures: usize,
    /// Largest relative error among entries above the absolute tolerance.
    pub worst_relative: f64,
    /// `name[index]` of the worst entry.
    pub worst_entry: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares analytic gradients of `loss` against central differences.
///
/// An entry passes when its absolute error is at most `abs_tol` or its
/// relative error (against the larger magnitude) is at most `rel_tol`.
pub fn check<F>(params: &ParamSet, step: f64, rel_tol: f64, abs_tol: f64, loss: F) -> Result<GradCheckReport, TensorError>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>, TensorError>,
{
    let graph = Graph::new();
    let bound = params.bind(&graph)?;
    let out = loss(&graph, &bound)?;
    let grads = graph.backward(out)?;

    let eval = |p: &ParamSet| -> Result<f64, TensorError> {
        let g = Graph::new();
        let b = p.bind(&g)?;
        Ok(loss(&g, &b)?.value().item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        worst_relative: 0.0,
        worst_entry: String::new(),
    };
    let mut probe = params.clone();
    for id in params.ids() {
        let analytic = grads.get(bound.get(id));
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let abs = (a - numeric).abs();
            report.checked += 1;
            if abs <= abs_tol {
                continue;
            }
            let rel = abs / a.abs().max(numeric.abs());
            if rel > report.worst_relative {
                report.worst_relative = rel;
                report.worst_entry = format!("{}[{i}]", params.name(id));
            }
            if rel > rel_tol {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
