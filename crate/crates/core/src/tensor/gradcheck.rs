//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so gradients that are exactly
/// zero analytically do not turn round-off into a large ratio.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the analytic gradient of `f` with respect to every element of
/// every input against central differences of step `h`.
///
/// `f` must build its loss from the vars it is handed, which are
/// differentiable leaves holding `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut vals = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].len() {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + h;
            let up = eval(&vals)?;
            vals[k].data_mut()[i] = orig - h;
            let down = eval(&vals)?;
            vals[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (k, i);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.checked += 1;
        }
    }
    Ok(report)
}
