//! Loss functions composed from graph ops.

use super::{kernels, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Mean over rows of `−Σ softmax(teacher/τ) · log_softmax(student/τ)`.
///
/// The teacher side is a constant. The gradient with respect to the student
/// logits is `(p_S − p_T) / τ` per row, divided by the row count.
pub fn cross_entropy_soft(g: &mut Graph, student: Var, teacher: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if g.shape(student) != teacher.shape() {
        return Err(Error::dim(
            "cross_entropy_soft",
            g.shape(student),
            teacher.shape(),
        ));
    }
    if !teacher.all_finite() {
        return Err(Error::Numeric {
            op: "cross_entropy_soft",
            detail: "non-finite teacher logits".into(),
        });
    }
    let mut target = teacher.map(|x| x / tau);
    let v = target.cols();
    for row in target.data_mut().chunks_mut(v.max(1)) {
        kernels::softmax_inplace(row);
    }
    let rows = target.rows().max(1);
    let s = g.scale(student, 1.0 / tau);
    let ls = g.log_softmax(s)?;
    let t = g.constant(target);
    let prod = g.mul(ls, t)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / rows as f64))
}

/// Mean over rows of `−log_softmax(scores)[target]`.
pub fn nll(g: &mut Graph, scores: Var, targets: &[usize]) -> Result<Var> {
    let (rows, v) = (g.value(scores).rows(), g.value(scores).cols());
    if rows != targets.len() || rows == 0 {
        return Err(Error::dim("nll", g.shape(scores), &[targets.len()]));
    }
    let mut idx = Vec::with_capacity(rows);
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Range { id: t, size: v });
        }
        idx.push(r * v + t);
    }
    let ls = g.log_softmax(scores)?;
    let picked = g.pick(ls, &idx)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / rows as f64))
}

/// Binary cross-entropy on a logit with a (possibly soft) target `y ∈ [0,1]`:
/// `softplus(ℓ) − y·ℓ`, averaged over elements.
pub fn bce_with_logits(g: &mut Graph, logit: Var, y: &Tensor) -> Result<Var> {
    if g.shape(logit) != y.shape() {
        return Err(Error::dim("bce_with_logits", g.shape(logit), y.shape()));
    }
    let sp = g.softplus(logit);
    let yv = g.constant(y.clone());
    let yl = g.mul(yv, logit)?;
    let d = g.sub(sp, yl)?;
    Ok(g.mean(d))
}
