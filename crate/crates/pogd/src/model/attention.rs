//! Additive attention shared by all four attention sites.

use crate::autodiff::{Graph, Var};
use crate::model::ModelError;
use crate::scalar::Scalar;

/// Handles to one attention site's parameters: an affine projection of
/// width `dim × dim` and the scoring vector `v`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSite {
    pub proj_w: Var,
    pub proj_b: Var,
    pub v: Var,
}

/// Raw logits `vᵀ tanh(proj(row_j + query))`, one per row.
pub fn additive_logits<S: Scalar>(
    g: &mut Graph<S>,
    site: AttentionSite,
    query: Var,
    rows: &[Var],
) -> Result<Var, ModelError> {
    let mut logits = Vec::with_capacity(rows.len());
    for row in rows {
        let mixed = g.add(*row, query)?;
        let projected = g.matvec(site.proj_w, mixed)?;
        let shifted = g.add(projected, site.proj_b)?;
        let activated = g.tanh(shifted);
        logits.push(g.dot(site.v, activated)?);
    }
    g.concat(&logits).map_err(ModelError::from)
}

/// Softmax-normalized scores and the score-weighted sum of the rows.
pub fn additive_attention<S: Scalar>(
    g: &mut Graph<S>,
    site: AttentionSite,
    query: Var,
    rows: &[Var],
) -> Result<(Var, Var), ModelError> {
    let logits = additive_logits(g, site, query, rows)?;
    let scores = g.softmax(logits)?;
    let mut context: Option<Var> = None;
    for (j, row) in rows.iter().enumerate() {
        let weight = g.pick(scores, j)?;
        let term = g.mul_scalar(weight, *row)?;
        context = Some(match context {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok((scores, context.expect("rows is non-empty")))
}
