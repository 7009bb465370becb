//! Single-layer bidirectional LSTM encoder built from tape operations.

use crate::autodiff::{Graph, Var};
use crate::model::ModelError;
use crate::scalar::Scalar;

/// Handles to one direction's weights: `w_ih: [4·d_h, in]`,
/// `w_hh: [4·d_h, d_h]`, combined bias `b: [4·d_h]` in gate order
/// input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmDir {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub fw: LstmDir,
    pub bw: LstmDir,
}

fn lstm_step<S: Scalar>(
    g: &mut Graph<S>,
    dir: LstmDir,
    d_h: usize,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var), ModelError> {
    let zx = g.matvec(dir.w_ih, x)?;
    let zh = g.matvec(dir.w_hh, h)?;
    let z0 = g.add(zx, zh)?;
    let z = g.add(z0, dir.b)?;
    let i_gate = g.slice(z, 0, d_h)?;
    let f_gate = g.slice(z, d_h, d_h)?;
    let g_gate = g.slice(z, 2 * d_h, d_h)?;
    let o_gate = g.slice(z, 3 * d_h, d_h)?;
    let i = g.sigmoid(i_gate);
    let f = g.sigmoid(f_gate);
    let cand = g.tanh(g_gate);
    let o = g.sigmoid(o_gate);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let c_act = g.tanh(c_next);
    let h_next = g.mul(o, c_act)?;
    Ok((h_next, c_next))
}

fn run_direction<S: Scalar>(
    g: &mut Graph<S>,
    dir: LstmDir,
    d_h: usize,
    xs: &[Var],
) -> Result<Vec<Var>, ModelError> {
    let mut h = g.constant(crate::autodiff::Array::zeros(vec![d_h]));
    let mut c = h;
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let (h2, c2) = lstm_step(g, dir, d_h, *x, h, c)?;
        h = h2;
        c = c2;
        out.push(h);
    }
    Ok(out)
}

/// Encode a token sequence. Row `t` of the result is the concatenation of
/// the forward state after reading tokens `0..=t` and the backward state
/// after reading tokens `t..`, so each row sees the whole sequence.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    weights: BiLstm,
    d_h: usize,
    xs: &[Var],
) -> Result<Vec<Var>, ModelError> {
    if xs.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let forward = run_direction(g, weights.fw, d_h, xs)?;
    let reversed: Vec<Var> = xs.iter().rev().copied().collect();
    let mut backward = run_direction(g, weights.bw, d_h, &reversed)?;
    backward.reverse();
    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| g.concat(&[f, b]).map_err(ModelError::from))
        .collect()
}
