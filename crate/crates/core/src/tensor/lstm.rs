use crate::error::{Error, Result};

use super::{Real, Tape, Var};

/// LSTM weights as tape handles. Gate blocks are laid out `[i | f | g | o]`
/// along the columns of every matrix.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// e × 4h
    pub w_x: Var,
    /// h × 4h
    pub w_h: Var,
    /// 4h
    pub bias: Var,
}

/// One step of a standard LSTM:
///
/// ```text
/// [i f g o] = x W_x + h W_h + b
/// c' = σ(f) ⊙ c + σ(i) ⊙ tanh(g)
/// h' = σ(o) ⊙ tanh(c')
/// ```
pub fn lstm_cell<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmParams,
) -> Result<(Var, Var)> {
    let hidden = tape.shape(h_prev)[tape.shape(h_prev).len() - 1];
    let gate_cols = tape.shape(p.w_h)[1];
    if gate_cols != 4 * hidden || tape.shape(c_prev) != tape.shape(h_prev) {
        return Err(Error::shape("lstm_cell", tape.shape(h_prev), tape.shape(p.w_h)));
    }
    let xg = tape.matmul(x, p.w_x)?;
    let hg = tape.matmul(h_prev, p.w_h)?;
    let pre = tape.add(xg, hg)?;
    let pre = tape.add_row(pre, p.bias)?;
    let i = tape.slice_cols(pre, 0, hidden)?;
    let f = tape.slice_cols(pre, hidden, hidden)?;
    let g = tape.slice_cols(pre, 2 * hidden, hidden)?;
    let o = tape.slice_cols(pre, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}
