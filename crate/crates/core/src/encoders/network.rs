//! Tape-level forward pass shared by both branches.

use crate::autodiff::{Tape, Tensor, TensorError, Var};

use super::params::{Attention, Branch, Gru};

pub(crate) struct BranchVars {
    pub level1: Var,
    pub level2: Var,
    pub level3: Var,
    pub common: Var,
}

/// One GRU direction over the rows of `x`; returns hidden states indexed by
/// original time step.
fn gru_direction(
    tape: &mut Tape<'_>,
    x: Var,
    p: &Gru<Var>,
    reverse: bool,
) -> Result<Vec<Var>, TensorError> {
    let n = tape.value(x).rows();
    let hidden = tape.value(p.u_z).rows();
    let xz = tape.matmul(x, p.w_z)?;
    let xz = tape.add(xz, p.b_z)?;
    let xr = tape.matmul(x, p.w_r)?;
    let xr = tape.add(xr, p.b_r)?;
    let xh = tape.matmul(x, p.w_h)?;
    let xh = tape.add(xh, p.b_h)?;

    let mut h = tape.constant(Tensor::zeros(1, hidden));
    let mut states = vec![h; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for t in order {
        let hz = tape.matmul(h, p.u_z)?;
        let xz_t = tape.row(xz, t)?;
        let z = tape.add(xz_t, hz)?;
        let z = tape.sigmoid(z)?;

        let hr = tape.matmul(h, p.u_r)?;
        let xr_t = tape.row(xr, t)?;
        let r = tape.add(xr_t, hr)?;
        let r = tape.sigmoid(r)?;

        let rh = tape.mul(r, h)?;
        let rh = tape.matmul(rh, p.u_h)?;
        let xh_t = tape.row(xh, t)?;
        let cand = tape.add(xh_t, rh)?;
        let cand = tape.tanh(cand)?;

        // h' = h + z * (cand - h) == (1 - z) * h + z * cand
        let delta = tape.sub(cand, h)?;
        let delta = tape.mul(z, delta)?;
        h = tape.add(h, delta)?;
        states[t] = h;
    }
    Ok(states)
}

/// Bidirectional GRU: `n x in` to `n x 2h`, forward states first.
pub(crate) fn bigru(
    tape: &mut Tape<'_>,
    x: Var,
    forward: &Gru<Var>,
    backward: &Gru<Var>,
) -> Result<Var, TensorError> {
    let fwd = gru_direction(tape, x, forward, false)?;
    let bwd = gru_direction(tape, x, backward, true)?;
    let fwd = tape.stack_rows(&fwd)?;
    let bwd = tape.stack_rows(&bwd)?;
    tape.concat(&[fwd, bwd])
}

/// Scaled dot-product self-attention. Returns `(A, A * H)`.
pub(crate) fn self_attention(
    tape: &mut Tape<'_>,
    h: Var,
    p: &Attention<Var>,
) -> Result<(Var, Var), TensorError> {
    let dim = tape.value(p.query).cols() as f64;
    let q = tape.matmul(h, p.query)?;
    let k = tape.matmul(h, p.key)?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / dim.sqrt())?;
    let a = tape.row_softmax(logits)?;
    let attended = tape.matmul(a, h)?;
    Ok((a, attended))
}

/// Multi-width 1-d convolution with rectification and max-over-time
/// pooling. A width longer than the sequence contributes zeros.
pub(crate) fn conv_pool(
    tape: &mut Tape<'_>,
    seq: Var,
    branch: &Branch<Var>,
) -> Result<Var, TensorError> {
    let n = tape.value(seq).rows();
    let mut pooled = Vec::with_capacity(branch.conv.len());
    for bank in &branch.conv {
        let filters = tape.value(bank.bias).cols();
        if bank.width > n {
            pooled.push(tape.constant(Tensor::zeros(1, filters)));
            continue;
        }
        let windows = tape.unfold(seq, bank.width)?;
        let z = tape.matmul(windows, bank.weight)?;
        let z = tape.add(z, bank.bias)?;
        let z = tape.relu(z)?;
        pooled.push(tape.max_rows(z)?);
    }
    tape.concat(&pooled)
}

/// Levels two and three plus the common-space projection, given the input
/// sequence and a precomputed first level.
pub(crate) fn encode_branch(
    tape: &mut Tape<'_>,
    seq: Var,
    level1: Var,
    branch: &Branch<Var>,
) -> Result<BranchVars, TensorError> {
    let h = bigru(tape, seq, &branch.gru.forward, &branch.gru.backward)?;
    let (_, attended) = self_attention(tape, h, &branch.attention)?;
    let level2 = tape.mean_rows(attended)?;
    let level3 = conv_pool(tape, attended, branch)?;
    let joined = tape.concat(&[level1, level2, level3])?;
    let projected = tape.matmul(joined, branch.fc.weight)?;
    let projected = tape.add(projected, branch.fc.bias)?;
    let common = tape.l2_normalize(projected)?;
    Ok(BranchVars {
        level1,
        level2,
        level3,
        common,
    })
}
