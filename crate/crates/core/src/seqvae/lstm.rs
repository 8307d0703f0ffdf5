use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

/// Standard LSTM cell update from pre-activation gates `(B, 4H)`.
///
/// `c' = σ(f)⊙c + σ(i)⊙tanh(g)`, `h' = σ(o)⊙tanh(c')`.
pub fn lstm_cell<S: Scalar>(g: &mut Graph<S>, gates: NodeId, c: NodeId, hidden: usize) -> Result<(NodeId, NodeId)> {
    let i = g.slice(gates, 1, 0, hidden)?;
    let f = g.slice(gates, 1, hidden, hidden)?;
    let cand = g.slice(gates, 1, 2 * hidden, hidden)?;
    let o = g.slice(gates, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Hidden state after every step, plus the final `(h, c)`.
pub struct LstmRun {
    pub hidden_states: Vec<NodeId>,
    pub last_h: NodeId,
    pub last_c: NodeId,
}

/// Runs a unidirectional LSTM from a zero state over pre-projected inputs.
///
/// `x_proj` holds `x_t · W_x` for all steps in time-major order
/// (`steps * B` rows). Rows with `active[t][b] == false` carry their state
/// over unchanged. `active` gives per-step row activity (`None` = every row active). A step
/// where no row is active leaves the state untouched; a step where every
/// row is active skips the carry-over blend.
#[allow(clippy::too_many_arguments)]
pub fn run_lstm<S: Scalar>(
    g: &mut Graph<S>,
    x_proj: NodeId,
    w_h: NodeId,
    bias: NodeId,
    rows: usize,
    steps: usize,
    hidden: usize,
    active: Option<&[Vec<bool>]>,
) -> Result<LstmRun> {
    let bias = g.broadcast(bias, &[rows, 4 * hidden])?;
    let mut h = g.constant(Tensor::zeros(&[rows, hidden]));
    let mut c = g.constant(Tensor::zeros(&[rows, hidden]));
    let mut hidden_states = Vec::with_capacity(steps);
    for t in 0..steps {
        let flags = active.map(|a| &a[t]);
        if flags.is_some_and(|f| f.iter().all(|&x| !x)) {
            hidden_states.push(h);
            continue;
        }
        let xp = g.slice(x_proj, 0, t * rows, rows)?;
        let hp = g.matmul(h, w_h)?;
        let pre = g.add(xp, hp)?;
        let gates = g.add(pre, bias)?;
        let (h_new, c_new) = lstm_cell(g, gates, c, hidden)?;
        match flags {
            Some(f) if !f.iter().all(|&x| x) => {
                h = blend(g, f, h_new, h, hidden)?;
                c = blend(g, f, c_new, c, hidden)?;
            }
            _ => {
                h = h_new;
                c = c_new;
            }
        }
        hidden_states.push(h);
    }
    Ok(LstmRun {
        hidden_states,
        last_h: h,
        last_c: c,
    })
}

/// `m⊙new + (1-m)⊙old` with a per-row 0/1 mask.
fn blend<S: Scalar>(g: &mut Graph<S>, flags: &[bool], new: NodeId, old: NodeId, hidden: usize) -> Result<NodeId> {
    let rows = flags.len();
    let m: Vec<S> = flags.iter().map(|&f| if f { S::one() } else { S::zero() }).collect();
    let inv: Vec<S> = flags.iter().map(|&f| if f { S::zero() } else { S::one() }).collect();
    let m = g.constant(Tensor::new(vec![rows, 1], m)?);
    let inv = g.constant(Tensor::new(vec![rows, 1], inv)?);
    let m = g.broadcast(m, &[rows, hidden])?;
    let inv = g.broadcast(inv, &[rows, hidden])?;
    let a = g.mul(m, new)?;
    let b = g.mul(inv, old)?;
    g.add(a, b)
}
