use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::DiffError;

/// `x · w + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Weights of one LSTM cell; gate columns are ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_in: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

/// [`LstmParams`] bound into one graph.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_in: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmParams {
    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            w_in: store.create(
                &format!("{prefix}.w_in"),
                &[input, 4 * hidden],
                Init::Uniform { fan_in: input },
                rng,
            )?,
            w_hidden: store.create(
                &format!("{prefix}.w_hidden"),
                &[hidden, 4 * hidden],
                Init::Uniform { fan_in: hidden },
                rng,
            )?,
            bias: store.create(&format!("{prefix}.bias"), &[4 * hidden], Init::Zeros, rng)?,
            hidden,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> LstmVars {
        LstmVars {
            w_in: g.param(store, self.w_in),
            w_hidden: g.param(store, self.w_hidden),
            bias: g.param(store, self.bias),
            hidden: self.hidden,
        }
    }
}

/// One step for a batch: `x[B, in]`, state `[B, hidden]` each.
pub fn lstm_cell(
    g: &mut Graph,
    p: &LstmVars,
    x: Var,
    state: LstmState,
) -> Result<LstmState, DiffError> {
    let h = p.hidden;
    let from_x = g.matmul(x, p.w_in)?;
    let from_h = g.matmul(state.h, p.w_hidden)?;
    let pre = g.add(from_x, from_h)?;
    let pre = g.add_bias(pre, p.bias)?;
    let i = g.slice(pre, 0, h)?;
    let f = g.slice(pre, h, h)?;
    let c_hat = g.slice(pre, 2 * h, h)?;
    let o = g.slice(pre, 3 * h, h)?;
    let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
    let c_hat = g.tanh(c_hat);
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let squashed = g.tanh(c);
    let h = g.mul(o, squashed)?;
    Ok(LstmState { h, c })
}
