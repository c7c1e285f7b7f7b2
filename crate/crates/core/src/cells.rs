//! LSTM and Copy-LSTM cells.
//!
//! Each gate has one matrix over the concatenation `[h_{t-1}; x_t]`.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_matrix, uniform_vector, Binding, ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    pub w_f: ParamId,
    pub w_i: ParamId,
    pub w_c: ParamId,
    pub w_o: ParamId,
    pub b_f: ParamId,
    pub b_i: ParamId,
    pub b_c: ParamId,
    pub b_o: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmWeights {
    /// Registers the gate parameters under `prefix`. Forget bias starts at 1.
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let fan_in = hidden + input;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut mat = |name: &str, rng: &mut R| {
            params.add(format!("{prefix}.{name}"), uniform_matrix(rng, hidden, fan_in))
        };
        let w_f = mat("w_f", rng);
        let w_i = mat("w_i", rng);
        let w_c = mat("w_c", rng);
        let w_o = mat("w_o", rng);
        let b_f = params.add(format!("{prefix}.b_f"), Tensor::filled(&[hidden], 1.0));
        let b_i = params.add(format!("{prefix}.b_i"), uniform_vector(rng, hidden, bound));
        let b_c = params.add(format!("{prefix}.b_c"), uniform_vector(rng, hidden, bound));
        let b_o = params.add(format!("{prefix}.b_o"), uniform_vector(rng, hidden, bound));
        LstmWeights {
            w_f,
            w_i,
            w_c,
            w_o,
            b_f,
            b_i,
            b_c,
            b_o,
            input,
            hidden,
        }
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [
            self.w_f, self.w_i, self.w_c, self.w_o, self.b_f, self.b_i, self.b_c, self.b_o,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Result<Self> {
        let h = g.constant(Tensor::zeros(&[hidden]))?;
        let c = g.constant(Tensor::zeros(&[hidden]))?;
        Ok(LstmState { h, c })
    }
}

fn check_len(g: &Graph, v: Var, expected: usize, op: &'static str) -> Result<()> {
    let t = g.value(v);
    if t.rank() != 1 || t.numel() != expected {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![expected],
            rhs: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn gate(g: &mut Graph, b: &Binding, w: ParamId, bias: ParamId, hx: Var) -> Result<Var> {
    let z = g.matmul(b.get(w), hx)?;
    g.add(z, b.get(bias))
}

/// Memory `C_t` and output gate `o_t` of a standard LSTM step.
fn memory_and_output_gate(
    g: &mut Graph,
    b: &Binding,
    w: &LstmWeights,
    x: Var,
    prev: &LstmState,
    op: &'static str,
) -> Result<(Var, Var)> {
    check_len(g, x, w.input, op)?;
    check_len(g, prev.h, w.hidden, op)?;
    check_len(g, prev.c, w.hidden, op)?;
    let hx = g.concat(&[prev.h, x])?;
    let f = gate(g, b, w.w_f, w.b_f, hx)?;
    let f = g.sigmoid(f)?;
    let i = gate(g, b, w.w_i, w.b_i, hx)?;
    let i = g.sigmoid(i)?;
    let cand = gate(g, b, w.w_c, w.b_c, hx)?;
    let cand = g.tanh(cand)?;
    let o = gate(g, b, w.w_o, w.b_o, hx)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, prev.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    Ok((c, o))
}

pub fn lstm_step(
    g: &mut Graph,
    b: &Binding,
    w: &LstmWeights,
    x: Var,
    prev: &LstmState,
) -> Result<LstmState> {
    let (c, o) = memory_and_output_gate(g, b, w, x, prev, "lstm_step")?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CopyLstmWeights {
    pub lstm: LstmWeights,
    /// Copy-gate projection over `[C_t; C_s^e]`, no bias.
    pub w_n: ParamId,
}

impl CopyLstmWeights {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let lstm = LstmWeights::new(params, rng, prefix, input, hidden);
        let w_n = params.add(format!("{prefix}.w_n"), uniform_matrix(rng, hidden, 2 * hidden));
        CopyLstmWeights { lstm, w_n }
    }
}

/// How a sigmoid gate is obtained. `Fixed` clamps it to a constant; used by
/// reduction tests and saturation checks.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct CopyLstmOutput {
    /// Hidden state and the interpolated memory `C_ap`, which becomes the
    /// recurrent memory of the next step.
    pub state: LstmState,
    pub copy_gate: Var,
}

pub fn copy_lstm_step(
    g: &mut Graph,
    b: &Binding,
    w: &CopyLstmWeights,
    x: Var,
    prev: &LstmState,
    c_copied: Var,
    copy_gate: GateMode,
) -> Result<CopyLstmOutput> {
    check_len(g, c_copied, w.lstm.hidden, "copy_lstm_step")?;
    let (c_t, o) = memory_and_output_gate(g, b, &w.lstm, x, prev, "copy_lstm_step")?;
    let cg = match copy_gate {
        GateMode::Learned => {
            let both = g.concat(&[c_t, c_copied])?;
            let z = g.matmul(b.get(w.w_n), both)?;
            g.sigmoid(z)?
        }
        GateMode::Fixed(v) => g.constant(Tensor::filled(&[w.lstm.hidden], v))?,
    };
    let take = g.mul(cg, c_copied)?;
    let keep_w = g.one_minus(cg)?;
    let keep = g.mul(keep_w, c_t)?;
    let c_ap = g.add(take, keep)?;
    let tc = g.tanh(c_ap)?;
    let h = g.mul(o, tc)?;
    Ok(CopyLstmOutput {
        state: LstmState { h, c: c_ap },
        copy_gate: cg,
    })
}
