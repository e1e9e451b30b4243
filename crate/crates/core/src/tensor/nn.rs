use super::{Tape, Var};
use crate::error::Result;

/// Tape handles for one pre-norm self-attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub b_q: Var,
    pub b_k: Var,
    pub b_v: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// `x + Attn(LN(x))` for `x: [B*T, D]`, each block of `seq_len` rows being
/// one sequence. No positional bias is applied here.
pub fn attention_block(tape: &Tape, x: Var, p: &AttentionVars, seq_len: usize, heads: usize) -> Result<Var> {
    let h = tape.layer_norm(x, p.ln_gain, p.ln_bias)?;
    let q = tape.add_row(tape.matmul(h, p.w_q)?, p.b_q)?;
    let k = tape.add_row(tape.matmul(h, p.w_k)?, p.b_k)?;
    let v = tape.add_row(tape.matmul(h, p.w_v)?, p.b_v)?;
    let a = tape.attention(q, k, v, seq_len, heads)?;
    let o = tape.add_row(tape.matmul(a, p.w_out)?, p.b_out)?;
    tape.add(x, o)
}
