//! Shared transformer building blocks over the autodiff tape: bias-free
//! multi-head attention, the 2-layer GELU MLP, and mask construction.

use crate::numerics::{Rng, Tape, Tensor, TensorError, Var};

/// Additive mask value for disallowed attention logits. Finite so the
/// stabilized softmax stays well-defined; exp underflows to exactly 0.
pub const MASK_NEG: f64 = -1e30;

/// How attention logits are scaled before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnScale {
    /// `1/sqrt(d_head)` per head.
    PerHead,
    /// `1/sqrt(d)` over the full model width.
    FullDim,
}

/// Projection matrices of one attention block, already on the tape
/// (params, or computed tensors such as LoRA-augmented weights).
#[derive(Debug, Clone, Copy)]
pub struct AttnProj {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Attention output plus the per-head probability rows for analysis.
pub struct Attention {
    pub out: Var,
    /// One `[q_rows x kv_rows]` row-stochastic matrix per head.
    pub probs: Vec<Tensor>,
}

/// Multi-head scaled dot-product attention with bias-free projections.
/// `mask`, when given, is added to the logits of every head.
pub fn multi_head_attention(
    tape: &mut Tape,
    query_in: Var,
    kv_in: Var,
    proj: &AttnProj,
    heads: usize,
    scale: AttnScale,
    mask: Option<&Tensor>,
) -> Result<Attention, TensorError> {
    let d = tape.shape(query_in)[1];
    assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
    let d_head = d / heads;
    let q = tape.matmul(query_in, proj.wq)?;
    let k = tape.matmul(kv_in, proj.wk)?;
    let v = tape.matmul(kv_in, proj.wv)?;
    let factor = match scale {
        AttnScale::PerHead => 1.0 / (d_head as f64).sqrt(),
        AttnScale::FullDim => 1.0 / (d as f64).sqrt(),
    };
    let mask_var = mask.map(|m| tape.constant(m));
    let mut ctx_heads = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let kt = tape.transpose(kh);
        let raw = tape.matmul(qh, kt)?;
        let mut logits = tape.scale(raw, factor);
        if let Some(mv) = mask_var {
            logits = tape.add(logits, mv)?;
        }
        let attn = tape.softmax_rows(logits)?;
        probs.push(tape.tensor(attn));
        ctx_heads.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_cols(&ctx_heads)?;
    let out = tape.matmul(ctx, proj.wo)?;
    Ok(Attention { out, probs })
}

/// Handles of one low-rank adapter: the effective weight is
/// `W + scaling * down @ up` with `scaling = alpha / rank`. `up` starts at
/// zero so the adapted output equals the base output at step 0.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub down: crate::numerics::ParamId,
    pub up: crate::numerics::ParamId,
    pub scaling: f64,
}

/// Read a weight from the store, applying a low-rank adapter when present.
pub fn adapted_weight(
    tape: &mut Tape,
    store: &crate::numerics::ParamStore,
    base: crate::numerics::ParamId,
    lora: Option<&LoraPair>,
) -> Result<Var, TensorError> {
    let w = tape.param(store, base);
    match lora {
        None => Ok(w),
        Some(pair) => {
            let down = tape.param(store, pair.down);
            let up = tape.param(store, pair.up);
            let delta = tape.matmul(down, up)?;
            let delta = tape.scale(delta, pair.scaling);
            tape.add(w, delta)
        }
    }
}

/// `x @ w + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let xw = tape.matmul(x, w)?;
    tape.add_row_broadcast(xw, b)
}

/// Two-layer MLP with GELU: `gelu(x w1 + b1) w2 + b2`.
pub fn mlp2(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var, TensorError> {
    let h = linear(tape, x, w1, b1)?;
    let h = tape.gelu(h);
    linear(tape, h, w2, b2)
}

/// Lower-triangular additive causal mask for a sequence of `len` tokens.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![len, len]);
    for i in 0..len {
        for j in (i + 1)..len {
            m.data_mut()[i * len + j] = MASK_NEG;
        }
    }
    m
}

/// Weight initialization used across the model: i.i.d. normal with
/// fan-in scaling, std 1/sqrt(rows).
pub fn init_weight(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(vec![rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

pub fn init_gain(d: usize) -> Tensor {
    Tensor::from_vec(vec![d], vec![1.0; d]).unwrap()
}

pub fn init_zeros(d: usize) -> Tensor {
    Tensor::zeros(vec![d])
}
