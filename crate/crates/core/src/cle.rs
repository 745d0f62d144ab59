//! Corrective latent extractor: an initial correction estimated from the
//! prior latent and a reference latent.
//!
//! All projections act on the feature axis (`Z · W`), so every token is
//! corrected independently.

use crate::error::Result;
use crate::numcore::{GradTape, Var};
use crate::params::{names, ParamStore};

/// Extractor projections bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct CleParams {
    pub w_pre: Var,
    pub w_ref: Var,
    pub w_delta: Var,
    /// `2D × D`, applied to `[prior, reference]` concatenated on features.
    pub w_init: Var,
    pub w_out: Var,
}

impl CleParams {
    pub fn bind(tape: &mut GradTape, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w_pre: store.bind(tape, names::W_PRE)?,
            w_ref: store.bind(tape, names::W_REF)?,
            w_delta: store.bind(tape, names::W_DELTA)?,
            w_init: store.bind(tape, names::W_INIT)?,
            w_out: store.bind(tape, names::W_OUT)?,
        })
    }
}

/// `prior - reference`.
pub fn raw_residual(tape: &mut GradTape, z_prior: Var, z_ref: Var) -> Result<Var> {
    tape.sub(z_prior, z_ref)
}

/// `prior · W_pre - reference · W_ref`.
pub fn context_discrepancy(
    tape: &mut GradTape,
    z_prior: Var,
    z_ref: Var,
    p: &CleParams,
) -> Result<Var> {
    let a = tape.matmul(z_prior, p.w_pre)?;
    let b = tape.matmul(z_ref, p.w_ref)?;
    tape.sub(a, b)
}

/// Intermediate values of one extractor pass.
#[derive(Clone, Copy, Debug)]
pub struct CleOutput {
    pub residual: Var,
    pub gate: Var,
    pub d_init: Var,
}

/// Gated blend of the projected residual and the context discrepancy,
/// mapped through `W_out`.
pub fn initial_correction(
    tape: &mut GradTape,
    z_prior: Var,
    z_ref: Var,
    p: &CleParams,
) -> Result<CleOutput> {
    let residual = raw_residual(tape, z_prior, z_ref)?;
    let discrepancy = context_discrepancy(tape, z_prior, z_ref, p)?;
    let joined = tape.concat_cols(z_prior, z_ref)?;
    let logits = tape.matmul(joined, p.w_init)?;
    let gate = tape.sigmoid(logits);
    let projected = tape.matmul(residual, p.w_delta)?;
    let a = tape.mul(gate, projected)?;
    let inv = tape.one_minus(gate);
    let b = tape.mul(inv, discrepancy)?;
    let fused = tape.add(a, b)?;
    let d_init = tape.matmul(fused, p.w_out)?;
    Ok(CleOutput {
        residual,
        gate,
        d_init,
    })
}

/// Attention weights (`W_q`, `W_k`, `W_v`) for the self-attention
/// replacement of the extractor.
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl AttnParams {
    pub fn bind(tape: &mut GradTape, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w_q: store.bind(tape, names::ATTN_Q)?,
            w_k: store.bind(tape, names::ATTN_K)?,
            w_v: store.bind(tape, names::ATTN_V)?,
        })
    }
}

/// Single-head self-attention over the tokens of `z`.
pub fn self_attention(tape: &mut GradTape, z: Var, p: &AttnParams) -> Result<Var> {
    let d = tape.value(z).cols() as f64;
    let q = tape.matmul(z, p.w_q)?;
    let k = tape.matmul(z, p.w_k)?;
    let v = tape.matmul(z, p.w_v)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / d.sqrt());
    let attn = tape.softmax_rows(scaled);
    tape.matmul(attn, v)
}
