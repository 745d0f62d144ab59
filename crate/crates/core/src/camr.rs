//! Correction-aware memory retrieval.
//!
//! Memory entries are scored by content relevance to the preliminarily
//! corrected latent and by how well their drift (difference to the previous
//! entry) matches the current residual. The softmax of the combined scores
//! weights a temporal sum of the memory, which refines the initial
//! correction.

use crate::error::{Error, Result};
use crate::numcore::{GradTape, Tensor, Var};
use crate::params::{names, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct CamrParams {
    /// Absent when content scoring is disabled.
    pub content: Option<(Var, Var)>,
    pub w_c: Var,
    pub w_h: Var,
    pub w_agg: Var,
    pub lambda_drift: f64,
}

impl CamrParams {
    pub fn bind(
        tape: &mut GradTape,
        store: &ParamStore,
        lambda_drift: f64,
        with_content: bool,
    ) -> Result<Self> {
        if !(lambda_drift >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_drift must be nonnegative, got {lambda_drift}"
            )));
        }
        let content = if with_content {
            Some((
                store.bind(tape, names::W_Q)?,
                store.bind(tape, names::W_K)?,
            ))
        } else {
            None
        };
        Ok(Self {
            content,
            w_c: store.bind(tape, names::W_C)?,
            w_h: store.bind(tape, names::W_H)?,
            w_agg: store.bind(tape, names::W_AGG)?,
            lambda_drift,
        })
    }
}

/// Scores and weights of one retrieval, copied off the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalDiagnostics {
    pub s_cont: Vec<f64>,
    pub s_drift: Vec<f64>,
    pub weights: Vec<f64>,
}

fn pooled_rows(tape: &mut GradTape, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let pooled: Vec<Var> = rows.iter().map(|&r| tape.mean_pool_tokens(r)).collect();
    tape.concat_rows(&pooled)
}

/// `q Kᵀ / √D` with `q = Pool(z_corrected) W_q` and `K = Pool(view) W_K`.
pub fn content_scores(
    tape: &mut GradTape,
    z_corrected: Var,
    mem_view: &[Var],
    w_q: Var,
    w_k: Var,
) -> Result<Var> {
    let keys_in = pooled_rows(tape, mem_view)?;
    let d = tape.value(z_corrected).cols() as f64;
    let pooled_q = tape.mean_pool_tokens(z_corrected);
    let q = tape.matmul(pooled_q, w_q)?;
    let k = tape.matmul(keys_in, w_k)?;
    let kt = tape.transpose(k);
    let s = tape.matmul(q, kt)?;
    Ok(tape.scale(s, 1.0 / d.sqrt()))
}

/// Negative mean squared distance between the projected pooled residual
/// and each projected pooled drift row.
pub fn drift_scores(
    tape: &mut GradTape,
    residual: Var,
    drift_seq: &[Var],
    w_c: Var,
    w_h: Var,
) -> Result<Var> {
    let h_in = pooled_rows(tape, drift_seq)?;
    let pooled_c = tape.mean_pool_tokens(residual);
    let c = tape.matmul(pooled_c, w_c)?;
    let h = tape.matmul(h_in, w_h)?;
    let neg_c = tape.scale(c, -1.0);
    let diff = tape.add_row(h, neg_c)?;
    let sq = tape.square(diff);
    let dist = tape.mean_pool_features(sq);
    Ok(tape.scale(dist, -1.0))
}

/// `softmax(s_cont + λ · s_drift)`.
pub fn retrieval_weights(
    tape: &mut GradTape,
    s_cont: Var,
    s_drift: Var,
    lambda_drift: f64,
) -> Result<Var> {
    let scaled = tape.scale(s_drift, lambda_drift);
    let combined = tape.add(s_cont, scaled)?;
    Ok(tape.softmax_rows(combined))
}

/// `(Σᵢ wᵢ · viewᵢ) · W_agg + d_init`.
pub fn refine_correction(
    tape: &mut GradTape,
    weights: Var,
    mem_view: &[Var],
    d_init: Var,
    w_agg: Var,
) -> Result<Var> {
    let first = *mem_view.first().ok_or(Error::EmptyMemory)?;
    let [l, d] = tape.value(first).shape();
    if tape.value(weights).shape() != [1, mem_view.len()] {
        return Err(Error::dim(
            "refine_correction",
            format!(
                "weights {:?} for {} memory entries",
                tape.value(weights).shape(),
                mem_view.len()
            ),
        ));
    }
    let flat: Vec<Var> = mem_view
        .iter()
        .map(|&v| tape.reshape(v, 1, l * d))
        .collect::<Result<_>>()?;
    let stacked = tape.concat_rows(&flat)?;
    let summed = tape.matmul(weights, stacked)?;
    let agg = tape.reshape(summed, l, d)?;
    let projected = tape.matmul(agg, w_agg)?;
    tape.add(projected, d_init)
}

/// Tape handles of one full retrieval pass.
#[derive(Clone, Copy, Debug)]
pub struct CamrOutput {
    pub s_cont: Var,
    pub s_drift: Var,
    pub weights: Var,
    pub d_final: Var,
}

/// Score, weight and aggregate `mem_view`, refining `d_init`.
pub fn retrieve(
    tape: &mut GradTape,
    z_prior: Var,
    residual: Var,
    d_init: Var,
    mem_view: &[Var],
    drift_seq: &[Var],
    p: &CamrParams,
) -> Result<CamrOutput> {
    let s_cont = match p.content {
        Some((w_q, w_k)) => {
            let corrected = tape.add(z_prior, d_init)?;
            content_scores(tape, corrected, mem_view, w_q, w_k)?
        }
        None => tape.constant(Tensor::zeros(1, mem_view.len())),
    };
    let s_drift = drift_scores(tape, residual, drift_seq, p.w_c, p.w_h)?;
    let weights = retrieval_weights(tape, s_cont, s_drift, p.lambda_drift)?;
    let d_final = refine_correction(tape, weights, mem_view, d_init, p.w_agg)?;
    Ok(CamrOutput {
        s_cont,
        s_drift,
        weights,
        d_final,
    })
}

impl CamrOutput {
    pub fn diagnostics(&self, tape: &GradTape) -> RetrievalDiagnostics {
        RetrievalDiagnostics {
            s_cont: tape.value(self.s_cont).data().to_vec(),
            s_drift: tape.value(self.s_drift).data().to_vec(),
            weights: tape.value(self.weights).data().to_vec(),
        }
    }
}
