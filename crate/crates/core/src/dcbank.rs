//! Full posterior update: extractor, retrieval and gated additive
//! correction, plus the squared-error reduction check for additive
//! corrections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camr::{self, CamrOutput, CamrParams, RetrievalDiagnostics};
use crate::cle::{self, AttnParams, CleParams};
use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::numcore::{GradTape, Tensor, Var};
use crate::params::{names, EmptyMemory, Mode, ModelConfig, ParamStore};

/// Every memory-side parameter for one mode, bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct DcbankParams {
    pub mode: Mode,
    pub empty_memory: EmptyMemory,
    pub cle: Option<CleParams>,
    pub attn: Option<AttnParams>,
    pub camr: Option<CamrParams>,
    /// `2D × D` gate over `[prior, correction]`.
    pub w_corr: Option<Var>,
    /// `2D × D` fusion used by the passive-conditioning mode.
    pub w_fuse: Option<Var>,
}

impl DcbankParams {
    pub fn bind(tape: &mut GradTape, store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mode = cfg.mode;
        let mut p = DcbankParams {
            mode,
            empty_memory: cfg.empty_memory,
            cle: None,
            attn: None,
            camr: None,
            w_corr: None,
            w_fuse: None,
        };
        if !mode.uses_memory() {
            return Ok(p);
        }
        if mode.uses_cle() {
            p.cle = Some(CleParams::bind(tape, store)?);
        } else {
            p.attn = Some(AttnParams::bind(tape, store)?);
        }
        if mode.uses_camr() {
            p.camr = Some(CamrParams::bind(
                tape,
                store,
                cfg.lambda_drift,
                mode != Mode::NoContent,
            )?);
        }
        if mode == Mode::Passive {
            p.w_fuse = Some(store.bind(tape, names::W_FUSE)?);
        } else {
            p.w_corr = Some(store.bind(tape, names::W_CORR)?);
        }
        Ok(p)
    }
}

/// Tape handles produced by one [`apply`].
#[derive(Clone, Copy, Debug)]
pub struct Correction {
    pub posterior: Var,
    pub bypassed: bool,
    pub d_init: Option<Var>,
    pub d_final: Option<Var>,
    pub gate: Option<Var>,
    pub retrieval: Option<CamrOutput>,
}

impl Correction {
    fn bypass(z_prior: Var) -> Self {
        Self {
            posterior: z_prior,
            bypassed: true,
            d_init: None,
            d_final: None,
            gate: None,
            retrieval: None,
        }
    }

    pub fn diagnostics(&self, tape: &GradTape) -> StepDiagnostics {
        StepDiagnostics {
            bypassed: self.bypassed,
            d_init: self.d_init.map(|v| tape.value(v).clone()),
            d_final: self.d_final.map(|v| tape.value(v).clone()),
            gate_mean: self.gate.map(|g| tape.value(g).mean()),
            retrieval: self.retrieval.map(|r| r.diagnostics(tape)),
            prop1: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub bypassed: bool,
    pub d_init: Option<Tensor>,
    pub d_final: Option<Tensor>,
    pub gate_mean: Option<f64>,
    pub retrieval: Option<RetrievalDiagnostics>,
    pub prop1: Option<Prop1Report>,
}

/// Correct `z_prior` using the memory in `bank`.
///
/// With an empty bank the prior is returned as is unless the fallback
/// policy is selected, in which case the prior serves as its own reference
/// and retrieval is skipped.
pub fn apply(
    tape: &mut GradTape,
    z_prior: Var,
    bank: &mut MemoryBank,
    p: &DcbankParams,
) -> Result<Correction> {
    if !p.mode.uses_memory() {
        return Ok(Correction::bypass(z_prior));
    }
    if bank.is_empty() && p.empty_memory == EmptyMemory::Bypass {
        return Ok(Correction::bypass(z_prior));
    }

    let z_ref = bank.reference(z_prior);
    let (residual, d_init) = match (&p.cle, &p.attn) {
        (Some(cp), _) => {
            let out = cle::initial_correction(tape, z_prior, z_ref, cp)?;
            (out.residual, out.d_init)
        }
        (None, Some(ap)) => {
            let residual = cle::raw_residual(tape, z_prior, z_ref)?;
            (residual, cle::self_attention(tape, z_prior, ap)?)
        }
        (None, None) => return Err(Error::Config("extractor parameters not bound".into())),
    };

    let mut retrieval = None;
    let d_final = match (&p.camr, bank.is_empty()) {
        (Some(cp), false) => {
            let view = bank.view_with_pos(tape)?;
            let drift = MemoryBank::drift_sequence(tape, &view)?;
            let out = camr::retrieve(tape, z_prior, residual, d_init, &view, &drift, cp)?;
            retrieval = Some(out);
            out.d_final
        }
        _ => d_init,
    };

    let joined = tape.concat_cols(z_prior, d_final)?;
    let (posterior, gate) = match (p.w_fuse, p.w_corr) {
        (Some(w_fuse), _) => (tape.matmul(joined, w_fuse)?, None),
        (None, Some(w_corr)) => {
            let logits = tape.matmul(joined, w_corr)?;
            let gate = tape.sigmoid(logits);
            let step = tape.mul(gate, d_final)?;
            (tape.add(z_prior, step)?, Some(gate))
        }
        (None, None) => return Err(Error::Config("gate parameters not bound".into())),
    };

    Ok(Correction {
        posterior,
        bypassed: false,
        d_init: Some(d_init),
        d_final: Some(d_final),
        gate,
        retrieval,
    })
}

/// Squared-error bookkeeping for an additive correction `Δ = posterior - prior`
/// against a target latent, with prior error `e = prior - target`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    /// `⟨e, Δ⟩`
    pub inner: f64,
    /// `½‖Δ‖²`
    pub half_norm_sq: f64,
    /// `⟨e, Δ⟩ < -½‖Δ‖²`
    pub condition_holds: bool,
    /// `‖e‖²`
    pub err_before: f64,
    /// `‖e + Δ‖²`
    pub err_after: f64,
}

impl Prop1Report {
    pub fn from_error_and_step(e: &[f64], delta: &[f64]) -> Result<Self> {
        if e.len() != delta.len() {
            return Err(Error::dim(
                "prop1_check",
                format!("{} vs {} elements", e.len(), delta.len()),
            ));
        }
        let inner: f64 = e.iter().zip(delta).map(|(a, b)| a * b).sum();
        let half_norm_sq = 0.5 * delta.iter().map(|v| v * v).sum::<f64>();
        let err_before = e.iter().map(|v| v * v).sum();
        let err_after = e.iter().zip(delta).map(|(a, b)| (a + b) * (a + b)).sum();
        Ok(Self {
            inner,
            half_norm_sq,
            condition_holds: inner < -half_norm_sq,
            err_before,
            err_after,
        })
    }

    pub fn error_reduced(&self) -> bool {
        self.err_after < self.err_before
    }
}

pub fn prop1_check(z_posterior: &Tensor, z_prior: &Tensor, z_target: &Tensor) -> Result<Prop1Report> {
    let e = z_prior.sub(z_target)?;
    let delta = z_posterior.sub(z_prior)?;
    Prop1Report::from_error_and_step(e.data(), delta.data())
}

/// How correction vectors are drawn in [`prop1_audit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditPairs {
    /// `Δ = -a·e + b·ξ` with random `a ∈ [0, 2]`, `b ∈ [0, 1]`.
    Random,
    /// `Δ = -e`.
    Perfect,
    /// `Δ = 0`.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub trials: usize,
    pub dim: usize,
    pub condition_holds: usize,
    pub error_reduced: usize,
    /// Pairs where the condition held but the error did not shrink.
    pub violations: usize,
}

/// Check the sufficient condition against direct error evaluation on
/// random pairs.
pub fn prop1_audit(trials: usize, dim: usize, seed: u64, pairs: AuditPairs) -> AuditReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AuditReport {
        trials,
        dim,
        condition_holds: 0,
        error_reduced: 0,
        violations: 0,
    };
    let mut e = vec![0.0; dim];
    let mut delta = vec![0.0; dim];
    for _ in 0..trials {
        for v in e.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        match pairs {
            AuditPairs::Random => {
                let a: f64 = rng.gen_range(0.0..2.0);
                let b: f64 = rng.gen_range(0.0..1.0);
                for (d, ev) in delta.iter_mut().zip(&e) {
                    *d = -a * ev + b * rng.gen_range(-1.0..1.0);
                }
            }
            AuditPairs::Perfect => {
                for (d, ev) in delta.iter_mut().zip(&e) {
                    *d = -ev;
                }
            }
            AuditPairs::Zero => delta.iter_mut().for_each(|d| *d = 0.0),
        }
        let r = Prop1Report::from_error_and_step(&e, &delta).expect("equal lengths");
        report.condition_holds += r.condition_holds as usize;
        report.error_reduced += r.error_reduced() as usize;
        report.violations += (r.condition_holds && !r.error_reduced()) as usize;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_correction() {
        let e = [0.5, -1.0, 2.0];
        let delta: Vec<f64> = e.iter().map(|v| -v).collect();
        let r = Prop1Report::from_error_and_step(&e, &delta).unwrap();
        assert_eq!(r.inner, -5.25);
        assert!(r.condition_holds);
        assert_eq!(r.err_after, 0.0);
        assert_eq!(r.err_before, 5.25);
    }

    #[test]
    fn zero_correction_fails_condition() {
        let r = Prop1Report::from_error_and_step(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!(!r.condition_holds);
        assert_eq!(r.err_after, r.err_before);
    }

    #[test]
    fn half_step_identity() {
        let e = [0.3, -0.8, 1.7, 0.05];
        let delta: Vec<f64> = e.iter().map(|v| -0.5 * v).collect();
        let r = Prop1Report::from_error_and_step(&e, &delta).unwrap();
        let norm_e: f64 = e.iter().map(|v| v * v).sum();
        assert!((r.inner + 0.5 * norm_e).abs() < 1e-12);
        assert!((r.half_norm_sq - 0.125 * norm_e).abs() < 1e-12);
        assert!(r.condition_holds);
        let expanded = r.err_before + 2.0 * r.inner + 2.0 * r.half_norm_sq;
        assert!((r.err_after - expanded).abs() < 1e-10);
    }

    #[test]
    fn tensor_check_and_mismatch() {
        let target = Tensor::zeros(2, 2);
        let prior = Tensor::ones(2, 2);
        let post = Tensor::full(2, 2, 0.25);
        let r = prop1_check(&post, &prior, &target).unwrap();
        assert!(r.condition_holds && r.error_reduced());
        assert!(prop1_check(&post, &prior, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn audit_modes() {
        let r = prop1_audit(500, 16, 1, AuditPairs::Random);
        assert_eq!(r.violations, 0);
        assert!(r.condition_holds > 0 && r.condition_holds < 500);
        let p = prop1_audit(100, 16, 1, AuditPairs::Perfect);
        assert_eq!((p.condition_holds, p.error_reduced), (100, 100));
        let z = prop1_audit(100, 16, 1, AuditPairs::Zero);
        assert_eq!((z.condition_holds, z.error_reduced), (0, 0));
    }
}
