//! Named parameter storage and initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{GradTape, Tensor, Var};

pub mod names {
    pub const ENCODER: &str = "backbone.encoder";
    pub const DECODER: &str = "backbone.decoder";
    pub const W_PRE: &str = "cle.w_pre";
    pub const W_REF: &str = "cle.w_ref";
    pub const W_DELTA: &str = "cle.w_delta";
    pub const W_INIT: &str = "cle.w_init";
    pub const W_OUT: &str = "cle.w_out";
    pub const W_Q: &str = "camr.w_q";
    pub const W_K: &str = "camr.w_k";
    pub const W_C: &str = "camr.w_c";
    pub const W_H: &str = "camr.w_h";
    pub const W_AGG: &str = "camr.w_agg";
    pub const POS_TABLE: &str = "membank.pos_table";
    pub const W_CORR: &str = "gate.w_corr";
    pub const W_FUSE: &str = "passive.w_fuse";
    pub const ATTN_Q: &str = "attn.w_q";
    pub const ATTN_K: &str = "attn.w_k";
    pub const ATTN_V: &str = "attn.w_v";
}

/// How the posterior latent is formed from the prior at each rollout step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full memory bank: extractor, retrieval, gated additive correction.
    Corrected,
    /// Backbone only; memory is never consulted.
    Bypass,
    /// The refined correction is fused with the prior by a learned map
    /// instead of being added through the gate.
    Passive,
    /// Extractor replaced by single-head self-attention over the prior.
    NoCle,
    /// Retrieval skipped; the initial correction is applied directly.
    NoCamr,
    /// Retrieval uses drift consistency only.
    NoContent,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Corrected,
        Mode::Bypass,
        Mode::Passive,
        Mode::NoCle,
        Mode::NoCamr,
        Mode::NoContent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Corrected => "corrected",
            Mode::Bypass => "bypass",
            Mode::Passive => "passive",
            Mode::NoCle => "no-cle",
            Mode::NoCamr => "no-camr",
            Mode::NoContent => "no-content",
        }
    }

    pub fn uses_memory(self) -> bool {
        self != Mode::Bypass
    }

    pub fn uses_cle(self) -> bool {
        !matches!(self, Mode::Bypass | Mode::NoCle)
    }

    pub fn uses_camr(self) -> bool {
        !matches!(self, Mode::Bypass | Mode::NoCamr)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the memory module does when the bank holds no entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyMemory {
    /// Return the prior unchanged.
    #[default]
    Bypass,
    /// Use the prior as its own reference and run the extractor anyway.
    Fallback,
}

/// Model extents and switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: usize,
    pub d_model: usize,
    pub t_window: usize,
    pub t_step: usize,
    pub lambda_drift: f64,
    pub mode: Mode,
    pub empty_memory: EmptyMemory,
    pub memory_capacity: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            d_model: 16,
            t_window: 2,
            t_step: 1,
            lambda_drift: 0.3,
            mode: Mode::Corrected,
            empty_memory: EmptyMemory::Bypass,
            memory_capacity: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.d_model == 0 || self.t_window == 0 || self.t_step == 0 {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Config("memory capacity must be positive".into()));
        }
        if !(self.lambda_drift >= 0.0 && self.lambda_drift.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_drift must be a finite nonnegative number, got {}",
                self.lambda_drift
            )));
        }
        Ok(())
    }

    pub fn patch_area(&self) -> usize {
        self.patch * self.patch
    }
}

/// Learnable matrices keyed by name, in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

enum Init {
    Uniform,
    Zero,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters required by `cfg.mode`, initialized deterministically from `seed`.
    ///
    /// Projections draw from U(±(1/fan_in)^½). The extractor output map,
    /// the positional table and the attention value map start at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let pa = cfg.patch_area();
        let mut specs: Vec<(&str, usize, usize, Init)> = vec![
            (names::ENCODER, pa * cfg.t_window, d, Init::Uniform),
            (names::DECODER, d, pa * cfg.t_step, Init::Uniform),
        ];
        let mode = cfg.mode;
        if mode.uses_memory() {
            if mode.uses_cle() {
                specs.extend([
                    (names::W_PRE, d, d, Init::Uniform),
                    (names::W_REF, d, d, Init::Uniform),
                    (names::W_DELTA, d, d, Init::Uniform),
                    (names::W_INIT, 2 * d, d, Init::Uniform),
                    (names::W_OUT, d, d, Init::Zero),
                ]);
            } else {
                specs.extend([
                    (names::ATTN_Q, d, d, Init::Uniform),
                    (names::ATTN_K, d, d, Init::Uniform),
                    (names::ATTN_V, d, d, Init::Zero),
                ]);
            }
            if mode.uses_camr() {
                specs.extend([
                    (names::W_K, d, d, Init::Uniform),
                    (names::W_C, d, d, Init::Uniform),
                    (names::W_H, d, d, Init::Uniform),
                    (names::W_AGG, d, d, Init::Uniform),
                    (names::POS_TABLE, cfg.memory_capacity, d, Init::Zero),
                ]);
                if mode != Mode::NoContent {
                    specs.push((names::W_Q, d, d, Init::Uniform));
                } else {
                    specs.retain(|s| s.0 != names::W_K);
                }
            }
            if mode == Mode::Passive {
                specs.push((names::W_FUSE, 2 * d, d, Init::Uniform));
            } else {
                specs.push((names::W_CORR, 2 * d, d, Init::Uniform));
            }
        }
        specs.sort_by(|a, b| a.0.cmp(b.0));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, rows, cols, init) in specs {
            let t = match init {
                Init::Zero => Tensor::zeros(rows, cols),
                Init::Uniform => uniform(&mut rng, rows, cols),
            };
            store.insert(name, t);
        }
        Ok(store)
    }

    /// Redraw every parameter from U(±(1/fan_in)^½), including the ones
    /// that normally start at zero.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.entries.values_mut() {
            *t = uniform(&mut rng, t.rows(), t.cols());
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load a parameter onto `tape` as a tracked leaf.
    pub fn bind(&self, tape: &mut GradTape, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?.clone()))
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (1.0 / rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::raw(rows, cols, data)
}
