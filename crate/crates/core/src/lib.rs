//! Drift-corrective memory bank for autoregressive latent forecasting.
//!
//! A forecaster encodes a context window to a latent `Z⁻`, the memory
//! module corrects it using the posteriors of earlier rollout steps, and
//! the decoder turns the corrected latent into the next frames. The crate
//! contains the mechanism ([`cle`], [`camr`], [`dcbank`]), the bank
//! ([`membank`]), a linear patch backbone and rollout ([`rollout`]),
//! training ([`train`]), a synthetic advection dataset ([`synthio`]),
//! verification scores ([`metrics`]) and the command-line front end
//! ([`cli`]).

pub mod camr;
pub mod cle;
pub mod cli;
pub mod dcbank;
pub mod error;
pub mod membank;
pub mod metrics;
pub mod numcore;
pub mod params;
pub mod rollout;
pub mod synthio;
pub mod train;

pub use dcbank::{apply, prop1_audit, prop1_check, AuditPairs, AuditReport, DcbankParams, Prop1Report};
pub use error::{Error, Result};
pub use membank::MemoryBank;
pub use numcore::{GradTape, Tensor, Var};
pub use params::{EmptyMemory, Mode, ModelConfig, ParamStore};
pub use rollout::{FrameGeometry, Model, RolloutTrace};
pub use synthio::{AdvectionConfig, Dataset, FrameSequence};

/// Name and version written into every output file.
pub fn tool_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}
