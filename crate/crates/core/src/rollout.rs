//! Autoregressive rollout: slide a context window, encode, correct with
//! memory, decode, and write the posterior back to the bank.
//!
//! Frames travel through the tape in patch form (`L × P²` per frame) so
//! windows and losses never need to reassemble full images.

use crate::dcbank::{self, Correction, DcbankParams, StepDiagnostics};
use crate::error::{Error, Result};
use crate::membank::{AccessRecord, MemoryBank};
use crate::numcore::{GradTape, Gradients, Tensor, Var};
use crate::params::{names, Mode, ModelConfig, ParamStore};
use crate::synthio::FrameSequence;

/// Encoder/decoder pair the memory module sits between.
pub trait Backbone {
    /// Context window of `T_w` patch frames to an `L × D` latent.
    fn encode(&self, tape: &mut GradTape, window: &[Var]) -> Result<Var>;
    /// Latent to `T_step` patch frames.
    fn decode(&self, tape: &mut GradTape, z: Var) -> Result<Vec<Var>>;
}

/// Linear patch embedding and unembedding, no token mixing.
#[derive(Clone, Copy, Debug)]
pub struct ToyBackbone {
    pub encoder: Var,
    pub decoder: Var,
    pub t_window: usize,
    pub t_step: usize,
    pub patch_area: usize,
}

impl ToyBackbone {
    pub fn bind(tape: &mut GradTape, store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            encoder: store.bind(tape, names::ENCODER)?,
            decoder: store.bind(tape, names::DECODER)?,
            t_window: cfg.t_window,
            t_step: cfg.t_step,
            patch_area: cfg.patch_area(),
        })
    }
}

impl Backbone for ToyBackbone {
    fn encode(&self, tape: &mut GradTape, window: &[Var]) -> Result<Var> {
        if window.len() != self.t_window {
            return Err(Error::dim(
                "encode",
                format!("window of {} frames, expected {}", window.len(), self.t_window),
            ));
        }
        let mut joined = window[0];
        for &f in &window[1..] {
            joined = tape.concat_cols(joined, f)?;
        }
        tape.matmul(joined, self.encoder)
    }

    fn decode(&self, tape: &mut GradTape, z: Var) -> Result<Vec<Var>> {
        let out = tape.matmul(z, self.decoder)?;
        if self.t_step == 1 {
            return Ok(vec![out]);
        }
        (0..self.t_step)
            .map(|k| tape.slice_cols(out, k * self.patch_area, self.patch_area))
            .collect()
    }
}

/// Tape handles for every step of one rollout.
#[derive(Clone, Debug, Default)]
pub struct RolloutOutput {
    pub predictions: Vec<Var>,
    pub priors: Vec<Var>,
    pub corrections: Vec<Correction>,
}

/// Run `n_steps` rollout steps from `context` (patch frames, oldest first).
///
/// Step `r` (1-based) reads only entries written by steps `< r` and then
/// writes its own posterior under index `r`.
pub fn unroll(
    tape: &mut GradTape,
    backbone: &dyn Backbone,
    params: &DcbankParams,
    bank: &mut MemoryBank,
    context: &[Var],
    t_window: usize,
    n_steps: usize,
) -> Result<RolloutOutput> {
    if !bank.is_empty() {
        return Err(Error::Contract("memory bank must be empty at rollout start".into()));
    }
    if context.len() < t_window {
        return Err(Error::Config(format!(
            "{} context frames for a window of {t_window}",
            context.len()
        )));
    }
    let mut frames = context.to_vec();
    let mut out = RolloutOutput::default();
    for r in 1..=n_steps {
        bank.begin_step(r);
        let window = &frames[frames.len() - t_window..];
        let z_prior = backbone.encode(tape, window)?;
        let correction = dcbank::apply(tape, z_prior, bank, params)?;
        let decoded = backbone.decode(tape, correction.posterior)?;
        bank.write(correction.posterior, r)?;
        frames.extend_from_slice(&decoded);
        out.predictions.extend_from_slice(&decoded);
        out.priors.push(z_prior);
        out.corrections.push(correction);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StepTrace {
    pub step: usize,
    pub prior: Tensor,
    pub posterior: Tensor,
    pub diagnostics: StepDiagnostics,
    /// Decoded patch frames of this step.
    pub frames: Vec<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct RolloutTrace {
    pub steps: Vec<StepTrace>,
    pub access_log: Vec<AccessRecord>,
}

/// Frame extents the model runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameGeometry {
    pub height: usize,
    pub width: usize,
}

/// Parameters plus configuration: the object training and evaluation use.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub geometry: FrameGeometry,
}

/// One sequence's loss and parameter gradients.
pub struct SequenceLoss {
    pub loss: f64,
    pub grads: Gradients,
}

impl Model {
    pub fn new(config: ModelConfig, geometry: FrameGeometry, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Self::from_parts(config, params, geometry)
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore, geometry: FrameGeometry) -> Result<Self> {
        config.validate()?;
        let p = config.patch;
        if geometry.height % p != 0 || geometry.width % p != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch {p}",
                geometry.height, geometry.width
            )));
        }
        Ok(Self {
            config,
            params,
            geometry,
        })
    }

    pub fn tokens(&self) -> usize {
        (self.geometry.height / self.config.patch) * (self.geometry.width / self.config.patch)
    }

    fn patches(&self, seq: &FrameSequence) -> Result<Vec<Tensor>> {
        if seq.height() != self.geometry.height || seq.width() != self.geometry.width {
            return Err(Error::dim(
                "frames",
                format!(
                    "{}x{} frames for a {}x{} model",
                    seq.height(),
                    seq.width(),
                    self.geometry.height,
                    self.geometry.width
                ),
            ));
        }
        (0..seq.len()).map(|t| seq.patchify(t, self.config.patch)).collect()
    }

    fn steps_for(&self, t_out: usize) -> Result<usize> {
        if t_out == 0 || t_out % self.config.t_step != 0 {
            return Err(Error::Config(format!(
                "{t_out} output frames not a positive multiple of t_step {}",
                self.config.t_step
            )));
        }
        Ok(t_out / self.config.t_step)
    }

    /// Bind everything for `mode` onto a fresh tape and unroll.
    fn run_on_tape(
        &self,
        tape: &mut GradTape,
        mode: Mode,
        context: &[Tensor],
        n_steps: usize,
    ) -> Result<(RolloutOutput, MemoryBank, ToyBackbone)> {
        let cfg = ModelConfig {
            mode,
            ..self.config.clone()
        };
        let backbone = ToyBackbone::bind(tape, &self.params, &cfg)?;
        let dparams = DcbankParams::bind(tape, &self.params, &cfg)?;
        let pos = if self.params.contains(names::POS_TABLE) {
            self.params.bind(tape, names::POS_TABLE)?
        } else {
            tape.constant(Tensor::zeros(cfg.memory_capacity, cfg.d_model))
        };
        let mut bank = MemoryBank::new(cfg.memory_capacity, pos);
        let ctx: Vec<Var> = context.iter().map(|t| tape.constant(t.clone())).collect();
        let out = unroll(tape, &backbone, &dparams, &mut bank, &ctx, cfg.t_window, n_steps)?;
        Ok((out, bank, backbone))
    }

    /// Forecast `n_steps · t_step` frames after `x_init` in the configured mode.
    pub fn forecast(&self, x_init: &FrameSequence, n_steps: usize) -> Result<(FrameSequence, RolloutTrace)> {
        self.forecast_mode(x_init, n_steps, self.config.mode)
    }

    pub fn forecast_mode(
        &self,
        x_init: &FrameSequence,
        n_steps: usize,
        mode: Mode,
    ) -> Result<(FrameSequence, RolloutTrace)> {
        self.forecast_inner(x_init, n_steps, mode, None)
    }

    /// Forecast and attach the error-reduction report against the encoded
    /// ground-truth window at every step.
    pub fn forecast_with_targets(
        &self,
        x_init: &FrameSequence,
        y_true: &FrameSequence,
        mode: Mode,
    ) -> Result<(FrameSequence, RolloutTrace)> {
        let n_steps = self.steps_for(y_true.len())?;
        self.forecast_inner(x_init, n_steps, mode, Some(y_true))
    }

    fn forecast_inner(
        &self,
        x_init: &FrameSequence,
        n_steps: usize,
        mode: Mode,
        y_true: Option<&FrameSequence>,
    ) -> Result<(FrameSequence, RolloutTrace)> {
        let context = self.patches(x_init)?;
        let mut tape = GradTape::new();
        let (out, bank, backbone) = self.run_on_tape(&mut tape, mode, &context, n_steps)?;

        let truth = match y_true {
            Some(y) => {
                if y.len() < n_steps * self.config.t_step {
                    return Err(Error::dim("forecast_with_targets", "target sequence too short"));
                }
                let mut all = context.clone();
                all.extend(self.patches(y)?);
                Some(all)
            }
            None => None,
        };

        let t_step = self.config.t_step;
        let t_window = self.config.t_window;
        let mut steps = Vec::with_capacity(n_steps);
        for r in 0..n_steps {
            let correction = &out.corrections[r];
            let mut diagnostics = correction.diagnostics(&tape);
            let prior = tape.value(out.priors[r]).clone();
            let posterior = tape.value(correction.posterior).clone();
            if let Some(all) = &truth {
                let end = context.len() + r * t_step;
                let window: Vec<Var> = all[end - t_window..end]
                    .iter()
                    .map(|t| tape.constant(t.clone()))
                    .collect();
                let z_target = backbone.encode(&mut tape, &window)?;
                diagnostics.prop1 = Some(dcbank::prop1_check(&posterior, &prior, tape.value(z_target))?);
            }
            let frames = out.predictions[r * t_step..(r + 1) * t_step]
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect();
            steps.push(StepTrace {
                step: r + 1,
                prior,
                posterior,
                diagnostics,
                frames,
            });
        }
        let frames: Vec<&Tensor> = out.predictions.iter().map(|&v| tape.value(v)).collect();
        let forecast = FrameSequence::from_patches(
            &frames,
            self.geometry.height,
            self.geometry.width,
            self.config.patch,
        )?;
        let trace = RolloutTrace {
            steps,
            access_log: bank.access_log().to_vec(),
        };
        Ok((forecast, trace))
    }

    /// Mean squared error over all forecast frames of `seq` (first `t_in`
    /// frames are context), with gradients for every parameter.
    pub fn sequence_loss(&self, seq: &FrameSequence, t_in: usize) -> Result<SequenceLoss> {
        if seq.len() <= t_in {
            return Err(Error::Config(format!(
                "sequence of {} frames has nothing after {t_in} context frames",
                seq.len()
            )));
        }
        let n_steps = self.steps_for(seq.len() - t_in)?;
        let patches = self.patches(seq)?;
        let mut tape = GradTape::new();
        let (out, _, _) = self.run_on_tape(&mut tape, self.config.mode, &patches[..t_in], n_steps)?;
        let mut per_frame = Vec::with_capacity(out.predictions.len());
        for (k, &pred) in out.predictions.iter().enumerate() {
            let target = tape.constant(patches[t_in + k].clone());
            let diff = tape.sub(pred, target)?;
            let sq = tape.square(diff);
            per_frame.push(tape.mean(sq));
        }
        let stacked = tape.concat_rows(&per_frame)?;
        let loss = tape.mean(stacked);
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok(SequenceLoss { loss: value, grads })
    }

    /// Loss value only; used by finite-difference checks.
    pub fn sequence_loss_value(&self, seq: &FrameSequence, t_in: usize) -> Result<f64> {
        let n_steps = self.steps_for(seq.len() - t_in)?;
        let patches = self.patches(seq)?;
        let mut tape = GradTape::new();
        let (out, _, _) = self.run_on_tape(&mut tape, self.config.mode, &patches[..t_in], n_steps)?;
        let mut total = 0.0;
        for (k, &pred) in out.predictions.iter().enumerate() {
            let d = tape.value(pred).sub(&patches[t_in + k])?;
            total += d.norm_sq() / d.len() as f64;
        }
        Ok(total / out.predictions.len() as f64)
    }

    /// Encode then decode one window with no memory involved.
    pub fn encode_decode(&self, window: &FrameSequence) -> Result<FrameSequence> {
        let patches = self.patches(window)?;
        let mut tape = GradTape::new();
        let backbone = ToyBackbone::bind(&mut tape, &self.params, &self.config)?;
        let vars: Vec<Var> = patches.into_iter().map(|t| tape.constant(t)).collect();
        let z = backbone.encode(&mut tape, &vars)?;
        let frames = backbone.decode(&mut tape, z)?;
        let values: Vec<&Tensor> = frames.iter().map(|&v| tape.value(v)).collect();
        FrameSequence::from_patches(&values, self.geometry.height, self.geometry.width, self.config.patch)
    }
}
