//! Command-line front end. Each subcommand is also a public function so
//! experiments can be scripted without spawning processes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or format error,
//! 4 failed check, 5 training divergence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dcbank::{prop1_audit, AuditPairs, AuditReport};
use crate::error::{Error, Result};
use crate::metrics::{metrics_csv, score_forecasts, ForecastScores};
use crate::params::{EmptyMemory, Mode, ModelConfig};
use crate::rollout::{FrameGeometry, Model};
use crate::synthio::{self, AdvectionConfig, Dataset, DatasetManifest, FrameSequence};
use crate::train::{
    self, fd_gradcheck, AdamWConfig, GradcheckOptions, GradcheckReport, TrainConfig, TrainingLog,
};

/// Flat experiment configuration. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Label used in reports; derived from mode, seed and λ when absent.
    pub run_id: Option<String>,
    pub height: usize,
    pub width: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub t_window: usize,
    pub t_step: usize,
    pub patch: usize,
    pub d_model: usize,
    /// Defaults to the number of rollout steps.
    pub memory_capacity: Option<usize>,
    pub lambda_drift: f64,
    pub mode: Mode,
    pub empty_memory: EmptyMemory,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub generator: AdvectionConfig,
    /// CSI/HSS thresholds; the dataset's intensity quantiles when absent.
    pub thresholds: Option<Vec<f64>>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Record elapsed seconds in the training log. Off by default so logs
    /// are reproducible byte for byte.
    pub log_wall_time: bool,
    pub gradcheck_coords: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            run_id: None,
            height: 32,
            width: 32,
            t_in: 5,
            t_out: 20,
            t_window: 2,
            t_step: 1,
            patch: 4,
            d_model: 16,
            memory_capacity: None,
            lambda_drift: 0.3,
            mode: Mode::Corrected,
            empty_memory: EmptyMemory::Bypass,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            clip_norm: 1.0,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            n_train: 200,
            n_val: 20,
            n_test: 50,
            generator: AdvectionConfig::default(),
            thresholds: None,
            data_dir: None,
            out_dir: None,
            log_wall_time: false,
            gradcheck_coords: 32,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.height,
            self.width,
            self.t_in,
            self.t_out,
            self.t_window,
            self.t_step,
            self.patch,
            self.d_model,
            self.batch_size,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("extents and batch_size must be positive".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.t_in < self.t_window {
            return Err(Error::Config(format!(
                "t_in {} shorter than t_window {}",
                self.t_in, self.t_window
            )));
        }
        if self.t_out % self.t_step != 0 {
            return Err(Error::Config(format!(
                "t_out {} not a multiple of t_step {}",
                self.t_out, self.t_step
            )));
        }
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr must be >= 0 and clip_norm > 0".into()));
        }
        self.generator.validate()?;
        self.model_config().validate()
    }

    pub fn n_steps(&self) -> usize {
        self.t_out / self.t_step
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch: self.patch,
            d_model: self.d_model,
            t_window: self.t_window,
            t_step: self.t_step,
            lambda_drift: self.lambda_drift,
            mode: self.mode,
            empty_memory: self.empty_memory,
            memory_capacity: self.memory_capacity.unwrap_or(self.n_steps()),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            clip_norm: self.clip_norm,
            seed: self.seed,
            t_in: self.t_in,
        }
    }

    pub fn geometry(&self) -> FrameGeometry {
        FrameGeometry {
            height: self.height,
            width: self.width,
        }
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-s{}-l{}", self.mode, self.seed, self.lambda_drift))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// `tool=` and `config=` lines for CSV headers.
    pub fn header_lines(&self) -> Vec<String> {
        vec![
            format!("tool={}", crate::tool_version()),
            format!("config={}", serde_json::to_string(self).expect("config serializes")),
        ]
    }

    /// Split a full sequence into context and target.
    pub fn split(&self, seq: &FrameSequence) -> Result<(FrameSequence, FrameSequence)> {
        Ok((seq.slice(0, self.t_in)?, seq.slice(self.t_in, self.t_out)?))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Synthesize train/validation/test splits into `out`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let ds = Dataset::synthesize(
        &cfg.generator,
        [cfg.n_train, cfg.n_val, cfg.n_test],
        cfg.t_in + cfg.t_out,
        cfg.height,
        cfg.width,
    )?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    ds.write(out, cfg.echo(), cfg.generator.seed)
}

fn check_extents(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    let want = [cfg.t_in + cfg.t_out, cfg.height, cfg.width];
    if manifest.extents != want {
        return Err(Error::Format {
            offset: 0,
            message: format!("dataset extents {:?}, config expects {want:?}", manifest.extents),
        });
    }
    Ok(())
}

/// Train a model from scratch; writes `checkpoint.json`, `checkpoint.bin`
/// and `train_log.csv` to `out`.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(Model, TrainingLog)> {
    train_with(cfg, data, out, |e| {
        eprintln!("epoch {:>3}  train {:.6e}  val {:.6e}", e.epoch, e.train_mse, e.val_mse)
    })
}

pub fn train_with(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    on_epoch: impl FnMut(&train::EpochLog),
) -> Result<(Model, TrainingLog)> {
    cfg.validate()?;
    let (ds, manifest) = Dataset::read(data)?;
    check_extents(cfg, &manifest)?;
    let mut model = Model::new(cfg.model_config(), cfg.geometry(), cfg.seed)?;
    let log = train::fit_with(&mut model, &ds.train, &ds.val, &cfg.train_config(), on_epoch)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    train::save_checkpoint(&out.join("checkpoint.json"), &model, cfg.echo())?;
    write_text(
        &out.join("train_log.csv"),
        &log.to_csv(&cfg.header_lines(), cfg.log_wall_time)?,
    )?;
    Ok((model, log))
}

/// Retrieval details of one rollout step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDump {
    pub step: usize,
    pub bypassed: bool,
    pub gate_mean: Option<f64>,
    pub weights: Vec<f64>,
    pub s_cont: Vec<f64>,
    pub s_drift: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDump {
    pub sequence: usize,
    pub steps: Vec<StepDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDump {
    pub tool: String,
    pub config: serde_json::Value,
    pub sequences: Vec<SequenceDump>,
}

/// Everything `compare` needs from one evaluated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tool: String,
    pub run_id: String,
    pub mode: Mode,
    pub lambda_drift: f64,
    pub config: serde_json::Value,
    pub scores: ForecastScores,
}

/// Forecast every test sequence of `data` from the checkpoint.
pub fn forecast_test_set(
    model: &Model,
    cfg: &RunConfig,
    test: &[FrameSequence],
) -> Result<(Vec<FrameSequence>, Vec<SequenceDump>)> {
    let results: Vec<(FrameSequence, SequenceDump)> = test
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let (x, _) = cfg.split(seq)?;
            let (pred, trace) = model.forecast(&x, cfg.n_steps())?;
            let steps = trace
                .steps
                .iter()
                .map(|s| {
                    let r = s.diagnostics.retrieval.clone();
                    StepDump {
                        step: s.step,
                        bypassed: s.diagnostics.bypassed,
                        gate_mean: s.diagnostics.gate_mean,
                        weights: r.as_ref().map(|r| r.weights.clone()).unwrap_or_default(),
                        s_cont: r.as_ref().map(|r| r.s_cont.clone()).unwrap_or_default(),
                        s_drift: r.map(|r| r.s_drift).unwrap_or_default(),
                    }
                })
                .collect();
            Ok((pred, SequenceDump { sequence: i, steps }))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

/// Score the checkpoint on the test split; writes `metrics.csv`,
/// `retrieval.json` and `summary.json` to `out`.
pub fn evaluate(checkpoint: &Path, data: &Path, out: &Path) -> Result<EvalSummary> {
    let (model, manifest) = train::load_checkpoint(checkpoint)?;
    let cfg: RunConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    let (ds, dm) = Dataset::read(data)?;
    check_extents(&cfg, &dm)?;
    let (preds, dumps) = forecast_test_set(&model, &cfg, &ds.test)?;
    let targets: Vec<FrameSequence> = ds
        .test
        .iter()
        .map(|s| cfg.split(s).map(|(_, y)| y))
        .collect::<Result<_>>()?;
    let thresholds = cfg.thresholds.clone().unwrap_or_else(|| ds.thresholds.clone());
    let scores = score_forecasts(&preds, &targets, &thresholds)?;
    let run_id = cfg.run_id();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = scores.to_rows(&run_id, cfg.mode.as_str());
    write_text(&out.join("metrics.csv"), &metrics_csv(&rows, &cfg.header_lines())?)?;
    write_json(
        &out.join("retrieval.json"),
        &RetrievalDump {
            tool: crate::tool_version(),
            config: cfg.echo(),
            sequences: dumps,
        },
    )?;
    let summary = EvalSummary {
        tool: crate::tool_version(),
        run_id,
        mode: cfg.mode,
        lambda_drift: cfg.lambda_drift,
        config: cfg.echo(),
        scores,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Finite-difference check of every parameter on a full rollout of one
/// generated sequence, with all parameters drawn at random so that no
/// gradient is trivially zero.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let seq = synthio::generate(&cfg.generator, 1, cfg.t_in + cfg.t_out, cfg.height, cfg.width)?
        .remove(0);
    let mut model = Model::new(cfg.model_config(), cfg.geometry(), cfg.seed)?;
    model.params.randomize(cfg.seed.wrapping_add(1));
    let analytic = model.sequence_loss(&seq, cfg.t_in)?.grads.into_params();
    let (mcfg, geom, t_in) = (model.config.clone(), model.geometry, cfg.t_in);
    let loss = |p: &crate::params::ParamStore| {
        Model::from_parts(mcfg.clone(), p.clone(), geom)?.sequence_loss_value(&seq, t_in)
    };
    fd_gradcheck(
        &model.params,
        &analytic,
        loss,
        GradcheckOptions {
            coords_per_param: cfg.gradcheck_coords,
            seed: cfg.seed,
            ..GradcheckOptions::default()
        },
    )
}

/// Per-step rates of the error-reduction condition on real rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1StepRow {
    pub step: usize,
    pub n: usize,
    pub condition_rate: f64,
    pub reduced_rate: f64,
    pub violations: usize,
    pub mean_err_before: f64,
    pub mean_err_after: f64,
}

/// Run the checkpoint on the test split with ground-truth targets and
/// tabulate the condition per step; writes `prop1_rollout.csv` to `out`.
pub fn prop1_rollout(checkpoint: &Path, data: &Path, out: &Path) -> Result<Vec<Prop1StepRow>> {
    let (model, manifest) = train::load_checkpoint(checkpoint)?;
    let cfg: RunConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    let (ds, dm) = Dataset::read(data)?;
    check_extents(&cfg, &dm)?;
    let traces: Vec<Vec<Option<crate::dcbank::Prop1Report>>> = ds
        .test
        .par_iter()
        .map(|seq| {
            let (x, y) = cfg.split(seq)?;
            let (_, trace) = model.forecast_with_targets(&x, &y, cfg.mode)?;
            Ok(trace.steps.into_iter().map(|s| s.diagnostics.prop1).collect())
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for step in 0..cfg.n_steps() {
        let reports: Vec<_> = traces.iter().filter_map(|t| t[step]).collect();
        let n = reports.len();
        let nf = n.max(1) as f64;
        rows.push(Prop1StepRow {
            step: step + 1,
            n,
            condition_rate: reports.iter().filter(|r| r.condition_holds).count() as f64 / nf,
            reduced_rate: reports.iter().filter(|r| r.error_reduced()).count() as f64 / nf,
            violations: reports
                .iter()
                .filter(|r| r.condition_holds && !r.error_reduced())
                .count(),
            mean_err_before: reports.iter().map(|r| r.err_before).sum::<f64>() / nf,
            mean_err_after: reports.iter().map(|r| r.err_after).sum::<f64>() / nf,
        });
    }
    let mut text = String::new();
    for line in cfg.header_lines() {
        text.push_str(&format!("# {line}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    text.push_str(std::str::from_utf8(&bytes).expect("utf-8"));
    write_text(&out.join("prop1_rollout.csv"), &text)?;
    Ok(rows)
}

/// Number of final lead times summarized as `mse_late`.
pub const LATE_LEADS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run_id: String,
    pub mode: Mode,
    pub lambda_drift: f64,
    pub csi_m: f64,
    pub hss: f64,
    pub ssim: f64,
    pub mae: f64,
    pub mse: f64,
    /// MSE averaged over the last [`LATE_LEADS`] lead times.
    pub mse_late: f64,
    pub mse_per_lead: Vec<f64>,
    pub csi_m_per_lead: Vec<f64>,
}

impl CompareRow {
    pub fn from_summary(s: &EvalSummary) -> Self {
        let mse_per_lead: Vec<f64> = s.scores.per_lead.iter().map(|l| l.mse).collect();
        let late = &mse_per_lead[mse_per_lead.len().saturating_sub(LATE_LEADS)..];
        Self {
            run_id: s.run_id.clone(),
            mode: s.mode,
            lambda_drift: s.lambda_drift,
            csi_m: s.scores.overall.csi_m,
            hss: s.scores.overall.hss,
            ssim: s.scores.overall.ssim,
            mae: s.scores.overall.mae,
            mse: s.scores.overall.mse,
            mse_late: late.iter().sum::<f64>() / late.len().max(1) as f64,
            csi_m_per_lead: s.scores.per_lead.iter().map(|l| l.csi_m).collect(),
            mse_per_lead,
        }
    }
}

/// Side-by-side table of evaluated runs, one row per run. Per-lead deltas
/// are taken against the first run.
pub fn compare(runs: &[PathBuf], out: &Path) -> Result<Vec<CompareRow>> {
    if runs.is_empty() {
        return Err(Error::Config("compare needs at least one run".into()));
    }
    let mut rows = Vec::new();
    for dir in runs {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: EvalSummary = serde_json::from_str(&text)?;
        rows.push(CompareRow::from_summary(&s));
    }
    let leads = rows[0].mse_per_lead.len();
    if rows.iter().any(|r| r.mse_per_lead.len() != leads) {
        return Err(Error::Format {
            offset: 0,
            message: "runs have different forecast horizons".into(),
        });
    }
    let mut header = vec![
        "run_id", "mode", "lambda_drift", "csi_m", "hss", "ssim", "mae", "mse", "mse_late",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for k in 1..=leads {
        header.push(format!("mse_lead_{k}"));
        header.push(format!("delta_mse_lead_{k}"));
        header.push(format!("csi_m_lead_{k}"));
        header.push(format!("delta_csi_m_lead_{k}"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    let base = rows[0].clone();
    let f = |v: f64| format!("{v:.12e}");
    for r in &rows {
        let mut rec = vec![
            r.run_id.clone(),
            r.mode.to_string(),
            format!("{}", r.lambda_drift),
            f(r.csi_m),
            f(r.hss),
            f(r.ssim),
            f(r.mae),
            f(r.mse),
            f(r.mse_late),
        ];
        for k in 0..leads {
            rec.push(f(r.mse_per_lead[k]));
            rec.push(f(r.mse_per_lead[k] - base.mse_per_lead[k]));
            rec.push(f(r.csi_m_per_lead[k]));
            rec.push(f(r.csi_m_per_lead[k] - base.csi_m_per_lead[k]));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    let mut text = format!("# tool={}\n", crate::tool_version());
    text.push_str(std::str::from_utf8(&bytes).expect("utf-8"));
    write_text(out, &text)?;
    Ok(rows)
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Divergence { .. } => 5,
        Error::Format { .. } | Error::Io { .. } | Error::Csv(_) | Error::Dimension { .. } => 3,
        _ => 1,
    }
}

#[derive(Parser, Debug)]
#[command(name = "dcbank", version, about = "Drift-corrective memory bank experiments")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PairsArg {
    Random,
    Perfect,
    Zero,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint and training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of all gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Audit the error-reduction condition on random pairs or on rollouts.
    Prop1Audit {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PairsArg::Random)]
        pairs: PairsArg,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Tabulate evaluated runs side by side.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parse `std::env::args` and run; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return 2;
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Generate { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let m = generate(&cfg, &out)?;
            println!(
                "wrote {} train / {} val / {} test sequences to {}",
                m.train.len(),
                m.val.len(),
                m.test.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Train {
            config,
            data,
            out,
            mode,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let (_, log) = train(&cfg, &data, &out)?;
            if let Some(last) = log.epochs.last() {
                println!("final train {:.6e} val {:.6e}", last.train_mse, last.val_mse);
            }
            Ok(0)
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
        } => {
            let s = evaluate(&checkpoint, &data, &out)?;
            let o = &s.scores.overall;
            println!(
                "{}: csi_m {:.4} hss {:.4} ssim {:.4} mae {:.5} mse {:.6}",
                s.run_id, o.csi_m, o.hss, o.ssim, o.mae, o.mse
            );
            Ok(0)
        }
        Command::Gradcheck { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = gradcheck(&cfg)?;
            println!("{:<22} {:>6} {:>12}", "parameter", "coords", "max_rel_err");
            for e in &report.entries {
                println!("{:<22} {:>6} {:>12.3e}", e.name, e.coords, e.max_rel_err);
            }
            let ok = report.passed();
            println!("{} (tolerance {:e})", if ok { "PASS" } else { "FAIL" }, report.tolerance);
            Ok(if ok { 0 } else { 4 })
        }
        Command::Prop1Audit {
            trials,
            dim,
            seed,
            pairs,
            checkpoint,
            data,
            out,
        } => {
            if let (Some(ck), Some(data)) = (checkpoint, data) {
                let rows = prop1_rollout(&ck, &data, &out)?;
                let violations: usize = rows.iter().map(|r| r.violations).sum();
                println!("step  condition_rate  reduced_rate");
                for r in &rows {
                    println!("{:>4}  {:>14.3}  {:>12.3}", r.step, r.condition_rate, r.reduced_rate);
                }
                return Ok(if violations == 0 { 0 } else { 4 });
            }
            let pairs = match pairs {
                PairsArg::Random => AuditPairs::Random,
                PairsArg::Perfect => AuditPairs::Perfect,
                PairsArg::Zero => AuditPairs::Zero,
            };
            let r: AuditReport = prop1_audit(trials, dim, seed, pairs);
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(if r.violations == 0 { 0 } else { 4 })
        }
        Command::Compare { runs, out } => {
            let rows = compare(&runs, &out)?;
            for r in &rows {
                println!("{:<28} mse_late {:.6e}", r.run_id, r.mse_late);
            }
            Ok(0)
        }
    }
}
