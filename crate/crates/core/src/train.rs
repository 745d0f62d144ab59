//! Loss, AdamW, the training loop, checkpoints and the finite-difference
//! gradient check.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::params::{ModelConfig, ParamStore};
use crate::rollout::{FrameGeometry, Model, SequenceLoss};
use crate::synthio::FrameSequence;

/// Mean squared difference over every element.
pub fn mse_loss(pred: &FrameSequence, target: &FrameSequence) -> Result<f64> {
    if pred.extents() != target.extents() {
        return Err(Error::dim(
            "mse_loss",
            format!("{:?} vs {:?}", pred.extents(), target.extents()),
        ));
    }
    let n = pred.values().len() as f64;
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators for decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if !p.same_shape(g) {
                return Err(Error::dim(
                    "adamw",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *pv -= c.lr * c.weight_decay * *pv;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    pub seed: u64,
    /// Context frames at the start of each sequence.
    pub t_in: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            t_in: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// CSV with `#` comment lines for `header`. When `wall_time` is false the
    /// wall-clock column is written as zero so reruns are byte-identical.
    pub fn to_csv(&self, header: &[String], wall_time: bool) -> Result<String> {
        let mut out = String::new();
        for line in header {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_mse", "val_mse", "wall_seconds"])?;
        for e in &self.epochs {
            let wall = if wall_time { e.wall_seconds } else { 0.0 };
            w.write_record([
                e.epoch.to_string(),
                format!("{:.12e}", e.train_mse),
                format!("{:.12e}", e.val_mse),
                format!("{wall:.3}"),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
        out.push_str(std::str::from_utf8(&bytes).expect("csv output is utf-8"));
        Ok(out)
    }
}

/// Mean loss of `seqs` under `model`, evaluated in parallel.
pub fn evaluate_loss(model: &Model, seqs: &[FrameSequence], t_in: usize) -> Result<f64> {
    if seqs.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = seqs
        .par_iter()
        .map(|s| model.sequence_loss_value(s, t_in))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Averaged loss and gradients of one batch. Per-sequence results are
/// merged in batch order, so the sum is independent of thread scheduling.
pub fn batch_gradients(
    model: &Model,
    batch: &[&FrameSequence],
    t_in: usize,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let parts: Vec<SequenceLoss> = batch
        .par_iter()
        .map(|s| model.sequence_loss(s, t_in))
        .collect::<Result<_>>()?;
    let scale = 1.0 / parts.len() as f64;
    let mut total = 0.0;
    let mut merged: BTreeMap<String, Tensor> = BTreeMap::new();
    for part in parts {
        total += part.loss;
        for (name, g) in part.grads.into_params() {
            match merged.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    merged.insert(name, g);
                }
            }
        }
    }
    for g in merged.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, merged))
}

/// Train end-to-end through the full rollout.
pub fn fit(
    model: &mut Model,
    train: &[FrameSequence],
    val: &[FrameSequence],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    fit_with(model, train, val, cfg, |_| {})
}

/// [`fit`] with a callback after each epoch.
pub fn fit_with(
    model: &mut Model,
    train: &[FrameSequence],
    val: &[FrameSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainingLog> {
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimState::new(cfg.optimizer.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let start = Instant::now();
    let mut global_step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FrameSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = batch_gradients(model, &batch, cfg.t_in)?;
            global_step += 1;
            let gnorm = grads.values().map(Tensor::norm_sq).sum::<f64>();
            if !loss.is_finite() || !gnorm.is_finite() {
                return Err(Error::Divergence {
                    step: global_step,
                    loss,
                });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.params, &grads)?;
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();
        }
        let val_mse = evaluate_loss(model, val, cfg.t_in)?;
        let entry = EpochLog {
            epoch,
            train_mse: epoch_loss / seen as f64,
            val_mse,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Per-parameter outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            coords_per_param: 32,
            seed: 0,
        }
    }
}

/// Compare `analytic` gradients with central differences of `loss_fn`.
///
/// Each parameter is probed at `coords_per_param` random coordinates (all
/// of them if it has fewer). Relative error is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn fd_gradcheck(
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    loss_fn: impl Fn(&ParamStore) -> Result<f64> + Sync,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    for (name, value) in params.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for '{name}'")))?;
        let n = value.len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, opts.coords_per_param).into_vec()
        };
        let errs: Vec<f64> = coords
            .par_iter()
            .map(|&i| {
                let mut probe = params.clone();
                let base = value.data()[i];
                probe.get_mut(name).expect("present").data_mut()[i] = base + opts.eps;
                let up = loss_fn(&probe)?;
                probe.get_mut(name).expect("present").data_mut()[i] = base - opts.eps;
                let down = loss_fn(&probe)?;
                let numeric = (up - down) / (2.0 * opts.eps);
                let a = grad.data()[i];
                Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8))
            })
            .collect::<Result<_>>()?;
        entries.push(GradcheckEntry {
            name: name.clone(),
            coords: coords.len(),
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        });
    }
    Ok(GradcheckReport {
        entries,
        tolerance: opts.tolerance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob file, in bytes.
    pub offset: usize,
}

/// `checkpoint.json`: model description plus the layout of the
/// little-endian `f64` blob file next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub tool: String,
    pub config: serde_json::Value,
    pub model: ModelConfig,
    pub geometry: [usize; 2],
    pub blob: String,
    pub params: Vec<ParamBlob>,
}

pub fn save_checkpoint(path: &Path, model: &Model, config_echo: serde_json::Value) -> Result<CheckpointManifest> {
    let blob_path = path.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let mut bytes = Vec::new();
    let mut params = Vec::new();
    for (name, t) in model.params.iter() {
        params.push(ParamBlob {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&blob_path, &bytes).map_err(|e| Error::io(&blob_path, e))?;
    let manifest = CheckpointManifest {
        tool: crate::tool_version(),
        config: config_echo,
        model: model.config.clone(),
        geometry: [model.geometry.height, model.geometry.width],
        blob: blob_name,
        params,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let blob_path: PathBuf = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let end = p.offset + 8 * p.rows * p.cols;
        if end > bytes.len() {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!(
                    "parameter '{}' needs bytes up to {end}, {} missing",
                    p.name,
                    end - bytes.len()
                ),
            });
        }
        let data = bytes[p.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(p.name.clone(), Tensor::new(p.rows, p.cols, data)?);
    }
    let geometry = FrameGeometry {
        height: manifest.geometry[0],
        width: manifest.geometry[1],
    };
    let model = Model::from_parts(manifest.model.clone(), store, geometry)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_cases() {
        let a = FrameSequence::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = FrameSequence::new(1, 2, 2, vec![0.6, 0.7, 0.8, 0.9]).unwrap();
        assert!((mse_loss(&b, &a).unwrap() - 0.25).abs() < 1e-15);
        let c = FrameSequence::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(mse_loss(&a, &c).is_err());
    }

    fn single(v: Vec<f64>) -> (ParamStore, BTreeMap<String, Tensor>) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(1, v.len(), v).unwrap());
        (p, BTreeMap::new())
    }

    #[test]
    fn zero_grad_no_decay_keeps_params() {
        let (mut p, mut g) = single(vec![1.0, -2.0]);
        g.insert("w".into(), Tensor::zeros(1, 2));
        let mut opt = OptimState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let grads = vec![0.3, -2.0, 1e-3];
        let (mut p, mut g) = single(vec![0.0; 3]);
        g.insert("w".into(), Tensor::row_vector(grads.clone()).unwrap());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let lr = cfg.lr;
        let mut opt = OptimState::new(cfg);
        opt.step(&mut p, &g).unwrap();
        for (got, gv) in p.get("w").unwrap().data().iter().zip(&grads) {
            let expect = -lr * gv / (gv.abs() + 1e-8);
            assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
        }
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        let (mut p, mut g) = single(vec![0.0]);
        g.insert("w".into(), Tensor::scalar(0.7));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimState::new(cfg.clone());
        let mut prev = 0.0;
        for _ in 0..200 {
            opt.step(&mut p, &g).unwrap();
            let cur = p.get("w").unwrap().data()[0];
            let step = prev - cur;
            assert!((step - cfg.lr).abs() < 1e-9 * cfg.lr.max(1.0) + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut p, mut g) = single(vec![0.0, 0.0]);
        g.insert("w".into(), Tensor::zeros(2, 1));
        let mut opt = OptimState::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Dimension { .. })));
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::row_vector(vec![3.0, 4.0]).unwrap());
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g["a"].norm_sq() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradcheck_quadratic_and_mutation() {
        let x = vec![0.5, -1.5, 2.0, 0.25];
        let (p, _) = single(x.clone());
        let loss = |s: &ParamStore| Ok(0.5 * s.get("w")?.norm_sq());
        let mut analytic = BTreeMap::new();
        analytic.insert("w".to_string(), Tensor::row_vector(x).unwrap());
        let report = fd_gradcheck(&p, &analytic, loss, GradcheckOptions::default()).unwrap();
        assert!(report.max_rel_err() < 1e-9, "{report:?}");
        assert!(report.passed());

        let corrupted: BTreeMap<String, Tensor> = analytic
            .iter()
            .map(|(k, v)| (k.clone(), v.scale(1.01)))
            .collect();
        let report = fd_gradcheck(&p, &corrupted, loss, GradcheckOptions::default()).unwrap();
        assert!(!report.passed());
    }
}
