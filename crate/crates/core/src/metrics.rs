//! Forecast verification: contingency-table scores, SSIM, MAE and MSE,
//! per lead time and aggregated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthio::FrameSequence;

/// Thresholds used for the SEVIR VIL benchmark, in raw 0..255 pixel units.
pub const SEVIR_THRESHOLDS: [f64; 6] = [16.0, 74.0, 133.0, 160.0, 181.0, 219.0];
/// Thresholds used for MeteoNet reflectivity, in dBZ.
pub const METEONET_THRESHOLDS: [f64; 4] = [12.0, 18.0, 24.0, 32.0];

/// Named threshold set, if known.
pub fn threshold_preset(name: &str) -> Option<&'static [f64]> {
    match name {
        "sevir" => Some(&SEVIR_THRESHOLDS),
        "meteonet" => Some(&METEONET_THRESHOLDS),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Contingency {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, o: Contingency) -> Contingency {
        Contingency {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Counts over two equally long slices, binarized with `>= tau`.
pub fn contingency_of(pred: &[f64], target: &[f64], tau: f64) -> Result<Contingency> {
    if pred.len() != target.len() {
        return Err(Error::dim(
            "contingency",
            format!("{} vs {} values", pred.len(), target.len()),
        ));
    }
    let mut c = Contingency::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (p >= tau, t >= tau) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn contingency(pred: &FrameSequence, target: &FrameSequence, tau: f64) -> Result<Contingency> {
    same_extents(pred, target, "contingency")?;
    contingency_of(pred.values(), target.values(), tau)
}

/// `TP / (TP + FN + FP)`, zero when no event was forecast or observed.
pub fn csi(c: &Contingency) -> f64 {
    let den = c.tp + c.fn_ + c.fp;
    if den == 0 {
        0.0
    } else {
        c.tp as f64 / den as f64
    }
}

pub fn csi_mean(pred: &FrameSequence, target: &FrameSequence, thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Config("empty threshold set".into()));
    }
    let mut total = 0.0;
    for &tau in thresholds {
        total += csi(&contingency(pred, target, tau)?);
    }
    Ok(total / thresholds.len() as f64)
}

/// Heidke skill score, zero when the denominator vanishes.
pub fn hss(c: &Contingency) -> f64 {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let den = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
    if den == 0.0 {
        0.0
    } else {
        2.0 * (tp * tn - fn_ * fp) / den
    }
}

/// HSS per threshold, averaged.
pub fn hss_mean(pred: &FrameSequence, target: &FrameSequence, thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Config("empty threshold set".into()));
    }
    let mut total = 0.0;
    for &tau in thresholds {
        total += hss(&contingency(pred, target, tau)?);
    }
    Ok(total / thresholds.len() as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - c;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` field.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|j| k[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// SSIM of one `h × w` frame pair with a Gaussian window (σ = 1.5, 11 wide,
/// narrowed to the largest odd size that fits smaller frames) and data
/// range 1.
pub fn ssim_frame(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w || h == 0 || w == 0 {
        return Err(Error::dim("ssim", format!("frame {h}x{w} vs {} / {} values", x.len(), y.len())));
    }
    let m = h.min(w);
    let size = SSIM_WINDOW.min(if m % 2 == 1 { m } else { m - 1 });
    let k = gaussian_kernel(size);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cxy = sxy[i] - a * b;
        total += ((2.0 * a * b + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((a * a + b * b + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

pub fn ssim_per_frame(pred: &FrameSequence, target: &FrameSequence) -> Result<Vec<f64>> {
    same_extents(pred, target, "ssim")?;
    let (h, w) = (pred.height(), pred.width());
    (0..pred.len())
        .into_par_iter()
        .map(|t| ssim_frame(pred.frame(t), target.frame(t), h, w))
        .collect()
}

/// Frame-wise SSIM averaged over the sequence.
pub fn ssim(pred: &FrameSequence, target: &FrameSequence) -> Result<f64> {
    let v = ssim_per_frame(pred, target)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadSeries {
    pub per_lead: Vec<f64>,
    pub overall: f64,
}

fn per_frame(
    pred: &FrameSequence,
    target: &FrameSequence,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<LeadSeries> {
    same_extents(pred, target, op)?;
    let per_lead: Vec<f64> = (0..pred.len())
        .map(|t| {
            let (a, b) = (pred.frame(t), target.frame(t));
            a.iter().zip(b).map(|(&p, &q)| f(p, q)).sum::<f64>() / a.len() as f64
        })
        .collect();
    let overall = per_lead.iter().sum::<f64>() / per_lead.len() as f64;
    Ok(LeadSeries { per_lead, overall })
}

/// Mean absolute error per lead time and overall.
pub fn mae(pred: &FrameSequence, target: &FrameSequence) -> Result<LeadSeries> {
    per_frame(pred, target, "mae", |p, q| (p - q).abs())
}

/// Mean squared error per lead time and overall.
pub fn mse_per_lead(pred: &FrameSequence, target: &FrameSequence) -> Result<LeadSeries> {
    per_frame(pred, target, "mse", |p, q| (p - q) * (p - q))
}

fn same_extents(a: &FrameSequence, b: &FrameSequence, op: &'static str) -> Result<()> {
    if a.extents() != b.extents() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.extents(), b.extents())));
    }
    Ok(())
}

/// Scores for one lead time or for the whole horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// CSI per threshold.
    pub csi: Vec<f64>,
    pub csi_m: f64,
    pub hss: f64,
    pub ssim: f64,
    pub mae: f64,
    pub mse: f64,
}

/// Scores over a test set. Contingency counts are pooled over sequences
/// (and over leads for the aggregate); SSIM, MAE and MSE are averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastScores {
    pub thresholds: Vec<f64>,
    pub per_lead: Vec<Scores>,
    pub overall: Scores,
}

fn scores_from(counts: &[Contingency], ssim: f64, mae: f64, mse: f64) -> Scores {
    let csi_v: Vec<f64> = counts.iter().map(csi).collect();
    let hss_v: f64 = counts.iter().map(hss).sum::<f64>() / counts.len() as f64;
    Scores {
        csi_m: csi_v.iter().sum::<f64>() / csi_v.len() as f64,
        csi: csi_v,
        hss: hss_v,
        ssim,
        mae,
        mse,
    }
}

pub fn score_forecasts(
    preds: &[FrameSequence],
    targets: &[FrameSequence],
    thresholds: &[f64],
) -> Result<ForecastScores> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::dim(
            "score_forecasts",
            format!("{} forecasts for {} targets", preds.len(), targets.len()),
        ));
    }
    if thresholds.is_empty() {
        return Err(Error::Config("empty threshold set".into()));
    }
    let leads = targets[0].len();
    for (p, t) in preds.iter().zip(targets) {
        same_extents(p, t, "score_forecasts")?;
        if t.len() != leads {
            return Err(Error::dim("score_forecasts", "targets differ in length"));
        }
    }
    struct PerSeq {
        counts: Vec<Vec<Contingency>>,
        ssim: Vec<f64>,
        mae: Vec<f64>,
        mse: Vec<f64>,
    }
    let parts: Vec<PerSeq> = preds
        .par_iter()
        .zip(targets.par_iter())
        .map(|(p, t)| {
            let counts = (0..leads)
                .map(|k| {
                    thresholds
                        .iter()
                        .map(|&tau| contingency_of(p.frame(k), t.frame(k), tau))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PerSeq {
                counts,
                ssim: ssim_per_frame(p, t)?,
                mae: mae(p, t)?.per_lead,
                mse: mse_per_lead(p, t)?.per_lead,
            })
        })
        .collect::<Result<_>>()?;

    let n = parts.len() as f64;
    let nt = thresholds.len();
    let mut per_lead = Vec::with_capacity(leads);
    let mut all_counts = vec![Contingency::default(); nt];
    let (mut s_all, mut a_all, mut m_all) = (0.0, 0.0, 0.0);
    for k in 0..leads {
        let mut counts = vec![Contingency::default(); nt];
        let (mut s, mut a, mut m) = (0.0, 0.0, 0.0);
        for part in &parts {
            for (acc, c) in counts.iter_mut().zip(&part.counts[k]) {
                *acc = acc.merge(*c);
            }
            s += part.ssim[k];
            a += part.mae[k];
            m += part.mse[k];
        }
        for (acc, c) in all_counts.iter_mut().zip(&counts) {
            *acc = acc.merge(*c);
        }
        s_all += s;
        a_all += a;
        m_all += m;
        per_lead.push(scores_from(&counts, s / n, a / n, m / n));
    }
    let denom = n * leads as f64;
    Ok(ForecastScores {
        thresholds: thresholds.to_vec(),
        overall: scores_from(&all_counts, s_all / denom, a_all / denom, m_all / denom),
        per_lead,
    })
}

/// One line of a metrics CSV. `threshold` is set only for per-threshold
/// CSI; `lead_time` is `None` for the aggregate over the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub mode: String,
    pub metric: String,
    pub threshold: Option<f64>,
    pub lead_time: Option<usize>,
    pub value: f64,
}

impl ForecastScores {
    pub fn to_rows(&self, run_id: &str, mode: &str) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        let mut push = |lead: Option<usize>, s: &Scores| {
            let row = |metric: &str, threshold: Option<f64>, value: f64| MetricRow {
                run_id: run_id.to_string(),
                mode: mode.to_string(),
                metric: metric.to_string(),
                threshold,
                lead_time: lead,
                value,
            };
            for (&tau, &v) in self.thresholds.iter().zip(&s.csi) {
                rows.push(row("csi", Some(tau), v));
            }
            rows.push(row("csi_m", None, s.csi_m));
            rows.push(row("hss", None, s.hss));
            rows.push(row("ssim", None, s.ssim));
            rows.push(row("mae", None, s.mae));
            rows.push(row("mse", None, s.mse));
        };
        for (k, s) in self.per_lead.iter().enumerate() {
            push(Some(k + 1), s);
        }
        push(None, &self.overall);
        rows
    }
}

/// Render rows as CSV with `#`-prefixed header lines. Missing thresholds
/// are empty and the aggregate lead time is written as `all`.
pub fn metrics_csv(rows: &[MetricRow], header: &[String]) -> Result<String> {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "mode", "metric", "threshold", "lead_time", "value"])?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.mode.clone(),
            r.metric.clone(),
            r.threshold.map(|t| format!("{t}")).unwrap_or_default(),
            r.lead_time.map(|l| l.to_string()).unwrap_or_else(|| "all".into()),
            format!("{:.12e}", r.value),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    out.push_str(std::str::from_utf8(&bytes).expect("csv output is utf-8"));
    Ok(out)
}
