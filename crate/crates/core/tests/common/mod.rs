//! Independent straight-line re-implementation of the correction step on
//! nested vectors. Shares nothing with the library beyond parameter names.

#![allow(dead_code)]

use std::collections::BTreeMap;

pub type Mat = Vec<Vec<f64>>;

pub fn mat_from(rows: usize, cols: usize, data: &[f64]) -> Mat {
    (0..rows).map(|r| data[r * cols..(r + 1) * cols].to_vec()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect())
        .collect()
}

fn hcat(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().chain(y).copied().collect())
        .collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| f(*v)).collect()).collect()
}

fn column_means(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

fn vec_mat(v: &[f64], m: &Mat) -> Vec<f64> {
    (0..m[0].len())
        .map(|j| v.iter().enumerate().map(|(k, x)| x * m[k][j]).sum())
        .collect()
}

/// Posterior for the full corrected mode, plus retrieval weights when the
/// bank is non-empty.
pub fn corrected_posterior(
    z_prior: &Mat,
    bank: &[Mat],
    params: &BTreeMap<String, Mat>,
    lambda: f64,
) -> (Mat, Option<Vec<f64>>) {
    if bank.is_empty() {
        return (z_prior.clone(), None);
    }
    let p = |n: &str| &params[n];
    let d = z_prior[0].len();
    let z_ref = bank.last().unwrap();

    let delta = zip(z_prior, z_ref, |a, b| a - b);
    let disc = zip(&mm(z_prior, p("cle.w_pre")), &mm(z_ref, p("cle.w_ref")), |a, b| a - b);
    let gate = map(&mm(&hcat(z_prior, z_ref), p("cle.w_init")), logistic);
    let proj = mm(&delta, p("cle.w_delta"));
    let mut fused = z_prior.clone();
    for i in 0..fused.len() {
        for j in 0..d {
            fused[i][j] = gate[i][j] * proj[i][j] + (1.0 - gate[i][j]) * disc[i][j];
        }
    }
    let d_init = mm(&fused, p("cle.w_out"));

    let pos = p("membank.pos_table");
    let view: Vec<Mat> = bank
        .iter()
        .enumerate()
        .map(|(i, e)| e.iter().map(|row| row.iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect())
        .collect();
    let mut drift = vec![map(&view[0], |_| 0.0)];
    for i in 1..view.len() {
        drift.push(zip(&view[i], &view[i - 1], |a, b| a - b));
    }

    let corrected = zip(z_prior, &d_init, |a, b| a + b);
    let q = vec_mat(&column_means(&corrected), p("camr.w_q"));
    let c = vec_mat(&column_means(&delta), p("camr.w_c"));
    let mut scores = Vec::new();
    for (v, h) in view.iter().zip(&drift) {
        let k = vec_mat(&column_means(v), p("camr.w_k"));
        let s_cont = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
        let hp = vec_mat(&column_means(h), p("camr.w_h"));
        let s_drift = -hp.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64;
        scores.push(s_cont + lambda * s_drift);
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let w: Vec<f64> = e.iter().map(|v| v / total).collect();

    let mut agg = map(&view[0], |_| 0.0);
    for (wi, v) in w.iter().zip(&view) {
        agg = zip(&agg, v, |a, b| a + wi * b);
    }
    let d_final = zip(&mm(&agg, p("camr.w_agg")), &d_init, |a, b| a + b);
    let g = map(&mm(&hcat(z_prior, &d_final), p("gate.w_corr")), logistic);
    let mut post = z_prior.clone();
    for i in 0..post.len() {
        for j in 0..d {
            post[i][j] += g[i][j] * d_final[i][j];
        }
    }
    (post, Some(w))
}
