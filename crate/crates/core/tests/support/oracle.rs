//! Straight scalar-loop reference implementations used as test oracles.
//! Nothing here calls into the library's numeric code.
#![allow(dead_code, clippy::needless_range_loop)]

use smartcast_core::linalg::Matrix;
use smartcast_core::lstm::{LstmLayerParams, Seq2SeqParams};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gate(w: &Matrix, u: &Matrix, b: &[f64], x: &[f64], h: &[f64], j: usize) -> f64 {
    let mut a = b[j];
    for k in 0..x.len() {
        a += w.get(j, k) * x[k];
    }
    for k in 0..h.len() {
        a += u.get(j, k) * h[k];
    }
    a
}

pub fn cell(p: &LstmLayerParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut h_new = vec![0.0; p.hidden_dim];
    let mut c_new = vec![0.0; p.hidden_dim];
    for j in 0..p.hidden_dim {
        let i = sig(gate(&p.w[0], &p.u[0], &p.b[0], x, h, j));
        let f = sig(gate(&p.w[1], &p.u[1], &p.b[1], x, h, j));
        let o = sig(gate(&p.w[2], &p.u[2], &p.b[2], x, h, j));
        let g = gate(&p.w[3], &p.u[3], &p.b[3], x, h, j).tanh();
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

fn dense(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..b.len())
        .map(|r| b[r] + (0..x.len()).map(|k| w.get(r, k) * x[k]).sum::<f64>())
        .collect()
}

/// Encoder over the rows of `input`, repeat the last hidden state `horizon`
/// times into the decoder, then the two dense layers per step.
pub fn seq2seq(p: &Seq2SeqParams, horizon: usize, input: &[f64]) -> Vec<f64> {
    let d = p.encoder.input_dim;
    let mut h = vec![0.0; p.encoder.hidden_dim];
    let mut c = vec![0.0; p.encoder.hidden_dim];
    for x in input.chunks(d) {
        let (h2, c2) = cell(&p.encoder, x, &h, &c);
        h = h2;
        c = c2;
    }
    let context = h;
    let mut hd = vec![0.0; p.decoder.hidden_dim];
    let mut cd = vec![0.0; p.decoder.hidden_dim];
    let mut out = Vec::new();
    for _ in 0..horizon {
        let (h2, c2) = cell(&p.decoder, &context, &hd, &cd);
        hd = h2;
        cd = c2;
        let z = dense(&p.head_hidden.weight, &p.head_hidden.bias, &hd);
        out.push(dense(&p.head_out.weight, &p.head_out.bias, &z)[0]);
    }
    out
}

fn gamma(h: f64, nugget: f64, sill: f64, range: f64) -> f64 {
    if h == 0.0 {
        0.0
    } else {
        nugget + sill * (1.0 - (-3.0 * h * h / (range * range)).exp())
    }
}

/// Dense Gaussian elimination with partial pivoting on an augmented matrix.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r, &s| a[r][col].abs().partial_cmp(&a[s][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Ordinary-kriging `(value, variance, weights)` at `q` from `(x, y, v)` samples.
pub fn krige(samples: &[(f64, f64, f64)], nugget: f64, sill: f64, range: f64, q: (f64, f64)) -> (f64, f64, Vec<f64>) {
    let n = samples.len();
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let mut a = vec![vec![0.0; n + 1]; n + 1];
    let mut b = vec![0.0; n + 1];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = gamma(dist((samples[i].0, samples[i].1), (samples[j].0, samples[j].1)), nugget, sill, range);
        }
        a[i][n] = 1.0;
        a[n][i] = 1.0;
        b[i] = gamma(dist((samples[i].0, samples[i].1), q), nugget, sill, range);
    }
    b[n] = 1.0;
    let x = solve(a, b.clone());
    let value = (0..n).map(|i| x[i] * samples[i].2).sum();
    let variance = (0..n).map(|i| x[i] * b[i]).sum::<f64>() + x[n];
    (value, variance, x[..n].to_vec())
}

/// Brute-force empirical variogram `(bin index, semivariance, pairs)`.
pub fn empirical(samples: &[(f64, f64, f64)], n_bins: usize, max_lag: f64) -> Vec<(usize, f64, usize)> {
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0; n_bins];
    for i in 0..samples.len() {
        for j in 0..samples.len() {
            if j <= i {
                continue;
            }
            let d = ((samples[i].0 - samples[j].0).powi(2) + (samples[i].1 - samples[j].1).powi(2)).sqrt();
            if d > max_lag {
                continue;
            }
            let mut k = (d / (max_lag / n_bins as f64)).floor() as usize;
            if k >= n_bins {
                k = n_bins - 1;
            }
            sums[k] += (samples[i].2 - samples[j].2).powi(2);
            counts[k] += 1;
        }
    }
    (0..n_bins)
        .filter(|&k| counts[k] > 0)
        .map(|k| (k, sums[k] / (2.0 * counts[k] as f64), counts[k]))
        .collect()
}

/// `(NIR − other) / (NIR + other)` in f64, or `None` when undefined.
pub fn normalized_difference(nir: f32, other: f32) -> Option<f64> {
    let (a, b) = (nir as f64, other as f64);
    if a + b == 0.0 {
        None
    } else {
        Some((a - b) / (a + b))
    }
}
