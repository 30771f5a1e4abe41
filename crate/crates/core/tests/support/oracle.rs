//! Straight-line f64 transcriptions of the network equations, written
//! without the tape, used as independent references.
#![allow(dead_code)]

use hemulab::nn::{Attention, EncoderBlock, LayerNorm, Linear, Mlp};
use hemulab::tensor::ParamSet;

pub type Mat = Vec<Vec<f64>>;

/// Standard normal CDF by composite Simpson integration of the density.
pub fn phi_cdf(x: f64) -> f64 {
    let n = 4000;
    let (a, b) = (0.0, x);
    let h = (b - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        let t = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    0.5 + s * h / 3.0
}

pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

fn vals(ps: &ParamSet, id: hemulab::tensor::ParamId) -> Vec<f64> {
    ps.get(id).data().iter().map(|&v| v as f64).collect()
}

pub fn linear(ps: &ParamSet, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = vals(ps, l.weight);
    let b = l.bias.map(|b| vals(ps, b)).unwrap_or_else(|| vec![0.0; l.d_out]);
    (0..l.d_out)
        .map(|j| b[j] + (0..l.d_in).map(|i| x[i] * w[i * l.d_out + j]).sum::<f64>())
        .collect()
}

pub fn layer_norm(ps: &ParamSet, ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let (g, b) = (vals(ps, ln.gamma), vals(ps, ln.beta));
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| g[i] * (v - mu) / (var + 1e-5).sqrt() + b[i])
        .collect()
}

pub fn attention(ps: &ParamSet, a: &Attention, z: &Mat) -> Mat {
    let q: Mat = z.iter().map(|t| linear(ps, &a.q, t)).collect();
    let k: Mat = z.iter().map(|t| linear(ps, &a.k, t)).collect();
    let v: Mat = z.iter().map(|t| linear(ps, &a.v, t)).collect();
    let dh = a.d / a.heads;
    let s = z.len();
    let mut ctx = vec![vec![0.0; a.d]; s];
    for h in 0..a.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..s).map(|j| e[j] / tot * v[j][c]).sum();
            }
        }
    }
    ctx.iter().map(|t| linear(ps, &a.o, t)).collect()
}

pub fn mlp(ps: &ParamSet, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(ps, &m.fc1, x).into_iter().map(gelu).collect();
    linear(ps, &m.fc2, &h)
}

pub fn block(ps: &ParamSet, b: &EncoderBlock, z: &Mat) -> Mat {
    let normed: Mat = z.iter().map(|t| layer_norm(ps, &b.ln1, t)).collect();
    let att = attention(ps, &b.attn, &normed);
    let u: Mat = z.iter().zip(&att).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    u.iter()
        .map(|t| {
            let m = mlp(ps, &b.mlp, &layer_norm(ps, &b.ln2, t));
            t.iter().zip(m).map(|(x, y)| x + y).collect()
        })
        .collect()
}
