//! Independent reference implementations used by the integration tests.
//! Nothing in this file calls into the solver, tape, or network code under
//! test; `checks` holds the measurements that do.

#![allow(dead_code)]

pub mod checks;

use gnmf::factormer::{ModelConfig, ModelParams};
use gnmf::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    use rand_distr::{Distribution, StandardNormal};
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// A random NNLS instance `(W, V)` with `m, n ≤ 8`, `r ≤ min(3, m)`,
/// Gaussian `W` and `V`. Draws are rejected until the smallest eigenvalue
/// of `WᵀW` is at least 0.05, since fixed-ρ ADMM contracts at roughly
/// `ρ/(ρ + λ_min)` per iteration.
pub fn nnls_instance(seed: u64) -> (DenseMatrix, DenseMatrix) {
    let mut rng = rng(seed);
    loop {
        let r = rng.random_range(1..=3);
        let m = rng.random_range(r..=8);
        let n = rng.random_range(1..=8);
        let w = gaussian(&mut rng, m, r);
        let v = gaussian(&mut rng, m, n);
        let na = nalgebra::DMatrix::from_row_slice(m, r, w.data());
        let gram = na.transpose() * &na;
        let lmin = gram.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        if lmin >= 0.05 {
            return (w, v);
        }
    }
}

pub fn to_vecs(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn from_vecs(v: &[Vec<f64>]) -> DenseMatrix {
    DenseMatrix::from_rows(v).unwrap()
}

/// Triple-loop `A Bᵀ`.
pub fn mul_abt(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|ra| b.iter().map(|rb| ra.iter().zip(rb).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

pub fn half_sq_residual(w: &[Vec<f64>], h: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    let p = mul_abt(w, h);
    0.5 * p
        .iter()
        .zip(v)
        .flat_map(|(pr, vr)| pr.iter().zip(vr).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
}

/// Projected gradient descent for `min_{H ≥ 0} ½‖W Hᵀ − V‖²` with step
/// `1/L`, `L` the largest eigenvalue of `WᵀW` (from power iteration).
pub fn nnls_projected_gradient(w: &[Vec<f64>], v: &[Vec<f64>], iters: usize) -> Vec<Vec<f64>> {
    let (m, r) = (w.len(), w[0].len());
    let n = v[0].len();
    let mut g = vec![vec![0.0; r]; r];
    for a in 0..r {
        for b in 0..r {
            g[a][b] = (0..m).map(|i| w[i][a] * w[i][b]).sum();
        }
    }
    let mut x = vec![1.0; r];
    let mut lmax = 0.0;
    for _ in 0..500 {
        let y: Vec<f64> = (0..r).map(|a| (0..r).map(|b| g[a][b] * x[b]).sum()).collect();
        let norm = y.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lmax = norm / x.iter().map(|t| t * t).sum::<f64>().sqrt();
        x = y.iter().map(|t| t / norm).collect();
    }
    let step = 1.0 / lmax.max(1e-12);
    // WᵀV, r×n
    let wtv: Vec<Vec<f64>> = (0..r)
        .map(|a| (0..n).map(|j| (0..m).map(|i| w[i][a] * v[i][j]).sum()).collect())
        .collect();
    let mut h = vec![vec![0.0; r]; n];
    for _ in 0..iters {
        for j in 0..n {
            let grad: Vec<f64> = (0..r)
                .map(|a| (0..r).map(|b| g[a][b] * h[j][b]).sum::<f64>() - wtv[a][j])
                .collect();
            for a in 0..r {
                h[j][a] = (h[j][a] - step * grad[a]).max(0.0);
            }
        }
    }
    h
}

/// Leading singular triplet by power iteration on `AᵀA`.
pub fn leading_singular(a: &[Vec<f64>]) -> (f64, Vec<f64>, Vec<f64>) {
    let (m, n) = (a.len(), a[0].len());
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..5000 {
        let av: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a[i][j] * v[j]).sum()).collect();
        let atav: Vec<f64> = (0..n).map(|j| (0..m).map(|i| a[i][j] * av[i]).sum()).collect();
        let norm = atav.iter().map(|t| t * t).sum::<f64>().sqrt();
        v = atav.iter().map(|t| t / norm).collect();
    }
    let av: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a[i][j] * v[j]).sum()).collect();
    let sigma = av.iter().map(|t| t * t).sum::<f64>().sqrt();
    let u = av.iter().map(|t| t / sigma).collect();
    (sigma, u, v)
}

fn param(p: &ModelParams, name: &str) -> Vec<Vec<f64>> {
    to_vecs(p.get(name).unwrap_or_else(|| panic!("missing {name}")))
}

fn vecmat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    (0..w[0].len()).map(|c| x.iter().zip(w).map(|(a, row)| a * row[c]).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / d;
    let s = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(k, t)| (t - mu) / s * gain[k] + bias[k])
        .collect()
}

/// One Factormer layer evaluated edge by edge: every implicit edge feature
/// `[x_i ⊙ x_j, e_ij]` is built explicitly and projected. Returns the
/// updated target features and, per head, the `m×n` attention weights.
pub fn explicit_factormer(
    src: &[Vec<f64>],
    tgt: &[Vec<f64>],
    edges: &[Vec<f64>],
    p: &ModelParams,
    cfg: &ModelConfig,
    layer: usize,
    last: bool,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (m, n) = (src.len(), tgt.len());
    let scale = cfg.attention_scale();
    let mut messages = vec![Vec::new(); n];
    let mut attention = Vec::new();
    for head in 0..cfg.heads {
        let pre = format!("layers.{layer}.heads.{head}");
        let wq = param(p, &format!("{pre}.query.weight"));
        let bq = &param(p, &format!("{pre}.query.bias"))[0];
        let wk = param(p, &format!("{pre}.node_key.weight"));
        let wv = param(p, &format!("{pre}.node_value.weight"));
        let bv = &param(p, &format!("{pre}.node_value.bias"))[0];
        let wke = param(p, &format!("{pre}.edge_key.weight"));
        let wve = param(p, &format!("{pre}.edge_value.weight"));
        let bve = &param(p, &format!("{pre}.edge_value.bias"))[0];
        let mut alpha = vec![vec![0.0; n]; m];
        for j in 0..n {
            let q = add(&vecmat(&tgt[j], &wq), bq);
            let mut scores = Vec::with_capacity(m);
            let mut values = Vec::with_capacity(m);
            for i in 0..m {
                let mut e: Vec<f64> = src[i].iter().zip(&tgt[j]).map(|(a, b)| a * b).collect();
                e.push(edges[i][j]);
                let key = add(&vecmat(&src[i], &wk), &vecmat(&e, &wke));
                scores.push(scale * dot(&q, &key));
                let val = add(&add(&vecmat(&src[i], &wv), bv), &add(&vecmat(&e, &wve), bve));
                values.push(val);
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut msg = vec![0.0; bq.len()];
            for i in 0..m {
                alpha[i][j] = exps[i] / total;
                for (k, x) in msg.iter_mut().enumerate() {
                    *x += alpha[i][j] * values[i][k];
                }
            }
            messages[j].extend(msg);
        }
        attention.push(alpha);
    }
    let pre = format!("layers.{layer}");
    let g1 = &param(p, &format!("{pre}.norm1.gain"))[0];
    let b1 = &param(p, &format!("{pre}.norm1.bias"))[0];
    let g2 = &param(p, &format!("{pre}.norm2.gain"))[0];
    let b2 = &param(p, &format!("{pre}.norm2.bias"))[0];
    let wi = param(p, &format!("{pre}.ffn_in.weight"));
    let bi = &param(p, &format!("{pre}.ffn_in.bias"))[0];
    let wo = param(p, &format!("{pre}.ffn_out.weight"));
    let bo = &param(p, &format!("{pre}.ffn_out.bias"))[0];
    let out = (0..n)
        .map(|j| {
            let x1 = layer_norm(&add(&tgt[j], &messages[j]), g1, b1);
            let hidden: Vec<f64> = add(&vecmat(&x1, &wi), bi).into_iter().map(|t| t.max(0.0)).collect();
            let y = add(&x1, &add(&vecmat(&hidden, &wo), bo));
            if last {
                y
            } else {
                layer_norm(&y, g2, b2)
            }
        })
        .collect();
    (out, attention)
}
