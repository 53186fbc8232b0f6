//! Independent reference implementations used by the test targets.
#![allow(dead_code)]

use num_complex::Complex64;

/// Plain delay-line recurrence with a single tap: each virtual node sees its
/// own value from one input sample earlier plus the masked input.
pub fn reference_loop(input: &[f64], mask: &[f64], eta: f64, nu: f64, f: fn(f64) -> f64) -> Vec<f64> {
    let n = mask.len();
    let mut line = vec![0.0; n];
    for &s in input {
        let mut next = vec![0.0; n];
        for k in 0..n {
            next[k] = f(eta * line[k] + s * (nu * mask[k]));
        }
        line = next;
    }
    line
}

/// Magnitudes of `x · D_d`, where `D_d` keeps every `d`-th column of the
/// `ℓ × ℓ` DFT matrix scaled by `1/ℓ`. The matrix is built explicitly.
pub fn dense_decimated_dft(x: &[Complex64], d: usize) -> Vec<f64> {
    let l = x.len();
    let full: Vec<Vec<Complex64>> = (0..l)
        .map(|r| {
            (0..l)
                .map(|c| {
                    let e = ((r * c) % l) as f64;
                    Complex64::from_polar(1.0 / l as f64, -std::f64::consts::TAU * e / l as f64)
                })
                .collect()
        })
        .collect();
    let cols: Vec<usize> = (0..l).step_by(d).collect();
    cols.iter()
        .map(|&c| (0..l).map(|r| x[r] * full[r][c]).sum::<Complex64>().norm())
        .collect()
}

pub struct Rows {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Rows {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Minimises `‖XW − Y‖² + λ‖W‖²` by gradient descent with a step from a
/// Gershgorin bound on the Hessian. Returns `W` as `N × Q`, row-major.
pub fn ridge_by_descent(x: &Rows, y: &Rows, lambda: f64, iters: usize) -> Vec<f64> {
    let (b, n, q) = (x.rows, x.cols, y.cols);
    let mut xtx = vec![0.0; n * n];
    let mut xty = vec![0.0; n * q];
    for i in 0..b {
        for a in 0..n {
            for c in 0..n {
                xtx[a * n + c] += x.at(i, a) * x.at(i, c);
            }
            for c in 0..q {
                xty[a * q + c] += x.at(i, a) * y.at(i, c);
            }
        }
    }
    let bound = (0..n).map(|a| (0..n).map(|c| xtx[a * n + c].abs()).sum::<f64>()).fold(0.0, f64::max) + lambda;
    let step = 1.0 / bound;
    let mut w = vec![0.0; n * q];
    for _ in 0..iters {
        let mut g = vec![0.0; n * q];
        for a in 0..n {
            for c in 0..q {
                let mut s = lambda * w[a * q + c] - xty[a * q + c];
                for k in 0..n {
                    s += xtx[a * n + k] * w[k * q + c];
                }
                g[a * q + c] = s;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= step * gi;
        }
    }
    w
}

/// Deterministic pseudo-random values in `[-1, 1)` (xorshift).
pub fn values(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

/// Forward pass of a fusion net from its raw parts: per-branch affine map,
/// layer normalisation, scale and shift, merge, then the output head.
pub fn reference_forward(
    branches: &[(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)],
    merge: &[Vec<f64>],
    softmax: bool,
    x: &[f64],
) -> Vec<f64> {
    let mut z = Vec::new();
    for (w, gamma, beta) in branches {
        let a: Vec<f64> = w.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect();
        let mu = a.iter().sum::<f64>() / a.len() as f64;
        let var = a.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / a.len() as f64;
        let sd = (var + 1e-5).sqrt();
        z.extend(a.iter().enumerate().map(|(i, v)| gamma[i] * (v - mu) / sd + beta[i]));
    }
    let cols = merge[0].len();
    let logits: Vec<f64> = (0..cols).map(|c| (0..z.len()).map(|r| z[r] * merge[r][c]).sum()).collect();
    if softmax {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    } else {
        logits.into_iter().map(|v| v.max(0.0)).collect()
    }
}
