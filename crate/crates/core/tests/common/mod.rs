#![allow(dead_code)]

use std::f64::consts::PI;

use apslstm::{StationGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn star_graph(n: usize) -> StationGraph {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n - 1 {
        a.set(&[i, n - 1], 1.0 + 0.1 * i as f64);
        a.set(&[n - 1, i], 1.0 + 0.1 * i as f64);
    }
    StationGraph::new((0..n).map(|i| format!("s{i}")).collect(), a, n - 1).unwrap()
}

/// Random spanning tree plus extra random edges; always connected.
pub fn random_connected(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 1..n {
        let j = rng.random_range(0..i);
        let w = rng.random_range(0.1..2.0);
        a.set(&[i, j], w);
        a.set(&[j, i], w);
    }
    for _ in 0..n {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if i != j {
            let w = rng.random_range(0.1..2.0);
            a.set(&[i, j], w);
            a.set(&[j, i], w);
        }
    }
    a
}

/// O(T²) DFT magnitudes of each column of `[T, N]`, averaged over columns.
pub fn direct_dft(x: &Tensor) -> Vec<f64> {
    let (t_len, n) = (x.shape()[0], x.shape()[1]);
    (0..t_len)
        .map(|f| {
            (0..n)
                .map(|c| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for t in 0..t_len {
                        let ang = -2.0 * PI * (f * t) as f64 / t_len as f64;
                        re += x.at(&[t, c]) * ang.cos();
                        im += x.at(&[t, c]) * ang.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// Row-wise softmax of a square matrix given as nested vectors.
fn softmax_rows(m: &mut [Vec<f64>]) {
    for row in m.iter_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tot: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - mx).exp() / tot;
        }
    }
}

pub struct Qkv<'a> {
    pub w: [&'a Tensor; 3],
    pub b: [&'a Tensor; 3],
}

/// Periodic attention by explicit loops. `x` is `[pn, pl, N]`, kernels
/// `[N, N, kh, kw]`. Returns (`[pn, pl, N]` output, per-station `pn × pn` scores).
pub fn psa_loops(x: &Tensor, p: &Qkv) -> (Tensor, Vec<Vec<Vec<f64>>>) {
    let (pn, pl, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let conv = |w: &Tensor, b: &Tensor| -> Vec<f64> {
        let (kh, kw) = (w.shape()[2] as isize, w.shape()[3] as isize);
        let mut out = vec![0.0; n * pn * pl];
        for co in 0..n {
            for i in 0..pn as isize {
                for j in 0..pl as isize {
                    let mut acc = b.data()[co];
                    for ci in 0..n {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let (ii, jj) = (i + a - kh / 2, j + bb - kw / 2);
                                if ii >= 0 && jj >= 0 && ii < pn as isize && jj < pl as isize {
                                    acc += w.at(&[co, ci, a as usize, bb as usize])
                                        * x.at(&[ii as usize, jj as usize, ci]);
                                }
                            }
                        }
                    }
                    out[(co * pn + i as usize) * pl + j as usize] = acc;
                }
            }
        }
        out
    };
    let q = conv(p.w[0], p.b[0]);
    let k = conv(p.w[1], p.b[1]);
    let v = conv(p.w[2], p.b[2]);
    let at = |buf: &[f64], c: usize, i: usize, j: usize| buf[(c * pn + i) * pl + j];
    let mut out = Tensor::zeros(&[pn, pl, n]);
    let mut all_scores = Vec::new();
    for c in 0..n {
        let mut s = vec![vec![0.0; pn]; pn];
        for i in 0..pn {
            for j in 0..pn {
                let dot: f64 = (0..pl).map(|d| at(&q, c, i, d) * at(&k, c, j, d)).sum();
                s[i][j] = dot / (pl as f64).sqrt();
            }
        }
        softmax_rows(&mut s);
        for i in 0..pn {
            for d in 0..pl {
                let val: f64 = (0..pn).map(|j| s[i][j] * at(&v, c, j, d)).sum();
                out.set(&[i, d, c], val);
            }
        }
        all_scores.push(s);
    }
    (out, all_scores)
}

/// Spatial attention by explicit loops. `x` is `[T, N]`, kernels `[N, N, k]`.
pub fn ssa_loops(x: &Tensor, p: &Qkv) -> (Tensor, Vec<Vec<f64>>) {
    let (t_len, n) = (x.shape()[0], x.shape()[1]);
    let conv = |w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
        let k = w.shape()[2] as isize;
        (0..n)
            .map(|co| {
                (0..t_len as isize)
                    .map(|t| {
                        let mut acc = b.data()[co];
                        for ci in 0..n {
                            for a in 0..k {
                                let tt = t + a - k / 2;
                                if tt >= 0 && tt < t_len as isize {
                                    acc += w.at(&[co, ci, a as usize]) * x.at(&[tt as usize, ci]);
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    };
    let q = conv(p.w[0], p.b[0]);
    let k = conv(p.w[1], p.b[1]);
    let v = conv(p.w[2], p.b[2]);
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..t_len).map(|t| q[i][t] * k[j][t]).sum();
            s[i][j] = dot / (n as f64).sqrt();
        }
    }
    softmax_rows(&mut s);
    let mut out = Tensor::zeros(&[t_len, n]);
    for i in 0..n {
        for t in 0..t_len {
            out.set(&[t, i], (0..n).map(|j| s[i][j] * v[j][t]).sum());
        }
    }
    (out, s)
}
