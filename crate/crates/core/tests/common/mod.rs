//! Brute-force reference implementations written directly from the
//! definitions, independent of the library kernels.

#![allow(dead_code)]

use dualtoken::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// `x: H×W×Cin`, `w: kh×kw×(Cin/g)×Cout`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (h, wd, cin): (usize, usize, usize),
    w: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let cig = cin / groups;
    let cog = cout / groups;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let g = co / cog;
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                            continue;
                        }
                        for ci in 0..cig {
                            let xv = x[(iy as usize * wd + ix as usize) * cin + g * cig + ci];
                            let wv = w[((ky * kw + kx) * cig + ci) * cout + co];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    (out, ho, wo)
}

pub fn avgpool(x: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for oy in 0..h / k {
        for ox in 0..w / k {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += x[((oy * k + dy) * w + ox * k + dx) * c + ch];
                    }
                }
                out.push(s / (k * k) as f64);
            }
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// Half-pixel bilinear sampling written as the four-weight blend.
pub fn bilinear(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, inl: usize, outl: usize| {
        let src = ((o as f64 + 0.5) * inl as f64 / outl as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inl - 1);
        let i1 = if i0 + 1 < inl { i0 + 1 } else { i0 };
        let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
        (i0, i1, l)
    };
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, ly) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, lx) = coord(ox, w, ow);
            for ch in 0..c {
                let p = |y: usize, xx: usize| x[(y * w + xx) * c + ch];
                out[(oy * ow + ox) * c + ch] = (1.0 - ly) * (1.0 - lx) * p(y0, x0)
                    + (1.0 - ly) * lx * p(y0, x1)
                    + ly * (1.0 - lx) * p(y1, x0)
                    + ly * lx * p(y1, x1);
            }
        }
    }
    out
}

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]);
        }
    }
    out
}

/// Weights of one linear layer, `cin×cout` row-major, plus optional bias.
pub struct Lin<'a> {
    pub w: &'a [f64],
    pub b: Option<&'a [f64]>,
}

pub fn linear(x: &[f64], n: usize, cin: usize, cout: usize, l: &Lin) -> Vec<f64> {
    let mut y = matmul(x, l.w, n, cin, cout);
    if let Some(b) = l.b {
        for row in y.chunks_mut(cout) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// Multi-head attention from the textbook definition. Returns the output
/// (`nq×c`) and per-head weights (`nq×nk` each).
#[allow(clippy::too_many_arguments)]
pub fn mhsa(
    q_src: &[f64],
    kv_src: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
    wq: &Lin,
    wk: &Lin,
    wv: &Lin,
    wo: &Lin,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let q = linear(q_src, nq, c, c, wq);
    let k = linear(kv_src, nk, c, c, wk);
    let v = linear(kv_src, nk, c, c, wv);
    let d = c / heads;
    let mut merged = vec![0.0; nq * c];
    let mut weights = Vec::new();
    for h in 0..heads {
        let mut wmat = Vec::with_capacity(nq * nk);
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|t| q[i * c + h * d + t] * k[j * c + h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let p = softmax_row(&logits);
            for t in 0..d {
                merged[i * c + h * d + t] = (0..nk).map(|j| p[j] * v[j * c + h * d + t]).sum();
            }
            wmat.extend(p);
        }
        weights.push(wmat);
    }
    (linear(&merged, nq, c, c, wo), weights)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
