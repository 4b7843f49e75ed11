//! Slow, index-by-index versions of the heavy kernels.
//!
//! These exist to check the fast paths (tests, `selftest`) and share no code
//! with them. They panic on bad shapes instead of returning errors.

use super::{AttentionConfig, AttentionParams, Tensor};

fn at3(t: &Tensor, a: usize, b: usize, c: usize) -> f32 {
    let s = t.shape();
    t.data()[(a * s[1] + b) * s[2] + c]
}

fn at4(t: &Tensor, a: usize, b: usize, c: usize, d: usize) -> f32 {
    let s = t.shape();
    t.data()[((a * s[1] + b) * s[2] + c) * s[3] + d]
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    assert_eq!(k, b.dim(0));
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let mut acc = 0.0f32;
        for p in 0..k {
            acc += a.data()[i * k + p] * b.data()[p * n + j];
        }
        acc
    })
}

pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let y = matmul(x, w);
    let n = y.dim(1);
    Tensor::from_fn(y.shape(), |i| y.data()[i] + b.data()[i % n])
}

pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (c_out, k) = (weights.dim(0), weights.dim(2));
    assert_eq!(weights.dim(1), c_in);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias.data()[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            let ix = (x * stride + kx) as isize - padding as isize;
                            let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                0.0
                            } else {
                                at3(input, c, iy as usize, ix as usize)
                            };
                            acc += at4(weights, o, c, ky, kx) * v;
                        }
                    }
                }
                out.data_mut()[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

/// Flattens queue and each filter and takes their dot product.
pub fn conv1d_over_queue(queue: &Tensor, weights: &Tensor, bias: &Tensor) -> Tensor {
    let (l, c) = (queue.dim(0), queue.dim(1));
    let c_out = weights.dim(0);
    Tensor::from_fn(&[c_out], |o| {
        let mut acc = bias.data()[o] as f64;
        for ch in 0..c {
            for t in 0..l {
                acc += at3(weights, o, ch, t) as f64 * queue.data()[t * c + ch] as f64;
            }
        }
        acc as f32
    })
}

pub fn depthwise_xcorr(search: &Tensor, template: &Tensor) -> Tensor {
    let (c, hs, ws) = (search.dim(0), search.dim(1), search.dim(2));
    let (ht, wt) = (template.dim(1), template.dim(2));
    let (oh, ow) = (hs - ht + 1, ws - wt + 1);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..ht {
                    for kx in 0..wt {
                        acc += at3(search, ch, y + ky, x + kx) as f64
                            * at3(template, ch, ky, kx) as f64;
                    }
                }
                out.data_mut()[(ch * oh + y) * ow + x] = acc as f32;
            }
        }
    }
    out
}

pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    Tensor::from_fn(&[c], |ch| {
        let mut s = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                s += at3(input, ch, y, x) as f64;
            }
        }
        (s / (h * w) as f64) as f32
    })
}

pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
    let c = input.dim(1);
    let mut out = input.clone();
    for r in 0..input.dim(0) {
        let row: Vec<f64> = input.row(r).iter().map(|&v| v as f64).collect();
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            let n = (row[j] - mean) / (var + eps as f64).sqrt();
            out.data_mut()[r * c + j] = (n * gamma.data()[j] as f64 + beta.data()[j] as f64) as f32;
        }
    }
    out
}

/// One head at a time, slicing `W_q^n`, `W_k^n`, `W_v^n` out of the packed
/// projections and multiplying them explicitly.
pub fn multi_head_attention(
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
) -> Tensor {
    let c = cfg.model_dim;
    let hd = cfg.head_dim();
    let (tq, tk) = (query.dim(0), key.dim(0));
    let project = |x: &Tensor, w: &Tensor, n: usize, row: usize| -> Vec<f64> {
        (0..hd)
            .map(|j| {
                (0..c)
                    .map(|p| x.data()[row * c + p] as f64 * w.data()[p * c + n * hd + j] as f64)
                    .sum()
            })
            .collect()
    };
    let mut cat = vec![0.0f64; tq * c];
    for n in 0..cfg.num_heads {
        let ks: Vec<Vec<f64>> = (0..tk).map(|j| project(key, &params.wk, n, j)).collect();
        let vs: Vec<Vec<f64>> = (0..tk).map(|j| project(value, &params.wv, n, j)).collect();
        for i in 0..tq {
            let qi = project(query, &params.wq, n, i);
            let logits: Vec<f64> = ks
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..hd {
                cat[i * c + n * hd + j] = (0..tk).map(|t| e[t] / z * vs[t][j]).sum();
            }
        }
    }
    Tensor::from_fn(&[tq, c], |idx| {
        let (i, j) = (idx / c, idx % c);
        (0..c)
            .map(|p| cat[i * c + p] * params.wo.data()[p * c + j] as f64)
            .sum::<f64>() as f32
    })
}
