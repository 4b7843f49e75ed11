//! Multi-head scaled dot-product attention.

use super::ops::{matmul, softmax_in_place};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, model_dim: usize) -> Result<Self> {
        if num_heads == 0 || model_dim == 0 || model_dim % num_heads != 0 {
            return Err(Error::dim(
                "attention_config",
                format!("model width {model_dim} is not divisible into {num_heads} heads"),
            ));
        }
        Ok(Self {
            num_heads,
            model_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim() as f32).sqrt()
    }
}

/// Projection matrices, each `C_i × C_i` and applied as `x · W`. Head `n`
/// owns columns `n·C_h .. (n+1)·C_h` of the query/key/value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn identity(model_dim: usize) -> Self {
        let eye = Tensor::from_fn(&[model_dim, model_dim], |i| {
            if i / model_dim == i % model_dim {
                1.0
            } else {
                0.0
            }
        });
        Self {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        }
    }
}

/// Running statistics over the probability rows produced inside attention.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AttentionProbe {
    pub rows: usize,
    pub max_row_sum_error: f32,
}

impl AttentionProbe {
    pub fn record(&mut self, row: &[f32]) {
        let mut lanes = [0.0f64; 4];
        let chunks = row.chunks_exact(4);
        let mut sum: f64 = chunks.remainder().iter().map(|&p| p as f64).sum();
        for c in chunks {
            for l in 0..4 {
                lanes[l] += c[l] as f64;
            }
        }
        sum += lanes.iter().sum::<f64>();
        self.rows += 1;
        self.max_row_sum_error = self.max_row_sum_error.max((sum - 1.0).abs() as f32);
    }

    pub fn merge(&mut self, other: &AttentionProbe) {
        self.rows += other.rows;
        self.max_row_sum_error = self.max_row_sum_error.max(other.max_row_sum_error);
    }
}

/// Turns a row of scaled scores into attention weights.
pub type RowNormalizer = fn(&mut [f32]);

pub fn multi_head_attention(
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    multi_head_attention_probed(query, key, value, params, cfg, softmax_in_place, None)
}

/// [`multi_head_attention`] with a pluggable row normalizer and an optional probe.
pub fn multi_head_attention_probed(
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    normalize: RowNormalizer,
    mut probe: Option<&mut AttentionProbe>,
) -> Result<Tensor> {
    let c = cfg.model_dim;
    for t in [query, key, value] {
        t.expect_rank(2, "multi_head_attention")?;
        if t.dim(1) != c {
            return Err(Error::dim(
                "multi_head_attention",
                format!("token width {} does not match model width {c}", t.dim(1)),
            ));
        }
    }
    if key.dim(0) != value.dim(0) {
        return Err(Error::dim(
            "multi_head_attention",
            format!("{} keys but {} values", key.dim(0), value.dim(0)),
        ));
    }
    for w in [&params.wq, &params.wk, &params.wv, &params.wo] {
        if w.shape() != [c, c] {
            return Err(Error::dim(
                "multi_head_attention",
                format!("projection {:?} for model width {c}", w.shape()),
            ));
        }
    }

    let q = matmul(query, &params.wq)?;
    let k = matmul(key, &params.wk)?;
    let v = matmul(value, &params.wv)?;
    let (tq, tk) = (query.dim(0), key.dim(0));
    let hd = cfg.head_dim();
    let scale = cfg.scale();

    let mut heads = vec![0.0f32; tq * c];
    let mut qh = vec![0.0f32; tq * hd];
    // Keys and values are stored head-dim major so the inner loops run
    // along the token axis.
    let mut kt = vec![0.0f32; hd * tk];
    let mut vt = vec![0.0f32; hd * tk];
    let mut scores = vec![0.0f32; tk];
    for n in 0..cfg.num_heads {
        let cols = n * hd..(n + 1) * hd;
        gather_columns(q.data(), c, cols.clone(), &mut qh);
        transpose_columns(k.data(), c, cols.clone(), &mut kt);
        transpose_columns(v.data(), c, cols, &mut vt);
        for i in 0..tq {
            let qi = &qh[i * hd..(i + 1) * hd];
            scores.fill(0.0);
            for (d, &a) in qi.iter().enumerate() {
                let a = a * scale;
                for (s, &kv) in scores.iter_mut().zip(&kt[d * tk..(d + 1) * tk]) {
                    *s += a * kv;
                }
            }
            normalize(&mut scores);
            if let Some(p) = probe.as_deref_mut() {
                p.record(&scores);
            }
            for d in 0..hd {
                heads[i * c + n * hd + d] = dot(&scores, &vt[d * tk..(d + 1) * tk]);
            }
        }
    }
    let concat = Tensor::new(&[tq, c], heads)?;
    matmul(&concat, &params.wo)?.finite("multi_head_attention")
}

fn transpose_columns(src: &[f32], width: usize, cols: std::ops::Range<usize>, dst: &mut [f32]) {
    let rows = src.len() / width;
    for (r, row) in src.chunks_exact(width).enumerate() {
        for (d, &v) in row[cols.clone()].iter().enumerate() {
            dst[d * rows + r] = v;
        }
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: f32 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    lanes.iter().sum::<f32>() + tail
}

fn gather_columns(src: &[f32], width: usize, cols: std::ops::Range<usize>, dst: &mut [f32]) {
    let hd = cols.len();
    for (row, out) in src.chunks_exact(width).zip(dst.chunks_exact_mut(hd)) {
        out.copy_from_slice(&row[cols.clone()]);
    }
}
