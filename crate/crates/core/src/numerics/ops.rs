//! Dense elementwise, reduction, and reshaping kernels.

use super::Tensor;
use crate::error::{Error, Result};

/// `[M×K] · [K×N] -> [M×N]`, accumulated row by row so the inner loop is contiguous.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)?.finite("matmul")
}

/// Raw kernel behind [`matmul`]; `out` is accumulated into, not overwritten.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)?.finite(op)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        let same = p.rank() == rank
            && (0..rank).all(|d| d == axis || p.dim(d) == first.dim(d));
        if !same {
            return Err(Error::dim(
                "concat",
                format!("{:?} incompatible with {:?} on axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.dim(axis)).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.dim(axis) * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, data)
}

/// `C×H×W` map to `(H·W)×C` tokens, row-major over spatial positions.
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    map.expect_rank(3, "map_to_tokens")?;
    let (c, h, w) = (map.dim(0), map.dim(1), map.dim(2));
    let hw = h * w;
    let src = map.data();
    let mut out = vec![0.0f32; hw * c];
    for ch in 0..c {
        for pos in 0..hw {
            out[pos * c + ch] = src[ch * hw + pos];
        }
    }
    Tensor::new(&[hw, c], out)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(tokens: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    tokens.expect_rank(2, "tokens_to_map")?;
    let (t, c) = (tokens.dim(0), tokens.dim(1));
    if t != height * width {
        return Err(Error::dim(
            "tokens_to_map",
            format!("{t} tokens cannot form a {height}x{width} map"),
        ));
    }
    let src = tokens.data();
    let mut out = vec![0.0f32; t * c];
    for pos in 0..t {
        for ch in 0..c {
            out[ch * t + pos] = src[pos * c + ch];
        }
    }
    Tensor::new(&[c, height, width], out)
}

/// Per-channel mean of a `C×H×W` map.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    input.expect_rank(3, "global_avg_pool")?;
    let c = input.dim(0);
    let hw = input.dim(1) * input.dim(2);
    let means = input
        .data()
        .chunks_exact(hw)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(&[c], means)?.finite("global_avg_pool")
}

/// Mean over tokens of a `T×C` tensor, i.e. GAP in token form.
pub fn token_mean(tokens: &Tensor) -> Result<Tensor> {
    tokens.expect_rank(2, "token_mean")?;
    let (t, c) = (tokens.dim(0), tokens.dim(1));
    let mut acc = vec![0.0f64; c];
    for row in tokens.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Tensor::new(&[c], acc.into_iter().map(|s| (s / t as f64) as f32).collect())
}

/// Valid max pooling over each channel of a `C×H×W` map.
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    input.expect_rank(3, "max_pool2d")?;
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
        return Err(Error::dim(
            "max_pool2d",
            format!("kernel {kernel} stride {stride} on {h}x{w}"),
        ));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    let row = &plane[(oy * stride + ky) * w + ox * stride..][..kernel];
                    for &v in row {
                        m = m.max(v);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// `e^x` for `x <= 0` by range reduction and a degree-5 polynomial; within
/// two ulp of `f32::exp` down to `-87`, flushed to zero below. Branch-free so
/// whole rows vectorize.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let xc = if x < -87.0 { -87.0 } else { x };
    let t = xc * std::f32::consts::LOG2_E + ROUND;
    let n = t - ROUND;
    let r = xc - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_2e-4f32;
    p = p * r + 1.398_2e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let poly = p * r * r + r + 1.0;
    let bits = (t.to_bits() as i32).wrapping_sub(ROUND.to_bits() as i32).wrapping_add(127) << 23;
    let y = poly * f32::from_bits(bits as u32);
    if x < -87.0 { 0.0 } else { y }
}

fn row_max(row: &[f32]) -> f32 {
    let mut lanes = [f32::NEG_INFINITY; 8];
    let chunks = row.chunks_exact(8);
    let mut m = chunks.remainder().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for c in chunks {
        for l in 0..8 {
            lanes[l] = if c[l] > lanes[l] { c[l] } else { lanes[l] };
        }
    }
    // NaNs never win a comparison; they still propagate through the sum.
    for l in lanes {
        m = m.max(l);
    }
    m
}

/// Stable softmax of one slice, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row_max(row);
    if !max.is_finite() {
        for v in row.iter_mut() {
            *v = (*v - max).exp();
        }
    } else {
        for v in row.iter_mut() {
            *v = exp_nonpositive(*v - max);
        }
    }
    let mut lanes = [0.0f32; 8];
    let chunks = row.chunks_exact(8);
    let mut sum: f32 = chunks.remainder().iter().sum();
    for c in chunks {
        for l in 0..8 {
            lanes[l] += c[l];
        }
    }
    sum += lanes.iter().sum::<f32>();
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax along the last axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let k = logits.dim(logits.rank() - 1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    out.finite("softmax")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
        }
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-row normalization of a `T×C` tensor with population variance.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    input.expect_rank(2, "layer_norm")?;
    let c = input.dim(1);
    if c < 2 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "input {:?}, gamma {:?}, beta {:?}",
                input.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let mut out = input.clone();
    let (g, b) = (gamma.data(), beta.data());
    for row in out.data_mut().chunks_exact_mut(c) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            let norm = ((*v as f64 - mean) * inv) as f32;
            *v = norm * g[i] + b[i];
        }
    }
    out.finite("layer_norm")
}

pub fn layer_norm_with(input: &Tensor, params: &LayerNormParams) -> Result<Tensor> {
    layer_norm(input, &params.gamma, &params.beta, LAYER_NORM_EPS)
}

/// Weights for `relu(x·W1 + b1)·W2 + b2`; matrices are stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForwardParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, output]),
            b2: Tensor::zeros(&[output]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.dim(0)
    }

    pub fn output_width(&self) -> usize {
        self.w2.dim(1)
    }
}

/// Row-wise affine map `x·W + b` over a `T×C` tensor.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut y = matmul(x, weight)?;
    let n = y.dim(1);
    if bias.shape() != [n] {
        return Err(Error::dim(
            "linear",
            format!("bias {:?} for output width {n}", bias.shape()),
        ));
    }
    for row in y.data_mut().chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    y.finite("linear")
}

/// Two affine layers with a ReLU between them.
pub fn feed_forward(input: &Tensor, params: &FeedForwardParams) -> Result<Tensor> {
    let hidden = relu(&linear(input, &params.w1, &params.b1)?);
    linear(&hidden, &params.w2, &params.b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exp_tracks_libm() {
        let mut worst = 0.0f64;
        for i in 0..=200_000 {
            let x = -87.0 * i as f32 / 200_000.0;
            let want = (x as f64).exp();
            worst = worst.max((exp_nonpositive(x) as f64 - want).abs() / want);
        }
        assert!(worst < 3e-7, "relative error {worst:e}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-100.0), 0.0);
        assert_eq!(exp_nonpositive(f32::NEG_INFINITY), 0.0);
    }
    use crate::numerics::reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform_and_closed_form() {
        let u = softmax(&Tensor::vector(&[0.0, 0.0, 0.0])).unwrap();
        for &v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let p = softmax(&Tensor::vector(&[1.0, 0.0])).unwrap();
        let e = std::f32::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = Tensor::vector(&[0.3, -1.2, 2.5, 0.0]);
        let a = softmax(&x).unwrap();
        let b = softmax(&x.map(|v| v + 7.25)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::vector(&[0.0, f32::NAN]);
        assert!(matches!(softmax(&x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_known_row() {
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = LayerNormParams::identity(3);
        let y = layer_norm(&x, &p.gamma, &p.beta, 0.0).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full(&[2, 4], 3.5);
        let p = LayerNormParams::identity(4);
        let y = layer_norm(&x, &p.gamma, &p.beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_single_channel() {
        let x = Tensor::zeros(&[2, 1]);
        let p = LayerNormParams::identity(1);
        assert!(layer_norm(&x, &p.gamma, &p.beta, 1e-5).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[3, 4, 5], -1.5);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[-1.5, -1.5, -1.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Tensor::randn(&[3, 5, 7], 1.0, &mut rng);
        let fast = global_avg_pool(&r).unwrap();
        let slow = reference::global_avg_pool(&r);
        assert!(fast.max_abs_diff(&slow) < 1e-6);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 16, 3)] {
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let fast = matmul(&a, &b).unwrap();
            assert!(fast.max_abs_diff(&reference::matmul(&a, &b)) < 1e-5);
        }
        let a = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::vector(&[1.0, -2.0, 3.0]);
        let b = Tensor::vector(&[0.5, 4.0, -1.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[1.5, 2.0, 2.0]);
        assert_eq!(mul(&a, &b).unwrap().data(), &[0.5, -8.0, -3.0]);
        assert!(add(&a, &Tensor::zeros(&[2])).is_err());
        let big = Tensor::vector(&[f32::MAX]);
        assert!(matches!(add(&big, &big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn concat_matches_index_oracle() {
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f32);
        let b = Tensor::from_fn(&[2, 1, 2], |i| 100.0 + i as f32);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..2 {
                    let got = c.data()[(i * 4 + j) * 2 + k];
                    let want = if j < 3 {
                        a.data()[(i * 3 + j) * 2 + k]
                    } else {
                        b.data()[i * 2 + k]
                    };
                    assert_eq!(got, want);
                }
            }
        }
        assert!(concat(&[&a, &b], 0).is_err());
    }

    #[test]
    fn token_layout_is_row_major_over_positions() {
        let m = Tensor::from_fn(&[2, 2, 3], |i| i as f32);
        let t = map_to_tokens(&m).unwrap();
        assert_eq!(t.shape(), &[6, 2]);
        // token (y=1, x=2) is position 5; channel 1 lives at 6 + 5
        assert_eq!(t.row(5), &[5.0, 11.0]);
        assert!(tokens_to_map(&t, 3, 2).unwrap().shape() == [2, 3, 2]);
        assert!(tokens_to_map(&t, 4, 2).is_err());
    }

    #[test]
    fn max_pool_shape_and_values() {
        let x = Tensor::from_fn(&[1, 5, 5], |i| i as f32);
        let y = max_pool2d(&x, 3, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 14.0, 22.0, 24.0]);
    }

    #[test]
    fn feed_forward_zero_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let z = feed_forward(&x, &FeedForwardParams::zeros(3, 6, 3)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        // W1 = [I, -I] splits into positive and negative parts, W2 = [M; -M] recombines to x·M
        let m = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let mut p = FeedForwardParams::zeros(3, 6, 3);
        for i in 0..3 {
            p.w1.data_mut()[i * 6 + i] = 1.0;
            p.w1.data_mut()[i * 6 + 3 + i] = -1.0;
            for j in 0..3 {
                p.w2.data_mut()[i * 3 + j] = m.data()[i * 3 + j];
                p.w2.data_mut()[(3 + i) * 3 + j] = -m.data()[i * 3 + j];
            }
        }
        let y = feed_forward(&x, &p).unwrap();
        let want = reference::matmul(&x, &m);
        assert!(y.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn feed_forward_matches_composed_affine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let p = FeedForwardParams {
            w1: Tensor::randn(&[4, 8], 0.5, &mut rng),
            b1: Tensor::randn(&[8], 0.5, &mut rng),
            w2: Tensor::randn(&[8, 4], 0.5, &mut rng),
            b2: Tensor::randn(&[4], 0.5, &mut rng),
        };
        let fast = feed_forward(&x, &p).unwrap();
        let h = reference::affine(&x, &p.w1, &p.b1).map(|v| v.max(0.0));
        let slow = reference::affine(&h, &p.w2, &p.b2);
        assert!(fast.max_abs_diff(&slow) < 1e-6);
    }
}
