//! Convolution and correlation kernels.

use super::ops::matmul_into;
use super::Tensor;
use crate::error::{Error, Result};

/// Weights and geometry of a 2-D convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    /// `C_out × C_in × k × k`
    pub weight: Tensor,
    /// `C_out`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weight, &self.bias, self.stride, self.padding)
    }
}

pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Direct 2-D convolution (cross-correlation, no flip) via im2col + GEMM.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    input.expect_rank(3, "conv2d")?;
    weights.expect_rank(4, "conv2d")?;
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (c_out, wc_in, kh, kw) = (weights.dim(0), weights.dim(1), weights.dim(2), weights.dim(3));
    if wc_in != c_in {
        return Err(Error::dim(
            "conv2d",
            format!("input has {c_in} channels, weights expect {wc_in}"),
        ));
    }
    if kh != kw {
        return Err(Error::dim("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if bias.shape() != [c_out] {
        return Err(Error::dim(
            "conv2d",
            format!("bias {:?} for {c_out} output channels", bias.shape()),
        ));
    }
    let (Some(oh), Some(ow)) = (
        conv_output_extent(h, kh, stride, padding),
        conv_output_extent(w, kw, stride, padding),
    ) else {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {kh} stride {stride} padding {padding} does not fit {h}x{w}"),
        ));
    };

    let k = kh;
    let cols_rows = c_in * k * k;
    let n = oh * ow;
    let src = input.data();
    let mut cols = vec![0.0f32; cols_rows * n];
    for c in 0..c_in {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst = &mut cols[r * n..(r + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }

    let mut out = vec![0.0f32; c_out * n];
    for (o, b) in bias.data().iter().enumerate() {
        out[o * n..(o + 1) * n].fill(*b);
    }
    matmul_into(weights.data(), &cols, &mut out, c_out, cols_rows, n);
    Tensor::new(&[c_out, oh, ow], out)?.finite("conv2d")
}

/// Temporal convolution whose kernel spans the whole `L×C` queue, yielding
/// one value per output channel. `weights` is `C_out × C × L`.
pub fn conv1d_over_queue(queue: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    queue.expect_rank(2, "conv1d_over_queue")?;
    weights.expect_rank(3, "conv1d_over_queue")?;
    let (l, c) = (queue.dim(0), queue.dim(1));
    let (c_out, wc, wl) = (weights.dim(0), weights.dim(1), weights.dim(2));
    if wl != l || wc != c || bias.shape() != [c_out] {
        return Err(Error::dim(
            "conv1d_over_queue",
            format!(
                "queue {:?} vs weights {:?}, bias {:?}",
                queue.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let q = queue.data();
    let wd = weights.data();
    let out = (0..c_out)
        .map(|o| {
            let mut acc = bias.data()[o];
            for ch in 0..c {
                let taps = &wd[(o * c + ch) * l..(o * c + ch + 1) * l];
                for (t, &wv) in taps.iter().enumerate() {
                    acc += wv * q[t * c + ch];
                }
            }
            acc
        })
        .collect();
    Tensor::new(&[c_out], out)?.finite("conv1d_over_queue")
}

/// Valid per-channel cross-correlation with the template acting as kernel.
pub fn depthwise_xcorr(search: &Tensor, template: &Tensor) -> Result<Tensor> {
    search.expect_rank(3, "depthwise_xcorr")?;
    template.expect_rank(3, "depthwise_xcorr")?;
    let (c, hs, ws) = (search.dim(0), search.dim(1), search.dim(2));
    let (ct, ht, wt) = (template.dim(0), template.dim(1), template.dim(2));
    if c != ct || ht > hs || wt > ws {
        return Err(Error::dim(
            "depthwise_xcorr",
            format!("search {:?} vs template {:?}", search.shape(), template.shape()),
        ));
    }
    let (oh, ow) = (hs - ht + 1, ws - wt + 1);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let s = &search.data()[ch * hs * ws..(ch + 1) * hs * ws];
        let t = &template.data()[ch * ht * wt..(ch + 1) * ht * wt];
        let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for ky in 0..ht {
            for kx in 0..wt {
                let tv = t[ky * wt + kx];
                for oy in 0..oh {
                    let src = &s[(oy + ky) * ws + kx..][..ow];
                    for (d, &sv) in o[oy * ow..(oy + 1) * ow].iter_mut().zip(src) {
                        *d += tv * sv;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)?.finite("depthwise_xcorr")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv2d_sum_of_ones() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv2d_center_tap_picks_center() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32 * 1.5 - 2.0);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.data(), &[x.data()[4]]);
    }

    #[test]
    fn conv2d_channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0),
            Err(Error::Dimension { .. })
        ));
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).is_err());
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..100 {
            let c_in = rng.random_range(1..=4);
            let c_out = rng.random_range(1..=4);
            let h = rng.random_range(1..=8);
            let w = rng.random_range(1..=8);
            let padding = rng.random_range(0..=2);
            let k = rng.random_range(1..=(h.min(w) + 2 * padding).min(5));
            let stride = rng.random_range(1..=3);
            let x = Tensor::randn(&[c_in, h, w], 1.0, &mut rng);
            let wt = Tensor::randn(&[c_out, c_in, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[c_out], 1.0, &mut rng);
            let fast = conv2d(&x, &wt, &b, stride, padding).unwrap();
            let slow = reference::conv2d(&x, &wt, &b, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-5);
        }
    }

    #[test]
    fn conv1d_over_queue_examples() {
        let q = Tensor::from_fn(&[3, 4], |i| i as f32);
        let y = conv1d_over_queue(&q, &Tensor::zeros(&[2, 4, 3]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);

        let y = conv1d_over_queue(
            &Tensor::new(&[1, 1], vec![3.0]).unwrap(),
            &Tensor::new(&[1, 1, 1], vec![-2.0]).unwrap(),
            &Tensor::vector(&[0.5]),
        )
        .unwrap();
        assert_eq!(y.data(), &[-5.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[2], 1.0, &mut rng);
        let fast = conv1d_over_queue(&q, &w, &b).unwrap();
        let slow = reference::conv1d_over_queue(&q, &w, &b);
        assert!(fast.max_abs_diff(&slow) < 1e-6);
    }

    #[test]
    fn conv1d_over_queue_rejects_wrong_length() {
        let q = Tensor::zeros(&[2, 4]);
        let w = Tensor::zeros(&[2, 4, 3]);
        assert!(conv1d_over_queue(&q, &w, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn xcorr_scalar_template_scales_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Tensor::randn(&[3, 5, 6], 1.0, &mut rng);
        let t = Tensor::new(&[3, 1, 1], vec![2.0, -0.5, 0.0]).unwrap();
        let y = depthwise_xcorr(&s, &t).unwrap();
        assert_eq!(y.shape(), s.shape());
        for c in 0..3 {
            for i in 0..30 {
                assert_eq!(y.data()[c * 30 + i], t.data()[c] * s.data()[c * 30 + i]);
            }
        }
    }

    #[test]
    fn xcorr_autocorrelation_peak_at_crop_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = Tensor::randn(&[1, 12, 12], 1.0, &mut rng);
        let (oy, ox) = (4, 7);
        let t = Tensor::from_fn(&[1, 4, 4], |i| s.data()[(oy + i / 4) * 12 + ox + i % 4]);
        let y = depthwise_xcorr(&s, &t).unwrap();
        let (best, _) = y
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!((best / 9, best % 9), (oy, ox));
    }

    #[test]
    fn xcorr_template_larger_than_search_fails() {
        let s = Tensor::zeros(&[1, 3, 3]);
        let t = Tensor::zeros(&[1, 4, 2]);
        assert!(matches!(depthwise_xcorr(&s, &t), Err(Error::Dimension { .. })));
    }

    #[test]
    fn xcorr_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let hs = rng.random_range(1..=9);
            let ws = rng.random_range(1..=9);
            let ht = rng.random_range(1..=hs);
            let wt = rng.random_range(1..=ws);
            let s = Tensor::randn(&[4, hs, ws], 1.0, &mut rng);
            let t = Tensor::randn(&[4, ht, wt], 1.0, &mut rng);
            let fast = depthwise_xcorr(&s, &t).unwrap();
            let slow = reference::depthwise_xcorr(&s, &t);
            assert!(fast.max_abs_diff(&slow) < 1e-5);
        }
    }
}
