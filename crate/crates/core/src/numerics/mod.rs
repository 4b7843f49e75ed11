//! Minimal dense-tensor kernels: everything the tracker's equations need and
//! nothing more. All functions are pure; outputs are checked for finiteness.

mod attention;
mod conv;
mod ops;
pub mod reference;
mod tensor;

pub use attention::{
    multi_head_attention, multi_head_attention_probed, AttentionConfig, AttentionParams,
    AttentionProbe, RowNormalizer,
};
pub use conv::{conv1d_over_queue, conv2d, conv_output_extent, depthwise_xcorr, Conv2dParams};
pub use ops::{
    add, concat, feed_forward, global_avg_pool, layer_norm, layer_norm_with, linear, map_to_tokens,
    matmul, max_pool2d, mul, relu, sigmoid, softmax, softmax_in_place, token_mean, tokens_to_map,
    FeedForwardParams, LayerNormParams, LAYER_NORM_EPS,
};
pub use tensor::Tensor;

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn tensor3(max_c: usize, max_hw: usize) -> impl Strategy<Value = Tensor> {
        (1..=max_c, 1..=max_hw, 1..=max_hw).prop_flat_map(|(c, h, w)| {
            prop::collection::vec(-10.0f32..10.0, c * h * w)
                .prop_map(move |d| Tensor::new(&[c, h, w], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn token_round_trip_is_bit_exact(m in tensor3(5, 7)) {
            let (h, w) = (m.dim(1), m.dim(2));
            let t = map_to_tokens(&m).unwrap();
            let back = tokens_to_map(&t, h, w).unwrap();
            prop_assert!(back.bit_eq(&m));
            prop_assert!(map_to_tokens(&back).unwrap().bit_eq(&t));
        }

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, k in 1usize..12, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[rows, k], 20.0, &mut rng);
            let p = softmax(&x).unwrap();
            for r in 0..rows {
                let s: f32 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-5);
                prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn layer_norm_standardizes_rows(
            row in prop::collection::vec(-100.0f32..100.0, 2..32),
        ) {
            let c = row.len();
            let x = Tensor::new(&[1, c], row).unwrap();
            let mean = x.sum() / c as f64;
            let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assume!(var >= 1e-6);
            let p = LayerNormParams::identity(c);
            let y = layer_norm(&x, &p.gamma, &p.beta, 0.0).unwrap();
            let ym = y.sum() / c as f64;
            let yv = y.data().iter().map(|&v| (v as f64 - ym).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(ym.abs() <= 1e-5);
            prop_assert!((yv - 1.0).abs() <= 1e-4);
        }

        #[test]
        fn kernels_are_deterministic(m in tensor3(3, 6)) {
            let t = Tensor::from_fn(&[m.dim(0), 1, 1], |i| i as f32 - 0.5);
            let a = depthwise_xcorr(&m, &t).unwrap();
            let b = depthwise_xcorr(&m, &t).unwrap();
            prop_assert!(a.bit_eq(&b));
        }
    }
}
