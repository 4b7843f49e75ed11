//! Quick invariant checks over the whole stack, printed as a table.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive;
use crate::backbone::{Backbone, FeatureMode, Layer, TemporalContextQueue};
use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::eval::evaluate;
use crate::model::{HeadOutput, ModelParams};
use crate::numerics::{
    conv2d, depthwise_xcorr, layer_norm, map_to_tokens, max_pool2d, multi_head_attention, reference, relu,
    softmax_in_place, AttentionConfig, AttentionParams, RowNormalizer, Tensor,
};
use crate::pipeline::{decode, Tracker};
use crate::run::run_frames;
use crate::synth::{generate, Script};
use crate::transformer::{StepTrace, TemporalPrior, TransformerToggles};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Debug hooks for mutation testing the checks themselves.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub normalizer: RowNormalizer,
}

impl Default for Hooks {
    fn default() -> Self {
        Self {
            normalizer: softmax_in_place,
        }
    }
}

/// A deliberately broken normalizer: exponentiates without dividing.
pub fn skip_normalization(row: &mut [f32]) {
    for v in row.iter_mut() {
        *v = v.exp();
    }
}

type Check = fn(&Hooks) -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("oracle conv2d", oracle_conv2d),
    ("oracle depthwise_xcorr", oracle_xcorr),
    ("oracle multi_head_attention", oracle_attention),
    ("oracle layer_norm", oracle_layer_norm),
    ("queue fill rule", queue_fill),
    ("zero-init equivalence", zero_init),
    ("gate-zero identity", gate_zero),
    ("attention normalization", attention_normalization),
    ("fixed state size", fixed_state),
    ("replay determinism", replay),
    ("shape contract", shape_contract),
    ("decode tie-break", decode_ties),
    ("metrics toy set", metrics),
    ("archive round trip", archive_round_trip),
    ("synth determinism", synth_determinism),
];

pub fn selftest() -> Vec<CheckResult> {
    let mut out = selftest_with(&Hooks::default());
    let mutated = attention_normalization(&Hooks {
        normalizer: skip_normalization,
    });
    out.push(CheckResult {
        name: "normalization mutation caught",
        passed: mutated.is_err(),
        detail: match mutated {
            Err(e) => format!("broken softmax rejected: {e}"),
            Ok(_) => "broken softmax went unnoticed".into(),
        },
    });
    out
}

pub fn selftest_with(hooks: &Hooks) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let r = check(hooks);
            CheckResult {
                name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e),
            }
        })
        .collect()
}

pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{status}  {:width$}  {}", r.name, r.detail);
    }
    let passed = results.iter().filter(|r| r.passed).count();
    let _ = writeln!(s, "{passed}/{} checks passed", results.len());
    s
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn oracle_conv2d(_: &Hooks) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    for _ in 0..25 {
        let (ci, co) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (h, w, pad) = (rng.random_range(3..=9), rng.random_range(3..=9), rng.random_range(0..=1));
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let x = Tensor::randn(&[ci, h, w], 1.0, &mut rng);
        let wt = Tensor::randn(&[co, ci, k, k], 1.0, &mut rng);
        let b = Tensor::randn(&[co], 1.0, &mut rng);
        let fast = conv2d(&x, &wt, &b, stride, pad).map_err(err)?;
        worst = worst.max(fast.max_abs_diff(&reference::conv2d(&x, &wt, &b, stride, pad)));
    }
    ensure(worst <= 1e-5, || format!("max error {worst:e}"))?;
    Ok(format!("25 cases, max error {worst:.1e}"))
}

fn oracle_xcorr(_: &Hooks) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for _ in 0..25 {
        let c = rng.random_range(1..=6);
        let (sh, th) = (rng.random_range(4..=12), rng.random_range(1..=4));
        let s = Tensor::randn(&[c, sh, sh], 1.0, &mut rng);
        let t = Tensor::randn(&[c, th, th], 1.0, &mut rng);
        let fast = depthwise_xcorr(&s, &t).map_err(err)?;
        worst = worst.max(fast.max_abs_diff(&reference::depthwise_xcorr(&s, &t)));
    }
    ensure(worst <= 1e-5, || format!("max error {worst:e}"))?;
    Ok(format!("25 cases, max error {worst:.1e}"))
}

fn oracle_attention(_: &Hooks) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = AttentionConfig::new(6, 12).map_err(err)?;
    let mut worst = 0.0f32;
    for _ in 0..25 {
        let std = 1.0 / 12f32.sqrt();
        let p = AttentionParams {
            wq: Tensor::randn(&[12, 12], std, &mut rng),
            wk: Tensor::randn(&[12, 12], std, &mut rng),
            wv: Tensor::randn(&[12, 12], std, &mut rng),
            wo: Tensor::randn(&[12, 12], std, &mut rng),
        };
        let (tq, tk) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let q = Tensor::randn(&[tq, 12], 1.0, &mut rng);
        let k = Tensor::randn(&[tk, 12], 1.0, &mut rng);
        let v = Tensor::randn(&[tk, 12], 1.0, &mut rng);
        let fast = multi_head_attention(&q, &k, &v, &p, &cfg).map_err(err)?;
        worst = worst.max(fast.max_abs_diff(&reference::multi_head_attention(&q, &k, &v, &p, &cfg)));
    }
    ensure(worst <= 1e-5, || format!("max error {worst:e}"))?;
    Ok(format!("25 cases, max error {worst:.1e}"))
}

fn oracle_layer_norm(_: &Hooks) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f32;
    for _ in 0..25 {
        let (t, c) = (rng.random_range(1..=10), rng.random_range(2..=16));
        let x = Tensor::randn(&[t, c], 2.0, &mut rng);
        let g = Tensor::randn(&[c], 1.0, &mut rng);
        let b = Tensor::randn(&[c], 1.0, &mut rng);
        let fast = layer_norm(&x, &g, &b, 1e-5).map_err(err)?;
        worst = worst.max(fast.max_abs_diff(&reference::layer_norm(&x, &g, &b, 1e-5)));
    }
    ensure(worst <= 1e-5, || format!("max error {worst:e}"))?;
    Ok(format!("25 cases, max error {worst:.1e}"))
}

fn queue_fill(_: &Hooks) -> Result<String, String> {
    let d = |v: f32| Tensor::vector(&[v, -v]);
    let mut q = TemporalContextQueue::new(3, 2);
    q.push(&d(1.0)).map_err(err)?;
    ensure(q.entries().data() == [1.0, -1.0, 1.0, -1.0, 1.0, -1.0], || {
        format!("after one push: {:?}", q.entries().data())
    })?;
    for v in 2..=4 {
        q.push(&d(v as f32)).map_err(err)?;
    }
    ensure(q.entries().data() == [4.0, -4.0, 3.0, -3.0, 2.0, -2.0], || {
        format!("after four pushes: {:?}", q.entries().data())
    })?;
    Ok("t=1 replicated, t=4 holds (d4,d3,d2)".into())
}

/// Runs the backbone with every adaptive layer treated as its base conv.
pub fn plain_features(bb: &Backbone, patch: &Tensor) -> crate::Result<Tensor> {
    let mut x = patch.clone();
    for layer in &bb.layers {
        x = match layer {
            Layer::Conv { conv, relu: r } | Layer::Adaptive { layer: crate::backbone::TAdaConvLayer { base: conv, .. }, relu: r } => {
                let y = conv.forward(&x)?;
                if *r { relu(&y) } else { y }
            }
            Layer::MaxPool { kernel, stride } => max_pool2d(&x, *kernel, *stride)?,
        };
    }
    Ok(x)
}

fn zero_init(_: &Hooks) -> Result<String, String> {
    let config = ModelConfig::tiny();
    let p = ModelParams::random(&config, 5).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut qs = p.backbone.new_queues();
    let mut worst = 0.0f32;
    for _ in 0..10 {
        let x = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
        let a = p.backbone.extract_features(&x, FeatureMode::Streaming(&mut qs)).map_err(err)?;
        let b = plain_features(&p.backbone, &x).map_err(err)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("10 frames, max deviation {worst:.1e}"))
}

fn random_transformer(seed: u64) -> crate::Result<(ModelConfig, ModelParams, ChaCha8Rng)> {
    let config = ModelConfig::tiny();
    let params = ModelParams::random(&config, seed)?;
    Ok((config, params, ChaCha8Rng::seed_from_u64(seed)))
}

fn gate_zero(_: &Hooks) -> Result<String, String> {
    let (config, mut params, mut rng) = random_transformer(6).map_err(err)?;
    params.zero_filter();
    let t = &params.transformer;
    let s = config.similarity_extent();
    let tokens = [s * s, config.model_dim()];
    let on = TransformerToggles::default();
    let off = TransformerToggles {
        filter_enabled: false,
        ..on
    };
    let mut prior = TemporalPrior {
        tokens: Tensor::randn(&tokens, 1.0, &mut rng),
        frame_index: 0,
    };
    for step in 1..=5 {
        let cur = Tensor::randn(&tokens, 1.0, &mut rng);
        let a = t.encode(&prior, &cur, step, &on, None).map_err(err)?;
        let b = t.encode(&prior, &cur, step, &off, None).map_err(err)?;
        ensure(a.tokens.bit_eq(&b.tokens), || format!("step {step} differs"))?;
        prior = a;
    }
    Ok("5 steps bitwise equal".into())
}

fn attention_normalization(hooks: &Hooks) -> Result<String, String> {
    let (config, params, mut rng) = random_transformer(7).map_err(err)?;
    let t = &params.transformer;
    let s = config.similarity_extent();
    let sim_shape = [config.model_dim(), s, s];
    let first = Tensor::randn(&sim_shape, 1.0, &mut rng);
    let mut prior = t.init_prior(&first, &config.toggles).map_err(err)?;
    let mut trace = StepTrace::default();
    for step in 1..=5 {
        let cur = t.adjust(&Tensor::randn(&sim_shape, 1.0, &mut rng)).map_err(err)?;
        let next = t
            .encode_with(&prior, &cur, step, &config.toggles, hooks.normalizer, Some(&mut trace))
            .map_err(err)?;
        t.decode_with(&cur, &next, hooks.normalizer, Some(&mut trace)).map_err(err)?;
        prior = next;
    }
    let e = trace.attention.max_row_sum_error;
    ensure(e <= 1e-5, || format!("row sum off by {e:e}"))?;
    Ok(format!("{} rows, max |sum-1| {e:.1e}", trace.attention.rows))
}

fn small_sequence(n: usize) -> crate::Result<crate::synth::Sequence> {
    let script: Script = "target 30 20 12 10\nvelocity 0.8 0.5\nbounce".parse()?;
    generate(11, n, (80, 60), &script)
}

fn fixed_state(_: &Hooks) -> Result<String, String> {
    let config = ModelConfig::tiny();
    let tracker = Tracker::new(ModelParams::random(&config, 8).map_err(err)?, config).map_err(err)?;
    let seq = small_sequence(30).map_err(err)?;
    let mut state = tracker.init(&seq.frames[0], &seq.groundtruth[0]).map_err(err)?;
    let size = state.to_bytes().len();
    for f in &seq.frames[1..] {
        tracker.track(&mut state, f).map_err(err)?;
        let now = state.to_bytes().len();
        ensure(now == size, || format!("grew from {size} to {now} bytes"))?;
    }
    Ok(format!("{size} bytes over 30 frames"))
}

fn replay(_: &Hooks) -> Result<String, String> {
    let config = ModelConfig::tiny();
    let tracker = Tracker::new(ModelParams::random(&config, 9).map_err(err)?, config).map_err(err)?;
    let seq = small_sequence(15).map_err(err)?;
    let go = || run_frames(&tracker, seq.frames.iter().cloned().map(Ok), seq.groundtruth[0], false);
    let (a, b) = (go().map_err(err)?, go().map_err(err)?);
    let bits = |bs: &[BBox]| bs.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h].map(f32::to_bits)).collect::<Vec<_>>();
    ensure(bits(&a.boxes) == bits(&b.boxes), || "boxes differ between runs".into())?;
    Ok(format!("{} frames bit-identical", a.boxes.len()))
}

fn shape_contract(_: &Hooks) -> Result<String, String> {
    let c = ModelConfig::full();
    let bb = Backbone::zeros(&c.backbone).map_err(err)?;
    let z = bb.extract_features(&Tensor::zeros(&[3, 127, 127]), FeatureMode::Template).map_err(err)?;
    let mut qs = bb.new_queues();
    let x = bb
        .extract_features(&Tensor::zeros(&[3, 287, 287]), FeatureMode::Streaming(&mut qs))
        .map_err(err)?;
    let r = depthwise_xcorr(&x, &z).map_err(err)?;
    let tokens = map_to_tokens(&r).map_err(err)?;
    ensure(z.shape() == [96, 6, 6], || format!("template {:?}", z.shape()))?;
    ensure(x.shape() == [96, 26, 26], || format!("search {:?}", x.shape()))?;
    ensure(r.shape() == [96, 21, 21], || format!("similarity {:?}", r.shape()))?;
    ensure(tokens.shape() == [441, 96], || format!("tokens {:?}", tokens.shape()))?;
    Ok("6x6, 26x26, 21x21, 441x96".into())
}

fn decode_ties(_: &Hooks) -> Result<String, String> {
    let head = HeadOutput {
        cls: Tensor::zeros(&[2, 21, 21]),
        reg: Tensor::full(&[4, 21, 21], 2.0),
    };
    let d = decode(&head, 8, 287).map_err(err)?;
    ensure((d.row, d.col) == (0, 0), || format!("winner {:?}", (d.row, d.col)))?;
    ensure(d.patch_box.w == 32.0 && d.patch_box.h == 32.0, || format!("box {:?}", d.patch_box))?;
    Ok("lowest index wins, offsets 2 at stride 8 give 32 px".into())
}

fn metrics(_: &Hooks) -> Result<String, String> {
    let gt = [BBox::new(13.0, 14.0, 6.0, 6.0), BBox::new(50.0, 50.0, 10.0, 10.0)];
    let perfect = evaluate(&gt, &gt).map_err(err)?;
    ensure(perfect.auc == 1.0 && perfect.prec_at_20 == 1.0, || format!("{perfect:?}"))?;
    let off = evaluate(&[BBox::new(10.0, 10.0, 6.0, 6.0)], &gt[..1]).map_err(err)?;
    ensure(off.precision[4] == 0.0 && off.precision[20] == 1.0, || "3-4-5 case".into())?;
    Ok("perfect tracker and CLE 5 case exact".into())
}

fn archive_round_trip(_: &Hooks) -> Result<String, String> {
    let config = ModelConfig::tiny();
    let p = ModelParams::random(&config, 10).map_err(err)?;
    let bytes = archive::encode(&p.named_tensors());
    let back = archive::params_from_tensors(&config, archive::decode(&bytes).map_err(err)?).map_err(err)?;
    let same = p
        .named_tensors()
        .iter()
        .zip(back.named_tensors().iter())
        .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b));
    ensure(same, || "tensors differ after round trip".into())?;
    Ok(format!("{} bytes bit-exact", bytes.len()))
}

fn synth_determinism(_: &Hooks) -> Result<String, String> {
    let a = small_sequence(5).map_err(err)?;
    let b = small_sequence(5).map_err(err)?;
    ensure(a == b, || "sequences differ".into())?;
    Ok("same seed, same frames".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_everything() {
        let results = selftest();
        let table = format_table(&results);
        assert!(results.iter().all(|r| r.passed), "{table}");
    }

    #[test]
    fn corrupted_softmax_fails_normalization() {
        let results = selftest_with(&Hooks {
            normalizer: skip_normalization,
        });
        let norm = results.iter().find(|r| r.name == "attention normalization").unwrap();
        assert!(!norm.passed);
    }
}
