//! Adaptive temporal transformer.
//!
//! The encoder folds the current similarity tokens `F_t` into a single
//! running prior `F_t^m`; the decoder uses that prior to refine `F_t`:
//!
//! ```text
//! F1  = Norm(F_t + MHA(F_{t-1}^m, F_t, F_t))
//! F2  = Norm(F1 + MHA(F1, F1, F1))
//! a   = sigmoid(FFN(GAP(conv(F1))))                  (per channel)
//! Ff  = F2 + conv(Cat(F2, F1)) * a
//! F_t^m = Norm(Ff + MHA(Ff, Ff, Ff))
//!
//! F3  = Norm(F_t + MHA(F_t, F_t, F_t))
//! F4  = Norm(F3 + MHA(F3, F_t^m, F_t^m))
//! F*  = Norm(F4 + FFN(F4))
//! ```
//!
//! The prior has the same shape on every frame and is replaced, never
//! appended to, so per-sequence memory is constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    add, concat, feed_forward, layer_norm_with, map_to_tokens, multi_head_attention_probed,
    sigmoid, softmax_in_place, token_mean, tokens_to_map, AttentionConfig, AttentionParams,
    AttentionProbe, Conv2dParams, FeedForwardParams, LayerNormParams, RowNormalizer, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryChoice {
    /// Previous prior queries the current map.
    #[default]
    PreviousPrior,
    /// The current map queries itself; the prior does not enter the first block.
    CurrentMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorInit {
    #[default]
    Convolutional,
    Random,
}

/// Ablation switches. The default is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerToggles {
    pub filter_enabled: bool,
    pub query_choice: QueryChoice,
    pub prior_init: PriorInit,
    pub prior_seed: u64,
    /// Re-initialize the prior from the current frame before every step,
    /// removing all similarity-level temporal context.
    pub reset_prior_each_frame: bool,
}

impl Default for TransformerToggles {
    fn default() -> Self {
        Self {
            filter_enabled: true,
            query_choice: QueryChoice::PreviousPrior,
            prior_init: PriorInit::Convolutional,
            prior_seed: 0,
            reset_prior_each_frame: false,
        }
    }
}

/// Post-norm residual attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub attn: AttentionParams,
    pub norm: LayerNormParams,
}

impl AttentionBlock {
    fn zeros(c: usize) -> Self {
        Self {
            attn: AttentionParams {
                wq: Tensor::zeros(&[c, c]),
                wk: Tensor::zeros(&[c, c]),
                wv: Tensor::zeros(&[c, c]),
                wo: Tensor::zeros(&[c, c]),
            },
            norm: LayerNormParams::identity(c),
        }
    }
}

/// Gated residual branch that decides how much of the fused context to keep.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFilter {
    /// 1×1, `C → C`, applied to `F1` before pooling.
    pub gate_conv: Conv2dParams,
    pub gate_ffn: FeedForwardParams,
    /// 1×1, `2C → C`, applied to `Cat(F2, F1)`.
    pub fusion: Conv2dParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub cfg: AttentionConfig,
    /// `R_t → F_t`.
    pub adjust: Conv2dParams,
    /// `R_1 → F_0^m`.
    pub init: Conv2dParams,
    pub encoder: [AttentionBlock; 3],
    pub filter: TemporalFilter,
    pub decoder_self: AttentionBlock,
    pub decoder_cross: AttentionBlock,
    pub decoder_ffn: FeedForwardParams,
    pub decoder_ffn_norm: LayerNormParams,
}

/// Shapes that the transformer parameters depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerShape {
    /// Channels of the raw similarity map.
    pub in_channels: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub adjust_kernel: usize,
    pub init_kernel: usize,
}

fn same_conv(c_in: usize, c_out: usize, k: usize) -> Conv2dParams {
    Conv2dParams::zeros(c_in, c_out, k, 1, k / 2)
}

impl TransformerParams {
    pub fn zeros(shape: &TransformerShape) -> Result<Self> {
        let c = shape.model_dim;
        let cfg = AttentionConfig::new(shape.num_heads, c)?;
        if shape.adjust_kernel % 2 == 0 || shape.init_kernel % 2 == 0 {
            return Err(Error::Input("adjust/init kernels must be odd for same padding".into()));
        }
        Ok(Self {
            cfg,
            adjust: same_conv(shape.in_channels, c, shape.adjust_kernel),
            init: same_conv(shape.in_channels, c, shape.init_kernel),
            encoder: [AttentionBlock::zeros(c), AttentionBlock::zeros(c), AttentionBlock::zeros(c)],
            filter: TemporalFilter {
                gate_conv: same_conv(c, c, 1),
                gate_ffn: FeedForwardParams::zeros(c, shape.ffn_hidden, c),
                fusion: same_conv(2 * c, c, 1),
            },
            decoder_self: AttentionBlock::zeros(c),
            decoder_cross: AttentionBlock::zeros(c),
            decoder_ffn: FeedForwardParams::zeros(c, shape.ffn_hidden, c),
            decoder_ffn_norm: LayerNormParams::identity(c),
        })
    }

    pub fn random<R: Rng + ?Sized>(shape: &TransformerShape, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        p.visit_params_mut("", &mut |name, t| {
            let fan_in = match t.rank() {
                4 => t.dim(1) * t.dim(2) * t.dim(3),
                2 => t.dim(0),
                _ => 0,
            };
            if name.ends_with("gamma") {
                *t = Tensor::from_fn(t.shape(), |_| 1.0 + rng.random_range(-0.1..0.1));
            } else if fan_in > 0 {
                *t = Tensor::randn(t.shape(), (1.0 / fan_in as f32).sqrt(), rng);
            } else {
                *t = Tensor::from_fn(t.shape(), |_| rng.random_range(-0.1..0.1));
            }
        });
        Ok(p)
    }

    pub fn model_dim(&self) -> usize {
        self.cfg.model_dim
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        let conv = |name: &str, c: &mut Conv2dParams, f: &mut dyn FnMut(String, &mut Tensor)| {
            f(format!("{prefix}.{name}.weight"), &mut c.weight);
            f(format!("{prefix}.{name}.bias"), &mut c.bias);
        };
        conv("adjust", &mut self.adjust, f);
        conv("init", &mut self.init, f);
        conv("filter.gate_conv", &mut self.filter.gate_conv, f);
        conv("filter.fusion", &mut self.filter.fusion, f);
        visit_ffn(&format!("{prefix}.filter.gate_ffn"), &mut self.filter.gate_ffn, f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            visit_block(&format!("{prefix}.encoder{i}"), b, f);
        }
        visit_block(&format!("{prefix}.decoder_self"), &mut self.decoder_self, f);
        visit_block(&format!("{prefix}.decoder_cross"), &mut self.decoder_cross, f);
        visit_ffn(&format!("{prefix}.decoder_ffn"), &mut self.decoder_ffn, f);
        f(format!("{prefix}.decoder_ffn_norm.gamma"), &mut self.decoder_ffn_norm.gamma);
        f(format!("{prefix}.decoder_ffn_norm.beta"), &mut self.decoder_ffn_norm.beta);
    }

    /// `F_t = F(R_t)` in token form.
    pub fn adjust(&self, similarity: &Tensor) -> Result<Tensor> {
        map_to_tokens(&self.adjust.forward(similarity)?)
    }

    /// Initial prior from the first similarity map.
    pub fn init_prior(&self, first: &Tensor, toggles: &TransformerToggles) -> Result<TemporalPrior> {
        let conv = map_to_tokens(&self.init.forward(first)?)?;
        let tokens = match toggles.prior_init {
            PriorInit::Convolutional => conv,
            PriorInit::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(toggles.prior_seed);
                Tensor::randn(conv.shape(), 1.0, &mut rng)
            }
        };
        Ok(TemporalPrior {
            tokens,
            frame_index: 0,
        })
    }

    pub fn encode(
        &self,
        prior: &TemporalPrior,
        current: &Tensor,
        frame_index: u64,
        toggles: &TransformerToggles,
        trace: Option<&mut StepTrace>,
    ) -> Result<TemporalPrior> {
        self.encode_with(prior, current, frame_index, toggles, softmax_in_place, trace)
    }

    /// [`Self::encode`] with an explicit attention row normalizer.
    pub fn encode_with(
        &self,
        prior: &TemporalPrior,
        current: &Tensor,
        frame_index: u64,
        toggles: &TransformerToggles,
        normalize: RowNormalizer,
        mut trace: Option<&mut StepTrace>,
    ) -> Result<TemporalPrior> {
        if prior.tokens.shape() != current.shape() {
            return Err(Error::dim(
                "encode",
                format!("prior {:?} vs current {:?}", prior.tokens.shape(), current.shape()),
            ));
        }
        let att = |b: &AttentionBlock, residual: &Tensor, q: &Tensor, kv: &Tensor, trace: &mut Option<&mut StepTrace>| {
            let probe = trace.as_deref_mut().map(|t| &mut t.attention);
            let y = multi_head_attention_probed(q, kv, kv, &b.attn, &self.cfg, normalize, probe)?;
            layer_norm_with(&add(residual, &y)?, &b.norm)
        };
        let [e0, e1, e2] = &self.encoder;
        let f1 = match toggles.query_choice {
            QueryChoice::PreviousPrior => att(e0, current, &prior.tokens, current, &mut trace)?,
            QueryChoice::CurrentMap => att(e0, current, current, current, &mut trace)?,
        };
        let f2 = att(e1, &f1, &f1, &f1, &mut trace)?;
        let ff = if toggles.filter_enabled {
            let (filtered, gate) = self.filter.apply(&f1, &f2)?;
            if let Some(t) = trace.as_deref_mut() {
                t.gate_mean = Some((gate.sum() / gate.len() as f64) as f32);
            }
            filtered
        } else {
            f2
        };
        let tokens = att(e2, &ff, &ff, &ff, &mut trace)?;
        Ok(TemporalPrior {
            tokens,
            frame_index,
        })
    }

    pub fn decode(
        &self,
        current: &Tensor,
        prior: &TemporalPrior,
        trace: Option<&mut StepTrace>,
    ) -> Result<Tensor> {
        self.decode_with(current, prior, softmax_in_place, trace)
    }

    pub fn decode_with(
        &self,
        current: &Tensor,
        prior: &TemporalPrior,
        normalize: RowNormalizer,
        mut trace: Option<&mut StepTrace>,
    ) -> Result<Tensor> {
        if prior.tokens.shape() != current.shape() {
            return Err(Error::dim(
                "decode",
                format!("prior {:?} vs current {:?}", prior.tokens.shape(), current.shape()),
            ));
        }
        let mut att = |b: &AttentionBlock, q: &Tensor, kv: &Tensor| {
            let probe = trace.as_deref_mut().map(|t| &mut t.attention);
            let y = multi_head_attention_probed(q, kv, kv, &b.attn, &self.cfg, normalize, probe)?;
            layer_norm_with(&add(q, &y)?, &b.norm)
        };
        let f3 = att(&self.decoder_self, current, current)?;
        let f4 = att(&self.decoder_cross, &f3, &prior.tokens)?;
        let ffn = feed_forward(&f4, &self.decoder_ffn)?;
        layer_norm_with(&add(&f4, &ffn)?, &self.decoder_ffn_norm)
    }

    /// One frame: adjust, encode into a new prior, decode. Returns the
    /// refined map in `C×H×W` form together with the replacement prior.
    pub fn step(
        &self,
        prior: &TemporalPrior,
        similarity: &Tensor,
        frame_index: u64,
        toggles: &TransformerToggles,
        mut trace: Option<&mut StepTrace>,
    ) -> Result<(Tensor, TemporalPrior)> {
        similarity.expect_rank(3, "step")?;
        let (h, w) = (similarity.dim(1), similarity.dim(2));
        let current = self.adjust(similarity)?;
        let reset;
        let prior = if toggles.reset_prior_each_frame {
            reset = self.init_prior(similarity, toggles)?;
            &reset
        } else {
            prior
        };
        let next = self.encode(prior, &current, frame_index, toggles, trace.as_deref_mut())?;
        let refined = self.decode(&current, &next, trace.as_deref_mut())?;
        if let Some(t) = trace {
            t.prior_norm = next.tokens.l2_norm();
        }
        Ok((tokens_to_map(&refined, h, w)?, next))
    }
}

fn visit_block(prefix: &str, b: &mut AttentionBlock, f: &mut dyn FnMut(String, &mut Tensor)) {
    f(format!("{prefix}.wq"), &mut b.attn.wq);
    f(format!("{prefix}.wk"), &mut b.attn.wk);
    f(format!("{prefix}.wv"), &mut b.attn.wv);
    f(format!("{prefix}.wo"), &mut b.attn.wo);
    f(format!("{prefix}.norm.gamma"), &mut b.norm.gamma);
    f(format!("{prefix}.norm.beta"), &mut b.norm.beta);
}

fn visit_ffn(prefix: &str, p: &mut FeedForwardParams, f: &mut dyn FnMut(String, &mut Tensor)) {
    f(format!("{prefix}.w1"), &mut p.w1);
    f(format!("{prefix}.b1"), &mut p.b1);
    f(format!("{prefix}.w2"), &mut p.w2);
    f(format!("{prefix}.b2"), &mut p.b2);
}

/// A 1×1 convolution applied directly to `T×C_in` tokens.
fn pointwise(tokens: &Tensor, conv: &Conv2dParams) -> Result<Tensor> {
    let (c_out, c_in) = (conv.out_channels(), conv.in_channels());
    if conv.kernel() != 1 || tokens.dim(1) != c_in {
        return Err(Error::dim(
            "pointwise",
            format!("tokens {:?} with kernel {:?}", tokens.shape(), conv.weight.shape()),
        ));
    }
    let t = tokens.dim(0);
    let w = conv.weight.data();
    let mut out = Vec::with_capacity(t * c_out);
    for row in tokens.data().chunks_exact(c_in) {
        for o in 0..c_out {
            let filt = &w[o * c_in..(o + 1) * c_in];
            out.push(conv.bias.data()[o] + row.iter().zip(filt).map(|(a, b)| a * b).sum::<f32>());
        }
    }
    Tensor::new(&[t, c_out], out)
}

impl TemporalFilter {
    /// Per-channel gate in `(0, 1)` from the pooled `F1` descriptor.
    pub fn gate(&self, f1: &Tensor) -> Result<Tensor> {
        let pooled = token_mean(&pointwise(f1, &self.gate_conv)?)?;
        let c = pooled.len();
        let logits = feed_forward(&pooled.reshape(&[1, c])?, &self.gate_ffn)?;
        sigmoid(&logits).reshape(&[c])
    }

    /// `F2 + fusion(Cat(F2, F1)) * gate`, plus the gate itself.
    pub fn apply(&self, f1: &Tensor, f2: &Tensor) -> Result<(Tensor, Tensor)> {
        let gate = self.gate(f1)?;
        let fused = pointwise(&concat(&[f2, f1], 1)?, &self.fusion)?;
        let c = gate.len();
        let mut out = f2.clone();
        for (o, frow) in out.data_mut().chunks_exact_mut(c).zip(fused.data().chunks_exact(c)) {
            for ((v, &fv), &g) in o.iter_mut().zip(frow).zip(gate.data()) {
                *v += fv * g;
            }
        }
        Ok((out.finite("temporal_filter")?, gate))
    }
}

/// The running temporal memory of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPrior {
    pub tokens: Tensor,
    pub frame_index: u64,
}

impl TemporalPrior {
    pub fn byte_len(&self) -> usize {
        self.tokens.byte_len() + std::mem::size_of::<u64>()
    }
}

/// Holds at most one prior and enforces init-before-step, init-once.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TemporalMemory {
    prior: Option<TemporalPrior>,
}

impl TemporalMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prior(&self) -> Option<&TemporalPrior> {
        self.prior.as_ref()
    }

    pub fn is_initialized(&self) -> bool {
        self.prior.is_some()
    }

    pub fn init(
        &mut self,
        params: &TransformerParams,
        first: &Tensor,
        toggles: &TransformerToggles,
    ) -> Result<()> {
        if self.prior.is_some() {
            return Err(Error::State("temporal prior is already initialized".into()));
        }
        self.prior = Some(params.init_prior(first, toggles)?);
        Ok(())
    }

    /// Runs one step and replaces the prior in place.
    pub fn step(
        &mut self,
        params: &TransformerParams,
        similarity: &Tensor,
        frame_index: u64,
        toggles: &TransformerToggles,
        trace: Option<&mut StepTrace>,
    ) -> Result<Tensor> {
        let prior = self
            .prior
            .as_mut()
            .ok_or_else(|| Error::State("step before the temporal prior was initialized".into()))?;
        let (refined, next) = params.step(prior, similarity, frame_index, toggles, trace)?;
        *prior = next;
        Ok(refined)
    }

    pub fn clear(&mut self) {
        self.prior = None;
    }

    pub(crate) fn restore(&mut self, prior: Option<TemporalPrior>) {
        self.prior = prior;
    }
}

/// Per-step instrumentation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTrace {
    pub attention: AttentionProbe,
    pub gate_mean: Option<f32>,
    pub prior_norm: f64,
}
