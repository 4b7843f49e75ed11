//! Feature extractor whose last two convolutions recalibrate their weights
//! every frame from a short queue of past frame descriptors.
//!
//! An adaptive layer keeps base weights `W_b`, `b_b` and two temporal
//! generators `F_w`, `F_b`, each a convolution whose kernel spans the whole
//! queue of `L` descriptors. Per frame:
//!
//! ```text
//! alpha_w = F_w(queue) + 1        alpha_b = F_b(queue) + 1
//! W_t[c] = W_b[c] * alpha_w[c]    b_t[c] = b_b[c] * alpha_b[c]
//! out    = conv(x, W_t) + b_t
//! ```
//!
//! Generators start at zero, so an untrained layer is exactly its base conv.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    conv1d_over_queue, conv_output_extent, global_avg_pool, max_pool2d, relu,
    Conv2dParams, Tensor,
};

/// One step of the stage plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSpec {
    Conv {
        kernel: usize,
        stride: usize,
        channels: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Descriptor queue length `L`.
    pub queue_len: usize,
    pub template_size: usize,
    pub search_size: usize,
}

/// Number of trailing convolutions that are temporally adaptive.
pub const ADAPTIVE_TAIL: usize = 2;

impl BackboneConfig {
    /// AlexNet-style plan taking 127 → 6 and 287 → 26 with total stride 8.
    pub fn full() -> Self {
        use StageSpec::*;
        Self {
            in_channels: 3,
            stages: vec![
                Conv { kernel: 11, stride: 2, channels: 32 },
                MaxPool { kernel: 3, stride: 2 },
                Conv { kernel: 5, stride: 1, channels: 64 },
                MaxPool { kernel: 3, stride: 2 },
                Conv { kernel: 3, stride: 1, channels: 96 },
                Conv { kernel: 3, stride: 1, channels: 96 },
                Conv { kernel: 3, stride: 1, channels: 96 },
            ],
            queue_len: 3,
            template_size: 127,
            search_size: 287,
        }
    }

    /// Three 3×3 stride-1 convolutions: 32 → 26 and 16 → 10.
    pub fn tiny() -> Self {
        use StageSpec::*;
        Self {
            in_channels: 3,
            stages: vec![
                Conv { kernel: 3, stride: 1, channels: 12 },
                Conv { kernel: 3, stride: 1, channels: 12 },
                Conv { kernel: 3, stride: 1, channels: 12 },
            ],
            queue_len: 3,
            template_size: 16,
            search_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let convs = self.conv_count();
        if convs < ADAPTIVE_TAIL {
            return Err(Error::Input(format!(
                "stage plan needs at least {ADAPTIVE_TAIL} convolutions, has {convs}"
            )));
        }
        if self.queue_len == 0 {
            return Err(Error::Input("queue length must be at least 1".into()));
        }
        if !matches!(self.stages.last(), Some(StageSpec::Conv { .. })) {
            return Err(Error::Input("stage plan must end with a convolution".into()));
        }
        for s in &self.stages {
            let (k, st) = match *s {
                StageSpec::Conv { kernel, stride, channels } => {
                    if channels == 0 {
                        return Err(Error::Input("zero-channel convolution".into()));
                    }
                    (kernel, stride)
                }
                StageSpec::MaxPool { kernel, stride } => (kernel, stride),
            };
            if k == 0 || st == 0 {
                return Err(Error::Input(format!("degenerate stage {s:?}")));
            }
        }
        for size in [self.template_size, self.search_size] {
            if self.output_extent(size).is_none() {
                return Err(Error::Input(format!("input side {size} collapses in the stage plan")));
            }
        }
        Ok(())
    }

    pub fn conv_count(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, StageSpec::Conv { .. }))
            .count()
    }

    pub fn out_channels(&self) -> usize {
        self.stages
            .iter()
            .rev()
            .find_map(|s| match s {
                StageSpec::Conv { channels, .. } => Some(*channels),
                _ => None,
            })
            .unwrap_or(self.in_channels)
    }

    /// Spatial side after the full plan, `None` if some stage does not fit.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        self.stages.iter().try_fold(input, |side, s| match *s {
            StageSpec::Conv { kernel, stride, .. } | StageSpec::MaxPool { kernel, stride } => {
                conv_output_extent(side, kernel, stride, 0)
            }
        })
    }

    pub fn total_stride(&self) -> usize {
        self.stages
            .iter()
            .map(|s| match *s {
                StageSpec::Conv { stride, .. } | StageSpec::MaxPool { stride, .. } => stride,
            })
            .product()
    }
}

/// Rolling window of the last `L` frame descriptors, newest first.
///
/// Storage is allocated once; pushes shift rows in place.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalContextQueue {
    entries: Tensor,
    first: Tensor,
    pushes: u64,
}

impl TemporalContextQueue {
    pub fn new(capacity: usize, width: usize) -> Self {
        Self {
            entries: Tensor::zeros(&[capacity, width]),
            first: Tensor::zeros(&[width]),
            pushes: 0,
        }
    }

    /// A queue holding `descriptor` in every slot, as after a first push.
    pub fn seeded(capacity: usize, descriptor: &Tensor) -> Result<Self> {
        let mut q = Self::new(capacity, descriptor.len());
        q.push(descriptor)?;
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.entries.dim(0)
    }

    pub fn width(&self) -> usize {
        self.entries.dim(1)
    }

    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    pub fn is_empty(&self) -> bool {
        self.pushes == 0
    }

    /// `L×C` view, row 0 newest.
    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn first_descriptor(&self) -> Option<&Tensor> {
        (self.pushes > 0).then_some(&self.first)
    }

    pub fn push(&mut self, descriptor: &Tensor) -> Result<()> {
        let c = self.width();
        if descriptor.shape() != [c] {
            return Err(Error::dim(
                "push_descriptor",
                format!("descriptor {:?} for queue width {c}", descriptor.shape()),
            ));
        }
        let d = descriptor.data();
        let rows = self.entries.data_mut();
        if self.pushes == 0 {
            for slot in rows.chunks_exact_mut(c) {
                slot.copy_from_slice(d);
            }
            self.first.data_mut().copy_from_slice(d);
        } else {
            rows.copy_within(0..rows.len() - c, c);
            rows[..c].copy_from_slice(d);
        }
        self.pushes += 1;
        Ok(())
    }

    /// Pools `feat` (`C×H×W`) to its descriptor and pushes it.
    pub fn push_descriptor(&mut self, feat: &Tensor) -> Result<()> {
        if feat.rank() != 3 || feat.dim(0) != self.width() {
            return Err(Error::dim(
                "push_descriptor",
                format!("feature {:?} for queue width {}", feat.shape(), self.width()),
            ));
        }
        self.push(&global_avg_pool(feat)?)
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.pushes.to_le_bytes());
        for t in [&self.entries, &self.first] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    pub(crate) fn read_bytes(&mut self, src: &mut &[u8]) -> Result<()> {
        self.pushes = crate::wire::take_u64(src)?;
        crate::wire::take_f32s(src, self.entries.data_mut())?;
        crate::wire::take_f32s(src, self.first.data_mut())
    }
}

/// Temporal generator: a conv over the `L×C` queue with kernel size `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueConv {
    /// `C_out × C × L`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl QueueConv {
    pub fn zeros(c_in: usize, c_out: usize, queue_len: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, queue_len]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn forward(&self, queue: &TemporalContextQueue) -> Result<Tensor> {
        conv1d_over_queue(queue.entries(), &self.weight, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TAdaConvLayer {
    pub base: Conv2dParams,
    pub calib_w: QueueConv,
    pub calib_b: QueueConv,
}

impl TAdaConvLayer {
    /// Wraps a base convolution with zero-initialized generators.
    pub fn new(base: Conv2dParams, queue_len: usize) -> Self {
        let (c_in, c_out) = (base.in_channels(), base.out_channels());
        Self {
            base,
            calib_w: QueueConv::zeros(c_in, c_out, queue_len),
            calib_b: QueueConv::zeros(c_in, c_out, queue_len),
        }
    }

    /// `(alpha_w, alpha_b)`, one factor per output channel.
    pub fn calibration_factors(&self, queue: &TemporalContextQueue) -> Result<(Tensor, Tensor)> {
        if queue.is_empty() {
            return Err(Error::State("calibration requested from an empty queue".into()));
        }
        let aw = self.calib_w.forward(queue)?.map(|v| v + 1.0);
        let ab = self.calib_b.forward(queue)?.map(|v| v + 1.0);
        Ok((aw, ab))
    }

    /// Materializes `W_t` and `b_t` for the current queue contents.
    pub fn calibrated(&self, queue: &TemporalContextQueue) -> Result<Conv2dParams> {
        let (aw, ab) = self.calibration_factors(queue)?;
        let mut p = self.base.clone();
        let per_filter = p.weight.len() / p.out_channels();
        for (filter, &a) in p.weight.data_mut().chunks_exact_mut(per_filter).zip(aw.data()) {
            for w in filter {
                *w *= a;
            }
        }
        for (b, &a) in p.bias.data_mut().iter_mut().zip(ab.data()) {
            *b *= a;
        }
        Ok(p)
    }

    /// Convolves `input` with the weights calibrated by `queue`, which must
    /// already contain this frame's descriptor.
    pub fn forward(&self, input: &Tensor, queue: &TemporalContextQueue) -> Result<Tensor> {
        self.calibrated(queue)?.forward(input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { conv: Conv2dParams, relu: bool },
    Adaptive { layer: TAdaConvLayer, relu: bool },
    MaxPool { kernel: usize, stride: usize },
}

/// Per-sequence queues, one for each adaptive layer in order.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneQueues {
    pub queues: Vec<TemporalContextQueue>,
}

/// How an extraction treats the adaptive layers' temporal context.
pub enum FeatureMode<'a> {
    /// Template branch: each adaptive layer uses a throwaway queue seeded
    /// with its own input descriptor; persistent queues are untouched.
    Template,
    /// Search branch: push this frame's descriptors, then calibrate.
    Streaming(&'a mut BackboneQueues),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<Layer>,
}

impl Backbone {
    /// Zero-weight backbone with the plan's layer shapes.
    pub fn zeros(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let convs = config.conv_count();
        let mut seen = 0;
        let mut c_in = config.in_channels;
        let mut layers = Vec::with_capacity(config.stages.len());
        for s in &config.stages {
            match *s {
                StageSpec::Conv { kernel, stride, channels } => {
                    seen += 1;
                    let conv = Conv2dParams::zeros(c_in, channels, kernel, stride, 0);
                    let relu = seen < convs;
                    layers.push(if seen > convs - ADAPTIVE_TAIL {
                        Layer::Adaptive { layer: TAdaConvLayer::new(conv, config.queue_len), relu }
                    } else {
                        Layer::Conv { conv, relu }
                    });
                    c_in = channels;
                }
                StageSpec::MaxPool { kernel, stride } => layers.push(Layer::MaxPool { kernel, stride }),
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    /// He-normal base weights, small uniform biases, generators drawn with
    /// `calib_std` (zero reproduces the untrained-generator state).
    pub fn random<R: Rng + ?Sized>(config: &BackboneConfig, calib_std: f32, rng: &mut R) -> Result<Self> {
        let mut bb = Self::zeros(config)?;
        for layer in &mut bb.layers {
            let (conv, gen) = match layer {
                Layer::Conv { conv, .. } => (conv, None),
                Layer::Adaptive { layer, .. } => (&mut layer.base, Some((&mut layer.calib_w, &mut layer.calib_b))),
                Layer::MaxPool { .. } => continue,
            };
            let fan_in = conv.in_channels() * conv.kernel() * conv.kernel();
            conv.weight = Tensor::randn(conv.weight.shape(), (2.0 / fan_in as f32).sqrt(), rng);
            conv.bias = Tensor::from_fn(conv.bias.shape(), |_| rng.random_range(-0.1..0.1));
            if let Some((w, b)) = gen {
                if calib_std > 0.0 {
                    for g in [w, b] {
                        g.weight = Tensor::randn(g.weight.shape(), calib_std, rng);
                        g.bias = Tensor::randn(g.bias.shape(), calib_std, rng);
                    }
                }
            }
        }
        Ok(bb)
    }

    pub fn adaptive_layers(&self) -> impl Iterator<Item = &TAdaConvLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Adaptive { layer, .. } => Some(layer),
            _ => None,
        })
    }

    pub fn adaptive_layers_mut(&mut self) -> impl Iterator<Item = &mut TAdaConvLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Adaptive { layer, .. } => Some(layer),
            _ => None,
        })
    }

    /// Fresh, empty queues for a new sequence.
    pub fn new_queues(&self) -> BackboneQueues {
        BackboneQueues {
            queues: self
                .adaptive_layers()
                .map(|l| TemporalContextQueue::new(self.config.queue_len, l.base.in_channels()))
                .collect(),
        }
    }

    pub fn extract_features(&self, patch: &Tensor, mut mode: FeatureMode<'_>) -> Result<Tensor> {
        let side = match mode {
            FeatureMode::Template => self.config.template_size,
            FeatureMode::Streaming(_) => self.config.search_size,
        };
        if patch.shape() != [self.config.in_channels, side, side] {
            return Err(Error::dim(
                "extract_features",
                format!(
                    "patch {:?}, expected {}x{side}x{side}",
                    patch.shape(),
                    self.config.in_channels
                ),
            ));
        }
        if let FeatureMode::Streaming(q) = &mode {
            if q.queues.len() != self.adaptive_layers().count() {
                return Err(Error::State("queue set does not match backbone".into()));
            }
        }
        let mut x = patch.clone();
        let mut adaptive_idx = 0;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { conv, relu: r } => {
                    let y = conv.forward(&x)?;
                    if *r { relu(&y) } else { y }
                }
                Layer::Adaptive { layer, relu: r } => {
                    let y = match &mut mode {
                        FeatureMode::Template => {
                            let q = TemporalContextQueue::seeded(
                                self.config.queue_len,
                                &global_avg_pool(&x)?,
                            )?;
                            layer.forward(&x, &q)?
                        }
                        FeatureMode::Streaming(qs) => {
                            let q = &mut qs.queues[adaptive_idx];
                            q.push_descriptor(&x)?;
                            layer.forward(&x, q)?
                        }
                    };
                    adaptive_idx += 1;
                    if *r { relu(&y) } else { y }
                }
                Layer::MaxPool { kernel, stride } => max_pool2d(&x, *kernel, *stride)?,
            };
        }
        Ok(x)
    }

    /// Visits every parameter tensor with a stable hierarchical name.
    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv { conv, .. } => {
                    f(format!("{prefix}.stage{i}.weight"), &mut conv.weight);
                    f(format!("{prefix}.stage{i}.bias"), &mut conv.bias);
                }
                Layer::Adaptive { layer, .. } => {
                    f(format!("{prefix}.stage{i}.weight"), &mut layer.base.weight);
                    f(format!("{prefix}.stage{i}.bias"), &mut layer.base.bias);
                    f(format!("{prefix}.stage{i}.calib_w.weight"), &mut layer.calib_w.weight);
                    f(format!("{prefix}.stage{i}.calib_w.bias"), &mut layer.calib_w.bias);
                    f(format!("{prefix}.stage{i}.calib_b.weight"), &mut layer.calib_b.weight);
                    f(format!("{prefix}.stage{i}.calib_b.bias"), &mut layer.calib_b.bias);
                }
                Layer::MaxPool { .. } => {}
            }
        }
    }
}

/// Pushes a descriptor without a feature map; convenience for queue tests.
pub fn push_descriptor(queue: &mut TemporalContextQueue, feat: &Tensor) -> Result<()> {
    queue.push_descriptor(feat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(v: f32, c: usize) -> Tensor {
        Tensor::full(&[c], v)
    }

    #[test]
    fn first_push_fills_every_slot() {
        let mut q = TemporalContextQueue::new(3, 2);
        assert!(q.first_descriptor().is_none());
        q.push(&Tensor::vector(&[1.0, 2.0])).unwrap();
        assert_eq!(q.entries().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(q.first_descriptor().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn queue_is_newest_first_fifo() {
        let mut q = TemporalContextQueue::new(3, 1);
        for v in 1..=4 {
            q.push(&d(v as f32, 1)).unwrap();
        }
        assert_eq!(q.entries().data(), &[4.0, 3.0, 2.0]);
        assert_eq!(q.first_descriptor().unwrap().data(), &[1.0]);
        assert_eq!(q.capacity(), 3);
    }

    #[test]
    fn queue_of_one_holds_latest() {
        let mut q = TemporalContextQueue::new(1, 1);
        for v in 1..=5 {
            q.push(&d(v as f32, 1)).unwrap();
            assert_eq!(q.entries().data(), &[v as f32]);
        }
    }

    #[test]
    fn push_descriptor_pools_and_checks_width() {
        let mut q = TemporalContextQueue::new(2, 2);
        let feat = Tensor::new(&[2, 1, 2], vec![1.0, 3.0, -1.0, -3.0]).unwrap();
        push_descriptor(&mut q, &feat).unwrap();
        assert_eq!(q.entries().row(0), &[2.0, -2.0]);
        assert!(q.push_descriptor(&Tensor::zeros(&[3, 2, 2])).is_err());
        assert!(q.push(&Tensor::zeros(&[3])).is_err());
    }

    fn random_layer(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, l: usize) -> TAdaConvLayer {
        let mut layer = TAdaConvLayer::new(
            Conv2dParams {
                weight: Tensor::randn(&[c_out, c_in, 3, 3], 0.5, rng),
                bias: Tensor::randn(&[c_out], 0.5, rng),
                stride: 1,
                padding: 0,
            },
            l,
        );
        layer.calib_w.weight = Tensor::randn(&[c_out, c_in, l], 0.3, rng);
        layer.calib_w.bias = Tensor::randn(&[c_out], 0.3, rng);
        layer.calib_b.weight = Tensor::randn(&[c_out, c_in, l], 0.3, rng);
        layer.calib_b.bias = Tensor::randn(&[c_out], 0.3, rng);
        layer
    }

    #[test]
    fn zero_generators_give_unit_factors() {
        let layer = TAdaConvLayer::new(Conv2dParams::zeros(4, 2, 3, 1, 0), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = TemporalContextQueue::seeded(3, &Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        let (aw, ab) = layer.calibration_factors(&q).unwrap();
        assert_eq!(aw.data(), &[1.0, 1.0]);
        assert_eq!(ab.data(), &[1.0, 1.0]);
    }

    #[test]
    fn calibration_is_affine_in_generator_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = random_layer(&mut rng, 4, 2, 3);
        let mut q = TemporalContextQueue::new(3, 4);
        for _ in 0..3 {
            q.push(&Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        }
        let (aw, _) = layer.calibration_factors(&q).unwrap();
        let s = 2.5;
        let mut scaled = layer.clone();
        scaled.calib_w.weight = scaled.calib_w.weight.scale(s);
        scaled.calib_w.bias = scaled.calib_w.bias.scale(s);
        let (aws, _) = scaled.calibration_factors(&q).unwrap();
        for (a, b) in aw.data().iter().zip(aws.data()) {
            assert!((1.0 + s * (a - 1.0) - b).abs() < 1e-5);
        }
    }

    #[test]
    fn calibration_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(&mut rng, 4, 2, 3);
        let mut q = TemporalContextQueue::new(3, 4);
        for _ in 0..5 {
            q.push(&Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        }
        let (aw, ab) = layer.calibration_factors(&q).unwrap();
        let ow = reference::conv1d_over_queue(q.entries(), &layer.calib_w.weight, &layer.calib_w.bias);
        let ob = reference::conv1d_over_queue(q.entries(), &layer.calib_b.weight, &layer.calib_b.bias);
        for i in 0..2 {
            assert!((aw.data()[i] - (ow.data()[i] + 1.0)).abs() < 1e-6);
            assert!((ab.data()[i] - (ob.data()[i] + 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_queue_is_state_error() {
        let layer = TAdaConvLayer::new(Conv2dParams::zeros(2, 2, 1, 1, 0), 3);
        let q = TemporalContextQueue::new(3, 2);
        assert!(matches!(layer.calibration_factors(&q), Err(Error::State(_))));
    }

    #[test]
    fn zero_init_forward_is_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = random_layer(&mut rng, 3, 4, 3);
        layer.calib_w = QueueConv::zeros(3, 4, 3);
        layer.calib_b = QueueConv::zeros(3, 4, 3);
        let x = Tensor::randn(&[3, 7, 7], 1.0, &mut rng);
        let q = TemporalContextQueue::seeded(3, &global_avg_pool(&x).unwrap()).unwrap();
        let y = layer.forward(&x, &q).unwrap();
        assert!(y.bit_eq(&layer.base.forward(&x).unwrap()));
    }

    #[test]
    fn doubled_factor_doubles_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = random_layer(&mut rng, 2, 2, 1);
        layer.base.bias = Tensor::zeros(&[2]);
        layer.calib_w = QueueConv::zeros(2, 2, 1);
        layer.calib_b = QueueConv::zeros(2, 2, 1);
        layer.calib_w.bias.data_mut()[0] = 1.0; // alpha_w[0] = 2
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let q = TemporalContextQueue::seeded(1, &Tensor::zeros(&[2])).unwrap();
        let y = layer.forward(&x, &q).unwrap();
        let base = layer.base.forward(&x).unwrap();
        let n = 9;
        for i in 0..n {
            assert_eq!(y.data()[i], 2.0 * base.data()[i]);
            assert_eq!(y.data()[n + i], base.data()[n + i]);
        }
    }

    #[test]
    fn calibrated_forward_matches_materialized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let layer = random_layer(&mut rng, 3, 4, 3);
            let x = Tensor::randn(&[3, 6, 6], 1.0, &mut rng);
            let mut q = TemporalContextQueue::new(3, 3);
            q.push(&Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
            q.push(&Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
            let y = layer.forward(&x, &q).unwrap();

            let aw = reference::conv1d_over_queue(q.entries(), &layer.calib_w.weight, &layer.calib_w.bias);
            let ab = reference::conv1d_over_queue(q.entries(), &layer.calib_b.weight, &layer.calib_b.bias);
            let per = 3 * 9;
            let w = Tensor::from_fn(&[4, 3, 3, 3], |i| layer.base.weight.data()[i] * (aw.data()[i / per] + 1.0));
            let b = Tensor::from_fn(&[4], |i| layer.base.bias.data()[i] * (ab.data()[i] + 1.0));
            let want = reference::conv2d(&x, &w, &b, 1, 0);
            assert!(y.max_abs_diff(&want) < 1e-5);
        }
    }

    #[test]
    fn stage_plan_shapes() {
        let p = BackboneConfig::full();
        assert_eq!(p.output_extent(287), Some(26));
        assert_eq!(p.output_extent(127), Some(6));
        assert_eq!(p.total_stride(), 8);
        let t = BackboneConfig::tiny();
        assert_eq!(t.output_extent(32), Some(26));
        assert_eq!(t.output_extent(16), Some(10));
        assert_eq!(t.total_stride(), 1);
    }

    #[test]
    fn only_last_two_convs_are_adaptive() {
        let bb = Backbone::zeros(&BackboneConfig::full()).unwrap();
        let kinds: Vec<_> = bb
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { .. } => Some(false),
                Layer::Adaptive { .. } => Some(true),
                Layer::MaxPool { .. } => None,
            })
            .collect();
        assert_eq!(kinds, vec![false, false, false, true, true]);
    }

    #[test]
    fn tiny_extraction_shapes_and_wrong_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bb = Backbone::random(&BackboneConfig::tiny(), 0.0, &mut rng).unwrap();
        let mut qs = bb.new_queues();
        let s = bb
            .extract_features(&Tensor::randn(&[3, 32, 32], 1.0, &mut rng), FeatureMode::Streaming(&mut qs))
            .unwrap();
        assert_eq!(s.shape(), &[12, 26, 26]);
        let z = bb
            .extract_features(&Tensor::randn(&[3, 16, 16], 1.0, &mut rng), FeatureMode::Template)
            .unwrap();
        assert_eq!(z.shape(), &[12, 10, 10]);
        assert!(matches!(
            bb.extract_features(&Tensor::zeros(&[3, 20, 20]), FeatureMode::Template),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn identical_frames_give_identical_features_when_untrained() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bb = Backbone::random(&BackboneConfig::tiny(), 0.0, &mut rng).unwrap();
        let frame = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
        let mut qs = bb.new_queues();
        let other = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
        bb.extract_features(&other, FeatureMode::Streaming(&mut qs)).unwrap();
        let a = bb.extract_features(&frame, FeatureMode::Streaming(&mut qs)).unwrap();
        let b = bb.extract_features(&frame, FeatureMode::Streaming(&mut qs)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn single_slot_queue_streaming_equals_template_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = BackboneConfig::tiny();
        cfg.queue_len = 1;
        cfg.template_size = 32;
        let bb = Backbone::random(&cfg, 0.2, &mut rng).unwrap();
        let mut qs = bb.new_queues();
        for _ in 0..3 {
            let f = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
            let s = bb.extract_features(&f, FeatureMode::Streaming(&mut qs)).unwrap();
            let t = bb.extract_features(&f, FeatureMode::Template).unwrap();
            assert!(s.bit_eq(&t));
        }
    }

    #[test]
    fn calibration_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bb = Backbone::random(&BackboneConfig::tiny(), 0.2, &mut rng).unwrap();
        let frames: Vec<Tensor> = (0..8).map(|_| Tensor::randn(&[3, 32, 32], 1.0, &mut rng)).collect();
        let run = |frames: &[Tensor]| -> Vec<Tensor> {
            let mut qs = bb.new_queues();
            frames
                .iter()
                .map(|f| bb.extract_features(f, FeatureMode::Streaming(&mut qs)).unwrap())
                .collect()
        };
        let base = run(&frames);
        // perturbing the last frame leaves every earlier output alone
        let mut perturbed = frames.clone();
        perturbed[7] = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
        let out = run(&perturbed);
        for t in 0..7 {
            assert!(out[t].bit_eq(&base[t]));
        }
        assert!(!out[7].bit_eq(&base[7]));
        // two stacked L=3 layers see 2·(L−1)+1 = 5 frames: frame 1 reaches frame 5, not 6
        let mut early = frames.clone();
        early[1] = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
        let out = run(&early);
        assert!(!out[5].bit_eq(&base[5]));
        assert!(out[6].bit_eq(&base[6]));
        assert!(out[7].bit_eq(&base[7]));
    }
}
