//! The streaming tracker: template init, per-frame search, refinement, decode.

use serde::Serialize;

use crate::backbone::{Backbone, BackboneQueues, FeatureMode};
use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::Frame;
use crate::model::{HeadOutput, ModelParams};
use crate::numerics::{depthwise_xcorr, Tensor};
use crate::transformer::{StepTrace, TemporalMemory, TemporalPrior};
use crate::wire;

use super::crop::{context_side, crop_patch, crop_region};
use super::decode::{decode, patch_to_image, Decoded};

const STATE_MAGIC: &[u8; 4] = b"TST1";

/// Immutable model plus configuration; shareable across sequences.
#[derive(Debug, Clone)]
pub struct Tracker {
    params: ModelParams,
    config: ModelConfig,
}

/// Everything one sequence carries from frame to frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    config: ModelConfig,
    initialized: bool,
    template: Tensor,
    queues: BackboneQueues,
    memory: TemporalMemory,
    frame_index: u64,
    last_box: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOutput {
    pub bbox: BBox,
    pub score: f32,
    pub decoded: Decoded,
    pub trace: StepTrace,
}

/// One line of the JSONL trace.
#[derive(Debug, Clone, Serialize)]
pub struct FrameRecord {
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub score: f32,
    pub gate_mean: Option<f32>,
    pub prior_norm: f64,
    pub attention_rows: usize,
    pub attention_max_row_error: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

impl FrameRecord {
    pub fn new(frame: u64, out: &TrackOutput) -> Self {
        Self {
            frame,
            bbox: out.bbox.to_xywh(),
            score: out.score,
            gate_mean: out.trace.gate_mean,
            prior_norm: out.trace.prior_norm,
            attention_rows: out.trace.attention.rows,
            attention_max_row_error: out.trace.attention.max_row_sum_error,
            latency_ms: None,
        }
    }
}

impl Tracker {
    pub fn new(params: ModelParams, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Self { params, config })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// A state that has not seen a first frame yet.
    pub fn blank_state(&self) -> TrackerState {
        TrackerState::blank(&self.config, &self.params.backbone)
    }

    pub fn init(&self, frame: &Frame, bbox: &BBox) -> Result<TrackerState> {
        let mut state = self.blank_state();
        self.init_into(&mut state, frame, bbox)?;
        Ok(state)
    }

    /// Initializes `state` in place, discarding whatever it held.
    pub fn init_into(&self, state: &mut TrackerState, frame: &Frame, bbox: &BBox) -> Result<()> {
        let vals = [bbox.cx, bbox.cy, bbox.w, bbox.h];
        if vals.iter().any(|v| !v.is_finite()) || bbox.w < 1.0 || bbox.h < 1.0 {
            return Err(Error::Input(format!("degenerate initial box {bbox:?}")));
        }
        let (fw, fh) = (frame.width() as f32, frame.height() as f32);
        if !(0.0..=fw).contains(&bbox.cx) || !(0.0..=fh).contains(&bbox.cy) {
            return Err(Error::Input(format!("initial box {bbox:?} lies outside the {fw}x{fh} frame")));
        }
        self.reset(state);
        let cfg = &self.config;
        let z = normalize(crop_patch(frame, bbox, cfg.backbone.template_size, cfg.context));
        let template = self.params.backbone.extract_features(&z, FeatureMode::Template)?;
        let (sim, _) = self.similarity(&mut state.queues, &template, frame, bbox)?;
        state
            .memory
            .init(&self.params.transformer, &sim, &cfg.toggles)?;
        state.template = template;
        state.last_box = *bbox;
        state.frame_index = 1;
        state.initialized = true;
        Ok(())
    }

    pub fn reset(&self, state: &mut TrackerState) {
        *state = self.blank_state();
    }

    pub fn track(&self, state: &mut TrackerState, frame: &Frame) -> Result<TrackOutput> {
        if !state.initialized {
            return Err(Error::State("track called before init".into()));
        }
        let last = state.last_box;
        let (sim, side) = self.similarity(&mut state.queues, &state.template, frame, &last)?;
        let mut trace = StepTrace::default();
        let index = state.frame_index + 1;
        let refined = state.memory.step(
            &self.params.transformer,
            &sim,
            index,
            &self.config.toggles,
            Some(&mut trace),
        )?;
        let head = self.params.head.forward(&refined)?;
        let head = HeadOutput {
            cls: head.cls.finite("prediction head")?,
            reg: head.reg.finite("prediction head")?,
        };
        let search = self.config.backbone.search_size;
        let decoded = decode(&head, self.config.backbone.total_stride(), search)?;
        let bbox = patch_to_image(&decoded.patch_box, last.cx, last.cy, side as f32, search)
            .clamped(frame.width(), frame.height());
        if ![bbox.cx, bbox.cy, bbox.w, bbox.h].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "box decode" });
        }
        state.last_box = bbox;
        state.frame_index = index;
        Ok(TrackOutput {
            bbox,
            score: decoded.score,
            decoded,
            trace,
        })
    }

    /// Search crop around `center`, streaming features, correlation.
    fn similarity(
        &self,
        queues: &mut BackboneQueues,
        template: &Tensor,
        frame: &Frame,
        center: &BBox,
    ) -> Result<(Tensor, f64)> {
        let b = &self.config.backbone;
        let side = context_side(center, self.config.context) * b.search_size as f64 / b.template_size as f64;
        let x = normalize(crop_region(frame, center.cx as f64, center.cy as f64, side, b.search_size));
        let feats = self.params.backbone.extract_features(&x, FeatureMode::Streaming(queues))?;
        Ok((depthwise_xcorr(&feats, template)?, side))
    }
}

fn normalize(patch: Tensor) -> Tensor {
    patch.map(|v| v / 255.0)
}

impl TrackerState {
    fn blank(config: &ModelConfig, backbone: &Backbone) -> Self {
        let t = config.template_feature_extent();
        Self {
            config: config.clone(),
            initialized: false,
            template: Tensor::zeros(&[config.model_dim(), t, t]),
            queues: backbone.new_queues(),
            memory: TemporalMemory::new(),
            frame_index: 0,
            last_box: BBox::new(0.0, 0.0, 0.0, 0.0),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn template_features(&self) -> &Tensor {
        &self.template
    }

    pub fn queues(&self) -> &BackboneQueues {
        &self.queues
    }

    pub fn prior(&self) -> Option<&TemporalPrior> {
        self.memory.prior()
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    pub fn last_box(&self) -> BBox {
        self.last_box
    }

    /// Moves the next search region without touching any temporal context.
    pub fn recenter(&mut self, bbox: BBox) {
        self.last_box = bbox;
    }

    fn prior_shape(&self) -> [usize; 2] {
        let s = self.config.similarity_extent();
        [s * s, self.config.model_dim()]
    }

    /// Fixed-layout little-endian encoding; the length depends only on the
    /// configuration.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.push(self.initialized as u8);
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        wire::put_f32s(&mut out, &[self.last_box.cx, self.last_box.cy, self.last_box.w, self.last_box.h]);
        wire::put_f32s(&mut out, self.template.data());
        for q in &self.queues.queues {
            q.write_bytes(&mut out);
        }
        out.push(self.memory.is_initialized() as u8);
        match self.memory.prior() {
            Some(p) => {
                out.extend_from_slice(&p.frame_index.to_le_bytes());
                wire::put_f32s(&mut out, p.tokens.data());
            }
            None => {
                out.extend_from_slice(&0u64.to_le_bytes());
                let [t, c] = self.prior_shape();
                wire::put_f32s(&mut out, &vec![0.0; t * c]);
            }
        }
        out
    }

    pub fn from_bytes(config: &ModelConfig, bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::State(format!("cannot decode tracker state: {what}"));
        let mut state = Self::blank(config, &Backbone::zeros(&config.backbone)?);
        let mut src = bytes;
        let magic: [u8; 4] = wire::take_u32(&mut src)?.to_le_bytes();
        if &magic != STATE_MAGIC {
            return Err(bad("bad magic"));
        }
        let flag = |src: &mut &[u8]| -> Result<bool> {
            match src.split_first() {
                Some((&b @ (0 | 1), rest)) => {
                    *src = rest;
                    Ok(b == 1)
                }
                _ => Err(bad("bad flag byte")),
            }
        };
        state.initialized = flag(&mut src)?;
        state.frame_index = wire::take_u64(&mut src)?;
        let mut b = [0.0f32; 4];
        wire::take_f32s(&mut src, &mut b)?;
        state.last_box = BBox::new(b[0], b[1], b[2], b[3]);
        wire::take_f32s(&mut src, state.template.data_mut())?;
        for q in &mut state.queues.queues {
            q.read_bytes(&mut src)?;
        }
        let has_prior = flag(&mut src)?;
        let frame_index = wire::take_u64(&mut src)?;
        let mut tokens = Tensor::zeros(&state.prior_shape());
        wire::take_f32s(&mut src, tokens.data_mut())?;
        if !src.is_empty() {
            return Err(bad("trailing bytes"));
        }
        state
            .memory
            .restore(has_prior.then_some(TemporalPrior { tokens, frame_index }));
        Ok(state)
    }
}
