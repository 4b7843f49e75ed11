//! Plain-text `key = value` model configuration.
//!
//! ```text
//! preset = tiny                  # or full; applied before other keys
//! stages = conv:3:1:12,conv:3:1:12,conv:3:1:12
//! queue_len = 3
//! heads = 6
//! filter = on                    # on | off
//! query = previous               # previous | current
//! init = conv                    # conv | random
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::{BackboneConfig, StageSpec};
use crate::error::{Error, Result};
use crate::transformer::{PriorInit, QueryChoice, TransformerShape, TransformerToggles};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub adjust_kernel: usize,
    pub init_kernel: usize,
    /// Context margin added around the target when cropping.
    pub context: f32,
    pub weight_seed: u64,
    /// Std-dev for the temporal generators in random models; 0 keeps them zero.
    pub calib_std: f32,
    pub toggles: TransformerToggles,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self::from_backbone(BackboneConfig::full())
    }

    pub fn tiny() -> Self {
        Self::from_backbone(BackboneConfig::tiny())
    }

    fn from_backbone(backbone: BackboneConfig) -> Self {
        let c = backbone.out_channels();
        Self {
            backbone,
            num_heads: 6,
            ffn_hidden: 2 * c,
            adjust_kernel: 3,
            init_kernel: 3,
            context: 0.5,
            weight_seed: 0,
            calib_std: 0.0,
            toggles: TransformerToggles::default(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn template_feature_extent(&self) -> usize {
        self.backbone.output_extent(self.backbone.template_size).unwrap_or(0)
    }

    pub fn search_feature_extent(&self) -> usize {
        self.backbone.output_extent(self.backbone.search_size).unwrap_or(0)
    }

    /// Side of the similarity map (and every map after it).
    pub fn similarity_extent(&self) -> usize {
        self.search_feature_extent() + 1 - self.template_feature_extent()
    }

    pub fn transformer_shape(&self) -> TransformerShape {
        TransformerShape {
            in_channels: self.model_dim(),
            model_dim: self.model_dim(),
            num_heads: self.num_heads,
            ffn_hidden: self.ffn_hidden,
            adjust_kernel: self.adjust_kernel,
            init_kernel: self.init_kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let c = self.model_dim();
        if self.num_heads == 0 || c % self.num_heads != 0 {
            return Err(Error::Input(format!(
                "model width {c} is not divisible by {} heads",
                self.num_heads
            )));
        }
        if self.template_feature_extent() > self.search_feature_extent() {
            return Err(Error::Input("template features larger than search features".into()));
        }
        if self.ffn_hidden == 0 || !(self.context >= 0.0) {
            return Err(Error::Input("ffn_hidden must be positive and context non-negative".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset") {
            None => Self::tiny(),
            Some((_, _, v)) if v == "tiny" => Self::tiny(),
            Some((_, _, v)) if v == "full" => Self::full(),
            Some((line, _, v)) => {
                return Err(Error::Config {
                    line: *line,
                    detail: format!("unknown preset {v:?}"),
                })
            }
        };
        let mut explicit_ffn = false;
        for (line, k, v) in &pairs {
            let err = |detail: String| Error::Config { line: *line, detail };
            if k == "ffn_hidden" {
                explicit_ffn = true;
            }
            if k != "preset" {
                cfg.set(k, v).map_err(err)?;
            }
        }
        if !explicit_ffn {
            cfg.ffn_hidden = 2 * cfg.model_dim();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override, as used by `--toggle`.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn on_off(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "on" | "true" | "1" => Ok(true),
                "off" | "false" | "0" => Ok(false),
                _ => Err(format!("{key}: expected on/off, got {v:?}")),
            }
        }
        match key {
            "stages" => self.backbone.stages = parse_stages(value)?,
            "in_channels" => self.backbone.in_channels = num(key, value)?,
            "queue_len" => self.backbone.queue_len = num(key, value)?,
            "template_size" => self.backbone.template_size = num(key, value)?,
            "search_size" => self.backbone.search_size = num(key, value)?,
            "model_dim" => {
                let c: usize = num(key, value)?;
                if c != self.model_dim() {
                    return Err(format!(
                        "model_dim {c} disagrees with the last stage width {}",
                        self.model_dim()
                    ));
                }
            }
            "heads" => self.num_heads = num(key, value)?,
            "ffn_hidden" => self.ffn_hidden = num(key, value)?,
            "adjust_kernel" => self.adjust_kernel = num(key, value)?,
            "init_kernel" => self.init_kernel = num(key, value)?,
            "context" => self.context = num(key, value)?,
            "weight_seed" => self.weight_seed = num(key, value)?,
            "calib_std" => self.calib_std = num(key, value)?,
            "prior_seed" => self.toggles.prior_seed = num(key, value)?,
            "filter" => self.toggles.filter_enabled = on_off(key, value)?,
            "reset_prior" => self.toggles.reset_prior_each_frame = on_off(key, value)?,
            "query" => {
                self.toggles.query_choice = match value {
                    "previous" => QueryChoice::PreviousPrior,
                    "current" => QueryChoice::CurrentMap,
                    _ => return Err(format!("query: expected previous/current, got {value:?}")),
                }
            }
            "init" => {
                self.toggles.prior_init = match value {
                    "conv" | "convolutional" => PriorInit::Convolutional,
                    "random" => PriorInit::Random,
                    _ => return Err(format!("init: expected conv/random, got {value:?}")),
                }
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses and applies a `key=value` toggle string.
    pub fn apply_toggle(&mut self, toggle: &str) -> Result<()> {
        let (k, v) = toggle
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("toggle {toggle:?} is not key=value")))?;
        self.set(k.trim(), v.trim()).map_err(Error::Input)?;
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let stages: Vec<String> = b
            .stages
            .iter()
            .map(|s| match *s {
                StageSpec::Conv { kernel, stride, channels } => format!("conv:{kernel}:{stride}:{channels}"),
                StageSpec::MaxPool { kernel, stride } => format!("pool:{kernel}:{stride}"),
            })
            .collect();
        let t = &self.toggles;
        let mut s = String::new();
        let _ = writeln!(s, "stages = {}", stages.join(","));
        let _ = writeln!(s, "in_channels = {}", b.in_channels);
        let _ = writeln!(s, "queue_len = {}", b.queue_len);
        let _ = writeln!(s, "template_size = {}", b.template_size);
        let _ = writeln!(s, "search_size = {}", b.search_size);
        let _ = writeln!(s, "model_dim = {}", self.model_dim());
        let _ = writeln!(s, "heads = {}", self.num_heads);
        let _ = writeln!(s, "ffn_hidden = {}", self.ffn_hidden);
        let _ = writeln!(s, "adjust_kernel = {}", self.adjust_kernel);
        let _ = writeln!(s, "init_kernel = {}", self.init_kernel);
        let _ = writeln!(s, "context = {}", self.context);
        let _ = writeln!(s, "weight_seed = {}", self.weight_seed);
        let _ = writeln!(s, "calib_std = {}", self.calib_std);
        let _ = writeln!(s, "prior_seed = {}", t.prior_seed);
        let _ = writeln!(s, "filter = {}", if t.filter_enabled { "on" } else { "off" });
        let _ = writeln!(
            s,
            "query = {}",
            match t.query_choice {
                QueryChoice::PreviousPrior => "previous",
                QueryChoice::CurrentMap => "current",
            }
        );
        let _ = writeln!(
            s,
            "init = {}",
            match t.prior_init {
                PriorInit::Convolutional => "conv",
                PriorInit::Random => "random",
            }
        );
        let _ = writeln!(s, "reset_prior = {}", if t.reset_prior_each_frame { "on" } else { "off" });
        s
    }
}

fn parse_stages(spec: &str) -> std::result::Result<Vec<StageSpec>, String> {
    spec.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            let n = |s: &str| s.parse::<usize>().map_err(|_| format!("bad stage number {s:?} in {item:?}"));
            match parts.as_slice() {
                ["conv", k, s, c] => Ok(StageSpec::Conv { kernel: n(k)?, stride: n(s)?, channels: n(c)? }),
                ["pool", k, s] => Ok(StageSpec::MaxPool { kernel: n(k)?, stride: n(s)? }),
                _ => Err(format!("bad stage {item:?}; expected conv:k:s:c or pool:k:s")),
            }
        })
        .collect()
}
