//! The full parameter set: backbone, temporal transformer, prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{relu, Conv2dParams, Tensor};
use crate::transformer::TransformerParams;

/// Anchor-free prediction head: two 3×3 conv stacks on the refined map.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub cls: [Conv2dParams; 2],
    pub reg: [Conv2dParams; 2],
}

/// Raw head output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `2×H×W`, background then foreground logits.
    pub cls: Tensor,
    /// `4×H×W`, offsets `(l, t, r, b)` in feature cells.
    pub reg: Tensor,
}

impl HeadParams {
    pub fn zeros(c: usize) -> Self {
        let conv = |o| Conv2dParams::zeros(c, o, 3, 1, 1);
        Self {
            cls: [conv(c), conv(2)],
            reg: [conv(c), conv(4)],
        }
    }

    pub fn forward(&self, refined: &Tensor) -> Result<HeadOutput> {
        let branch = |stack: &[Conv2dParams; 2]| -> Result<Tensor> {
            stack[1].forward(&relu(&stack[0].forward(refined)?))
        };
        Ok(HeadOutput {
            cls: branch(&self.cls)?,
            reg: branch(&self.reg)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Backbone,
    pub transformer: TransformerParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backbone: Backbone::zeros(&config.backbone)?,
            transformer: TransformerParams::zeros(&config.transformer_shape())?,
            head: HeadParams::zeros(config.model_dim()),
        })
    }

    /// Seeded random weights; generators follow `config.calib_std`.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::random(&config.backbone, config.calib_std, &mut rng)?;
        let transformer = TransformerParams::random(&config.transformer_shape(), &mut rng)?;
        let mut head = HeadParams::zeros(config.model_dim());
        for conv in head.cls.iter_mut().chain(head.reg.iter_mut()) {
            let fan_in = conv.in_channels() * 9;
            conv.weight = Tensor::randn(conv.weight.shape(), (1.0 / fan_in as f32).sqrt(), &mut rng);
        }
        Ok(Self {
            backbone,
            transformer,
            head,
        })
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_params_mut("backbone", f);
        self.transformer.visit_params_mut("transformer", f);
        for (branch, stack) in [("cls", &mut self.head.cls), ("reg", &mut self.head.reg)] {
            for (i, conv) in stack.iter_mut().enumerate() {
                f(format!("head.{branch}{i}.weight"), &mut conv.weight);
                f(format!("head.{branch}{i}.bias"), &mut conv.bias);
            }
        }
    }

    /// `(name, tensor)` pairs in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.clone().visit_params_mut(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Zeroes both temporal generators of every adaptive layer.
    pub fn zero_calibration(&mut self) {
        for layer in self.backbone.adaptive_layers_mut() {
            for g in [&mut layer.calib_w, &mut layer.calib_b] {
                g.weight = Tensor::zeros(g.weight.shape());
                g.bias = Tensor::zeros(g.bias.shape());
            }
        }
    }

    /// Zeroes every parameter of the temporal information filter.
    pub fn zero_filter(&mut self) {
        self.visit_params_mut(&mut |name, t| {
            if name.starts_with("transformer.filter.") {
                *t = Tensor::zeros(t.shape());
            }
        });
    }

    pub(crate) fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expect = Self::zeros(config)?;
        let a = self.named_tensors();
        let b = expect.named_tensors();
        let same = a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Input("parameters do not match the configuration".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn names_are_unique_and_stable() {
        let p = ModelParams::random(&ModelConfig::tiny(), 1).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let set: HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"head.cls1.weight".to_string()));
        assert!(names.contains(&"backbone.stage2.calib_w.weight".to_string()));
        let again: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, again);
    }

    #[test]
    fn random_is_seed_deterministic() {
        let c = ModelConfig::tiny();
        assert_eq!(ModelParams::random(&c, 5).unwrap(), ModelParams::random(&c, 5).unwrap());
        assert_ne!(ModelParams::random(&c, 5).unwrap(), ModelParams::random(&c, 6).unwrap());
    }

    #[test]
    fn default_generators_are_zero() {
        let p = ModelParams::random(&ModelConfig::tiny(), 2).unwrap();
        for l in p.backbone.adaptive_layers() {
            assert!(l.calib_w.weight.data().iter().all(|&v| v == 0.0));
            assert!(l.calib_b.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn head_shapes() {
        let p = ModelParams::random(&ModelConfig::tiny(), 3).unwrap();
        let out = p.head.forward(&Tensor::zeros(&[12, 17, 17])).unwrap();
        assert_eq!(out.cls.shape(), &[2, 17, 17]);
        assert_eq!(out.reg.shape(), &[4, 17, 17]);
    }
}
