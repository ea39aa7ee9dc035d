use serde::{Deserialize, Serialize};

use super::{
    conv, conv_act, conv_block, conv_param_count, init_res_block, leaky_gain, res_block, res_block_plain, Init,
};
use crate::error::{Error, Result};
use crate::tensor::{ops, Binding, ParamStore, Real, Tape, Tensor, Var};
use crate::warp::{FlowField, OcclusionMask};

/// Where the flow estimator applies instance normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    /// Every conv block, bottleneck and decoder included.
    All,
    /// Encoder blocks only; bottleneck and decoder keep per-sample means,
    /// which carry the global motion.
    #[default]
    Encoder,
    None,
}

/// Encoder-decoder producing one (flow, mask) pair per output size.
///
/// Encoder level `i` halves the resolution with a stride-2 conv block; the
/// bottleneck is a residual block; each decoder level doubles the
/// resolution, adds the encoder skip of equal size and, when that size is
/// listed in `output_sizes`, emits a flow head (linear) and a mask head
/// (sigmoid) over the shared features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowEstimatorConfig {
    /// Source image + source guidance + target guidance channels.
    pub in_channels: usize,
    pub input_size: usize,
    pub base_width: usize,
    pub levels: usize,
    pub output_sizes: Vec<usize>,
    /// Orthogonal gain of the flow head; small values start near zero flow.
    pub flow_head_gain: f64,
    pub norm: NormPlacement,
    pub seed: u64,
}

impl Default for FlowEstimatorConfig {
    fn default() -> Self {
        FlowEstimatorConfig {
            in_channels: 9,
            input_size: 64,
            base_width: 32,
            levels: 3,
            output_sizes: vec![16, 32],
            flow_head_gain: 0.1,
            norm: NormPlacement::Encoder,
            seed: 0,
        }
    }
}

impl FlowEstimatorConfig {
    /// Channel width at encoder level `i` (1-based).
    pub fn width(&self, level: usize) -> usize {
        self.base_width * (1usize << (level - 1).min(1))
    }

    /// Resolution at encoder level `i`.
    pub fn size_at(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.levels == 0 {
            return Err(Error::Config("flow estimator channels and levels must be positive".into()));
        }
        if self.input_size % (1 << self.levels) != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.levels
            )));
        }
        if self.output_sizes.is_empty() {
            return Err(Error::Config("flow estimator needs at least one output size".into()));
        }
        for &s in &self.output_sizes {
            if !(1..self.levels).any(|l| self.size_at(l) == s) {
                return Err(Error::Config(format!(
                    "flow output {s}x{s} is not reachable from {} with {} levels (decoder sizes {:?})",
                    self.input_size,
                    self.levels,
                    (1..self.levels).map(|l| self.size_at(l)).collect::<Vec<_>>()
                )));
            }
        }
        if !(self.flow_head_gain >= 0.0) {
            return Err(Error::Config("flow_head_gain must be >= 0".into()));
        }
        Ok(())
    }

    /// Lowest decoder level that still has to be computed.
    fn last_level(&self) -> usize {
        (1..self.levels)
            .filter(|&l| self.output_sizes.contains(&self.size_at(l)))
            .min()
            .unwrap_or(1)
    }

    /// Trainable element count, layer by layer.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut cin = self.in_channels;
        for l in 1..=self.levels {
            n += conv_param_count(cin, self.width(l), 3);
            cin = self.width(l);
        }
        n += 2 * conv_param_count(cin, cin, 3);
        for l in (self.last_level()..self.levels).rev() {
            n += conv_param_count(self.width(l + 1), self.width(l), 3);
            if self.output_sizes.contains(&self.size_at(l)) {
                n += conv_param_count(self.width(l), 2, 3) + conv_param_count(self.width(l), 1, 3);
            }
        }
        n
    }
}

/// Flow in pixels at `size` and the occlusion mask in (0, 1).
#[derive(Clone, Copy)]
pub struct FlowOutput<'t, T> {
    pub size: usize,
    pub flow: Var<'t, T>,
    pub mask: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct FlowEstimator<T> {
    pub config: FlowEstimatorConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> FlowEstimator<T> {
    pub fn new(config: FlowEstimatorConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, config.seed);
        let mut cin = config.in_channels;
        for l in 1..=config.levels {
            init.conv(&format!("enc{l}"), cin, config.width(l), 3, leaky_gain());
            cin = config.width(l);
        }
        init_res_block(&mut init, "bottleneck", cin);
        for l in (config.last_level()..config.levels).rev() {
            init.conv(&format!("dec{l}"), config.width(l + 1), config.width(l), 3, leaky_gain());
            if config.output_sizes.contains(&config.size_at(l)) {
                let s = config.size_at(l);
                init.conv(&format!("flow{s}"), config.width(l), 2, 3, config.flow_head_gain);
                init.conv(&format!("mask{s}"), config.width(l), 1, 3, 1.0);
            }
        }
        Ok(FlowEstimator { config, params })
    }

    /// Forward pass on `[b, in_channels, S, S]`; outputs ordered coarse to fine.
    pub fn forward<'t>(&self, b: &Binding<'t, T>, input: Var<'t, T>) -> Result<Vec<FlowOutput<'t, T>>> {
        let cfg = &self.config;
        let x = input.value();
        let [_, c, h, w] = x.dims4("flow_estimator")?;
        if c != cfg.in_channels {
            return Err(Error::dim("flow_estimator", "input channels", cfg.in_channels, c));
        }
        if h != cfg.input_size || w != cfg.input_size {
            return Err(Error::dim(
                "flow_estimator",
                "input size",
                format!("{0}x{0}", cfg.input_size),
                format!("{h}x{w}"),
            ));
        }
        let mut skips = Vec::with_capacity(cfg.levels);
        let mut x = input;
        let decoder_norm = cfg.norm == NormPlacement::All;
        let cb = |name: &str, x, stride, norm| {
            if norm {
                conv_block(b, name, x, stride)
            } else {
                conv_act(b, name, x, stride)
            }
        };
        for l in 1..=cfg.levels {
            x = cb(&format!("enc{l}"), x, 2, cfg.norm != NormPlacement::None)?;
            skips.push(x);
        }
        x = if decoder_norm {
            res_block(b, "bottleneck", x)?
        } else {
            res_block_plain(b, "bottleneck", x)?
        };
        let mut outs = Vec::new();
        for l in (cfg.last_level()..cfg.levels).rev() {
            x = cb(&format!("dec{l}"), ops::upsample_nearest(x, 2)?, 1, decoder_norm)?;
            x = ops::add(x, skips[l - 1])?;
            let s = cfg.size_at(l);
            if cfg.output_sizes.contains(&s) {
                let flow = conv(b, &format!("flow{s}"), x, 1)?;
                let mask = ops::sigmoid(conv(b, &format!("mask{s}"), x, 1)?);
                outs.push(FlowOutput { size: s, flow, mask });
            }
        }
        Ok(outs)
    }

    /// Untracked forward pass.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Vec<(FlowField<T>, OcclusionMask<T>)>> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        self.forward(&b, tape.constant(input.clone()))?
            .into_iter()
            .map(|o| Ok((FlowField::new(o.flow.value())?, OcclusionMask::new(o.mask.value())?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FlowEstimatorConfig {
        FlowEstimatorConfig {
            in_channels: 9,
            input_size: 32,
            base_width: 4,
            levels: 2,
            output_sizes: vec![16],
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn output_shapes_and_mask_range() {
        let net = FlowEstimator::<f32>::new(small()).unwrap();
        let x = Tensor::from_fn(&[1, 9, 32, 32], |i| ((i * 37) % 17) as f32 / 8.0 - 1.0);
        let outs = net.infer(&x).unwrap();
        assert_eq!(outs.len(), 1);
        let (flow, mask) = &outs[0];
        assert_eq!(flow.tensor().shape(), &[1, 2, 16, 16]);
        assert_eq!(mask.tensor().shape(), &[1, 1, 16, 16]);
        assert!(mask.tensor().data().iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = FlowEstimator::<f32>::new(small()).unwrap();
        let b = FlowEstimator::<f32>::new(small()).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        let c = FlowEstimator::<f32>::new(FlowEstimatorConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.params.to_bytes(), c.params.to_bytes());
    }

    #[test]
    fn param_count_matches_store() {
        for cfg in [small(), FlowEstimatorConfig::default()] {
            let net = FlowEstimator::<f32>::new(cfg.clone()).unwrap();
            assert_eq!(net.params.num_trainable(), cfg.param_count());
        }
    }

    #[test]
    fn unreachable_output_size() {
        let cfg = FlowEstimatorConfig { output_sizes: vec![24], ..small() };
        assert!(matches!(FlowEstimator::<f32>::new(cfg), Err(Error::Config(_))));
        let cfg = FlowEstimatorConfig { output_sizes: vec![8], ..small() };
        assert!(matches!(FlowEstimator::<f32>::new(cfg), Err(Error::Config(_))));
    }
}
