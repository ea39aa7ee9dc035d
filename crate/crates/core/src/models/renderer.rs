use serde::{Deserialize, Serialize};

use super::kernel::{KernelPredictor, KernelPredictorConfig};
use super::{conv, conv_block, conv_param_count, init_res_block, leaky_gain, res_block, up_block, FlowOutput, Init};
use crate::error::{Error, Result};
use crate::tensor::{ops, Binding, ParamStore, Real, Tensor, Var};
use crate::warp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Predicted `n × n` kernels over flowed patches.
    ContentAware,
    /// Plain bilinear sampling at the flowed position.
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBlockConfig {
    pub size: usize,
    pub patch: usize,
}

/// Source encoder, guidance encoder/decoder and one attention block per
/// entry of `blocks`, at resolutions `input_size / 2^j`.
///
/// The source encoder (stride-2 conv blocks on the image) yields `f_s` at
/// every halving down to the coarsest block. The guidance branch encodes the
/// target structure to `input_size / 2^levels`, then decodes upward; at
/// each block size it fuses the attention output with the decoded `f_t` and
/// continues from the fused features. A last up-block returns to the input
/// resolution and a 3×3 conv with tanh produces RGB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererConfig {
    pub image_channels: usize,
    pub guidance_channels: usize,
    pub input_size: usize,
    /// Width at 1/2 resolution; doubled once below that.
    pub base_width: usize,
    /// Guidance-encoder depth (halvings).
    pub levels: usize,
    pub blocks: Vec<AttentionBlockConfig>,
    pub kernel_hidden: usize,
    pub sampling: SamplingMode,
    pub seed: u64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            image_channels: 3,
            guidance_channels: 3,
            input_size: 64,
            base_width: 16,
            levels: 3,
            blocks: vec![
                AttentionBlockConfig { size: 16, patch: 3 },
                AttentionBlockConfig { size: 32, patch: 5 },
            ],
            kernel_hidden: 16,
            sampling: SamplingMode::ContentAware,
            seed: 1,
        }
    }
}

impl RendererConfig {
    /// Single block with `n = 3`, for narrow inputs.
    pub fn narrow(input_size: usize, guidance_channels: usize) -> Self {
        RendererConfig {
            input_size,
            guidance_channels,
            blocks: vec![AttentionBlockConfig { size: input_size / 4, patch: 3 }],
            ..Default::default()
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * (1usize << (level - 1).min(1))
    }

    pub fn size_at(&self, level: usize) -> usize {
        self.input_size >> level
    }

    fn level_of(&self, size: usize) -> Option<usize> {
        (1..self.levels).find(|&l| self.size_at(l) == size)
    }

    /// Deepest source-encoder level.
    fn source_depth(&self) -> usize {
        self.blocks.iter().filter_map(|b| self.level_of(b.size)).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.guidance_channels == 0 || self.base_width == 0 || self.levels < 2 {
            return Err(Error::Config(format!("invalid renderer widths or depth in {self:?}")));
        }
        if self.input_size % (1 << self.levels) != 0 {
            return Err(Error::Config(format!(
                "renderer input {} not divisible by 2^{}",
                self.input_size, self.levels
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("renderer needs at least one attention block".into()));
        }
        let mut seen = Vec::new();
        for b in &self.blocks {
            if self.level_of(b.size).is_none() {
                return Err(Error::Config(format!("attention block size {} is not a decoder resolution", b.size)));
            }
            if b.patch % 2 == 0 {
                return Err(Error::Config(format!("attention patch size must be odd, got {}", b.patch)));
            }
            if seen.contains(&b.size) {
                return Err(Error::Config(format!("two attention blocks at {}", b.size)));
            }
            seen.push(b.size);
        }
        if self.kernel_hidden == 0 {
            return Err(Error::Config("kernel_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn block_at(&self, level: usize) -> Option<AttentionBlockConfig> {
        self.blocks.iter().copied().find(|b| b.size == self.size_at(level))
    }

    pub fn kernel_config(&self, block: &AttentionBlockConfig, index: usize) -> KernelPredictorConfig {
        let level = self.level_of(block.size).unwrap_or(1);
        KernelPredictorConfig {
            patch: block.patch,
            channels: self.width(level),
            hidden: self.kernel_hidden,
            seed: self.seed.wrapping_add(1000 + index as u64),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut cin = self.image_channels;
        for l in 1..=self.source_depth() {
            n += conv_param_count(cin, self.width(l), 3);
            cin = self.width(l);
        }
        let mut cin = self.guidance_channels;
        for l in 1..=self.levels {
            n += conv_param_count(cin, self.width(l), 3);
            cin = self.width(l);
        }
        n += 2 * conv_param_count(cin, cin, 3);
        for l in (0..self.levels).rev() {
            let cout = if l == 0 { self.base_width } else { self.width(l) };
            n += conv_param_count(self.width(l + 1), cout, 3);
        }
        n += conv_param_count(self.base_width, self.image_channels, 3);
        if self.sampling == SamplingMode::ContentAware {
            for (i, b) in self.blocks.iter().enumerate() {
                n += self.kernel_config(b, i).param_count();
            }
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelOverride {
    /// All weight on the center tap.
    OneHotCenter,
    Uniform,
}

/// Diagnostic overrides applied at every attention block.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderOverrides {
    pub mask: Option<f64>,
    pub kernel: Option<KernelOverride>,
}

#[derive(Clone, Copy)]
pub struct BlockTrace<'t, T> {
    pub size: usize,
    pub f_s: Var<'t, T>,
    pub f_t: Var<'t, T>,
    pub f_attn: Var<'t, T>,
    pub f_out: Var<'t, T>,
    pub kernels: Option<Var<'t, T>>,
    pub mask: Var<'t, T>,
}

#[derive(Clone)]
pub struct RenderOutput<'t, T> {
    pub image: Var<'t, T>,
    pub blocks: Vec<BlockTrace<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct Renderer<T> {
    pub config: RendererConfig,
    pub params: ParamStore<T>,
}

/// Decoder width at output level `l` (0 = full resolution).
fn dec_width(cfg: &RendererConfig, l: usize) -> usize {
    if l == 0 {
        cfg.base_width
    } else {
        cfg.width(l)
    }
}

impl<T: Real> Renderer<T> {
    pub fn new(config: RendererConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        {
            let mut init = Init::new(&mut params, config.seed);
            let mut cin = config.image_channels;
            for l in 1..=config.source_depth() {
                init.conv(&format!("src{l}"), cin, config.width(l), 3, leaky_gain());
                cin = config.width(l);
            }
            let mut cin = config.guidance_channels;
            for l in 1..=config.levels {
                init.conv(&format!("gd{l}"), cin, config.width(l), 3, leaky_gain());
                cin = config.width(l);
            }
            init_res_block(&mut init, "bottleneck", cin);
            for l in (0..config.levels).rev() {
                init.conv(&format!("up{l}"), config.width(l + 1), dec_width(&config, l), 3, leaky_gain());
            }
            init.conv("rgb", config.base_width, config.image_channels, 3, 1.0);
        }
        if config.sampling == SamplingMode::ContentAware {
            for (i, b) in config.blocks.iter().enumerate() {
                KernelPredictor::init(&config.kernel_config(b, i), &format!("attn{}.", b.size), &mut params)?;
            }
        }
        Ok(Renderer { config, params })
    }

    /// Render the target from the source image, target guidance and the
    /// flow estimator's outputs (one per block size).
    pub fn forward<'t>(
        &self,
        b: &Binding<'t, T>,
        source: Var<'t, T>,
        guidance: Var<'t, T>,
        flows: &[FlowOutput<'t, T>],
        overrides: &RenderOverrides,
    ) -> Result<RenderOutput<'t, T>> {
        let cfg = &self.config;
        let tape = source.tape();
        let expect = |v: Var<'t, T>, c: usize, what: &'static str| -> Result<usize> {
            let [n, vc, h, w] = v.value().dims4("renderer")?;
            if vc != c {
                return Err(Error::dim("renderer", what, c, vc));
            }
            if h != cfg.input_size || w != cfg.input_size {
                return Err(Error::dim("renderer", "input size", cfg.input_size, format!("{h}x{w}")));
            }
            Ok(n)
        };
        let batch = expect(source, cfg.image_channels, "source channels")?;
        if expect(guidance, cfg.guidance_channels, "guidance channels")? != batch {
            return Err(Error::dim("renderer", "guidance batch", batch, guidance.shape()[0]));
        }

        let mut f_s = Vec::new();
        let mut x = source;
        for l in 1..=cfg.source_depth() {
            x = conv_block(b, &format!("src{l}"), x, 2)?;
            f_s.push(x);
        }

        let mut x = guidance;
        for l in 1..=cfg.levels {
            x = conv_block(b, &format!("gd{l}"), x, 2)?;
        }
        x = res_block(b, "bottleneck", x)?;

        let mut traces = Vec::new();
        for l in (0..cfg.levels).rev() {
            x = up_block(b, &format!("up{l}"), x)?;
            let Some(block) = cfg.block_at(l) else { continue };
            let fo = flows.iter().find(|f| f.size == block.size).ok_or_else(|| Error::Contract {
                op: "renderer",
                detail: format!("no flow field at {0}x{0} for the attention block", block.size),
            })?;
            let index = cfg.blocks.iter().position(|bb| bb.size == block.size).unwrap();
            let fs = f_s[l - 1];
            let f_t = x;
            let (f_attn, kernels) = self.attend(b, &block, index, fs, f_t, fo.flow, overrides)?;
            let mask = match overrides.mask {
                Some(m) => tape.constant(Tensor::full(&[batch, 1, block.size, block.size], T::lit(m))),
                None => fo.mask,
            };
            let f_out = warp::occlusion_fuse(f_t, f_attn, mask)?;
            traces.push(BlockTrace {
                size: block.size,
                f_s: fs,
                f_t,
                f_attn,
                f_out,
                kernels,
                mask,
            });
            x = f_out;
        }
        let image = ops::tanh(conv(b, "rgb", x, 1)?);
        Ok(RenderOutput { image, blocks: traces })
    }

    #[allow(clippy::too_many_arguments)]
    fn attend<'t>(
        &self,
        b: &Binding<'t, T>,
        block: &AttentionBlockConfig,
        index: usize,
        f_s: Var<'t, T>,
        f_t: Var<'t, T>,
        flow: Var<'t, T>,
        overrides: &RenderOverrides,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        let fshape = flow.shape();
        if fshape[2] != block.size || fshape[3] != block.size {
            return Err(Error::dim("renderer", "flow size", block.size, fshape[2]));
        }
        let content_aware = self.config.sampling == SamplingMode::ContentAware;
        if !content_aware && overrides.kernel.is_none() {
            return Ok((warp::bilinear_sample(f_s, flow)?, None));
        }
        let patches = warp::extract_flowed_patches(f_s, flow, block.patch)?;
        let taps = block.patch * block.patch;
        let kernels = match overrides.kernel {
            Some(k) => {
                let n = fshape[0];
                let plane = block.size * block.size;
                let kt = Tensor::from_fn(&[n, taps, block.size, block.size], |i| {
                    let tap = (i / plane) % taps;
                    match k {
                        KernelOverride::OneHotCenter => {
                            if tap == taps / 2 {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        KernelOverride::Uniform => T::lit(1.0 / taps as f64),
                    }
                });
                f_s.tape().constant(kt)
            }
            None => {
                let target = warp::extract_target_patches(f_t, block.patch)?;
                let kcfg = self.config.kernel_config(block, index);
                KernelPredictor::apply(&kcfg, &format!("attn{}.", block.size), b, patches, target)?
            }
        };
        Ok((warp::local_attention_warp(patches, kernels)?, Some(kernels)))
    }
}
