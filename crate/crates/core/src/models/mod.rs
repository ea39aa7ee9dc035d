//! Network builders: flow estimator, renderer, kernel predictor and
//! discriminator.
//!
//! Every network owns a [`ParamStore`] whose entries are named
//! `<layer>.w` / `<layer>.b`. Forward passes take a [`Binding`] of that
//! store so the caller chooses which parameters are tracked.

mod discriminator;
mod flow_estimator;
mod kernel;
mod renderer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{nn, Binding, ParamStore, Real, Tensor, Var};

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use flow_estimator::{FlowEstimator, FlowEstimatorConfig, FlowOutput, NormPlacement};
pub use kernel::{KernelPredictor, KernelPredictorConfig};
pub use renderer::{
    AttentionBlockConfig, BlockTrace, KernelOverride, RenderOutput, RenderOverrides, Renderer,
    RendererConfig, SamplingMode,
};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// All three network configs; the layout of the model TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub flow_estimator: FlowEstimatorConfig,
    pub renderer: RendererConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    /// Configs for `guidance` structure channels at `size × size` input.
    pub fn toy(size: usize, guidance: usize) -> Self {
        ModelConfig {
            flow_estimator: FlowEstimatorConfig {
                in_channels: 3 + 2 * guidance,
                input_size: size,
                output_sizes: vec![size / 4, size / 2],
                ..Default::default()
            },
            renderer: RendererConfig {
                guidance_channels: guidance,
                input_size: size,
                blocks: vec![
                    AttentionBlockConfig { size: size / 4, patch: 3 },
                    AttentionBlockConfig { size: size / 2, patch: 5 },
                ],
                ..Default::default()
            },
            discriminator: DiscriminatorConfig {
                in_channels: 3 + guidance,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow_estimator.validate()?;
        self.renderer.validate()?;
        self.discriminator.validate()?;
        for b in &self.renderer.blocks {
            if !self.flow_estimator.output_sizes.contains(&b.size) {
                return Err(Error::Config(format!(
                    "renderer block at {0}x{0} has no flow estimator output at that size",
                    b.size
                )));
            }
        }
        Ok(())
    }
}

/// Rows of a `rows × cols` matrix with orthonormal rows (or columns, when
/// `rows > cols`), scaled by `gain`.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (r, c) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut m: Vec<Vec<f64>> = (0..r)
        .map(|_| (0..c).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..r {
        // modified Gram-Schmidt, run twice for numerical orthogonality
        for _ in 0..2 {
            for j in 0..i {
                let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = m.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= d * b;
                }
            }
        }
        let norm = m[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        m[i].iter_mut().for_each(|a| *a /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..r {
        for j in 0..c {
            let idx = if rows <= cols { i * cols + j } else { j * cols + i };
            out[idx] = m[i][j] * gain;
        }
    }
    out
}

/// Gain keeping activations unit-scale through a leaky ReLU.
pub fn leaky_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Orthogonal `[cout, cin, k, k]` weight and zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let w = orthogonal(cout, cin * k * k, gain, &mut self.rng);
        let w = Tensor::new(&[cout, cin, k, k], w.into_iter().map(T::lit).collect()).unwrap();
        self.store.insert(format!("{name}.w"), w);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
}

/// `conv` with "same" padding and the layer's bias.
pub(crate) fn conv<'t, T: Real>(
    b: &Binding<'t, T>,
    name: &str,
    x: Var<'t, T>,
    stride: usize,
) -> Result<Var<'t, T>> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let k = w.shape()[2];
    nn::conv2d(x, w, Some(bias), stride, k / 2)
}

/// conv → instance norm → leaky ReLU.
pub(crate) fn conv_block<'t, T: Real>(
    b: &Binding<'t, T>,
    name: &str,
    x: Var<'t, T>,
    stride: usize,
) -> Result<Var<'t, T>> {
    let y = conv(b, name, x, stride)?;
    let y = nn::instance_norm(y, T::lit(NORM_EPS))?;
    Ok(nn::leaky_relu(y, T::lit(LEAKY_SLOPE)))
}

/// conv → leaky ReLU.
pub(crate) fn conv_act<'t, T: Real>(
    b: &Binding<'t, T>,
    name: &str,
    x: Var<'t, T>,
    stride: usize,
) -> Result<Var<'t, T>> {
    Ok(nn::leaky_relu(conv(b, name, x, stride)?, T::lit(LEAKY_SLOPE)))
}

/// `x + conv(lrelu(conv(x)))`, same parameters as [`res_block`].
pub(crate) fn res_block_plain<'t, T: Real>(b: &Binding<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let y = conv_act(b, &format!("{name}.0"), x, 1)?;
    crate::tensor::ops::add(x, conv(b, &format!("{name}.1"), y, 1)?)
}

/// `x + IN(conv(lrelu(IN(conv(x)))))`.
pub(crate) fn res_block<'t, T: Real>(b: &Binding<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let y = conv_block(b, &format!("{name}.0"), x, 1)?;
    let y = conv(b, &format!("{name}.1"), y, 1)?;
    let y = nn::instance_norm(y, T::lit(NORM_EPS))?;
    crate::tensor::ops::add(x, y)
}

pub(crate) fn init_res_block<T: Real>(init: &mut Init<'_, T>, name: &str, width: usize) {
    init.conv(&format!("{name}.0"), width, width, 3, leaky_gain());
    init.conv(&format!("{name}.1"), width, width, 3, 1.0);
}

/// Nearest ×2 upsampling followed by a conv block.
pub(crate) fn up_block<'t, T: Real>(b: &Binding<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let x = crate::tensor::ops::upsample_nearest(x, 2)?;
    conv_block(b, name, x, 1)
}

/// Trainable element count of a conv layer with bias.
pub fn conv_param_count(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_rows_and_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(4, 9), (9, 4), (5, 5)] {
            let m = orthogonal(r, c, 1.0, &mut rng);
            let (outer, inner) = if r <= c { (r, c) } else { (c, r) };
            for i in 0..outer {
                for j in 0..outer {
                    let d: f64 = (0..inner)
                        .map(|k| {
                            let at = |a: usize| if r <= c { m[a * c + k] } else { m[k * c + a] };
                            at(i) * at(j)
                        })
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12, "{r}x{c} ({i},{j}) {d}");
                }
            }
        }
    }

    #[test]
    fn toy_config_is_consistent() {
        let cfg = ModelConfig::toy(64, 3);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.renderer.blocks[0].size = 8;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ModelConfig::toy(64, 3);
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("[flow_estimator]") && text.contains("[renderer]") && text.contains("[discriminator]"));
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
