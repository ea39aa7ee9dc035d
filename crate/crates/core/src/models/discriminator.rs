use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{conv_param_count, leaky_gain, Init, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{nn, Binding, ParamStore, Real, Tensor, Var};

/// Patch discriminator: one stride-2 3×3 conv + leaky ReLU per width, then a
/// stride-1 3×3 conv to one logit channel. Every weight is spectrally
/// normalized; each layer keeps its power-iteration vector as the buffer
/// `<layer>.u`.
///
/// Output side = input side / 2^len(widths) (rounded up at each layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Image + guidance channels.
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 6,
            widths: vec![16, 32, 64],
            seed: 2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }

    pub fn output_size(&self, input: usize) -> usize {
        self.widths
            .iter()
            .fold(input, |s, _| nn::conv_out_size(s, 3, 2, 1).unwrap_or(0))
    }

    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let mut cin = self.in_channels;
        let mut out = Vec::new();
        for &w in &self.widths {
            out.push((cin, w, 2));
            cin = w;
        }
        out.push((cin, 1, 1));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o, _)| conv_param_count(i, o, 3)).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, config.seed);
        let layers = config.layers();
        for (i, &(cin, cout, _)) in layers.iter().enumerate() {
            init.conv(&format!("d{i}"), cin, cout, 3, leaky_gain());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        for (i, &(_, cout, _)) in layers.iter().enumerate() {
            let u: Vec<f64> = (0..cout).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u = Tensor::new(&[cout], u.iter().map(|v| T::lit(v / norm)).collect())?;
            params.insert_buffer(format!("d{i}.u"), u);
        }
        Ok(Discriminator { config, params })
    }

    /// Patch logits `[b, 1, s, s]` and the refreshed power-iteration vectors.
    pub fn forward<'t>(&self, b: &Binding<'t, T>, input: Var<'t, T>) -> Result<(Var<'t, T>, Vec<(String, Tensor<T>)>)> {
        let c = input.value().dims4("discriminator")?[1];
        if c != self.config.in_channels {
            return Err(Error::dim("discriminator", "input channels", self.config.in_channels, c));
        }
        let layers = self.config.layers();
        let mut x = input;
        let mut refreshed = Vec::with_capacity(layers.len());
        for (i, &(_, _, stride)) in layers.iter().enumerate() {
            let u_path = format!("d{i}.u");
            let (w, u) = nn::spectral_normalize(b.get(&format!("d{i}.w"))?, self.params.get(&u_path)?)?;
            x = nn::conv2d(x, w, Some(b.get(&format!("d{i}.b"))?), stride, 1)?;
            if i + 1 < layers.len() {
                x = nn::leaky_relu(x, T::lit(LEAKY_SLOPE));
            }
            refreshed.push((u_path, u));
        }
        Ok((x, refreshed))
    }

    /// Store refreshed power-iteration vectors.
    pub fn update_buffers(&mut self, refreshed: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (path, u) in refreshed {
            self.params.set(&path, u)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn output_size_and_determinism() {
        let cfg = DiscriminatorConfig {
            in_channels: 4,
            widths: vec![4, 8],
            seed: 9,
        };
        assert_eq!(cfg.output_size(16), 4);
        assert_eq!(cfg.output_size(15), 4);
        let x = Tensor::from_fn(&[2, 4, 16, 16], |i| ((i % 13) as f32 - 6.0) / 6.0);
        let run = || {
            let d = Discriminator::<f32>::new(cfg.clone()).unwrap();
            let tape = Tape::new();
            let b = d.params.bind(&tape);
            d.forward(&b, tape.constant(x.clone())).unwrap().0.value()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[2, 1, 4, 4]);
        assert_eq!(a.data(), b.data());
        let d = Discriminator::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(d.params.num_trainable(), cfg.param_count());
    }
}
