use serde::{Deserialize, Serialize};

use super::{conv, conv_param_count, leaky_gain, Init, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{nn, ops, Binding, ParamStore, Real, Var};

/// 1×1 conv stack over concatenated source and target patches, softmax over
/// the `n·n` taps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelPredictorConfig {
    pub patch: usize,
    pub channels: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for KernelPredictorConfig {
    fn default() -> Self {
        KernelPredictorConfig {
            patch: 3,
            channels: 16,
            hidden: 32,
            seed: 0,
        }
    }
}

impl KernelPredictorConfig {
    pub fn taps(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch % 2 == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "kernel predictor needs an odd patch and positive widths, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        conv_param_count(2 * self.channels * self.taps(), self.hidden, 1) + conv_param_count(self.hidden, self.taps(), 1)
    }
}

#[derive(Clone, Debug)]
pub struct KernelPredictor<T> {
    pub config: KernelPredictorConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> KernelPredictor<T> {
    pub fn new(config: KernelPredictorConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        Self::init(&config, "", &mut params)?;
        Ok(KernelPredictor { config, params })
    }

    /// Insert the predictor's parameters under `prefix` into `store`.
    pub(crate) fn init(config: &KernelPredictorConfig, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        config.validate()?;
        let mut init = Init::new(store, config.seed);
        let cin = 2 * config.channels * config.taps();
        init.conv(&format!("{prefix}kp.0"), cin, config.hidden, 1, leaky_gain());
        init.conv(&format!("{prefix}kp.1"), config.hidden, config.taps(), 1, 1.0);
        Ok(())
    }

    pub fn forward<'t>(&self, b: &Binding<'t, T>, source: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
        Self::apply(&self.config, "", b, source, target)
    }

    /// Kernels `[b, n·n, h, w]` from patches `[b, c, n·n, h, w]`.
    pub(crate) fn apply<'t>(
        config: &KernelPredictorConfig,
        prefix: &str,
        b: &Binding<'t, T>,
        source: Var<'t, T>,
        target: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (ss, ts) = (source.shape(), target.shape());
        if ss.len() != 5 {
            return Err(Error::dim("kernel_predictor", "patch rank", 5, ss.len()));
        }
        if ts != ss {
            return Err(Error::dim(
                "kernel_predictor",
                "target patch shape",
                format!("{ss:?}"),
                format!("{ts:?}"),
            ));
        }
        let [n, c, k, h, w] = [ss[0], ss[1], ss[2], ss[3], ss[4]];
        if c != config.channels {
            return Err(Error::dim("kernel_predictor", "patch channels", config.channels, c));
        }
        if k != config.taps() {
            return Err(Error::dim("kernel_predictor", "patch taps", config.taps(), k));
        }
        let flat = |v| ops::reshape(v, &[n, c * k, h, w]);
        let x = ops::concat_channels(&[flat(source)?, flat(target)?])?;
        let x = conv(b, &format!("{prefix}kp.0"), x, 1)?;
        let x = nn::leaky_relu(x, T::lit(LEAKY_SLOPE));
        let logits = conv(b, &format!("{prefix}kp.1"), x, 1)?;
        nn::softmax(logits, 1)
    }
}
