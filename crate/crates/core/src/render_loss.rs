//! Renderer objective: reconstruction, adversarial, perceptual and style
//! terms and their weighted combination.
//!
//! Distances are means rather than sums so magnitudes do not depend on
//! resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_loss::FeatureProvider;
use crate::tensor::{ops, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub correctness: f64,
    pub regularization: f64,
    pub l1: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            correctness: 5.0,
            regularization: 0.0025,
            l1: 5.0,
            adversarial: 2.0,
            perceptual: 0.5,
            style: 500.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            correctness: 0.0,
            regularization: 0.0,
            l1: 0.0,
            adversarial: 0.0,
            perceptual: 0.0,
            style: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(LossTerm, f64); 6] {
        [
            (LossTerm::Correctness, self.correctness),
            (LossTerm::Regularization, self.regularization),
            (LossTerm::L1, self.l1),
            (LossTerm::Adversarial, self.adversarial),
            (LossTerm::Perceptual, self.perceptual),
            (LossTerm::Style, self.style),
        ]
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Correctness => self.correctness,
            LossTerm::Regularization => self.regularization,
            LossTerm::L1 => self.l1,
            LossTerm::Adversarial => self.adversarial,
            LossTerm::Perceptual => self.perceptual,
            LossTerm::Style => self.style,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum LossTerm {
    Correctness,
    Regularization,
    L1,
    Adversarial,
    Perceptual,
    Style,
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossTerm::Correctness => "L_c",
            LossTerm::Regularization => "L_r",
            LossTerm::L1 => "L_l1",
            LossTerm::Adversarial => "L_adv_g",
            LossTerm::Perceptual => "L_perc",
            LossTerm::Style => "L_style",
        };
        f.write_str(s)
    }
}

/// Weighted total and the individual weighted terms.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub weighted: Vec<(LossTerm, f64)>,
}

/// `Σ λ_i · L_i` over the supplied components.
pub fn total_loss(components: &[(LossTerm, f64)], weights: &LossWeights) -> Result<TotalLoss> {
    let mut weighted = Vec::with_capacity(components.len());
    let mut total = 0.0;
    for &(term, value) in components {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss term {term}")));
        }
        let w = weights.weight(term) * value;
        total += w;
        weighted.push((term, w));
    }
    Ok(TotalLoss { total, weighted })
}

/// Tape version of [`total_loss`]: same weights, differentiable.
pub fn weighted_total<'t, T: Real>(
    components: &[(LossTerm, Var<'t, T>)],
    weights: &LossWeights,
) -> Result<Var<'t, T>> {
    for (term, v) in components {
        let x = v.value();
        if x.numel() != 1 {
            return Err(Error::dim("weighted_total", format!("{term} element count"), 1, x.numel()));
        }
        if !x.item().is_finite() {
            return Err(Error::NonFinite(format!("loss term {term}")));
        }
    }
    let terms: Vec<(T, Var<'t, T>)> = components
        .iter()
        .map(|&(term, v)| (T::lit(weights.weight(term)), v))
        .collect();
    ops::weighted_sum(&terms)
}

/// Mean absolute difference.
pub fn l1_loss<'t, T: Real>(x: Var<'t, T>, x_hat: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(ops::mean(ops::abs(ops::sub(x_hat, x)?)))
}

/// Generator and discriminator losses from patch logits.
///
/// `d_loss = mean softplus(−real) + mean softplus(fake)` is the
/// discriminator's cross-entropy; `g_loss = mean softplus(−fake)` is the
/// non-saturating generator form.
pub fn adversarial_losses<'t, T: Real>(
    d_real: Var<'t, T>,
    d_fake: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    for v in [d_real, d_fake] {
        if !v.value().all_finite() {
            return Err(Error::NonFinite("discriminator logits".into()));
        }
    }
    let g_loss = ops::mean(ops::softplus(ops::scale(d_fake, -T::one())));
    let real = ops::mean(ops::softplus(ops::scale(d_real, -T::one())));
    let fake = ops::mean(ops::softplus(d_fake));
    let d_loss = ops::add(real, fake)?;
    Ok((g_loss, d_loss))
}

/// Generator-only adversarial loss.
pub fn generator_adversarial<'t, T: Real>(d_fake: Var<'t, T>) -> Result<Var<'t, T>> {
    if !d_fake.value().all_finite() {
        return Err(Error::NonFinite("discriminator logits".into()));
    }
    Ok(ops::mean(ops::softplus(ops::scale(d_fake, -T::one()))))
}

/// `Σ_i mean |φ_i(x) − φ_i(x̂)|` over the chosen layers.
pub fn perceptual_loss<'t, T: Real, P: FeatureProvider<T> + ?Sized>(
    x: Var<'t, T>,
    x_hat: Var<'t, T>,
    provider: &P,
    layers: &[&str],
) -> Result<Var<'t, T>> {
    let fx = provider.select(x, layers)?;
    let fy = provider.select(x_hat, layers)?;
    let terms = fx
        .into_iter()
        .zip(fy)
        .map(|(a, b)| Ok((T::one(), l1_loss(a, b)?)))
        .collect::<Result<Vec<_>>>()?;
    ops::weighted_sum(&terms)
}

/// Per-sample channel Gram matrix `F·Fᵀ / (C·H·W)`: `[n, c, c]`.
pub fn gram_matrix<'t, T: Real>(feature: Var<'t, T>) -> Result<Var<'t, T>> {
    let f = feature.value();
    let [n, c, h, w] = f.dims4("gram_matrix")?;
    let l = h * w;
    let norm = T::from_usize(c * l).unwrap().recip();
    let mut out = vec![T::zero(); n * c * c];
    for b in 0..n {
        let fb = &f.data()[b * c * l..(b + 1) * c * l];
        T::gemm(c, l, c, norm, fb, (l as isize, 1), fb, (1, l as isize), T::zero(), &mut out[b * c * c..(b + 1) * c * c], (c as isize, 1));
    }
    let out = Tensor::new(&[n, c, c], out)?;
    Ok(feature.tape().record(
        "gram_matrix",
        &[feature],
        out,
        Box::new(move |inp, _, g| {
            // dF = norm · (G + Gᵀ) · F
            let f = inp[0];
            let mut d = vec![T::zero(); f.numel()];
            let mut sym = vec![T::zero(); c * c];
            for b in 0..n {
                let gb = &g.data()[b * c * c..(b + 1) * c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = gb[i * c + j] + gb[j * c + i];
                    }
                }
                let fb = &f.data()[b * c * l..(b + 1) * c * l];
                T::gemm(c, c, l, norm, &sym, (c as isize, 1), fb, (l as isize, 1), T::zero(), &mut d[b * c * l..(b + 1) * c * l], (l as isize, 1));
            }
            vec![Some(Tensor::new(f.shape(), d).unwrap())]
        }),
    ))
}

/// `Σ_j mean |G(φ_j(x)) − G(φ_j(x̂))|` over the chosen layers.
pub fn style_loss<'t, T: Real, P: FeatureProvider<T> + ?Sized>(
    x: Var<'t, T>,
    x_hat: Var<'t, T>,
    provider: &P,
    layers: &[&str],
) -> Result<Var<'t, T>> {
    let fx = provider.select(x, layers)?;
    let fy = provider.select(x_hat, layers)?;
    let terms = fx
        .into_iter()
        .zip(fy)
        .map(|(a, b)| Ok((T::one(), l1_loss(gram_matrix(a)?, gram_matrix(b)?)?)))
        .collect::<Result<Vec<_>>>()?;
    ops::weighted_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_loss::IdentityProvider;
    use crate::tensor::Tape;

    #[test]
    fn default_weights_with_unit_components() {
        let comps: Vec<_> = LossWeights::default().named().iter().map(|(t, _)| (*t, 1.0)).collect();
        let total = total_loss(&comps, &LossWeights::default()).unwrap();
        assert!((total.total - 512.5025).abs() < 1e-12);
        assert_eq!(total_loss(&comps, &LossWeights::zero()).unwrap().total, 0.0);
        let single = total_loss(&[(LossTerm::Style, 0.25)], &LossWeights::default()).unwrap();
        assert_eq!(single.total, 125.0);
    }

    #[test]
    fn nan_component_names_term() {
        let err = total_loss(&[(LossTerm::L1, 1.0), (LossTerm::Style, f64::NAN)], &LossWeights::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("L_style"), "{err}");
    }

    #[test]
    fn l1_values() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let b = tape.constant(Tensor::ones(&[1, 3, 2, 2]));
        assert_eq!(l1_loss(a, a).unwrap().value().item(), 0.0);
        assert_eq!(l1_loss(a, b).unwrap().value().item(), 1.0);
        assert!(l1_loss(a, tape.constant(Tensor::zeros(&[1, 3, 2, 1]))).is_err());
    }

    #[test]
    fn adversarial_at_zero_logits() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let (g, d) = adversarial_losses(z, z).unwrap();
        assert!((d.value().item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g.value().item() - 2f64.ln()).abs() < 1e-12);
        let real = tape.constant(Tensor::full(&[1, 1, 2, 2], 60.0));
        let fake = tape.constant(Tensor::full(&[1, 1, 2, 2], -60.0));
        let (_, d) = adversarial_losses(real, fake).unwrap();
        assert!(d.value().item() < 1e-20);
    }

    #[test]
    fn gram_examples() {
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = gram_matrix(f).unwrap().value();
        assert_eq!(g.data(), &[5.0 / 4.0, 11.0 / 4.0, 11.0 / 4.0, 25.0 / 4.0]);
        let single = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let g = gram_matrix(single).unwrap().value();
        let mean_sq = (1.0 + 4.0 + 9.0 + 0.25) / 4.0;
        assert!((g.item() - mean_sq).abs() < 1e-15);
    }

    #[test]
    fn identity_provider_reduces_perceptual_to_l1() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.3).sin()));
        let b = tape.constant(Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.7).cos()));
        let p = perceptual_loss(a, b, &IdentityProvider, &["image"]).unwrap().value().item();
        let l = l1_loss(a, b).unwrap().value().item();
        assert_eq!(p, l);
        assert!(perceptual_loss(a, b, &IdentityProvider, &["nope"]).is_err());
    }

    #[test]
    fn style_is_blind_to_spatial_permutation() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64 * 1.3).sin());
        // reverse the spatial order of every channel
        let mut y = x.clone();
        for c in 0..2 {
            let plane: Vec<f64> = x.data()[c * 9..(c + 1) * 9].iter().rev().copied().collect();
            y.data_mut()[c * 9..(c + 1) * 9].copy_from_slice(&plane);
        }
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let s = style_loss(xv, yv, &IdentityProvider, &["image"]).unwrap().value().item();
        assert!(s.abs() < 1e-15);
        assert!(l1_loss(xv, yv).unwrap().value().item() > 0.1);
    }
}
