//! Unsupervised flow supervision.
//!
//! * Sampling correctness: warped source features should point in the same
//!   direction as target features, relative to the best similarity any
//!   source location achieves.
//! * Affine regularization: every local patch of the flowed coordinate map
//!   should be explained by a single affine transform; the least-squares
//!   residual is penalized.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{nn, ops, Real, Tensor, Var};
use crate::warp::{self, FlowField};

/// Maps an image to named feature maps.
pub trait FeatureProvider<T: Real> {
    fn layer_ids(&self) -> Vec<String>;

    /// All layers for `image` (`[n, c, h, w]`), differentiable wrt the image.
    fn features<'t>(&self, image: Var<'t, T>) -> Result<BTreeMap<String, Var<'t, T>>>;

    /// The requested layers, in order; unknown ids are an error.
    fn select<'t>(&self, image: Var<'t, T>, layers: &[&str]) -> Result<Vec<Var<'t, T>>> {
        let all = self.features(image)?;
        layers
            .iter()
            .map(|id| all.get(*id).copied().ok_or_else(|| Error::UnknownLayer(id.to_string())))
            .collect()
    }
}

/// Single layer `"image"` returning its input.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityProvider;

impl<T: Real> FeatureProvider<T> for IdentityProvider {
    fn layer_ids(&self) -> Vec<String> {
        vec!["image".into()]
    }

    fn features<'t>(&self, image: Var<'t, T>) -> Result<BTreeMap<String, Var<'t, T>>> {
        Ok(BTreeMap::from([("image".to_string(), image)]))
    }
}

/// Fixed random convolution pyramid standing in for a pretrained network.
///
/// Three levels of `conv 3×3 → instance norm → leaky ReLU`, with strides
/// 1, 2, 2, exposed as layers `L1`, `L2`, `L3` at 1, 1/2 and 1/4 of the
/// input resolution. Weights are drawn once from a seeded generator and
/// never trained.
#[derive(Clone, Debug)]
pub struct FixedPyramid<T> {
    levels: Vec<(Tensor<T>, usize)>,
    seed: u64,
}

pub const PYRAMID_LAYERS: [&str; 3] = ["L1", "L2", "L3"];

impl<T: Real> FixedPyramid<T> {
    pub fn new(in_channels: usize, widths: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strides = [1, 2, 2];
        let mut cin = in_channels;
        let levels = widths
            .iter()
            .zip(strides)
            .map(|(&cout, stride)| {
                let fan_in = (cin * 9) as f64;
                let std = (2.0 / fan_in).sqrt();
                let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(z * std)
                });
                cin = cout;
                (w, stride)
            })
            .collect();
        FixedPyramid { levels, seed }
    }

    /// Default RGB pyramid with widths 16, 32, 32.
    pub fn rgb(seed: u64) -> Self {
        Self::new(3, [16, 32, 32], seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl<T: Real> FeatureProvider<T> for FixedPyramid<T> {
    fn layer_ids(&self) -> Vec<String> {
        PYRAMID_LAYERS.iter().map(|s| s.to_string()).collect()
    }

    fn features<'t>(&self, image: Var<'t, T>) -> Result<BTreeMap<String, Var<'t, T>>> {
        let tape = image.tape();
        let mut x = image;
        let mut out = BTreeMap::new();
        for ((w, stride), id) in self.levels.iter().zip(PYRAMID_LAYERS) {
            let wv = tape.constant(w.clone());
            x = nn::conv2d(x, wv, None, *stride, 1)?;
            x = nn::instance_norm(x, T::lit(1e-5))?;
            x = nn::leaky_relu(x, T::lit(0.2));
            out.insert(id.to_string(), x);
        }
        Ok(out)
    }
}

/// Stabilizer added to the cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingCorrectnessOptions {
    /// Compute the similarity maximum on 2×2-averaged source features when
    /// the map has more than `64²` locations.
    pub downsample_large: bool,
}

impl Default for SamplingCorrectnessOptions {
    fn default() -> Self {
        SamplingCorrectnessOptions {
            downsample_large: true,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SamplingCorrectnessReport {
    pub value: f64,
    pub skipped: usize,
    pub total: usize,
}

/// Per-location maximum, over every source location, of the cosine
/// similarity with the target feature: `[n, h, w]` (exhaustive scan).
pub fn max_source_similarity<T: Real>(v_s: &Tensor<T>, v_t: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, sh, sw] = v_s.dims4("max_source_similarity")?;
    let [tn, tc, h, w] = v_t.dims4("max_source_similarity")?;
    if (tn, tc) != (n, c) {
        return Err(Error::dim(
            "max_source_similarity",
            "batch/channels",
            format!("{:?}", (n, c)),
            format!("{:?}", (tn, tc)),
        ));
    }
    let (sp, tp) = (sh * sw, h * w);
    let eps = T::lit(COSINE_EPS);
    let mut out = vec![T::zero(); n * tp];
    let mut src = vec![T::zero(); sp * c];
    let mut src_norm = vec![T::zero(); sp];
    let mut tgt = vec![T::zero(); c];
    for b in 0..n {
        // location-major copy of the source so each dot product is contiguous
        for ch in 0..c {
            for l in 0..sp {
                src[l * c + ch] = v_s.data()[(b * c + ch) * sp + l];
            }
        }
        for (l, nrm) in src_norm.iter_mut().enumerate() {
            *nrm = src[l * c..(l + 1) * c].iter().map(|&v| v * v).sum::<T>().sqrt();
        }
        for l in 0..tp {
            for (ch, t) in tgt.iter_mut().enumerate() {
                *t = v_t.data()[(b * c + ch) * tp + l];
            }
            let tn = tgt.iter().map(|&v| v * v).sum::<T>().sqrt();
            let mut best = T::neg_infinity();
            for (lp, &sn) in src_norm.iter().enumerate() {
                let dot: T = src[lp * c..(lp + 1) * c].iter().zip(&tgt).map(|(&a, &b)| a * b).sum();
                let mu = dot / (sn * tn + eps);
                if mu > best {
                    best = mu;
                }
            }
            out[b * tp + l] = best;
        }
    }
    Tensor::new(&[n, h, w], out)
}

fn avg_pool2_tensor<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = crate::tensor::Tape::new();
    Ok(ops::avg_pool2(tape.constant(x.clone()))?.value())
}

/// Sampling-correctness loss `(1/N) Σ_l exp(−μ(v_{s,w}^l, v_t^l) / μ_max^l)`.
///
/// `μ_max` is a constant of the step (no gradient flows through the max).
/// Locations whose best source similarity is not positive are skipped and
/// counted in the report.
pub fn sampling_correctness_loss<'t, T: Real>(
    v_s: Var<'t, T>,
    v_t: Var<'t, T>,
    flow: Var<'t, T>,
    opts: &SamplingCorrectnessOptions,
) -> Result<(Var<'t, T>, SamplingCorrectnessReport)> {
    let (vs, vt) = (v_s.value(), v_t.value());
    vt.expect_shape("sampling_correctness_loss", vs.shape())?;
    let [n, _, h, w] = vt.dims4("sampling_correctness_loss")?;
    let fs = flow.shape();
    if fs != [n, 2, h, w] {
        return Err(Error::dim(
            "sampling_correctness_loss",
            "flow shape",
            format!("{:?}", [n, 2, h, w]),
            format!("{fs:?}"),
        ));
    }
    let mu_max = if opts.downsample_large && h * w > 64 * 64 {
        max_source_similarity(&avg_pool2_tensor(&vs)?, &vt)?
    } else {
        max_source_similarity(&vs, &vt)?
    };
    let warped = warp::bilinear_sample(v_s, flow)?;
    relative_cosine_loss(warped, v_t, mu_max)
}

/// `mean_l exp(−μ(a^l, b^l)/μ_max^l)` over locations with `μ_max > 0`.
pub fn relative_cosine_loss<'t, T: Real>(
    warped: Var<'t, T>,
    target: Var<'t, T>,
    mu_max: Tensor<T>,
) -> Result<(Var<'t, T>, SamplingCorrectnessReport)> {
    let (a, t) = (warped.value(), target.value());
    a.expect_shape("relative_cosine_loss", t.shape())?;
    let [n, c, h, w] = a.dims4("relative_cosine_loss")?;
    mu_max.expect_shape("relative_cosine_loss", &[n, h, w])?;
    let plane = h * w;
    let eps = T::lit(COSINE_EPS);
    let total = n * plane;
    let valid: Vec<bool> = mu_max.data().iter().map(|&m| m > T::zero()).collect();
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::DegenerateFeatures { skipped: total, total });
    }
    let inv_count = T::from_usize(count).unwrap().recip();

    let at = move |b: usize, ch: usize, l: usize| (b * c + ch) * plane + l;
    let mut terms = vec![T::zero(); total];
    let mut acc = T::zero();
    for b in 0..n {
        for l in 0..plane {
            let i = b * plane + l;
            if !valid[i] {
                continue;
            }
            let (mut dot, mut na, mut nt) = (T::zero(), T::zero(), T::zero());
            for ch in 0..c {
                let (av, tv) = (a.data()[at(b, ch, l)], t.data()[at(b, ch, l)]);
                dot += av * tv;
                na += av * av;
                nt += tv * tv;
            }
            let mu = dot / (na.sqrt() * nt.sqrt() + eps);
            terms[i] = (-mu / mu_max.data()[i]).exp();
            acc += terms[i];
        }
    }
    let report = SamplingCorrectnessReport {
        value: (acc * inv_count).as_f64(),
        skipped: total - count,
        total,
    };
    let out = Tensor::scalar(acc * inv_count);
    let var = warped.tape().record(
        "relative_cosine_loss",
        &[warped, target],
        out,
        Box::new(move |inp, _, g| {
            let (a, t) = (inp[0], inp[1]);
            let gs = g.item() * inv_count;
            let mut da = vec![T::zero(); a.numel()];
            let mut dt = vec![T::zero(); t.numel()];
            for b in 0..n {
                for l in 0..plane {
                    let i = b * plane + l;
                    if !valid[i] {
                        continue;
                    }
                    let (mut dot, mut na2, mut nt2) = (T::zero(), T::zero(), T::zero());
                    for ch in 0..c {
                        let (av, tv) = (a.data()[at(b, ch, l)], t.data()[at(b, ch, l)]);
                        dot += av * tv;
                        na2 += av * av;
                        nt2 += tv * tv;
                    }
                    let (na, nt) = (na2.sqrt(), nt2.sqrt());
                    let den = na * nt + eps;
                    // d term / d μ
                    let dmu = -terms[i] / mu_max.data()[i] * gs;
                    let ca = if na > T::zero() { dot * nt / (na * den * den) } else { T::zero() };
                    let ct = if nt > T::zero() { dot * na / (nt * den * den) } else { T::zero() };
                    for ch in 0..c {
                        let k = at(b, ch, l);
                        let (av, tv) = (a.data()[k], t.data()[k]);
                        da[k] = dmu * (tv / den - ca * av);
                        dt[k] = dmu * (av / den - ct * tv);
                    }
                }
            }
            vec![
                Some(Tensor::new(a.shape(), da).unwrap()),
                Some(Tensor::new(t.shape(), dt).unwrap()),
            ]
        }),
    );
    Ok((var, report))
}

/// Least-squares affine fit of one patch: `T ≈ Â·S` with `T` the target
/// coordinates and `S` the homogeneous source coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePatchSystem {
    pub target: Vec<[f64; 2]>,
    pub source: Vec<[f64; 2]>,
    /// `[[θ11, θ12, θ13], [θ21, θ22, θ23]]`.
    pub theta: [[f64; 3]; 2],
    /// `‖T − Â·S‖²`.
    pub residual: f64,
}

impl AffinePatchSystem {
    /// Target-minus-prediction per point.
    pub fn residuals(&self) -> Vec<[f64; 2]> {
        let th = &self.theta;
        self.target
            .iter()
            .zip(&self.source)
            .map(|(t, s)| {
                [
                    t[0] - (th[0][0] * s[0] + th[0][1] * s[1] + th[0][2]),
                    t[1] - (th[1][0] * s[0] + th[1][1] * s[1] + th[1][2]),
                ]
            })
            .collect()
    }
}

/// Default ridge added to the normal matrix.
pub const AFFINE_RIDGE: f64 = 1e-5;

/// `det N / tr(N)²` below which the ridge is applied.
pub const RIDGE_RCOND: f64 = 1e-10;

/// Fit `Â = argmin ‖T − Â·S‖²` in closed form.
///
/// Both point sets are centered on their means first; the linear part is the
/// 2×2 normal-equation solve with `ridge` on its diagonal and the
/// translation follows exactly from the means. At `ridge = 0` this is the
/// same minimizer as the full 3×3 homogeneous system.
pub fn fit_affine_lstsq(target: &[[f64; 2]], source: &[[f64; 2]], ridge: f64) -> Result<AffinePatchSystem> {
    if target.len() != source.len() {
        return Err(Error::dim("fit_affine_lstsq", "point count", target.len(), source.len()));
    }
    if target.len() < 3 {
        return Err(Error::Config(format!(
            "affine fit needs at least 3 points, got {}",
            target.len()
        )));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::Config(format!("ridge must be >= 0, got {ridge}")));
    }
    let k = target.len() as f64;
    let mean = |pts: &[[f64; 2]]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / k, sy / k]
    };
    let (tm, sm) = (mean(target), mean(source));
    // normal matrix N = Σ s̃ s̃ᵀ and cross term C = Σ t̃ s̃ᵀ
    let (mut nxx, mut nxy, mut nyy) = (0.0, 0.0, 0.0);
    let mut cm = [[0.0; 2]; 2];
    for (t, s) in target.iter().zip(source) {
        let sc = [s[0] - sm[0], s[1] - sm[1]];
        let tc = [t[0] - tm[0], t[1] - tm[1]];
        nxx += sc[0] * sc[0];
        nxy += sc[0] * sc[1];
        nyy += sc[1] * sc[1];
        for r in 0..2 {
            cm[r][0] += tc[r] * sc[0];
            cm[r][1] += tc[r] * sc[1];
        }
    }
    // ridge is added only to an ill-conditioned N; exactly affine patches
    // then keep a bit-exact zero residual
    let trace = nxx + nyy;
    if !(nxx * nyy - nxy * nxy > RIDGE_RCOND * trace * trace) {
        nxx += ridge;
        nyy += ridge;
    }
    let det = nxx * nyy - nxy * nxy;
    let lin = if nxx == 0.0 && nyy == 0.0 && nxy == 0.0 {
        // only reachable with ridge = 0 and coincident sources
        return Err(Error::Singular("affine normal matrix is zero".into()));
    } else if det.abs() <= f64::EPSILON * (nxx * nyy).abs().max(f64::MIN_POSITIVE) {
        if ridge == 0.0 {
            return Err(Error::Singular("affine normal matrix is rank deficient".into()));
        }
        [[0.0; 2]; 2]
    } else {
        let inv = [[nyy / det, -nxy / det], [-nxy / det, nxx / det]];
        let mut a = [[0.0; 2]; 2];
        for r in 0..2 {
            for col in 0..2 {
                a[r][col] = cm[r][0] * inv[0][col] + cm[r][1] * inv[1][col];
            }
        }
        a
    };
    let mut theta = [[0.0; 3]; 2];
    for r in 0..2 {
        theta[r][0] = lin[r][0];
        theta[r][1] = lin[r][1];
        theta[r][2] = tm[r] - lin[r][0] * sm[0] - lin[r][1] * sm[1];
    }
    let mut sys = AffinePatchSystem {
        target: target.to_vec(),
        source: source.to_vec(),
        theta,
        residual: 0.0,
    };
    sys.residual = sys.residuals().iter().map(|r| r[0] * r[0] + r[1] * r[1]).sum();
    Ok(sys)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AffineReport {
    /// Sum of patch residuals, averaged over the batch.
    pub value: f64,
    pub patches: usize,
    pub max_patch_residual: f64,
    /// `(batch, x, y)` of the worst patch center.
    pub max_at: (usize, usize, usize),
}

impl AffineReport {
    /// Mean residual per patch.
    pub fn mean_residual(&self, batch: usize) -> f64 {
        if self.patches == 0 {
            0.0
        } else {
            self.value * batch as f64 / self.patches as f64
        }
    }
}

struct PatchFit {
    batch: usize,
    points: Vec<(usize, usize)>,
    lin: [[f64; 2]; 2],
    residuals: Vec<[f64; 2]>,
}

fn fit_all_patches<T: Real>(
    flow: &Tensor<T>,
    n: usize,
    stride: usize,
    ridge: f64,
) -> Result<(Vec<PatchFit>, AffineReport)> {
    if n % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {n}")));
    }
    if stride == 0 {
        return Err(Error::Config("patch stride must be positive".into()));
    }
    let [b, c, h, w] = flow.dims4("affine_regularization_loss")?;
    if c != 2 {
        return Err(Error::dim("affine_regularization_loss", "flow channels", 2, c));
    }
    let r = n / 2;
    let plane = h * w;
    let mut fits = Vec::new();
    let mut report = AffineReport::default();
    let mut total = 0.0;
    if h < n || w < n {
        return Ok((fits, report));
    }
    for bi in 0..b {
        let fx = &flow.data()[(bi * 2) * plane..][..plane];
        let fy = &flow.data()[(bi * 2 + 1) * plane..][..plane];
        for cy in (r..h - r).step_by(stride) {
            for cx in (r..w - r).step_by(stride) {
                let mut points = Vec::with_capacity(n * n);
                let mut tgt = Vec::with_capacity(n * n);
                let mut src = Vec::with_capacity(n * n);
                for y in cy - r..=cy + r {
                    for x in cx - r..=cx + r {
                        let l = y * w + x;
                        points.push((x, y));
                        tgt.push([x as f64, y as f64]);
                        src.push([x as f64 + fx[l].as_f64(), y as f64 + fy[l].as_f64()]);
                    }
                }
                let sys = fit_affine_lstsq(&tgt, &src, ridge)?;
                total += sys.residual;
                if sys.residual > report.max_patch_residual || report.patches == 0 {
                    report.max_patch_residual = sys.residual;
                    report.max_at = (bi, cx, cy);
                }
                report.patches += 1;
                let th = sys.theta;
                fits.push(PatchFit {
                    batch: bi,
                    points,
                    lin: [[th[0][0], th[0][1]], [th[1][0], th[1][1]]],
                    residuals: sys.residuals(),
                });
            }
        }
    }
    report.value = total / b.max(1) as f64;
    Ok((fits, report))
}

/// Residual statistics of a flow without building a tape.
pub fn affine_residual_report<T: Real>(flow: &FlowField<T>, n: usize, stride: usize) -> Result<AffineReport> {
    Ok(fit_all_patches(flow.tensor(), n, stride, AFFINE_RIDGE)?.1)
}

/// Affine regularization `Σ_l ‖T_l − Â_l S_l‖²` over patches centered at
/// every `stride`-th interior location, averaged over the batch.
///
/// `Â_l` is held constant in the backward pass, giving
/// `∂L/∂S = −2·Â_linᵀ·R` per patch point.
pub fn affine_regularization_loss<'t, T: Real>(
    flow: Var<'t, T>,
    n: usize,
    stride: usize,
) -> Result<(Var<'t, T>, AffineReport)> {
    let fv = flow.value();
    let (fits, report) = fit_all_patches(&fv, n, stride, AFFINE_RIDGE)?;
    let [b, _, h, w] = fv.dims4("affine_regularization_loss")?;
    let out = Tensor::scalar(T::lit(report.value));
    let var = flow.tape().record(
        "affine_regularization_loss",
        &[flow],
        out,
        Box::new(move |inp, _, g| {
            let plane = h * w;
            let scale = g.item().as_f64() / b.max(1) as f64;
            let mut d = vec![0.0f64; inp[0].numel()];
            for fit in &fits {
                let a = &fit.lin;
                for (&(x, y), r) in fit.points.iter().zip(&fit.residuals) {
                    let l = y * w + x;
                    d[(fit.batch * 2) * plane + l] += -2.0 * scale * (a[0][0] * r[0] + a[1][0] * r[1]);
                    d[(fit.batch * 2 + 1) * plane + l] += -2.0 * scale * (a[0][1] * r[0] + a[1][1] * r[1]);
                }
            }
            vec![Some(Tensor::new(inp[0].shape(), d.into_iter().map(T::lit).collect()).unwrap())]
        }),
    );
    Ok((var, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn grid3(cx: f64, cy: f64) -> Vec<[f64; 2]> {
        (0..9).map(|i| [cx + (i % 3) as f64 - 1.0, cy + (i / 3) as f64 - 1.0]).collect()
    }

    fn apply(a: [[f64; 3]; 2], pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
        pts.iter()
            .map(|p| {
                [
                    a[0][0] * p[0] + a[0][1] * p[1] + a[0][2],
                    a[1][0] * p[0] + a[1][1] * p[1] + a[1][2],
                ]
            })
            .collect()
    }

    #[test]
    fn translation_is_recovered() {
        let a = [[1.0, 0.0, 2.0], [0.0, 1.0, -3.0]];
        let src = grid3(4.0, 5.0);
        let tgt = apply(a, &src);
        let sys = fit_affine_lstsq(&tgt, &src, AFFINE_RIDGE).unwrap();
        assert!(sys.residual < 1e-10, "{}", sys.residual);
        for r in 0..2 {
            for c in 0..3 {
                assert!((sys.theta[r][c] - a[r][c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn coincident_sources_fall_back_to_mean() {
        let tgt = grid3(1.0, 1.0);
        let src = vec![[3.0, 3.0]; 9];
        let sys = fit_affine_lstsq(&tgt, &src, AFFINE_RIDGE).unwrap();
        assert!(sys.theta.iter().flatten().all(|v| v.is_finite()));
        // variance of a 3×3 grid around its mean: 6 per axis
        assert!((sys.residual - 12.0).abs() < 1e-9);
        assert!(matches!(fit_affine_lstsq(&tgt, &src, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn too_few_points_is_config_error() {
        let pts = [[0.0, 0.0], [1.0, 0.0]];
        assert!(matches!(fit_affine_lstsq(&pts, &pts, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_flow_has_zero_regularization() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(&[2, 2, 6, 7]));
        let (loss, rep) = affine_regularization_loss(w, 3, 1).unwrap();
        assert_eq!(loss.value().item(), 0.0);
        assert_eq!(rep.patches, 2 * 4 * 5);
        assert!(matches!(affine_regularization_loss(w, 4, 1), Err(Error::Config(_))));
    }

    #[test]
    fn perfect_alignment_gives_exp_minus_one() {
        let tape = Tape::<f64>::new();
        let v = Tensor::from_fn(&[1, 3, 4, 4], |i| ((i * 7919) % 13) as f64 - 6.0 + 0.1);
        let vs = tape.constant(v.clone());
        let vt = tape.constant(v);
        let w = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let (loss, rep) = sampling_correctness_loss(vs, vt, w, &Default::default()).unwrap();
        assert_eq!(rep.skipped, 0);
        assert!((loss.value().item() - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_warp_gives_one() {
        let tape = Tape::<f64>::new();
        // source carries channel 0 only, target channel 1 at (0,0) but also
        // has a positive similarity somewhere in the source
        let mut s = Tensor::zeros(&[1, 2, 1, 2]);
        s.data_mut().copy_from_slice(&[1.0, 1.0, 0.0, 1.0]);
        let mut t = Tensor::zeros(&[1, 2, 1, 2]);
        t.data_mut().copy_from_slice(&[0.0, 0.0, 1.0, 1.0]);
        let vs = tape.constant(s);
        let vt = tape.constant(t);
        let w = tape.constant(Tensor::zeros(&[1, 2, 1, 2]));
        let (loss, _) = sampling_correctness_loss(vs, vt, w, &Default::default()).unwrap();
        // location 0: μ = 0 → exp(0) = 1; location 1: μ = μ_max → e⁻¹
        let expect = (1.0 + (-1.0f64).exp()) / 2.0;
        assert!((loss.value().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn all_skipped_is_degenerate() {
        let tape = Tape::<f64>::new();
        let vs = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let vt = tape.constant(Tensor::full(&[1, 1, 2, 2], -1.0));
        let w = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let res = sampling_correctness_loss(vs, vt, w, &Default::default());
        assert!(matches!(res, Err(Error::DegenerateFeatures { skipped: 4, total: 4 })));
    }

    #[test]
    fn pyramid_is_deterministic() {
        let p1 = FixedPyramid::<f32>::rgb(7);
        let p2 = FixedPyramid::<f32>::rgb(7);
        let tape = Tape::new();
        let img = tape.constant(Tensor::from_fn(&[1, 3, 16, 16], |i| ((i as f32) * 0.01).sin()));
        let a = p1.features(img).unwrap();
        let b = p2.features(img).unwrap();
        for id in PYRAMID_LAYERS {
            assert_eq!(a[id].value(), b[id].value());
        }
        assert_eq!(a["L1"].shape(), vec![1, 16, 16, 16]);
        assert_eq!(a["L2"].shape(), vec![1, 32, 8, 8]);
        assert_eq!(a["L3"].shape(), vec![1, 32, 4, 4]);
        assert!(matches!(p1.select(img, &["L9"]), Err(Error::UnknownLayer(_))));
    }
}
