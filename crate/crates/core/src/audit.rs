//! Registry of finite-difference gradient checks over every differentiable
//! operator and loss, run in `f64` on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow_loss::{affine_regularization_loss, max_source_similarity, relative_cosine_loss, FixedPyramid};
use crate::models::{KernelPredictor, KernelPredictorConfig};
use crate::render_loss::{
    adversarial_losses, generator_adversarial, gram_matrix, l1_loss, perceptual_loss, style_loss, weighted_total,
    LossTerm, LossWeights,
};
use crate::tensor::{grad_check, nn, ops, Binding, GradCheckConfig, GradCheckReport, Tensor, Var};
use crate::warp;

/// Seeds per check.
pub const AUDIT_SEEDS: u64 = 50;

type CheckFn = fn(u64, &GradCheckConfig) -> Result<GradCheckReport>;

/// A named check over one operator or loss.
pub struct Check {
    pub name: &'static str,
    pub run: CheckFn,
}

/// Aggregate over all seeds of one check.
#[derive(Clone, Debug)]
pub struct CheckSummary {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks: usize,
    /// Seed and input index of the largest error.
    pub worst: Option<(u64, usize)>,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

/// `Σ out ⊙ r` with a fixed random `r`, so every output element matters.
fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut r = rng(seed, 0xC0FFEE);
    let w = uniform(&mut r, &out.shape(), -1.0, 1.0);
    Ok(ops::sum(ops::mul(out, out.tape().constant(w))?))
}

fn conv2d(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 1);
    let stride = 1 + (seed % 2) as usize;
    let inputs = [
        uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0),
        uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
        uniform(&mut r, &[3], -1.0, 1.0),
    ];
    grad_check(
        |_, v| project(nn::conv2d(v[0], v[1], Some(v[2]), stride, 1)?, seed),
        &inputs,
        cfg,
    )
}

fn instance_norm(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 2);
    let inputs = [uniform(&mut r, &[2, 3, 4, 4], -2.0, 2.0)];
    grad_check(|_, v| project(nn::instance_norm(v[0], 1e-5)?, seed), &inputs, cfg)
}

fn leaky_relu(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 3);
    let inputs = [uniform(&mut r, &[3, 7], -1.0, 1.0)];
    grad_check(|_, v| project(nn::leaky_relu(v[0], 0.2), seed), &inputs, cfg)
}

fn softmax(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 4);
    let inputs = [uniform(&mut r, &[2, 9, 3, 3], -3.0, 3.0)];
    grad_check(|_, v| project(nn::softmax(v[0], 1)?, seed), &inputs, cfg)
}

/// Feature `[1, 2, 5, 6]` and a flow reaching past the border.
fn sampling_inputs(seed: u64, salt: u64) -> [Tensor<f64>; 2] {
    let mut r = rng(seed, salt);
    [
        uniform(&mut r, &[1, 2, 5, 6], -1.0, 1.0),
        uniform(&mut r, &[1, 2, 5, 6], -2.5, 2.5),
    ]
}

fn bilinear_sample_feature(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let [f, w] = sampling_inputs(seed, 5);
    grad_check(
        |t, v| project(warp::bilinear_sample(v[0], t.constant(w.clone()))?, seed),
        &[f],
        cfg,
    )
}

fn bilinear_sample_flow(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let [f, w] = sampling_inputs(seed, 6);
    grad_check(
        |t, v| project(warp::bilinear_sample(t.constant(f.clone()), v[0])?, seed),
        &[w],
        cfg,
    )
}

fn extract_flowed_patches(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inputs = sampling_inputs(seed, 7);
    grad_check(|_, v| project(warp::extract_flowed_patches(v[0], v[1], 3)?, seed), &inputs, cfg)
}

fn extract_target_patches(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 8);
    let inputs = [uniform(&mut r, &[1, 2, 4, 5], -1.0, 1.0)];
    grad_check(|_, v| project(warp::extract_target_patches(v[0], 3)?, seed), &inputs, cfg)
}

fn local_attention_warp(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 9);
    let patches = uniform(&mut r, &[1, 2, 9, 3, 4], -1.0, 1.0);
    let logits = uniform(&mut r, &[1, 9, 3, 4], -2.0, 2.0);
    grad_check(
        |_, v| project(warp::local_attention_warp(v[0], nn::softmax(v[1], 1)?)?, seed),
        &[patches, logits],
        cfg,
    )
}

fn occlusion_fuse(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 10);
    let inputs = [
        uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0),
        uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0),
        uniform(&mut r, &[2, 1, 3, 3], 0.05, 0.95),
    ];
    grad_check(|_, v| project(warp::occlusion_fuse(v[0], v[1], v[2])?, seed), &inputs, cfg)
}

fn kernel_predictor(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let kc = KernelPredictorConfig { patch: 3, channels: 2, hidden: 4, seed };
    let kp = KernelPredictor::<f64>::new(kc)?;
    let names: Vec<String> = kp.params.iter().map(|(k, _)| k.to_string()).collect();
    let mut r = rng(seed, 11);
    let mut inputs = vec![
        uniform(&mut r, &[1, 2, 9, 3, 3], -1.0, 1.0),
        uniform(&mut r, &[1, 2, 9, 3, 3], -1.0, 1.0),
    ];
    for n in &names {
        // biases randomized too, so the zero init does not hide them
        inputs.push(uniform(&mut r, kp.params.get(n)?.shape(), -0.5, 0.5));
    }
    grad_check(
        |_, v| {
            let b: Binding<'_, f64> = names.iter().cloned().zip(v[2..].iter().copied()).collect();
            project(kp.forward(&b, v[0], v[1])?, seed)
        },
        &inputs,
        cfg,
    )
}

/// Correlated source/target features so most locations have `μ_max > 0`.
fn feature_pair(seed: u64, salt: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed, salt);
    let vs = uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0);
    let noise = uniform(&mut r, &[1, 3, 4, 4], -0.5, 0.5);
    let vt = vs.zip_map(&noise, |a, b| a + b).unwrap();
    (vs, vt)
}

fn sampling_correctness_features(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (vs, vt) = feature_pair(seed, 12);
    let mu = max_source_similarity(&vs, &vt)?;
    grad_check(
        |_, v| Ok(relative_cosine_loss(v[0], v[1], mu.clone())?.0),
        &[vs.clone(), vt.clone()],
        cfg,
    )
}

fn sampling_correctness_flow(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (vs, vt) = feature_pair(seed, 13);
    let mu = max_source_similarity(&vs, &vt)?;
    let mut r = rng(seed, 14);
    let flow = uniform(&mut r, &[1, 2, 4, 4], -1.5, 1.5);
    grad_check(
        |t, v| {
            let warped = warp::bilinear_sample(t.constant(vs.clone()), v[0])?;
            Ok(relative_cosine_loss(warped, t.constant(vt.clone()), mu.clone())?.0)
        },
        &[flow],
        cfg,
    )
}

fn affine_regularization(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 15);
    let inputs = [uniform(&mut r, &[2, 2, 5, 5], -2.0, 2.0)];
    grad_check(|_, v| Ok(affine_regularization_loss(v[0], 3, 1)?.0), &inputs, cfg)
}

fn l1(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 16);
    let inputs = [uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0), uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0)];
    grad_check(|_, v| l1_loss(v[0], v[1]), &inputs, cfg)
}

fn adversarial_d(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 17);
    let inputs = [uniform(&mut r, &[2, 1, 3, 3], -3.0, 3.0), uniform(&mut r, &[2, 1, 3, 3], -3.0, 3.0)];
    grad_check(|_, v| Ok(adversarial_losses(v[0], v[1])?.1), &inputs, cfg)
}

fn adversarial_g(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 18);
    let inputs = [uniform(&mut r, &[2, 1, 3, 3], -3.0, 3.0)];
    grad_check(|_, v| generator_adversarial(v[0]), &inputs, cfg)
}

/// Mean-reduced feature losses have per-element gradients near the absolute
/// floors of the checker; scaling restores O(1) gradients.
const LOSS_SCALE: f64 = 1e3;

fn small_pyramid(seed: u64) -> FixedPyramid<f64> {
    FixedPyramid::new(3, [4, 4, 4], seed)
}

fn perceptual(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let p = small_pyramid(seed);
    let mut r = rng(seed, 19);
    let inputs = [uniform(&mut r, &[1, 3, 8, 8], -1.0, 1.0), uniform(&mut r, &[1, 3, 8, 8], -1.0, 1.0)];
    grad_check(|_, v| Ok(ops::scale(perceptual_loss(v[0], v[1], &p, &["L1", "L2", "L3"])?, LOSS_SCALE)), &inputs, cfg)
}

fn style(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let p = small_pyramid(seed);
    let mut r = rng(seed, 20);
    let inputs = [uniform(&mut r, &[1, 3, 8, 8], -1.0, 1.0), uniform(&mut r, &[1, 3, 8, 8], -1.0, 1.0)];
    grad_check(|_, v| Ok(ops::scale(style_loss(v[0], v[1], &p, &["L1", "L2", "L3"])?, LOSS_SCALE)), &inputs, cfg)
}

fn gram(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 21);
    let inputs = [uniform(&mut r, &[2, 3, 3, 4], -1.0, 1.0)];
    grad_check(|_, v| project(gram_matrix(v[0])?, seed), &inputs, cfg)
}

fn total(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 22);
    let inputs: Vec<_> = (0..6).map(|_| uniform(&mut r, &[3], -1.0, 1.0)).collect();
    let terms = [
        LossTerm::Correctness,
        LossTerm::Regularization,
        LossTerm::L1,
        LossTerm::Adversarial,
        LossTerm::Perceptual,
        LossTerm::Style,
    ];
    grad_check(
        |_, v| {
            let parts = (0..6)
                .map(|i| (terms[i], ops::sum(ops::square(v[i]))))
                .collect::<Vec<_>>();
            weighted_total(&parts, &LossWeights::default())
        },
        &inputs,
        cfg,
    )
}

fn elementwise(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 23);
    let inputs = [uniform(&mut r, &[2, 5], -1.0, 1.0), uniform(&mut r, &[2, 5], 0.2, 2.0)];
    grad_check(
        |_, v| {
            let (a, b) = (v[0], v[1]);
            let terms = [
                ops::add(a, b)?,
                ops::sub(a, b)?,
                ops::mul(a, b)?,
                ops::scale(a, 1.7),
                ops::add_scalar(b, -0.3),
                ops::abs(a),
                ops::exp(a),
                ops::log(b),
                ops::square(a),
                ops::sigmoid(a),
                ops::tanh(b),
                ops::softplus(a),
            ];
            let mut acc = Vec::new();
            for (i, t) in terms.iter().enumerate() {
                acc.push((1.0 + 0.1 * i as f64, project(*t, seed + i as u64)?));
            }
            acc.push((0.5, ops::mean(a)));
            ops::weighted_sum(&acc)
        },
        &inputs,
        cfg,
    )
}

fn shape_ops(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 24);
    let inputs = [uniform(&mut r, &[1, 2, 4, 4], -1.0, 1.0), uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0)];
    grad_check(
        |_, v| {
            let cat = ops::concat_channels(&[v[0], v[1]])?;
            let mid = ops::slice_channels(cat, 1, 3)?;
            let pooled = ops::avg_pool2(mid)?;
            let up = ops::upsample_nearest(pooled, 2)?;
            let flat = ops::reshape(ops::mul(up, mid)?, &[3, 16])?;
            project(flat, seed)
        },
        &inputs,
        cfg,
    )
}

/// Every registered check, in table order.
pub fn registry() -> Vec<Check> {
    macro_rules! checks {
        ($($name:literal => $f:ident),* $(,)?) => { vec![$(Check { name: $name, run: $f }),*] };
    }
    checks![
        "conv2d" => conv2d,
        "instance_norm" => instance_norm,
        "leaky_relu" => leaky_relu,
        "softmax" => softmax,
        "bilinear_sample.feature" => bilinear_sample_feature,
        "bilinear_sample.flow" => bilinear_sample_flow,
        "extract_flowed_patches" => extract_flowed_patches,
        "extract_target_patches" => extract_target_patches,
        "local_attention_warp" => local_attention_warp,
        "occlusion_fuse" => occlusion_fuse,
        "kernel_predictor" => kernel_predictor,
        "sampling_correctness.features" => sampling_correctness_features,
        "sampling_correctness.flow" => sampling_correctness_flow,
        "affine_regularization" => affine_regularization,
        "l1_loss" => l1,
        "adversarial.discriminator" => adversarial_d,
        "adversarial.generator" => adversarial_g,
        "perceptual_loss" => perceptual,
        "style_loss" => style,
        "gram_matrix" => gram,
        "total_loss" => total,
        "elementwise" => elementwise,
        "shape_ops" => shape_ops,
    ]
}

/// Checks whose name matches the glob `filter`.
pub fn select(filter: &str) -> Result<Vec<Check>> {
    let pat = glob::Pattern::new(filter).map_err(|e| Error::Config(format!("bad filter {filter:?}: {e}")))?;
    let picked: Vec<Check> = registry().into_iter().filter(|c| pat.matches(c.name)).collect();
    if picked.is_empty() {
        return Err(Error::Empty(format!("no gradient check matches {filter:?}")));
    }
    Ok(picked)
}

/// Run one check over `seeds` seeds.
pub fn run_check(check: &Check, seeds: u64, cfg: &GradCheckConfig) -> Result<CheckSummary> {
    let mut s = CheckSummary {
        name: check.name,
        seeds,
        max_rel_err: 0.0,
        checked: 0,
        kinks: 0,
        worst: None,
        passed: true,
    };
    for seed in 0..seeds {
        let rep = (check.run)(seed, cfg)?;
        for (i, c) in rep.inputs.iter().enumerate() {
            s.checked += c.checked;
            s.kinks += c.kinks;
            if c.max_rel_err > s.max_rel_err || s.worst.is_none() {
                s.max_rel_err = s.max_rel_err.max(c.max_rel_err);
                s.worst = Some((seed, i));
            }
        }
        s.passed &= rep.passed();
    }
    Ok(s)
}
