//! Acceptance suite: one PASS/FAIL line per criterion, run in order on a
//! single thread so wall-clock limits are measured without contention.
//!
//! `cargo test --release --test acceptance -- 4 5` runs a subset.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use gfla::audit::{registry, run_check, AUDIT_SEEDS};
use gfla::flow_loss::{affine_regularization_loss, max_source_similarity, sampling_correctness_loss, COSINE_EPS};
use gfla::io;
use gfla::models::{FlowEstimator, RenderOverrides, Renderer, SamplingMode};
use gfla::synth::{self, Deformation, SceneSpec};
use gfla::tensor::{GradCheckConfig, Tape, Tensor};
use gfla::train::{self, FlowRunSummary, FullRunSummary, OptimizerRecord, RunConfig};
use gfla::warp::{self, FlowField};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn out_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn fresh(dir: &Path) -> PathBuf {
    let _ = std::fs::remove_dir_all(dir);
    dir.to_path_buf()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------- 1

fn gradient_audit() -> Outcome {
    let cfg = GradCheckConfig::default();
    if (cfg.h, cfg.tol) != (1e-3, 1e-3) {
        return Err(format!("checker configured with h={} tol={}", cfg.h, cfg.tol));
    }
    let required = [
        "conv2d",
        "instance_norm",
        "leaky_relu",
        "softmax",
        "bilinear_sample.feature",
        "bilinear_sample.flow",
        "extract_flowed_patches",
        "local_attention_warp",
        "kernel_predictor",
        "sampling_correctness.features",
        "sampling_correctness.flow",
        "affine_regularization",
        "l1_loss",
        "adversarial.discriminator",
        "adversarial.generator",
        "perceptual_loss",
        "style_loss",
        "total_loss",
    ];
    let checks = registry();
    let missing: Vec<_> = required.iter().filter(|r| !checks.iter().any(|c| c.name == **r)).collect();
    if !missing.is_empty() {
        return Err(format!("registry lacks {missing:?}"));
    }
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for c in &checks {
        let s = run_check(c, AUDIT_SEEDS, &cfg).map_err(|e| format!("{}: {e}", c.name))?;
        worst = worst.max(s.max_rel_err);
        if !s.passed {
            failed.push(format!("{} ({:.2e})", s.name, s.max_rel_err));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} checks x {AUDIT_SEEDS} seeds in {secs:.1} s, worst rel err {worst:.2e}{}",
            checks.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn analytic_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut notes = Vec::new();

    for shape in [[1, 3, 7, 9], [2, 5, 16, 16], [3, 1, 1, 4]] {
        let mut x = random(&mut rng, &shape, -100.0, 100.0);
        x.data_mut()[0] = -0.0;
        let y = warp::warp(&x, &FlowField::zeros(shape[0], shape[2], shape[3])).unwrap();
        if !y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            return Err(format!("zero-flow warp is not bit-exact for {shape:?}"));
        }
    }
    notes.push("zero-flow warp bit-exact");

    let tape = Tape::new();
    let ft = random(&mut rng, &[2, 4, 5, 6], -3.0, 3.0);
    let fa = random(&mut rng, &[2, 4, 5, 6], -3.0, 3.0);
    for (m, expect) in [(0.0, &ft), (1.0, &fa)] {
        let mask = tape.constant(Tensor::full(&[2, 1, 5, 6], m));
        let out = warp::occlusion_fuse(tape.constant(ft.clone()), tape.constant(fa.clone()), mask).unwrap().value();
        if out.data() != expect.data() {
            return Err(format!("occlusion_fuse(m={m}) is not exact"));
        }
    }
    notes.push("fuse endpoints exact");

    let cfg = RunConfig::per_part(2);
    let flow = FlowEstimator::<f32>::new(cfg.flow_estimator.clone()).unwrap();
    let renderer = Renderer::<f32>::new(cfg.renderer.clone()).unwrap();
    let batch = synth::Batch::generate(5, 0, 2, &cfg.dataset).unwrap();
    let tape = Tape::new();
    let (fb, rb) = (flow.params.bind_frozen(&tape), renderer.params.bind_frozen(&tape));
    let outs = flow.forward(&fb, tape.constant(batch.flow_input().unwrap())).unwrap();
    let r = renderer
        .forward(&rb, tape.constant(batch.source.clone()), tape.constant(batch.guidance_t.clone()), &outs, &RenderOverrides::default())
        .unwrap();
    let mut worst: f64 = 0.0;
    for b in &r.blocks {
        let k = b.kernels.unwrap().value();
        let [n, taps, h, w] = k.dims4("kernels").unwrap();
        for bi in 0..n {
            for l in 0..h * w {
                let s: f64 = (0..taps).map(|t| k.data()[(bi * taps + t) * h * w + l] as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    if worst > 1e-5 {
        return Err(format!("kernel sums deviate from 1 by {worst:e}"));
    }
    notes.push("kernel sums within 1e-5");

    let mut lr_affine: f64 = 0.0;
    for _ in 0..50 {
        let a = [
            [1.0 + rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-5.0..5.0)],
            [rng.random_range(-0.4..0.4), 1.0 + rng.random_range(-0.4..0.4), rng.random_range(-5.0..5.0)],
        ];
        let f = Tensor::from_fn(&[1, 2, 12, 12], |i| {
            let (c, l) = (i / 144, i % 144);
            let p = [(l % 12) as f64, (l / 12) as f64];
            a[c][0] * p[0] + a[c][1] * p[1] + a[c][2] - p[c]
        });
        let t = Tape::new();
        lr_affine = lr_affine.max(affine_regularization_loss(t.constant(f), 3, 1).unwrap().0.value().item());
    }
    let t = Tape::new();
    let lr_zero = affine_regularization_loss(t.constant(Tensor::<f64>::zeros(&[2, 2, 12, 12])), 3, 1).unwrap().0.value().item();
    if !(lr_affine < 1e-8 && lr_zero == 0.0) {
        return Err(format!("L_r(affine) = {lr_affine:e}, L_r(zero) = {lr_zero:e}"));
    }
    notes.push("L_r(affine) < 1e-8, L_r(zero) = 0");

    let v = random(&mut rng, &[2, 8, 6, 6], 0.05, 1.0);
    let t = Tape::new();
    let (lc, _) = sampling_correctness_loss(
        t.constant(v.clone()),
        t.constant(v),
        t.constant(Tensor::zeros(&[2, 2, 6, 6])),
        &Default::default(),
    )
    .unwrap();
    let err = (lc.value().item() - (-1.0f64).exp()).abs();
    check(err <= 1e-6, format!("{}; |L_c(aligned) - e^-1| = {err:.1e}", notes.join(", ")))
}

// ---------------------------------------------------------------- 3

fn pinv_residual(flow: &Tensor<f64>) -> f64 {
    let [_, _, h, w] = flow.dims4("oracle").unwrap();
    let mut total = 0.0;
    for cy in 1..h - 1 {
        for cx in 1..w - 1 {
            let (mut s, mut t) = (Vec::new(), Vec::new());
            for y in cy - 1..=cy + 1 {
                for x in cx - 1..=cx + 1 {
                    s.extend([
                        x as f64 + flow.data()[flow.idx4(0, 0, y, x)],
                        y as f64 + flow.data()[flow.idx4(0, 1, y, x)],
                        1.0,
                    ]);
                    t.extend([x as f64, y as f64]);
                }
            }
            let s = DMatrix::from_row_slice(9, 3, &s);
            let t = DMatrix::from_row_slice(9, 2, &t);
            let theta = s.clone().pseudo_inverse(1e-12).unwrap() * &t;
            total += (&t - &s * theta).norm_squared();
        }
    }
    total
}

fn brute_mu_max(vs: &Tensor<f64>, vt: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = vs.dims4("oracle").unwrap();
    let mut out = Vec::new();
    for b in 0..n {
        for tl in 0..h * w {
            let mut best = f64::NEG_INFINITY;
            for sl in 0..h * w {
                let (mut dot, mut ns, mut nt) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let (s, t) = (vs.data()[(b * c + ch) * h * w + sl], vt.data()[(b * c + ch) * h * w + tl]);
                    dot += s * t;
                    ns += s * s;
                    nt += t * t;
                }
                best = best.max(dot / (f64::sqrt(ns) * f64::sqrt(nt) + COSINE_EPS));
            }
            out.push(best);
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let f = random(&mut rng, &[1, 2, 8, 8], -3.0, 3.0);
        let t = Tape::new();
        let lib = affine_regularization_loss(t.constant(f.clone()), 3, 1).unwrap().0.value().item();
        let oracle = pinv_residual(&f);
        worst = worst.max((lib - oracle).abs() / oracle);
    }
    if worst > 1e-6 {
        return Err(format!("L_r vs pseudo-inverse: worst relative error {worst:e}"));
    }
    let mut mismatches = 0;
    for _ in 0..20 {
        let vs = random(&mut rng, &[2, 6, 8, 8], -1.0, 1.0);
        let vt = random(&mut rng, &[2, 6, 8, 8], -1.0, 1.0);
        let lib = max_source_similarity(&vs, &vt).unwrap();
        if lib.data() != brute_mu_max(&vs, &vt).as_slice() {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("L_r worst rel err {worst:.1e} over 100 flows; mu_max bit-equal to brute force in {}/20 maps", 20 - mismatches),
    )
}

// ---------------------------------------------------------------- 4, 5

fn stage_one_config(lambda_r: f64, out: PathBuf) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.deformation = Deformation::global_affine();
    cfg.losses.regularization = lambda_r;
    cfg.out_dir = fresh(&out);
    cfg
}

struct StageOne {
    summary: FlowRunSummary,
    cfg: RunConfig,
}

fn run_stage_one(lambda_r: f64) -> Result<StageOne, String> {
    let cfg = stage_one_config(lambda_r, out_root().join(format!("stage1_lambda_r_{lambda_r}")));
    let summary = train::train_flow(&cfg).map_err(|e| e.to_string())?;
    Ok(StageOne { summary, cfg })
}

fn stage_one(run: &StageOne) -> Outcome {
    let c = &run.cfg;
    if (c.steps, c.batch_size, c.dataset.size, c.losses.correctness, c.losses.regularization) != (2000, 4, 64, 5.0, 0.0025) {
        return Err("stage-1 configuration differs from the criterion".into());
    }
    let s = &run.summary;
    let ratio = s.final_metrics.epe / s.initial.epe;
    check(
        ratio < 0.5 && s.seconds < 600.0,
        format!(
            "EPE {:.4} -> {:.4} ({ratio:.3} x untrained) in {:.0} s",
            s.initial.epe, s.final_metrics.epe, s.seconds
        ),
    )
}

fn regularization_ablation(with: &StageOne, without: &StageOne) -> Outcome {
    let (a, b) = (&with.summary.final_metrics, &without.summary.final_metrics);
    let viz = ["viz/flow_pred.png", "viz/flow_gt.png"];
    let emitted = [with, without].iter().all(|r| viz.iter().all(|f| r.cfg.out_dir.join(f).exists()));
    check(
        b.roughness > a.roughness && b.warped_psnr < a.warped_psnr && emitted,
        format!(
            "roughness {:.5} (lambda_r=0) vs {:.5}; warped PSNR {:.3} vs {:.3} dB; visualizations {}",
            b.roughness,
            a.roughness,
            b.warped_psnr,
            a.warped_psnr,
            if emitted { "written" } else { "missing" }
        ),
    )
}

// ---------------------------------------------------------------- 6

struct StageTwo {
    content_aware: FullRunSummary,
    bilinear: FullRunSummary,
    dir: PathBuf,
    checkpoint_every: usize,
}

fn run_stage_two() -> Result<StageTwo, String> {
    let dir = fresh(&out_root().join("stage2"));
    let mut s1 = RunConfig::per_part(2);
    s1.out_dir = dir.join("stage1");
    let flow = train::train_flow(&s1).map_err(|e| e.to_string())?;

    let run = |sampling: SamplingMode, name: &str| {
        let mut cfg = RunConfig::per_part(2);
        cfg.steps = 3000;
        cfg.renderer.sampling = sampling;
        cfg.out_dir = dir.join(name);
        train::train_full(&cfg, Some(&flow.checkpoint)).map_err(|e| e.to_string())
    };
    Ok(StageTwo {
        content_aware: run(SamplingMode::ContentAware, "content_aware")?,
        bilinear: run(SamplingMode::Bilinear, "bilinear")?,
        checkpoint_every: RunConfig::per_part(2).checkpoint_every,
        dir,
    })
}

fn stage_two(r: &StageTwo) -> Outcome {
    let ca = &r.content_aware;
    let fm = &ca.final_metrics;
    let mut failures = Vec::new();

    let within = fm.psnr_visible >= ca.reference_psnr - 3.0;
    if !within {
        failures.push("masked PSNR below reference - 3 dB");
    }
    let ordered = ca.final_metrics.l1 <= r.bilinear.final_metrics.l1;
    if !ordered {
        failures.push("content-aware reconstruction loss above bilinear ablation");
    }

    // mean PSNR of the evaluations inside each checkpoint interval
    let mut windows: Vec<(f64, usize)> = Vec::new();
    for m in ca.curve.iter().filter(|m| m.step > 0) {
        let w = (m.step - 1) / r.checkpoint_every;
        if windows.len() <= w {
            windows.resize(w + 1, (0.0, 0));
        }
        windows[w].0 += m.psnr_visible;
        windows[w].1 += 1;
    }
    let means: Vec<f64> = windows.iter().map(|(s, n)| s / *n as f64).collect();
    if !means.windows(2).all(|p| p[1] >= p[0]) {
        failures.push("checkpoint-averaged PSNR not monotone");
    }

    let rec: Option<OptimizerRecord> = std::fs::read_to_string(r.dir.join("content_aware/optimizer.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let lr_ok = rec.is_some_and(|o| o.discriminator.lr == o.generator.lr / 10.0);
    if !lr_ok {
        failures.push("logged discriminator lr is not generator lr / 10");
    }
    if !(fm.mask_occluded < fm.mask_visible) {
        failures.push("mask over occluded pixels not below mask over visible pixels");
    }
    let detail = format!(
        "masked PSNR {:.2} dB vs reference {:.2} dB (gap {:.2}); eval l1 {:.4} content-aware vs {:.4} bilinear; \
         checkpoint PSNR means {:?}; mask occluded {:.3} / visible {:.3}; {:.0} s + {:.0} s{}",
        fm.psnr_visible,
        ca.reference_psnr,
        ca.reference_psnr - fm.psnr_visible,
        ca.final_metrics.l1,
        r.bilinear.final_metrics.l1,
        means.iter().map(|m| (m * 100.0).round() / 100.0).collect::<Vec<_>>(),
        fm.mask_occluded,
        fm.mask_visible,
        ca.seconds,
        r.bilinear.seconds,
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    check(failures.is_empty(), detail)
}

// ---------------------------------------------------------------- 7

fn determinism() -> Outcome {
    let root = fresh(&out_root().join("determinism"));
    let small = |name: &str| {
        let mut cfg = RunConfig::default();
        cfg.dataset.deformation = Deformation::global_affine();
        cfg.steps = 20;
        cfg.checkpoint_every = 10;
        cfg.eval_every = 10;
        cfg.deterministic = true;
        cfg.out_dir = root.join(name);
        cfg
    };
    let read = |p: PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));

    train::train_flow(&small("flow_a")).map_err(|e| e.to_string())?;
    train::train_flow(&small("flow_b")).map_err(|e| e.to_string())?;
    let flow_same = read(root.join("flow_a/loss.csv"))? == read(root.join("flow_b/loss.csv"))?;

    let full = |name: &str| {
        let mut cfg = small(name);
        cfg.dataset = SceneSpec { deformation: Deformation::per_part_affine(2), ..Default::default() };
        cfg.steps = 10;
        train::train_full(&cfg, Some(&root.join("flow_a/flow.gfla"))).map_err(|e| e.to_string())
    };
    let summary = full("full_a")?;
    full("full_b")?;
    let full_same = read(root.join("full_a/loss.csv"))? == read(root.join("full_b/loss.csv"))?;

    let cfg = small("full_a");
    let restored = train::load_checkpoint(&summary.checkpoint, &cfg).map_err(|e| e.to_string())?;
    let again = root.join("again.gfla");
    train::save_checkpoint(&again, &restored.flow, restored.renderer.as_ref(), restored.disc.as_ref()).map_err(|e| e.to_string())?;
    let ckpt_same = read(summary.checkpoint.clone())? == read(again)?;

    let flow_file = root.join("flow_a/viz/flow_pred.gflo");
    let f = io::read_flow(&flow_file).map_err(|e| e.to_string())?;
    let copy = root.join("copy.gflo");
    io::write_flow(&copy, &f).map_err(|e| e.to_string())?;
    let back = io::read_flow(&copy).map_err(|e| e.to_string())?;
    let flow_rt = read(flow_file)? == read(copy)?
        && back.tensor().data().iter().zip(f.tensor().data()).all(|(a, b)| a.to_bits() == b.to_bits());

    check(
        flow_same && full_same && ckpt_same && flow_rt,
        format!(
            "stage-1 loss CSV identical: {flow_same}; stage-2 loss CSV identical: {full_same}; \
             checkpoint round-trip exact: {ckpt_same}; flow file round-trip exact: {flow_rt}"
        ),
    )
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, outcome: Outcome, elapsed: Duration) -> bool {
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("{tag} criterion {n} ({name}, {:.0} s): {detail}", elapsed.as_secs_f64());
    ok
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| args.is_empty() || args.iter().any(|a| a == &n.to_string());
    std::fs::create_dir_all(out_root()).unwrap();
    let mut all = true;

    let quick: [(usize, &str, fn() -> Outcome); 3] = [
        (1, "gradient audit", gradient_audit),
        (2, "analytic identities", analytic_identities),
        (3, "oracle equivalence", oracle_equivalence),
    ];
    for (n, name, f) in quick {
        if wanted(n) {
            let t = Instant::now();
            all &= report(n, name, f(), t.elapsed());
        }
    }

    if wanted(4) || wanted(5) {
        let t = Instant::now();
        let with = run_stage_one(0.0025);
        let e4 = t.elapsed();
        if wanted(4) {
            all &= report(4, "stage-1 run", with.as_ref().map_err(Clone::clone).and_then(stage_one), e4);
        }
        if wanted(5) {
            let t = Instant::now();
            let outcome = match (&with, run_stage_one(0.0)) {
                (Ok(a), Ok(b)) => regularization_ablation(a, &b),
                (Err(e), _) => Err(e.clone()),
                (_, Err(e)) => Err(e),
            };
            all &= report(5, "regularization ablation", outcome, t.elapsed());
        }
    }

    if wanted(6) {
        let t = Instant::now();
        let outcome = run_stage_two().and_then(|r| stage_two(&r));
        all &= report(6, "stage-2 run", outcome, t.elapsed());
    }

    if wanted(7) {
        let t = Instant::now();
        all &= report(7, "determinism", determinism(), t.elapsed());
    }

    if !all {
        std::process::exit(1);
    }
}
