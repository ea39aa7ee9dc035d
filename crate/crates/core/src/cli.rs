//! Command-line front end. Every subcommand is a plain library function
//! (`cmd_*`) so it can be driven from tests and examples; [`run`] maps
//! parsed arguments onto them and errors onto exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::audit::{self, CheckSummary, AUDIT_SEEDS};
use crate::error::{Error, Result};
use crate::io;
use crate::models::{RenderOverrides, Renderer};
use crate::synth::{self, epe, psnr};
use crate::tensor::{GradCheckConfig, Tape, Tensor};
use crate::train::{self, load_checkpoint, FlowRunSummary, FullRunSummary, RunConfig};
use crate::warp::{self, FlowField};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gfla", version, about = "Flow-field warping, local attention sampling and two-stage training")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML); flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub device: Option<String>,
    /// Strict determinism.
    #[arg(long, global = true)]
    pub det: bool,
    /// Resample a flow file whose size differs from the image.
    #[arg(long, global = true)]
    pub resize_flow: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WarpMode {
    Bilinear,
    AttentionUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// The dataset's ground-truth flow.
    Gt,
    /// The zero flow.
    Zero,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference audit of every differentiable operator.
    Gradcheck {
        /// Glob over check names.
        #[arg(default_value = "*")]
        filter: String,
        #[arg(long, default_value_t = AUDIT_SEEDS)]
        seeds: u64,
    },
    /// Warp an image by a flow file.
    Warp {
        image: PathBuf,
        flow: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = WarpMode::Bilinear)]
        mode: WarpMode,
        /// Patch size of the attention-uniform mode.
        #[arg(long, default_value_t = 3)]
        patch: usize,
    },
    /// Stage 1: train the flow estimator.
    TrainFlow,
    /// Stage 2: train estimator and renderer end to end.
    TrainFull {
        /// Stage-1 checkpoint.
        #[arg(long)]
        flow_ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a baseline flow on a dataset directory.
    Eval {
        dataset: PathBuf,
        #[arg(long, conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Color-wheel visualization of a flow file.
    VizFlow {
        flow: PathBuf,
        output: PathBuf,
        /// Magnitude mapped to full saturation (default: the field maximum).
        #[arg(long)]
        max: Option<f64>,
        /// Append a color-wheel legend panel.
        #[arg(long)]
        legend: bool,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

/// Config from `--config` (or defaults) with flag overrides applied.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = g.steps {
        cfg.steps = n;
    }
    if let Some(d) = &g.device {
        cfg.device = d.clone();
    }
    if g.det {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run the selected checks and print one table row per check.
pub fn cmd_gradcheck(filter: &str, seeds: u64, out: &mut dyn Write) -> Result<Vec<CheckSummary>> {
    let checks = audit::select(filter)?;
    let cfg = GradCheckConfig::default();
    writeln!(out, "{:<32} {:>6} {:>8} {:>6} {:>12}  result", "check", "seeds", "checked", "kinks", "max rel err")?;
    let mut rows = Vec::with_capacity(checks.len());
    for c in &checks {
        let s = audit::run_check(c, seeds, &cfg)?;
        writeln!(
            out,
            "{:<32} {:>6} {:>8} {:>6} {:>12.3e}  {}",
            s.name,
            s.seeds,
            s.checked,
            s.kinks,
            s.max_rel_err,
            if s.passed { "PASS" } else { "FAIL" }
        )?;
        rows.push(s);
    }
    Ok(rows)
}

/// Flow matching `(h, w)`, resampled when `resize` is set.
fn fit_flow(flow: FlowField<f32>, h: usize, w: usize, resize: bool) -> Result<FlowField<f32>> {
    let [_, _, fh, fw] = flow.dims();
    if (fh, fw) == (h, w) {
        Ok(flow)
    } else if resize {
        flow.resize(h, w)
    } else {
        Err(Error::dim("warp", "flow size (pass --resize-flow to resample)", format!("{h}x{w}"), format!("{fh}x{fw}")))
    }
}

/// Warp `image` by `flow` and write the result.
pub fn cmd_warp(image: &Path, flow: &Path, output: &Path, mode: WarpMode, patch: usize, resize_flow: bool) -> Result<()> {
    let img = io::read_image(image)?;
    let [_, _, h, w] = img.dims4("warp")?;
    let flow = fit_flow(io::read_flow(flow)?, h, w, resize_flow)?;
    let warped = match mode {
        WarpMode::Bilinear => warp::warp(&img, &flow)?,
        WarpMode::AttentionUniform => {
            let tape = Tape::new();
            let patches = warp::extract_flowed_patches(tape.constant(img), tape.constant(flow.into_tensor()), patch)?;
            let k = patch * patch;
            let kernels = tape.constant(Tensor::full(&[1, k, h, w], 1.0 / k as f32));
            warp::local_attention_warp(patches, kernels)?.value()
        }
    };
    io::write_image(output, &warped)
}

/// Color-wheel rendering of a flow file.
pub fn cmd_viz_flow(flow: &Path, output: &Path, max: Option<f64>, legend: bool) -> Result<()> {
    let f = io::read_flow(flow)?;
    io::write_flow_png(output, &f, max, legend)
}

/// Write `count` samples of `cfg.dataset` under `cfg.out_dir`.
pub fn cmd_gen_data(cfg: &RunConfig, count: usize) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let s = synth::gen_scene(synth::sample_seed(cfg.seed, i as u64), &cfg.dataset)?;
            io::write_sample(&cfg.out_dir, i, &s)
        })
        .collect()
}

pub fn cmd_train_flow(cfg: &RunConfig) -> Result<FlowRunSummary> {
    train::train_flow(cfg)
}

pub fn cmd_train_full(cfg: &RunConfig, flow_ckpt: Option<&Path>) -> Result<FullRunSummary> {
    train::train_full(cfg, flow_ckpt)
}

/// Flows evaluated by [`cmd_eval`].
#[derive(Clone, Debug)]
pub enum EvalSource {
    Checkpoint(PathBuf),
    Baseline(Baseline),
}

/// Bins of the kernel-entropy histogram.
pub const ENTROPY_BINS: usize = 10;

/// Per-sample evaluation row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: String,
    pub epe: f64,
    /// Source bilinearly warped by the evaluated flow, visible pixels.
    pub warp_psnr: f64,
    /// Source warped by the ground-truth flow (upper reference).
    pub gt_warp_psnr: f64,
    /// Renderer output vs target; absent without a renderer.
    pub psnr_visible: Option<f64>,
    pub psnr_full: Option<f64>,
    pub l1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub samples: usize,
    pub epe: f64,
    pub warp_psnr: f64,
    pub gt_warp_psnr: f64,
    pub psnr_visible: Option<f64>,
    pub psnr_full: Option<f64>,
    pub l1: Option<f64>,
    /// Attention-kernel entropy normalized by `ln(n²)`, counts per bin over
    /// `[0, 1]`; empty without a renderer.
    pub kernel_entropy: Vec<usize>,
    pub rows: Vec<EvalRow>,
}

/// Normalized entropy of each kernel `[b, k, h, w]` along `k`.
pub fn kernel_entropies(kernels: &Tensor<f32>) -> Result<Vec<f64>> {
    let [b, k, h, w] = kernels.dims4("kernel_entropies")?;
    let plane = h * w;
    let norm = (k as f64).ln();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for l in 0..plane {
            let mut e = 0.0;
            for t in 0..k {
                let p = kernels.data()[(bi * k + t) * plane + l] as f64;
                if p > 0.0 {
                    e -= p * p.ln();
                }
            }
            out.push(if norm > 0.0 { e / norm } else { 0.0 });
        }
    }
    Ok(out)
}

pub fn entropy_histogram(values: &[f64]) -> Vec<usize> {
    let mut bins = vec![0; ENTROPY_BINS];
    for &v in values {
        let i = ((v * ENTROPY_BINS as f64) as usize).min(ENTROPY_BINS - 1);
        bins[i] += 1;
    }
    bins
}

/// Evaluate flows (and, for a full checkpoint, rendered targets) on every
/// sample under `dataset`; writes `eval.json` and `eval.csv` into `out`.
pub fn cmd_eval(cfg: &RunConfig, source: &EvalSource, dataset: &Path, out: &Path) -> Result<EvalReport> {
    let dirs = io::list_samples(dataset)?;
    if dirs.is_empty() {
        return Err(Error::Empty(format!("no samples under {}", dataset.display())));
    }
    let nets = match source {
        EvalSource::Checkpoint(p) => Some(load_checkpoint(p, cfg)?),
        EvalSource::Baseline(_) => None,
    };
    let mut rows = Vec::with_capacity(dirs.len());
    let mut entropies = Vec::new();
    for dir in &dirs {
        let s = io::read_sample(dir)?;
        let [_, _, h, w] = s.source.dims4("eval")?;
        let flow = match (source, &nets) {
            (EvalSource::Baseline(Baseline::Gt), _) => s.flow.clone(),
            (EvalSource::Baseline(Baseline::Zero), _) => FlowField::zeros(1, h, w),
            (_, Some(n)) => {
                let input = train::flow_input(&s.source, &s.guidance_s, &s.guidance_t)?;
                let outs = n.flow.infer(&input)?;
                let (f, _) = outs.iter().max_by_key(|(f, _)| f.dims()[2]).ok_or_else(|| Error::Empty("no flow outputs".into()))?;
                f.resize(h, w)?
            }
            _ => unreachable!(),
        };
        let mut row = EvalRow {
            sample: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            epe: epe(&flow, &s.flow, &s.visibility)?,
            warp_psnr: psnr(&warp::warp(&s.source, &flow)?, &s.target, Some(&s.visibility))?,
            gt_warp_psnr: psnr(&warp::warp(&s.source, &s.flow)?, &s.target, Some(&s.visibility))?,
            psnr_visible: None,
            psnr_full: None,
            l1: None,
        };
        if let Some(Some(r)) = nets.as_ref().map(|n| n.renderer.as_ref()) {
            let (img, kernels) = render_one(&nets.as_ref().unwrap().flow, r, &s)?;
            row.psnr_visible = Some(psnr(&img, &s.target, Some(&s.visibility))?);
            row.psnr_full = Some(psnr(&img, &s.target, None)?);
            row.l1 = Some(img.zip_map(&s.target, |a, b| (a - b).abs())?.data().iter().map(|&v| v as f64).sum::<f64>()
                / img.numel() as f64);
            for k in &kernels {
                entropies.extend(kernel_entropies(k)?);
            }
        }
        rows.push(row);
    }
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let has_renderer = rows.first().is_some_and(|r| r.psnr_visible.is_some());
    let report = EvalReport {
        source: match source {
            EvalSource::Checkpoint(p) => p.display().to_string(),
            EvalSource::Baseline(Baseline::Gt) => "baseline:gt".into(),
            EvalSource::Baseline(Baseline::Zero) => "baseline:zero".into(),
        },
        samples: rows.len(),
        epe: mean(|r| r.epe),
        warp_psnr: mean(|r| r.warp_psnr),
        gt_warp_psnr: mean(|r| r.gt_warp_psnr),
        psnr_visible: has_renderer.then(|| mean(|r| r.psnr_visible.unwrap_or(f64::NAN))),
        psnr_full: has_renderer.then(|| mean(|r| r.psnr_full.unwrap_or(f64::NAN))),
        l1: has_renderer.then(|| mean(|r| r.l1.unwrap_or(f64::NAN))),
        kernel_entropy: if entropies.is_empty() { Vec::new() } else { entropy_histogram(&entropies) },
        rows,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    io::write_text(&out.join("eval.json"), &serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::RawIo)?;
    Ok(report)
}

fn render_one(
    flow: &crate::models::FlowEstimator<f32>,
    renderer: &Renderer<f32>,
    s: &io::StoredSample,
) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let fb = flow.params.bind_frozen(&tape);
    let rb = renderer.params.bind_frozen(&tape);
    let input = train::flow_input(&s.source, &s.guidance_s, &s.guidance_t)?;
    let outs = flow.forward(&fb, tape.constant(input))?;
    let r = renderer.forward(
        &rb,
        tape.constant(s.source.clone()),
        tape.constant(s.guidance_t.clone()),
        &outs,
        &RenderOverrides::default(),
    )?;
    Ok((r.image.value(), r.blocks.iter().filter_map(|b| b.kernels.map(|k| k.value())).collect()))
}

/// Exit code for an error: configuration and selection problems are usage
/// errors, everything else a runtime failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Empty(_) | Error::Toml(_) | Error::UnknownParam(_) | Error::UnknownLayer(_) => {
            EXIT_USAGE
        }
        _ => EXIT_FAILURE,
    }
}

/// Execute a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let g = &cli.global;
    match cli.command {
        Command::Gradcheck { filter, seeds } => {
            let rows = cmd_gradcheck(&filter, seeds, &mut std::io::stdout().lock())?;
            Ok(if rows.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Warp { image, flow, output, mode, patch } => {
            cmd_warp(&image, &flow, &output, mode, patch, g.resize_flow)?;
            Ok(EXIT_OK)
        }
        Command::TrainFlow => {
            let s = cmd_train_flow(&resolve_config(g)?)?;
            println!(
                "stage 1: {} steps, epe {:.4} -> {:.4}, checkpoint {}",
                s.steps,
                s.initial.epe,
                s.final_metrics.epe,
                s.checkpoint.display()
            );
            Ok(EXIT_OK)
        }
        Command::TrainFull { flow_ckpt } => {
            let cfg = resolve_config(g)?;
            if flow_ckpt.is_none() && cfg.skip_stage1 {
                warn!("stage 1 skipped by configuration");
            }
            let s = cmd_train_full(&cfg, flow_ckpt.as_deref())?;
            println!(
                "stage 2: {} steps, masked psnr {:.2} dB (gt-warp reference {:.2} dB), checkpoint {}",
                s.steps,
                s.final_metrics.psnr_visible,
                s.reference_psnr,
                s.checkpoint.display()
            );
            Ok(EXIT_OK)
        }
        Command::Eval { dataset, checkpoint, baseline } => {
            let cfg = resolve_config(g)?;
            let source = match (checkpoint, baseline) {
                (Some(p), None) => EvalSource::Checkpoint(p),
                (None, Some(b)) => EvalSource::Baseline(b),
                _ => return Err(Error::Config("eval needs --checkpoint or --baseline".into())),
            };
            let out = g.out.clone().unwrap_or_else(|| dataset.join("eval"));
            let r = cmd_eval(&cfg, &source, &dataset, &out)?;
            println!("{}: {} samples, epe {:.4}, warp psnr {:.2} dB", r.source, r.samples, r.epe, r.warp_psnr);
            Ok(EXIT_OK)
        }
        Command::VizFlow { flow, output, max, legend } => {
            cmd_viz_flow(&flow, &output, max, legend)?;
            Ok(EXIT_OK)
        }
        Command::GenData { count } => {
            let cfg = resolve_config(g)?;
            let dirs = cmd_gen_data(&cfg, count)?;
            println!("wrote {} samples under {}", dirs.len(), cfg.out_dir.display());
            Ok(EXIT_OK)
        }
    }
}

/// Parse `args` (program name first) and run; clap usage errors exit 2.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
