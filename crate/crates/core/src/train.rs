//! Two-stage training on synthetic data and the evaluation helpers shared
//! by the command-line tools.
//!
//! Stage 1 trains the flow estimator alone with
//! `λ_c·L_c + λ_r·L_r` averaged over its output resolutions. Stage 2 trains
//! estimator and renderer end to end with all six terms, alternating with a
//! discriminator update at a reduced learning rate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_loss::{
    affine_regularization_loss, affine_residual_report, sampling_correctness_loss, FeatureProvider, FixedPyramid,
    SamplingCorrectnessOptions,
};
use crate::io;
use crate::models::{
    Discriminator, DiscriminatorConfig, FlowEstimator, FlowEstimatorConfig, FlowOutput, ModelConfig, RenderOverrides,
    Renderer, RendererConfig,
};
use crate::render_loss::{adversarial_losses, generator_adversarial, l1_loss, perceptual_loss, style_loss, LossTerm, LossWeights};
use crate::synth::{concat_channels, epe, psnr, sample_seed, Batch, Deformation, SceneSpec};
use crate::tensor::{ops, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::warp::{self, FlowField};

/// Salt separating evaluation seeds from training seeds.
const EVAL_SALT: u64 = 0xE7A1_5EED;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizationConfig {
    pub patch: usize,
    pub stride: usize,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig { patch: 3, stride: 1 }
    }
}

/// Everything a run needs; serialized to `config.toml` in the output
/// directory before the first step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Size of a fixed training pool; 0 draws a fresh sample every time.
    pub train_samples: usize,
    pub deterministic: bool,
    pub device: String,
    pub skip_stage1: bool,
    pub feature_seed: u64,
    pub perceptual_layers: Vec<String>,
    pub style_layers: Vec<String>,
    pub discriminator_lr_ratio: f64,
    pub optimizer: AdamConfig,
    pub losses: LossWeights,
    pub regularization: RegularizationConfig,
    pub correctness: SamplingCorrectnessOptions,
    pub dataset: SceneSpec,
    pub flow_estimator: FlowEstimatorConfig,
    pub renderer: RendererConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let models = ModelConfig::toy(64, 3);
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            steps: 2000,
            batch_size: 4,
            checkpoint_every: 500,
            eval_every: 250,
            eval_samples: 16,
            train_samples: 0,
            deterministic: true,
            device: "cpu".into(),
            skip_stage1: false,
            feature_seed: 7,
            perceptual_layers: vec!["L1".into(), "L2".into(), "L3".into()],
            style_layers: vec!["L2".into(), "L3".into()],
            discriminator_lr_ratio: 0.1,
            optimizer: AdamConfig::default(),
            losses: LossWeights::default(),
            regularization: RegularizationConfig::default(),
            correctness: SamplingCorrectnessOptions::default(),
            dataset: SceneSpec::default(),
            flow_estimator: models.flow_estimator,
            renderer: models.renderer,
            discriminator: models.discriminator,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn models(&self) -> ModelConfig {
        ModelConfig {
            flow_estimator: self.flow_estimator.clone(),
            renderer: self.renderer.clone(),
            discriminator: self.discriminator.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device {:?}; only \"cpu\" exists", self.device)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.eval_every == 0 {
            return Err(Error::Config("checkpoint_every and eval_every must be positive".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        if !(self.discriminator_lr_ratio > 0.0) {
            return Err(Error::Config("discriminator_lr_ratio must be positive".into()));
        }
        self.losses.validate()?;
        self.dataset.validate()?;
        let g = self.dataset.guidance_channels;
        let s = self.dataset.size;
        if self.flow_estimator.in_channels != 3 + 2 * g || self.flow_estimator.input_size != s {
            return Err(Error::Config(format!(
                "flow estimator expects {} channels at {}, dataset gives {} at {s}",
                self.flow_estimator.in_channels,
                self.flow_estimator.input_size,
                3 + 2 * g
            )));
        }
        if self.renderer.guidance_channels != g || self.renderer.input_size != s {
            return Err(Error::Config("renderer guidance channels or size disagree with the dataset".into()));
        }
        if self.discriminator.in_channels != 3 + g {
            return Err(Error::Config("discriminator input channels must be 3 + guidance channels".into()));
        }
        self.models().validate()
    }

    /// Write the config into the output directory.
    pub fn record(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join("config.toml");
        io::write_text(&path, &self.to_toml()?)?;
        Ok(path)
    }

    fn batch(&self, step: usize) -> Result<Batch> {
        let bs = self.batch_size;
        let samples = (0..bs)
            .map(|i| {
                let k = (step * bs + i) as u64;
                let k = if self.train_samples > 0 { k % self.train_samples as u64 } else { k };
                crate::synth::gen_scene(sample_seed(self.seed, k), &self.dataset)
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::from_samples(&samples)
    }

    /// Held-out evaluation batch (disjoint seed stream).
    pub fn eval_batch(&self) -> Result<Batch> {
        Batch::generate(self.seed ^ EVAL_SALT, 0, self.eval_samples, &self.dataset)
    }
}

/// Unweighted loss components of one step and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub l_c: f64,
    pub l_r: f64,
    pub l_l1: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_perc: f64,
    pub l_style: f64,
    pub total: f64,
}

pub const LOSS_COLUMNS: [&str; 9] = ["step", "L_c", "L_r", "L_l1", "L_adv_g", "L_adv_d", "L_perc", "L_style", "total"];

/// CSV writer for [`LossRow`]s.
pub struct LossLog {
    writer: csv::Writer<fs::File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(LOSS_COLUMNS)?;
        Ok(LossLog { writer })
    }

    pub fn push(&mut self, r: &LossRow) -> Result<()> {
        let vals = [r.l_c, r.l_r, r.l_l1, r.l_adv_g, r.l_adv_d, r.l_perc, r.l_style, r.total];
        let mut rec = vec![r.step.to_string()];
        rec.extend(vals.iter().map(|v| v.to_string()));
        self.writer.write_record(&rec)?;
        self.writer.flush().map_err(Error::RawIo)
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::RawIo)
}

/// Feature pairs for the correctness loss, keyed by flow resolution.
fn correctness_features<'t>(
    tape: &'t Tape<f32>,
    pyramid: &FixedPyramid<f32>,
    source: &Tensor<f32>,
    target: &Tensor<f32>,
    sizes: &[usize],
) -> Result<BTreeMap<usize, (Var<'t, f32>, Var<'t, f32>)>> {
    let side = Tape::new();
    let fs = pyramid.features(side.constant(source.clone()))?;
    let ft = pyramid.features(side.constant(target.clone()))?;
    let mut out = BTreeMap::new();
    for &s in sizes {
        let id = fs
            .iter()
            .find(|(_, v)| v.shape()[2] == s)
            .map(|(k, _)| k.clone())
            .ok_or_else(|| Error::Config(format!("no feature layer at {s}x{s} for the correctness loss")))?;
        out.insert(s, (tape.constant(fs[&id].value()), tape.constant(ft[&id].value())));
    }
    Ok(out)
}

/// `L_c` and `L_r` averaged over the flow outputs.
fn flow_losses<'t>(
    cfg: &RunConfig,
    feats: &BTreeMap<usize, (Var<'t, f32>, Var<'t, f32>)>,
    outs: &[FlowOutput<'t, f32>],
) -> Result<(Var<'t, f32>, Var<'t, f32>)> {
    let w = 1.0 / outs.len() as f32;
    let mut lc = Vec::new();
    let mut lr = Vec::new();
    for o in outs {
        let (vs, vt) = feats[&o.size];
        let (c, _) = sampling_correctness_loss(vs, vt, o.flow, &cfg.correctness)?;
        let (r, _) = affine_regularization_loss(o.flow, cfg.regularization.patch, cfg.regularization.stride)?;
        lc.push((w, c));
        lr.push((w, r));
    }
    Ok((ops::weighted_sum(&lc)?, ops::weighted_sum(&lr)?))
}

/// Finest flow output, resized to the image resolution.
fn full_res_flow(outs: &[(FlowField<f32>, crate::warp::OcclusionMask<f32>)], size: usize) -> Result<FlowField<f32>> {
    let (flow, _) = outs
        .iter()
        .max_by_key(|(f, _)| f.dims()[2])
        .ok_or_else(|| Error::Empty("flow estimator produced no outputs".into()))?;
    flow.resize(size, size)
}

/// Stage-1 metrics on a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub step: usize,
    /// Endpoint error over visible pixels of the finest flow at image size.
    pub epe: f64,
    /// Mean local affine residual of the finest flow (roughness).
    pub roughness: f64,
    /// PSNR of the source warped by the predicted flow, visible pixels.
    pub warped_psnr: f64,
}

pub fn evaluate_flow(net: &FlowEstimator<f32>, batch: &Batch, reg: &RegularizationConfig) -> Result<FlowMetrics> {
    let size = batch.source.shape()[2];
    let outs = net.infer(&batch.flow_input()?)?;
    let finest = outs
        .iter()
        .max_by_key(|(f, _)| f.dims()[2])
        .map(|(f, _)| f.clone())
        .ok_or_else(|| Error::Empty("no flow outputs".into()))?;
    let rough = affine_residual_report(&finest, reg.patch, reg.stride)?;
    let flow = full_res_flow(&outs, size)?;
    let warped = warp::warp(&batch.source, &flow)?;
    Ok(FlowMetrics {
        step: 0,
        epe: epe(&flow, &batch.flow, &batch.visibility)?,
        roughness: rough.mean_residual(batch.len()),
        warped_psnr: psnr(&warped, &batch.target, Some(&batch.visibility))?,
    })
}

/// Checkpoint of the networks in a run; entries are prefixed `flow/`,
/// `renderer/` and `disc/`.
pub fn save_checkpoint(
    path: &Path,
    flow: &FlowEstimator<f32>,
    renderer: Option<&Renderer<f32>>,
    disc: Option<&Discriminator<f32>>,
) -> Result<()> {
    let mut store = ParamStore::new();
    store.absorb("flow/", &flow.params);
    if let Some(r) = renderer {
        store.absorb("renderer/", &r.params);
    }
    if let Some(d) = disc {
        store.absorb("disc/", &d.params);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    store.save(path)
}

/// Networks restored from a checkpoint and checked against `cfg`.
pub struct Restored {
    pub flow: FlowEstimator<f32>,
    pub renderer: Option<Renderer<f32>>,
    pub disc: Option<Discriminator<f32>>,
}

pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Restored> {
    let store = ParamStore::<f32>::load(path)?;
    let mut flow = FlowEstimator::new(cfg.flow_estimator.clone())?;
    let fp = store.extract("flow/");
    fp.check_layout(&flow.params)?;
    flow.params = fp;
    let rp = store.extract("renderer/");
    let renderer = if rp.is_empty() {
        None
    } else {
        let mut r = Renderer::new(cfg.renderer.clone())?;
        rp.check_layout(&r.params)?;
        r.params = rp;
        Some(r)
    };
    let dp = store.extract("disc/");
    let disc = if dp.is_empty() {
        None
    } else {
        let mut d = Discriminator::new(cfg.discriminator.clone())?;
        dp.check_layout(&d.params)?;
        d.params = dp;
        Some(d)
    };
    Ok(Restored { flow, renderer, disc })
}

/// Stage-1 trainer.
pub struct FlowTrainer {
    pub cfg: RunConfig,
    pub net: FlowEstimator<f32>,
    pyramid: FixedPyramid<f32>,
    pub step: usize,
}

impl FlowTrainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = FlowEstimator::new(cfg.flow_estimator.clone())?;
        let pyramid = FixedPyramid::rgb(cfg.feature_seed);
        Ok(FlowTrainer { cfg, net, pyramid, step: 0 })
    }

    /// One optimizer step on the next training batch.
    pub fn train_step(&mut self) -> Result<LossRow> {
        let batch = self.cfg.batch(self.step)?;
        let tape = Tape::new();
        let bind = self.net.params.bind(&tape);
        let outs = self.net.forward(&bind, tape.constant(batch.flow_input()?))?;
        let sizes: Vec<usize> = outs.iter().map(|o| o.size).collect();
        let feats = correctness_features(&tape, &self.pyramid, &batch.source, &batch.target, &sizes)?;
        let (lc, lr) = flow_losses(&self.cfg, &feats, &outs)?;
        let w = &self.cfg.losses;
        let total = ops::weighted_sum(&[(w.correctness as f32, lc), (w.regularization as f32, lr)])?;
        let row = LossRow {
            step: self.step + 1,
            l_c: lc.value().item() as f64,
            l_r: lr.value().item() as f64,
            total: total.value().item() as f64,
            ..Default::default()
        };
        crate::render_loss::total_loss(
            &[(LossTerm::Correctness, row.l_c), (LossTerm::Regularization, row.l_r)],
            w,
        )?;
        let grads = tape.backward(total)?;
        let before = self.net.params.clone();
        self.net.params.adam_step(&bind.grads(&grads), &self.cfg.optimizer)?;
        if !self.net.params.all_finite() {
            self.net.params = before;
            return Err(Error::NonFinite("flow estimator parameters after update".into()));
        }
        self.step += 1;
        Ok(row)
    }
}

/// Outcome of a stage-1 run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowRunSummary {
    pub steps: usize,
    pub initial: FlowMetrics,
    pub final_metrics: FlowMetrics,
    pub curve: Vec<FlowMetrics>,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

/// Stage 1: train the flow estimator, writing `config.toml`, `loss.csv`,
/// `epe.csv`, checkpoints, flow visualizations and `summary.json` under
/// `cfg.out_dir`.
pub fn train_flow(cfg: &RunConfig) -> Result<FlowRunSummary> {
    let start = std::time::Instant::now();
    let mut trainer = FlowTrainer::new(cfg.clone())?;
    cfg.record()?;
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut log = LossLog::create(&out.join("loss.csv"))?;
    let eval = cfg.eval_batch()?;
    let initial = evaluate_flow(&trainer.net, &eval, &cfg.regularization)?;
    info!("stage 1 untrained: epe {:.4}", initial.epe);
    let mut curve = vec![initial];
    while trainer.step < cfg.steps {
        let row = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => return Err(abort(e, out, |p| save_checkpoint(p, &trainer.net, None, None))),
        };
        log.push(&row)?;
        let s = trainer.step;
        if s % cfg.eval_every == 0 || s == cfg.steps {
            let m = FlowMetrics { step: s, ..evaluate_flow(&trainer.net, &eval, &cfg.regularization)? };
            info!("stage 1 step {s}: loss {:.5} epe {:.4} roughness {:.5}", row.total, m.epe, m.roughness);
            curve.push(m);
        }
        if s % cfg.checkpoint_every == 0 {
            save_checkpoint(&ckpt_dir.join(format!("flow_{s:06}.gfla")), &trainer.net, None, None)?;
        }
    }
    let checkpoint = out.join("flow.gfla");
    save_checkpoint(&checkpoint, &trainer.net, None, None)?;
    write_csv(&out.join("epe.csv"), &curve)?;
    write_flow_visuals(out, &trainer.net, &eval)?;
    let summary = FlowRunSummary {
        steps: cfg.steps,
        initial,
        final_metrics: *curve.last().unwrap(),
        curve,
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    };
    io::write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// On a non-finite loss or update, write the (unchanged) last good state to
/// `last_good.gfla`; periodic checkpoints are left in place.
fn abort(e: Error, out: &Path, save: impl FnOnce(&Path) -> Result<()>) -> Error {
    if matches!(e, Error::NonFinite(_)) {
        let p = out.join("last_good.gfla");
        match save(&p) {
            Ok(()) => log::error!("aborting on {e}; last good state saved to {}", p.display()),
            Err(se) => log::error!("aborting on {e}; saving last good state failed: {se}"),
        }
    }
    e
}

fn write_flow_visuals(out: &Path, net: &FlowEstimator<f32>, eval: &Batch) -> Result<()> {
    let dir = out.join("viz");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let item = eval_item(eval, 0)?;
    let outs = net.infer(&item.flow_input()?)?;
    let size = item.source.shape()[2];
    let pred = full_res_flow(&outs, size)?;
    let max = Some(flow_max(&item.flow).max(1e-6));
    io::write_flow_png(&dir.join("flow_pred.png"), &pred, max, true)?;
    io::write_flow_png(&dir.join("flow_gt.png"), &item.flow, max, true)?;
    io::write_flow(&dir.join("flow_pred.gflo"), &pred)?;
    io::write_image(&dir.join("source.png"), &item.source)?;
    io::write_image(&dir.join("target.png"), &item.target)?;
    io::write_image(&dir.join("warped.png"), &warp::warp(&item.source, &pred)?)?;
    Ok(())
}

fn flow_max(f: &FlowField<f32>) -> f64 {
    let t = f.tensor();
    let [n, _, h, w] = f.dims();
    let mut m: f64 = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dx = t.data()[t.idx4(b, 0, y, x)] as f64;
                let dy = t.data()[t.idx4(b, 1, y, x)] as f64;
                m = m.max(dx.hypot(dy));
            }
        }
    }
    m
}

fn eval_item(batch: &Batch, i: usize) -> Result<Batch> {
    Ok(Batch {
        source: batch.source.batch_item(i)?,
        target: batch.target.batch_item(i)?,
        flow: FlowField::new(batch.flow.tensor().batch_item(i)?)?,
        visibility: batch.visibility.batch_item(i)?,
        guidance_s: batch.guidance_s.batch_item(i)?,
        guidance_t: batch.guidance_t.batch_item(i)?,
    })
}

/// Stage-2 metrics on a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderMetrics {
    pub step: usize,
    /// PSNR of the rendered target over visible pixels.
    pub psnr_visible: f64,
    pub psnr_full: f64,
    pub l1: f64,
    /// Mean mask over pixels without a visible source.
    pub mask_occluded: f64,
    pub mask_visible: f64,
}

/// Render a batch without tracking; returns the image and per-block traces
/// as plain tensors `(size, mask, kernels)`.
pub fn render(
    flow: &FlowEstimator<f32>,
    renderer: &Renderer<f32>,
    batch: &Batch,
) -> Result<(Tensor<f32>, Vec<(usize, Tensor<f32>, Option<Tensor<f32>>)>)> {
    let tape = Tape::new();
    let fb = flow.params.bind_frozen(&tape);
    let rb = renderer.params.bind_frozen(&tape);
    let outs = flow.forward(&fb, tape.constant(batch.flow_input()?))?;
    let r = renderer.forward(
        &rb,
        tape.constant(batch.source.clone()),
        tape.constant(batch.guidance_t.clone()),
        &outs,
        &RenderOverrides::default(),
    )?;
    let traces = r
        .blocks
        .iter()
        .map(|b| (b.size, b.mask.value(), b.kernels.map(|k| k.value())))
        .collect();
    Ok((r.image.value(), traces))
}

/// Nearest-neighbour upsampling of `[n, 1, h, w]` to `size × size`.
fn upsample_mask(m: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let [n, _, h, _] = m.dims4("upsample_mask")?;
    let f = size / h;
    Ok(Tensor::from_fn(&[n, 1, size, size], |i| {
        let x = i % size;
        let y = (i / size) % size;
        let b = i / (size * size);
        m.data()[(b * h + y / f) * h + x / f]
    }))
}

pub fn evaluate_render(flow: &FlowEstimator<f32>, renderer: &Renderer<f32>, batch: &Batch) -> Result<RenderMetrics> {
    let (img, traces) = render(flow, renderer, batch)?;
    let size = batch.source.shape()[2];
    let (_, mask, _) = traces
        .iter()
        .max_by_key(|t| t.0)
        .ok_or_else(|| Error::Empty("renderer has no blocks".into()))?;
    let mask = upsample_mask(mask, size)?;
    let (mut occ, mut nocc, mut vis, mut nvis) = (0.0, 0usize, 0.0, 0usize);
    for (m, v) in mask.data().iter().zip(batch.visibility.data()) {
        if *v > 0.5 {
            vis += *m as f64;
            nvis += 1;
        } else {
            occ += *m as f64;
            nocc += 1;
        }
    }
    let l1 = img.zip_map(&batch.target, |a, b| (a - b).abs())?.data().iter().map(|&v| v as f64).sum::<f64>()
        / img.numel() as f64;
    Ok(RenderMetrics {
        step: 0,
        psnr_visible: psnr(&img, &batch.target, Some(&batch.visibility))?,
        psnr_full: psnr(&img, &batch.target, None)?,
        l1,
        mask_occluded: if nocc > 0 { occ / nocc as f64 } else { f64::NAN },
        mask_visible: if nvis > 0 { vis / nvis as f64 } else { f64::NAN },
    })
}

/// PSNR of the source bilinearly warped by the ground-truth flow, visible
/// pixels: the reference a renderer is compared against.
pub fn gt_warp_psnr(batch: &Batch) -> Result<f64> {
    psnr(&warp::warp(&batch.source, &batch.flow)?, &batch.target, Some(&batch.visibility))
}

/// Stage-2 trainer.
pub struct FullTrainer {
    pub cfg: RunConfig,
    pub flow: FlowEstimator<f32>,
    pub renderer: Renderer<f32>,
    pub disc: Discriminator<f32>,
    pyramid: FixedPyramid<f32>,
    pub step: usize,
}

impl FullTrainer {
    /// `flow` is the stage-1 estimator, or `None` to start cold.
    pub fn new(cfg: RunConfig, flow: Option<FlowEstimator<f32>>) -> Result<Self> {
        cfg.validate()?;
        let flow = match flow {
            Some(f) => {
                f.params.check_layout(&FlowEstimator::<f32>::new(cfg.flow_estimator.clone())?.params)?;
                f
            }
            None => FlowEstimator::new(cfg.flow_estimator.clone())?,
        };
        Ok(FullTrainer {
            renderer: Renderer::new(cfg.renderer.clone())?,
            disc: Discriminator::new(cfg.discriminator.clone())?,
            pyramid: FixedPyramid::rgb(cfg.feature_seed),
            flow,
            cfg,
            step: 0,
        })
    }

    pub fn generator_optimizer(&self) -> AdamConfig {
        self.cfg.optimizer
    }

    pub fn discriminator_optimizer(&self) -> AdamConfig {
        AdamConfig {
            lr: self.cfg.optimizer.lr * self.cfg.discriminator_lr_ratio,
            ..self.cfg.optimizer
        }
    }

    pub fn train_step(&mut self) -> Result<LossRow> {
        let cfg = &self.cfg;
        let w = cfg.losses;
        let batch = cfg.batch(self.step)?;

        // generator / flow update
        let tape = Tape::new();
        let fb = self.flow.params.bind(&tape);
        let rb = self.renderer.params.bind(&tape);
        let db = self.disc.params.bind_frozen(&tape);
        let outs = self.flow.forward(&fb, tape.constant(batch.flow_input()?))?;
        let sizes: Vec<usize> = outs.iter().map(|o| o.size).collect();
        let feats = correctness_features(&tape, &self.pyramid, &batch.source, &batch.target, &sizes)?;
        let (lc, lr) = flow_losses(cfg, &feats, &outs)?;
        let guidance = tape.constant(batch.guidance_t.clone());
        let rendered = self
            .renderer
            .forward(&rb, tape.constant(batch.source.clone()), guidance, &outs, &RenderOverrides::default())?;
        let x_hat = rendered.image;
        let x_t = tape.constant(batch.target.clone());
        let l1 = l1_loss(x_t, x_hat)?;
        let perc = perceptual_loss(x_t, x_hat, &self.pyramid, &layer_ids(&cfg.perceptual_layers))?;
        let style = style_loss(x_t, x_hat, &self.pyramid, &layer_ids(&cfg.style_layers))?;
        let (d_fake, _) = self.disc.forward(&db, ops::concat_channels(&[x_hat, guidance])?)?;
        let adv_g = generator_adversarial(d_fake)?;
        let total = crate::render_loss::weighted_total(
            &[
                (LossTerm::Correctness, lc),
                (LossTerm::Regularization, lr),
                (LossTerm::L1, l1),
                (LossTerm::Adversarial, adv_g),
                (LossTerm::Perceptual, perc),
                (LossTerm::Style, style),
            ],
            &w,
        )?;
        let grads = tape.backward(total)?;
        let before = (self.flow.params.clone(), self.renderer.params.clone(), self.disc.params.clone());
        let opt = self.generator_optimizer();
        self.flow.params.adam_step(&fb.grads(&grads), &opt)?;
        self.renderer.params.adam_step(&rb.grads(&grads), &opt)?;

        // discriminator update on the same batch
        let fake = x_hat.value();
        let dtape = Tape::new();
        let db = self.disc.params.bind(&dtape);
        let gd = dtape.constant(batch.guidance_t.clone());
        let real_in = ops::concat_channels(&[dtape.constant(batch.target.clone()), gd])?;
        let fake_in = ops::concat_channels(&[dtape.constant(fake), gd])?;
        let (d_real, u1) = self.disc.forward(&db, real_in)?;
        let (d_fake, _) = self.disc.forward(&db, fake_in)?;
        let (_, d_loss) = adversarial_losses(d_real, d_fake)?;
        let dgrads = dtape.backward(d_loss)?;
        self.disc.params.adam_step(&db.grads(&dgrads), &self.discriminator_optimizer())?;
        self.disc.update_buffers(u1)?;

        if !(self.flow.params.all_finite() && self.renderer.params.all_finite() && self.disc.params.all_finite()) {
            (self.flow.params, self.renderer.params, self.disc.params) = before;
            return Err(Error::NonFinite("parameters after update".into()));
        }
        self.step += 1;
        let v = |x: Var<'_, f32>| x.value().item() as f64;
        Ok(LossRow {
            step: self.step,
            l_c: v(lc),
            l_r: v(lr),
            l_l1: v(l1),
            l_adv_g: v(adv_g),
            l_adv_d: d_loss.value().item() as f64,
            l_perc: v(perc),
            l_style: v(style),
            total: v(total),
        })
    }
}

fn layer_ids(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Learning rates recorded by a stage-2 run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub generator: AdamConfig,
    pub discriminator: AdamConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FullRunSummary {
    pub steps: usize,
    pub reference_psnr: f64,
    pub initial: RenderMetrics,
    pub final_metrics: RenderMetrics,
    pub curve: Vec<RenderMetrics>,
    /// Mean total loss over the last tenth of the steps.
    pub final_loss: f64,
    pub final_l1: f64,
    pub optimizer: OptimizerRecord,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

/// Stage 2: end-to-end training from a stage-1 checkpoint (or cold, with a
/// warning, when `flow_ckpt` is `None` and `skip_stage1` is set).
pub fn train_full(cfg: &RunConfig, flow_ckpt: Option<&Path>) -> Result<FullRunSummary> {
    let start = std::time::Instant::now();
    let flow = match flow_ckpt {
        Some(p) => Some(load_checkpoint(p, cfg)?.flow),
        None if cfg.skip_stage1 => {
            warn!("skipping stage 1: training estimator and renderer jointly from a cold start");
            None
        }
        None => {
            return Err(Error::Config(
                "stage 2 needs a stage-1 checkpoint (set skip_stage1 to train from scratch)".into(),
            ))
        }
    };
    let mut trainer = FullTrainer::new(cfg.clone(), flow)?;
    cfg.record()?;
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("checkpoints");
    let grid_dir = out.join("samples");
    for d in [&ckpt_dir, &grid_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let optimizer = OptimizerRecord {
        generator: trainer.generator_optimizer(),
        discriminator: trainer.discriminator_optimizer(),
    };
    io::write_text(&out.join("optimizer.json"), &serde_json::to_string_pretty(&optimizer)?)?;
    let mut log = LossLog::create(&out.join("loss.csv"))?;
    let eval = cfg.eval_batch()?;
    let reference_psnr = gt_warp_psnr(&eval)?;
    let initial = evaluate_render(&trainer.flow, &trainer.renderer, &eval)?;
    let mut curve = vec![initial];
    let mut tail = Vec::new();
    let tail_from = cfg.steps - cfg.steps / 10;
    while trainer.step < cfg.steps {
        let row = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                let t = &trainer;
                return Err(abort(e, out, |p| save_checkpoint(p, &t.flow, Some(&t.renderer), Some(&t.disc))));
            }
        };
        log.push(&row)?;
        if trainer.step > tail_from {
            tail.push(row);
        }
        let s = trainer.step;
        if s % cfg.eval_every == 0 || s == cfg.steps {
            let m = RenderMetrics { step: s, ..evaluate_render(&trainer.flow, &trainer.renderer, &eval)? };
            info!(
                "stage 2 step {s}: total {:.4} l1 {:.4} psnr {:.2} dB (reference {reference_psnr:.2})",
                row.total, m.l1, m.psnr_visible
            );
            curve.push(m);
        }
        if s % cfg.checkpoint_every == 0 {
            save_checkpoint(
                &ckpt_dir.join(format!("full_{s:06}.gfla")),
                &trainer.flow,
                Some(&trainer.renderer),
                Some(&trainer.disc),
            )?;
            write_sample_grid(&grid_dir.join(format!("step_{s:06}.png")), &trainer.flow, &trainer.renderer, &eval)?;
        }
    }
    let checkpoint = out.join("full.gfla");
    save_checkpoint(&checkpoint, &trainer.flow, Some(&trainer.renderer), Some(&trainer.disc))?;
    write_csv(&out.join("psnr.csv"), &curve)?;
    let mean = |f: fn(&LossRow) -> f64| {
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().map(f).sum::<f64>() / tail.len() as f64
        }
    };
    let summary = FullRunSummary {
        steps: cfg.steps,
        reference_psnr,
        initial,
        final_metrics: *curve.last().unwrap(),
        curve,
        final_loss: mean(|r| r.total),
        final_l1: mean(|r| r.l_l1),
        optimizer,
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    };
    io::write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// One row per evaluation sample, panels: source | target | output | flow | mask.
pub fn write_sample_grid(path: &Path, flow: &FlowEstimator<f32>, renderer: &Renderer<f32>, eval: &Batch) -> Result<()> {
    let rows = eval.len().min(4);
    let size = eval.source.shape()[2];
    let width = 5 * size;
    let mut rgb = vec![0u8; 3 * width * size * rows];
    for r in 0..rows {
        let item = eval_item(eval, r)?;
        let (img, traces) = render(flow, renderer, &item)?;
        let outs = flow.infer(&item.flow_input()?)?;
        let pred = full_res_flow(&outs, size)?;
        let (_, mask, _) = traces.iter().max_by_key(|t| t.0).unwrap();
        let mask = upsample_mask(mask, size)?;
        let (_, _, viz) = io::flow_to_rgb(&pred, Some(flow_max(&item.flow).max(1e-6)), false);
        for y in 0..size {
            for x in 0..size {
                let row = (r * size + y) * width;
                let l = y * size + x;
                for c in 0..3 {
                    let px = |t: &Tensor<f32>| io::quantize(t.data()[c * size * size + l] as f64);
                    rgb[3 * (row + x) + c] = px(&item.source);
                    rgb[3 * (row + size + x) + c] = px(&item.target);
                    rgb[3 * (row + 2 * size + x) + c] = px(&img);
                    rgb[3 * (row + 3 * size + x) + c] = viz[3 * l + c];
                    rgb[3 * (row + 4 * size + x) + c] = (mask.data()[l] * 255.0 + 0.5).floor() as u8;
                }
            }
        }
    }
    io::write_rgb8(path, width, size * rows, &rgb)
}

/// Flow-estimator input for a single stored or generated pair.
pub fn flow_input(source: &Tensor<f32>, guidance_s: &Tensor<f32>, guidance_t: &Tensor<f32>) -> Result<Tensor<f32>> {
    concat_channels(&[source, guidance_s, guidance_t])
}

impl RunConfig {
    /// Default run on a dataset family, with model configs sized to its
    /// guidance channels.
    pub fn for_dataset(dataset: SceneSpec) -> Self {
        let models = ModelConfig::toy(dataset.size, dataset.guidance_channels);
        RunConfig {
            dataset,
            flow_estimator: models.flow_estimator,
            renderer: models.renderer,
            discriminator: models.discriminator,
            ..RunConfig::default()
        }
    }

    /// Stage-2 default: per-part affine scenes.
    pub fn per_part(parts: usize) -> Self {
        Self::for_dataset(SceneSpec {
            deformation: Deformation::per_part_affine(parts),
            ..Default::default()
        })
    }
}
