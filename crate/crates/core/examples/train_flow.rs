//! Stage 1: train the flow estimator on global-affine scenes.
//!
//! Usage: `cargo run --release --example train_flow [steps] [out_dir]`

use gfla::synth::Deformation;
use gfla::train::{train_flow, RunConfig};

fn main() -> gfla::error::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GFLA_LOG", "info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::default();
    cfg.dataset.deformation = Deformation::global_affine();
    cfg.steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    cfg.out_dir = args.next().unwrap_or_else(|| "train_flow_out".into()).into();

    let s = train_flow(&cfg)?;
    println!("epe {:.3} -> {:.3} in {:.0} s", s.initial.epe, s.final_metrics.epe, s.seconds);
    println!("roughness {:.4}, warped psnr {:.2} dB", s.final_metrics.roughness, s.final_metrics.warped_psnr);
    println!("checkpoint {}", s.checkpoint.display());
    Ok(())
}
