//! Bilinear warping and local attention sampling on a synthetic pair.
//!
//! Usage: `cargo run --example warping [out_dir]`

use std::path::PathBuf;

use gfla::io;
use gfla::synth::{gen_scene, psnr, SceneSpec};
use gfla::tensor::{Tape, Tensor};
use gfla::warp::{self, FlowField};

fn main() -> gfla::error::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "warping_out".into()));
    std::fs::create_dir_all(&out)?;

    let s = gen_scene(42, &SceneSpec::default())?;
    let [_, _, h, w] = s.source.dims4("example")?;

    let identity = warp::warp(&s.source, &FlowField::zeros(1, h, w))?;
    assert_eq!(identity.data(), s.source.data());

    let warped = warp::warp(&s.source, &s.flow)?;
    println!("source vs target        {:6.2} dB", psnr(&s.source, &s.target, Some(&s.visibility))?);
    println!("gt-flow warp vs target  {:6.2} dB", psnr(&warped, &s.target, Some(&s.visibility))?);

    // uniform 3×3 attention: a box blur around each flowed position
    let tape = Tape::new();
    let patches = warp::extract_flowed_patches(tape.constant(s.source.clone()), tape.constant(s.flow.tensor().clone()), 3)?;
    let kernels = tape.constant(Tensor::full(&[1, 9, h, w], 1.0 / 9.0));
    let attended = warp::local_attention_warp(patches, kernels)?;
    println!("uniform attention       {:6.2} dB", psnr(&attended.value(), &s.target, Some(&s.visibility))?);

    // occluded pixels fall back to a flat gray guess
    let fused = warp::occlusion_fuse(
        tape.constant(Tensor::zeros(&[1, 3, h, w])),
        tape.constant(warped.clone()),
        tape.constant(s.visibility.clone()),
    )?
    .value();

    io::write_image(&out.join("source.png"), &s.source)?;
    io::write_image(&out.join("target.png"), &s.target)?;
    io::write_image(&out.join("warped.png"), &warped)?;
    io::write_image(&out.join("fused.png"), &fused)?;
    io::write_flow_png(&out.join("flow.png"), &s.flow, None, true)?;
    io::write_flow(&out.join("flow.gflo"), &s.flow)?;
    println!("wrote {}", out.display());
    Ok(())
}
