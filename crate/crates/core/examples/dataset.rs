//! Write a small synthetic dataset for each deformation family.
//!
//! Usage: `cargo run --example dataset [out_dir] [count]`

use std::path::PathBuf;

use gfla::io;
use gfla::synth::{gen_scene, sample_seed, Deformation, SceneSpec};

fn main() -> gfla::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "dataset_out".into()));
    let count: usize = args.next().and_then(|c| c.parse().ok()).unwrap_or(4);

    let families = [
        ("identity", Deformation::identity()),
        ("global-affine", Deformation::global_affine()),
        ("per-part-affine", Deformation::per_part_affine(2)),
    ];
    for (label, deformation) in families {
        let spec = SceneSpec { deformation, ..Default::default() };
        let dir = root.join(label);
        let mut visible = 0.0;
        for i in 0..count {
            let s = gen_scene(sample_seed(11, i as u64), &spec)?;
            visible += s.visibility.mean() as f64;
            let d = io::write_sample(&dir, i, &s)?;
            io::write_flow_png(&d.join("flow_viz.png"), &s.flow, None, true)?;
        }
        println!("{label:<16} {count} samples, {:.1}% visible -> {}", 100.0 * visible / count as f64, dir.display());
    }
    Ok(())
}
