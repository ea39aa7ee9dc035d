//! Build the flow estimator, renderer and discriminator for 64×64 inputs
//! and run one forward pass through each.

use gfla::models::{Discriminator, FlowEstimator, ModelConfig, RenderOverrides, Renderer};
use gfla::synth::{concat_channels, gen_scene, SceneSpec};
use gfla::tensor::Tape;

fn main() -> gfla::error::Result<()> {
    let cfg = ModelConfig::toy(64, 3);
    cfg.validate()?;
    let flow = FlowEstimator::<f32>::new(cfg.flow_estimator.clone())?;
    let renderer = Renderer::<f32>::new(cfg.renderer.clone())?;
    let disc = Discriminator::<f32>::new(cfg.discriminator.clone())?;
    println!("flow estimator  {:>8} parameters", flow.params.num_trainable());
    println!("renderer        {:>8} parameters", renderer.params.num_trainable());
    println!("discriminator   {:>8} parameters", disc.params.num_trainable());

    let s = gen_scene(0, &SceneSpec::default())?;
    let input = concat_channels(&[&s.source, &s.guidance_s, &s.guidance_t])?;

    let tape = Tape::new();
    let (fb, rb, db) = (flow.params.bind_frozen(&tape), renderer.params.bind_frozen(&tape), disc.params.bind_frozen(&tape));
    let outs = flow.forward(&fb, tape.constant(input))?;
    for o in &outs {
        println!("flow output {n}×{n}: flow {:?}, mask {:?}", o.flow.shape(), o.mask.shape(), n = o.size);
    }
    let guidance = tape.constant(s.guidance_t.clone());
    let r = renderer.forward(&rb, tape.constant(s.source.clone()), guidance, &outs, &RenderOverrides::default())?;
    println!("rendered image {:?}", r.image.shape());
    for b in &r.blocks {
        println!("  attention block {n}×{n}: kernels {:?}", b.kernels.map(|k| k.shape().to_vec()), n = b.size);
    }
    let (logits, _) = disc.forward(&db, gfla::tensor::ops::concat_channels(&[r.image, guidance])?)?;
    println!("discriminator logits {:?}", logits.shape());
    Ok(())
}
