//! Reconstruction, perceptual, style and adversarial terms, combined with
//! the default weights.

use gfla::flow_loss::FixedPyramid;
use gfla::render_loss::{
    adversarial_losses, generator_adversarial, l1_loss, perceptual_loss, style_loss, weighted_total, LossTerm, LossWeights,
};
use gfla::synth::{gen_scene, SceneSpec};
use gfla::tensor::{Tape, Tensor};
use gfla::warp;

fn main() -> gfla::error::Result<()> {
    let s = gen_scene(3, &SceneSpec::default())?;
    let warped = warp::warp(&s.source, &s.flow)?;
    let pyramid = FixedPyramid::<f32>::rgb(7);
    let layers = ["L1", "L2", "L3"];

    for (name, x_hat) in [("source", &s.source), ("gt warp", &warped), ("target", &s.target)] {
        let tape = Tape::new();
        let (x, y) = (tape.constant(s.target.clone()), tape.constant(x_hat.clone()));
        let l1 = l1_loss(x, y)?;
        let perc = perceptual_loss(x, y, &pyramid, &layers)?;
        let style = style_loss(x, y, &pyramid, &layers[1..])?;
        println!(
            "{name:<8} l1 {:.4}  perceptual {:.4}  style {:.6}",
            l1.value().item(),
            perc.value().item(),
            style.value().item()
        );
    }

    // logits of an undecided discriminator
    let tape = Tape::new();
    let real = tape.leaf(Tensor::<f32>::zeros(&[1, 1, 4, 4]));
    let fake = tape.leaf(Tensor::<f32>::zeros(&[1, 1, 4, 4]));
    let (_, d_loss) = adversarial_losses(real, fake)?;
    let g_loss = generator_adversarial(fake)?;
    println!("adversarial at zero logits: D {:.4}, G {:.4}", d_loss.value().item(), g_loss.value().item());

    let total = weighted_total(&[(LossTerm::L1, g_loss), (LossTerm::Adversarial, g_loss)], &LossWeights::default())?;
    println!("λ_l1·G + λ_a·G = {:.4}", total.value().item());
    Ok(())
}
