//! Sampling-correctness and affine-regularization losses for the ground
//! truth, the zero flow and a noisy ground truth.

use gfla::flow_loss::{affine_regularization_loss, sampling_correctness_loss, FeatureProvider, FixedPyramid};
use gfla::synth::{gen_scene, SceneSpec};
use gfla::tensor::{Tape, Tensor};
use gfla::warp::FlowField;
use rand::{Rng, SeedableRng};

fn main() -> gfla::error::Result<()> {
    let s = gen_scene(7, &SceneSpec::default())?;
    let [_, _, h, w] = s.source.dims4("example")?;
    let pyramid = FixedPyramid::<f32>::rgb(7);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut noisy = s.flow.tensor().clone();
    noisy.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0));
    let candidates = [
        ("ground truth", s.flow.tensor().clone()),
        ("zero", FlowField::<f32>::zeros(1, h, w).into_tensor()),
        ("noisy truth", noisy),
    ];

    println!("{:<14} {:>10} {:>12}", "flow", "L_c(L2)", "L_r");
    for (name, flow) in candidates {
        let tape = Tape::new();
        let fs = pyramid.features(tape.constant(s.source.clone()))?;
        let ft = pyramid.features(tape.constant(s.target.clone()))?;
        let (vs, vt) = (fs["L2"], ft["L2"]);
        let size = vs.shape()[2];
        let small = FlowField::new(flow.clone())?.resize(size, size)?.into_tensor();
        let (lc, _) = sampling_correctness_loss(vs, vt, tape.constant(small), &Default::default())?;
        let (lr, _) = affine_regularization_loss(tape.constant(flow), 3, 1)?;
        println!("{:<14} {:>10.4} {:>12.5}", name, lc.value().item(), lr.value().item());
    }

    let zero = Tensor::<f32>::zeros(&[1, 2, h, w]);
    let tape = Tape::new();
    println!("L_r(zero) = {}", affine_regularization_loss(tape.constant(zero), 3, 1)?.0.value().item());
    Ok(())
}
