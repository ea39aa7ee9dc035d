//! Finite-difference audit, one test per operator.

use gfla::audit::{run_check, select, AUDIT_SEEDS};
use gfla::tensor::GradCheckConfig;

fn audit(name: &str) {
    let checks = select(name).unwrap();
    assert_eq!(checks.len(), 1);
    let s = run_check(&checks[0], AUDIT_SEEDS, &GradCheckConfig::default()).unwrap();
    assert!(s.passed, "{name}: max rel err {:e} at {:?}", s.max_rel_err, s.worst);
    // kink exclusion must leave most elements checked
    assert!(s.checked >= 4 * s.kinks, "{name}: {} checked, {} kinks", s.checked, s.kinks);
}

macro_rules! audits {
    ($($test:ident => $name:literal,)*) => {
        $(
            #[test]
            fn $test() {
                audit($name);
            }
        )*

        #[test]
        fn registry_is_covered() {
            let mut all: Vec<_> = select("*").unwrap().into_iter().map(|c| c.name).collect();
            let mut listed = vec![$($name),*];
            all.sort();
            listed.sort();
            assert_eq!(all, listed);
        }
    };
}

audits! {
    conv2d => "conv2d",
    instance_norm => "instance_norm",
    leaky_relu => "leaky_relu",
    softmax => "softmax",
    bilinear_sample_feature => "bilinear_sample.feature",
    bilinear_sample_flow => "bilinear_sample.flow",
    extract_flowed_patches => "extract_flowed_patches",
    extract_target_patches => "extract_target_patches",
    local_attention_warp => "local_attention_warp",
    occlusion_fuse => "occlusion_fuse",
    kernel_predictor => "kernel_predictor",
    sampling_correctness_features => "sampling_correctness.features",
    sampling_correctness_flow => "sampling_correctness.flow",
    affine_regularization => "affine_regularization",
    l1_loss => "l1_loss",
    adversarial_discriminator => "adversarial.discriminator",
    adversarial_generator => "adversarial.generator",
    perceptual_loss => "perceptual_loss",
    style_loss => "style_loss",
    gram_matrix => "gram_matrix",
    total_loss => "total_loss",
    elementwise => "elementwise",
    shape_ops => "shape_ops",
}
